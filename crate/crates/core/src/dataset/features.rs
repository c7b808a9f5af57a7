use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;

use super::{
    lactation_stage, CowRecord, FeatureError, FeatureVector, Herd, HerdContext, MilkRecording,
    HISTORY_WINDOW_DAYS,
};
use crate::featcat::{FeatureCatalog, FeatureKind};
use crate::stats;

/// Builds the feature vector of `cow` as of `as_of`.
///
/// `milk` holds this cow's recordings; they are sorted internally if needed.
/// Current values are the latest observation on or before `as_of`; a value
/// older than the 30-day window is replaced by the cow's median up to
/// `as_of`, then by the population median. Skew30 values use the
/// observations in `[as_of - 29, as_of]`.
pub fn engineer_features(
    cow: &CowRecord,
    milk: &[MilkRecording],
    as_of: NaiveDate,
    catalog: &FeatureCatalog,
    ctx: &HerdContext,
) -> Result<FeatureVector, FeatureError> {
    if as_of < cow.calving_date {
        return Err(FeatureError::BeforeCalving {
            cow_id: cow.cow_id.clone(),
            as_of,
            calving: cow.calving_date,
        });
    }
    let sorted;
    let milk = if milk.windows(2).all(|w| w[0].date <= w[1].date) {
        milk
    } else {
        let mut v = milk.to_vec();
        v.sort_by_key(|m| m.date);
        sorted = v;
        &sorted[..]
    };

    let window_start = as_of - Duration::days(HISTORY_WINDOW_DAYS - 1);
    let upto = milk.partition_point(|m| m.date <= as_of);
    let history = &milk[..upto];
    let from = history.partition_point(|m| m.date < window_start);
    let window = &history[from..];
    if window.is_empty() {
        return Err(FeatureError::NoDataInWindow { cow_id: cow.cow_id.clone(), as_of });
    }

    let dim = cow.days_in_milk(as_of);
    let stage = lactation_stage(dim);
    let mut values = Vec::with_capacity(catalog.len());
    let mut clamped = 0;
    for spec in catalog.specs() {
        let raw = match spec.kind {
            FeatureKind::Current => match spec.name.as_str() {
                "weight" => current_from_series(&cow.weight_series, as_of, window_start, ctx, "weight"),
                "bcs" => current_from_series(&cow.bcs_series, as_of, window_start, ctx, "bcs"),
                name => current_milk(history, name, window_start, ctx)
                    .ok_or_else(|| FeatureError::Unsupported(spec.name.clone()))?,
            },
            FeatureKind::Skew30 => {
                let series = spec
                    .name
                    .strip_suffix("_skew30")
                    .ok_or_else(|| FeatureError::Unsupported(spec.name.clone()))?;
                if !is_milk_series(series) {
                    return Err(FeatureError::Unsupported(spec.name.clone()));
                }
                let obs: Vec<f64> = window.iter().filter_map(|m| m.series_value(series)).collect();
                stats::skewness(&obs)
            }
            FeatureKind::Static => match spec.name.as_str() {
                "genetic_merit" => cow.genetic_merit,
                "parity" => cow.parity as f64,
                "days_since_calving" => dim as f64,
                "calendar_month" => as_of.month() as f64,
                _ => return Err(FeatureError::Unsupported(spec.name.clone())),
            },
            FeatureKind::HistoryDerived => {
                let prior = cow.infection_events.iter().filter(|e| e.onset < as_of);
                match spec.name.as_str() {
                    "infections_cow" => prior.count() as f64,
                    "infections_stage_cow" => prior
                        .filter(|e| lactation_stage(cow.days_in_milk(e.onset)) == stage)
                        .count() as f64,
                    "infections_stage_farm" => ctx.farm_stage_infections(&cow.farm_id, stage, as_of) as f64,
                    "farm_infected_proportion" => {
                        ctx.cohort_infected_proportion(&cow.farm_id, cow.calving_date.year(), as_of)
                    }
                    _ => return Err(FeatureError::Unsupported(spec.name.clone())),
                }
            }
        };
        let value = spec.clamp(raw);
        if value != raw {
            clamped += 1;
        }
        values.push(value);
    }

    Ok(FeatureVector { cow_id: cow.cow_id.clone(), as_of, values, clamped })
}

fn is_milk_series(name: &str) -> bool {
    matches!(name, "yield" | "fat_pct" | "protein_pct" | "lactose_pct" | "scc" | "urea")
}

fn current_milk(history: &[MilkRecording], series: &str, window_start: NaiveDate, ctx: &HerdContext) -> Option<f64> {
    if !is_milk_series(series) {
        return None;
    }
    if let Some(v) = history
        .iter()
        .rev()
        .take_while(|m| m.date >= window_start)
        .find_map(|m| m.series_value(series))
    {
        return Some(v);
    }
    let own: Vec<f64> = history.iter().filter_map(|m| m.series_value(series)).collect();
    stats::median(&own).or_else(|| ctx.population_median(series)).or(Some(0.0))
}

fn current_from_series(
    series: &[(NaiveDate, f64)],
    as_of: NaiveDate,
    window_start: NaiveDate,
    ctx: &HerdContext,
    name: &str,
) -> f64 {
    let upto: Vec<&(NaiveDate, f64)> = series.iter().filter(|(d, _)| *d <= as_of).collect();
    if let Some((_, v)) = upto.iter().max_by_key(|(d, _)| *d).filter(|(d, _)| *d >= window_start) {
        return *v;
    }
    let own: Vec<f64> = upto.iter().map(|(_, v)| *v).collect();
    stats::median(&own).or_else(|| ctx.population_median(name)).unwrap_or(0.0)
}

/// Feature vectors for every cow-day with a milk recording in the last 30
/// days, from calving (or first recording) to the last recording. Ordered
/// by cow then date.
pub fn herd_vectors(herd: &Herd, catalog: &FeatureCatalog) -> Vec<FeatureVector> {
    let ctx = HerdContext::from_herd(herd);
    let by_cow = group_milk(herd);
    herd.cows
        .par_iter()
        .zip(by_cow.par_iter())
        .map(|(cow, milk)| cow_vectors(cow, milk, catalog, &ctx))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

pub(super) fn group_milk(herd: &Herd) -> Vec<Vec<MilkRecording>> {
    let index: std::collections::HashMap<&str, usize> =
        herd.cows.iter().enumerate().map(|(i, c)| (c.cow_id.as_str(), i)).collect();
    let mut groups = vec![Vec::new(); herd.cows.len()];
    for m in &herd.milk {
        if let Some(&i) = index.get(m.cow_id.as_str()) {
            groups[i].push(m.clone());
        }
    }
    for g in &mut groups {
        g.sort_by_key(|m| m.date);
    }
    groups
}

pub(super) fn cow_vectors(
    cow: &CowRecord,
    milk: &[MilkRecording],
    catalog: &FeatureCatalog,
    ctx: &HerdContext,
) -> Vec<FeatureVector> {
    let (Some(first), Some(last)) = (milk.first(), milk.last()) else {
        return Vec::new();
    };
    let start = first.date.max(cow.calving_date);
    start
        .iter_days()
        .take_while(|d| *d <= last.date)
        .filter_map(|d| engineer_features(cow, milk, d, catalog, ctx).ok())
        .collect()
}
