//! Herd records, feature engineering, horizon labelling and synthetic herds.

mod features;
mod io;
mod labels;
mod synth;

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{engineer_features, herd_vectors};
pub use io::{load_csv, save_csv, CsvError};
pub use labels::{label_for, label_instances, Label, LabeledInstance};
pub use synth::{generate_herd, SynthConfig};

/// Days after an infection episode ends during which instances are excluded
/// from labelled sets.
pub const POST_INFECTION_EXCLUSION_DAYS: i64 = 7;
/// Length of the history window used by Skew30 features and imputation.
pub const HISTORY_WINDOW_DAYS: i64 = 30;
/// Longest prediction horizon.
pub const MAX_HORIZON_DAYS: u8 = 7;
/// SCC level (x1000 cells/ml) above which two consecutive tests mark an onset.
pub const SCC_INFECTION_THRESHOLD: f64 = 200.0;

/// One milking day for one cow. Composition and SCC are sparse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilkRecording {
    pub cow_id: String,
    pub date: NaiveDate,
    pub yield_am: f64,
    pub yield_pm: f64,
    pub fat_pct: Option<f64>,
    pub protein_pct: Option<f64>,
    pub lactose_pct: Option<f64>,
    pub scc: Option<f64>,
    pub urea: Option<f64>,
}

impl MilkRecording {
    pub fn daily_yield(&self) -> f64 {
        self.yield_am + self.yield_pm
    }

    /// Value of a milk series by feature name (`yield` is the daily total).
    pub fn series_value(&self, series: &str) -> Option<f64> {
        match series {
            "yield" => Some(self.daily_yield()),
            "fat_pct" => self.fat_pct,
            "protein_pct" => self.protein_pct,
            "lactose_pct" => self.lactose_pct,
            "scc" => self.scc,
            "urea" => self.urea,
            _ => None,
        }
    }
}

/// A sub-clinical infection episode, `onset..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InfectionEvent {
    pub onset: NaiveDate,
    pub end: NaiveDate,
}

impl InfectionEvent {
    pub fn is_active(&self, day: NaiveDate) -> bool {
        day >= self.onset && day <= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CowRecord {
    pub cow_id: String,
    pub farm_id: String,
    pub parity: u32,
    pub calving_date: NaiveDate,
    pub genetic_merit: f64,
    pub weight_series: Vec<(NaiveDate, f64)>,
    pub bcs_series: Vec<(NaiveDate, f64)>,
    /// Sorted by onset.
    pub infection_events: Vec<InfectionEvent>,
}

impl CowRecord {
    pub fn days_in_milk(&self, day: NaiveDate) -> i64 {
        (day - self.calving_date).num_days()
    }

    /// True while infected or within the post-infection exclusion window.
    pub fn in_exclusion_window(&self, day: NaiveDate) -> bool {
        self.infection_events.iter().any(|e| {
            e.is_active(day)
                || (day > e.end && (day - e.end).num_days() <= POST_INFECTION_EXCLUSION_DAYS)
        })
    }
}

/// Cows plus their milk recordings.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Herd {
    pub cows: Vec<CowRecord>,
    pub milk: Vec<MilkRecording>,
}

impl Herd {
    pub fn cow(&self, cow_id: &str) -> Option<&CowRecord> {
        self.cows.iter().find(|c| c.cow_id == cow_id)
    }

    /// Milk recordings of one cow, sorted by date.
    pub fn milk_for(&self, cow_id: &str) -> Vec<MilkRecording> {
        let mut rows: Vec<MilkRecording> =
            self.milk.iter().filter(|m| m.cow_id == cow_id).cloned().collect();
        rows.sort_by_key(|m| m.date);
        rows
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.milk.iter().map(|m| m.date).max()
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.milk.iter().map(|m| m.date).min()
    }
}

/// One cow-day instance in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub cow_id: String,
    pub as_of: NaiveDate,
    pub values: Vec<f64>,
    /// Number of values clamped into catalog bounds during engineering.
    #[serde(default)]
    pub clamped: usize,
}

impl FeatureVector {
    pub fn new(cow_id: impl Into<String>, as_of: NaiveDate, values: Vec<f64>) -> Self {
        FeatureVector { cow_id: cow_id.into(), as_of, values, clamped: 0 }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        FeatureVector { cow_id: self.cow_id.clone(), as_of: self.as_of, values, clamped: 0 }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("cow {cow_id}: no milk recording within 30 days of {as_of}")]
    NoDataInWindow { cow_id: String, as_of: NaiveDate },
    #[error("cow {cow_id}: {as_of} is before calving date {calving}")]
    BeforeCalving { cow_id: String, as_of: NaiveDate, calving: NaiveDate },
    #[error("feature `{0}` cannot be engineered from herd records")]
    Unsupported(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("horizon must be between 1 and 7 days, got {0}")]
    InvalidHorizon(u8),
    #[error("no cows or milk recordings supplied")]
    EmptyInput,
    #[error("invalid synthetic herd config: {0}")]
    InvalidConfig(String),
}

/// Stage of lactation used by the infection counters: 100-day buckets, the
/// last one open-ended.
pub fn lactation_stage(days_in_milk: i64) -> u8 {
    (days_in_milk.max(0) / 100).min(3) as u8
}

#[derive(Debug, Clone)]
struct FarmOnset {
    onset: NaiveDate,
    stage: u8,
}

/// Herd-wide context needed by history-derived features and imputation.
#[derive(Debug, Clone, Default)]
pub struct HerdContext {
    farm_onsets: BTreeMap<String, Vec<FarmOnset>>,
    /// (farm, calving year) -> first onset date of each cow in that cohort,
    /// `None` for cows never infected.
    cohorts: BTreeMap<(String, i32), Vec<Option<NaiveDate>>>,
    population_medians: BTreeMap<String, f64>,
}

impl HerdContext {
    pub fn from_herd(herd: &Herd) -> Self {
        let mut farm_onsets: BTreeMap<String, Vec<FarmOnset>> = BTreeMap::new();
        let mut cohorts: BTreeMap<(String, i32), Vec<Option<NaiveDate>>> = BTreeMap::new();
        for cow in &herd.cows {
            let list = farm_onsets.entry(cow.farm_id.clone()).or_default();
            for e in &cow.infection_events {
                list.push(FarmOnset { onset: e.onset, stage: lactation_stage(cow.days_in_milk(e.onset)) });
            }
            cohorts
                .entry((cow.farm_id.clone(), cow.calving_date.year()))
                .or_default()
                .push(cow.infection_events.first().map(|e| e.onset));
        }
        for list in farm_onsets.values_mut() {
            list.sort_by_key(|o| o.onset);
        }

        let mut population_medians = BTreeMap::new();
        for series in ["yield", "fat_pct", "protein_pct", "lactose_pct", "scc", "urea"] {
            let values: Vec<f64> = herd.milk.iter().filter_map(|m| m.series_value(series)).collect();
            if let Some(m) = crate::stats::median(&values) {
                population_medians.insert(series.to_string(), m);
            }
        }
        let weights: Vec<f64> = herd.cows.iter().flat_map(|c| c.weight_series.iter().map(|p| p.1)).collect();
        if let Some(m) = crate::stats::median(&weights) {
            population_medians.insert("weight".into(), m);
        }
        let bcs: Vec<f64> = herd.cows.iter().flat_map(|c| c.bcs_series.iter().map(|p| p.1)).collect();
        if let Some(m) = crate::stats::median(&bcs) {
            population_medians.insert("bcs".into(), m);
        }

        HerdContext { farm_onsets, cohorts, population_medians }
    }

    pub fn population_median(&self, series: &str) -> Option<f64> {
        self.population_medians.get(series).copied()
    }

    fn farm_stage_infections(&self, farm: &str, stage: u8, before: NaiveDate) -> usize {
        self.farm_onsets
            .get(farm)
            .map(|l| l.iter().filter(|o| o.onset < before && o.stage == stage).count())
            .unwrap_or(0)
    }

    fn cohort_infected_proportion(&self, farm: &str, calving_year: i32, before: NaiveDate) -> f64 {
        match self.cohorts.get(&(farm.to_string(), calving_year)) {
            Some(cows) if !cows.is_empty() => {
                let infected = cows.iter().filter(|o| matches!(o, Some(d) if *d < before)).count();
                infected as f64 / cows.len() as f64
            }
            _ => 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages() {
        assert_eq!(lactation_stage(-3), 0);
        assert_eq!(lactation_stage(99), 0);
        assert_eq!(lactation_stage(100), 1);
        assert_eq!(lactation_stage(299), 2);
        assert_eq!(lactation_stage(700), 3);
    }
}
