//! Plain-language sentences for counterfactual results.
//!
//! Two phrasings: delta style ("had an increase of 50 units with respect to
//! Somatic cell count") for search results, and absolute style ("had a
//! somatic cell count of 150") for stating target values directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfx::{CfxStatus, CounterfactualDocument, DeltaEntry};
use crate::featcat::{default_catalog, FeatureCatalog, FeatureKind};

const ENDING: &str = "she would be likely to succumb to mastitis.";

#[derive(Debug, Error, PartialEq)]
pub enum NarrateError {
    #[error("no counterfactual was found, so there is nothing to narrate")]
    NotFound,
    #[error("no feature changes to narrate")]
    Empty,
    #[error("feature `{0}` has no display name")]
    MissingDisplayName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumberStyle {
    /// Halves and whole numbers up to twenty as words, anything else as digits.
    Words,
    Digits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationStyle {
    pub number_style: NumberStyle,
    /// Feature identifier to the name used in sentences.
    pub display_names: BTreeMap<String, String>,
    pub increase: String,
    pub decrease: String,
    pub unit_phrase: String,
}

impl NarrationStyle {
    /// Display names for every feature in `catalog`; built-in names where
    /// known, otherwise derived from the identifier.
    pub fn for_catalog(catalog: &FeatureCatalog, number_style: NumberStyle) -> Self {
        let display_names = catalog.names().map(|n| (n.to_string(), display_name(n, catalog))).collect();
        NarrationStyle {
            number_style,
            display_names,
            increase: "an increase".into(),
            decrease: "a decrease".into(),
            unit_phrase: "units".into(),
        }
    }

    pub fn validate(&self, catalog: &FeatureCatalog) -> Result<(), NarrateError> {
        match catalog.names().find(|n| !self.display_names.contains_key(*n)) {
            Some(n) => Err(NarrateError::MissingDisplayName(n.to_string())),
            None => Ok(()),
        }
    }

    fn name(&self, feature: &str) -> Result<&str, NarrateError> {
        self.display_names
            .get(feature)
            .map(String::as_str)
            .ok_or_else(|| NarrateError::MissingDisplayName(feature.to_string()))
    }
}

fn known_name(feature: &str) -> Option<&'static str> {
    Some(match feature {
        "scc" => "Somatic cell count",
        "yield" => "Yield",
        "fat_pct" => "Fat percentage",
        "protein_pct" => "Protein percentage",
        "lactose_pct" => "Lactose percentage",
        "urea" => "Urea",
        "bcs" => "Body condition score",
        "weight" => "Weight",
        "genetic_merit" => "Genetic merit",
        "parity" => "Parity",
        "days_since_calving" => "Days since calving",
        "calendar_month" => "Calendar month",
        "infections_stage_farm" => "Infections at this lactation stage on the farm",
        "infections_stage_cow" => "Infections at this lactation stage for the cow",
        "infections_cow" => "Infections for the cow",
        "farm_infected_proportion" => "Proportion infected on the farm",
        _ => return None,
    })
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn display_name(feature: &str, catalog: &FeatureCatalog) -> String {
    if let Some(name) = known_name(feature) {
        return name.to_string();
    }
    if catalog.spec(feature).is_some_and(|s| s.kind == FeatureKind::Skew30) {
        if let Some(base) = feature.strip_suffix("_skew30") {
            let base = known_name(base).map(str::to_lowercase).unwrap_or_else(|| base.replace('_', " "));
            return format!("Skewness of {base} over 30 days");
        }
    }
    capitalize(&feature.replace('_', " "))
}

const SMALL_NUMBERS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];

/// Formats a non-negative amount. Digits use the shortest representation
/// that reads back as the same double, so no rounding is introduced.
pub fn format_amount(amount: f64, style: NumberStyle) -> String {
    if style == NumberStyle::Words && (0.0..=20.0).contains(&amount) {
        let whole = amount.trunc();
        let frac = amount - whole;
        let w = SMALL_NUMBERS[whole as usize];
        if frac == 0.0 {
            return w.to_string();
        }
        if frac == 0.5 {
            return if whole == 0.0 { "one half".to_string() } else { format!("{w} and a half") };
        }
    }
    format!("{amount}")
}

fn join_clauses(clauses: &[String]) -> String {
    match clauses {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Delta-style sentence for a found counterfactual. Clauses are ordered by
/// descending contribution to the weighted distance, ties in catalog order.
pub fn render(cow_id: &str, doc: &CounterfactualDocument, style: &NarrationStyle) -> Result<String, NarrateError> {
    if doc.status == CfxStatus::NotFound {
        return Err(NarrateError::NotFound);
    }
    if doc.deltas.is_empty() {
        return Err(NarrateError::Empty);
    }
    let mut ordered: Vec<_> = doc.deltas.iter().enumerate().collect();
    ordered.sort_by(|(ia, a), (ib, b)| b.contribution.total_cmp(&a.contribution).then(ia.cmp(ib)));
    let clauses = ordered
        .into_iter()
        .map(|(_, d)| {
            let direction = if d.delta >= 0.0 { &style.increase } else { &style.decrease };
            Ok(format!(
                "{direction} of {} {} with respect to {}",
                format_amount(d.delta.abs(), style.number_style),
                style.unit_phrase,
                style.name(&d.feature)?
            ))
        })
        .collect::<Result<Vec<_>, NarrateError>>()?;
    Ok(format!("If cow #{cow_id} had {} {ENDING}", join_clauses(&clauses)))
}

fn article(phrase: &str) -> &'static str {
    // "a urea", "a unit": a leading u that sounds like "you" takes "a"
    let you_sound = ["ur", "uni", "us", "ut"].iter().any(|p| phrase.starts_with(p));
    match phrase.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') if !you_sound => "an",
        _ => "a",
    }
}

/// Absolute-style sentence stating target values, e.g. "had a somatic cell
/// count of 150". Percentage features get a `%` suffix.
pub fn render_absolute(
    cow_id: &str,
    values: &[(&str, f64)],
    catalog: &FeatureCatalog,
    style: &NarrationStyle,
) -> Result<String, NarrateError> {
    if values.is_empty() {
        return Err(NarrateError::Empty);
    }
    let clauses = values
        .iter()
        .map(|(feature, value)| {
            let phrase = style.name(feature)?.to_lowercase();
            let percent = catalog.spec(feature).is_some_and(|s| s.unit.starts_with("percentage"));
            let suffix = if percent { "%" } else { "" };
            Ok(format!("{} {phrase} of {value}{suffix}", article(&phrase)))
        })
        .collect::<Result<Vec<_>, NarrateError>>()?;
    Ok(format!("If cow #{cow_id} had {} {ENDING}", join_clauses(&clauses)))
}

/// The absolute-style example for cow 42 with SCC 150 and protein 5%.
pub fn render_intro_example() -> String {
    let catalog = default_catalog();
    let style = NarrationStyle::for_catalog(&catalog, NumberStyle::Digits);
    render_absolute("42", &[("scc", 150.0), ("protein_pct", 5.0)], &catalog, &style)
        .expect("fixture features have display names")
}

/// The delta-style example for cow 42: one and a half more units of yield.
pub fn render_worked_example() -> String {
    let catalog = default_catalog();
    let spec = catalog.spec("yield").expect("yield in the default catalog");
    let doc = CounterfactualDocument {
        cow_id: "42".into(),
        as_of: chrono::NaiveDate::MIN,
        status: CfxStatus::Found,
        original: vec![],
        counterfactual: vec![],
        deltas: vec![DeltaEntry { feature: spec.name.clone(), delta: 1.5, unit: spec.unit.clone(), contribution: 1.0 }],
        score_original: 0.0,
        score_cf: 1.0,
        distance: 1.0,
        subsets_searched: 1,
    };
    let style = NarrationStyle::for_catalog(&catalog, NumberStyle::Words);
    render("42", &doc, &style).expect("fixture features have display names")
}
