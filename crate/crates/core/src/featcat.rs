//! Feature schema and per-feature counterfactual policy.
//!
//! The catalog fixes the canonical vector layout used by every other module:
//! feature vectors, model splits, distance weights and deltas are all indexed
//! by catalog position.
//!
//! A catalog can be persisted as a policy file: UTF-8, one row per feature,
//! comma separated, `#` starts a comment. Columns:
//!
//! ```text
//! name,unit,kind,actionable,actionable_time_days,confidence,min_change,lower,upper,immutable[,excluded]
//! ```
//!
//! Optional cells (`actionable_time_days`, `min_change`, `excluded`) may be
//! empty. A `# version: <text>` comment line sets the catalog version.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version string of [`default_catalog`]. Models record it so that a model
/// trained against one layout is never scored against another.
pub const DEFAULT_CATALOG_VERSION: &str = "herd-features-v1";

const POLICY_HEADER: &str =
    "name,unit,kind,actionable,actionable_time_days,confidence,min_change,lower,upper,immutable,excluded";

/// How much a feature helps a farmer trust an explanation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Confidence {
    Low,
    Medium,
    High,
    VeryHigh,
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Confidence::Low => "low",
            Confidence::Medium => "medium",
            Confidence::High => "high",
            Confidence::VeryHigh => "very_high",
        };
        f.write_str(s)
    }
}

impl FromStr for Confidence {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "low" => Ok(Confidence::Low),
            "medium" => Ok(Confidence::Medium),
            "high" => Ok(Confidence::High),
            "very_high" | "veryhigh" => Ok(Confidence::VeryHigh),
            other => Err(format!("unknown confidence level `{other}`")),
        }
    }
}

/// Where a feature value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Most recent observed value of a measured series.
    Current,
    /// Sample skewness of a measured series over the last 30 days.
    Skew30,
    /// Property of the cow or the calendar.
    Static,
    /// Counter derived from infection history.
    HistoryDerived,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::Current => "current",
            FeatureKind::Skew30 => "skew30",
            FeatureKind::Static => "static",
            FeatureKind::HistoryDerived => "history_derived",
        };
        f.write_str(s)
    }
}

impl FromStr for FeatureKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "current" => Ok(FeatureKind::Current),
            "skew30" => Ok(FeatureKind::Skew30),
            "static" => Ok(FeatureKind::Static),
            "history_derived" | "historyderived" => Ok(FeatureKind::HistoryDerived),
            other => Err(format!("unknown feature kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub unit: String,
    pub kind: FeatureKind,
    pub actionable: bool,
    pub actionable_time_days: Option<u32>,
    pub confidence: Confidence,
    /// Smallest change worth suggesting, in feature units.
    pub min_change: Option<f64>,
    pub lower_bound: f64,
    pub upper_bound: f64,
    /// Structurally fixed; never perturbed.
    pub immutable: bool,
    /// Kept out of counterfactual search even though the other flags would
    /// allow it (e.g. genetic merit, whose actionable time is years).
    pub excluded: bool,
}

impl FeatureSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        unit: &str,
        kind: FeatureKind,
        actionable: bool,
        actionable_time_days: Option<u32>,
        confidence: Confidence,
        min_change: Option<f64>,
        bounds: (f64, f64),
        immutable: bool,
    ) -> Self {
        FeatureSpec {
            name: name.to_string(),
            unit: unit.to_string(),
            kind,
            actionable,
            actionable_time_days,
            confidence,
            min_change,
            lower_bound: bounds.0,
            upper_bound: bounds.1,
            immutable,
            excluded: false,
        }
    }

    pub fn range(&self) -> f64 {
        self.upper_bound - self.lower_bound
    }

    /// Actionable, or confidence-building (very high confidence and mutable).
    pub fn is_eligible(&self) -> bool {
        !self.excluded
            && !self.immutable
            && (self.actionable || self.confidence == Confidence::VeryHigh)
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lower_bound, self.upper_bound)
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower_bound && value <= self.upper_bound
    }

    fn validate(&self) -> Result<(), CatalogError> {
        let invalid = |field: &str, message: String| CatalogError::Invalid {
            feature: self.name.clone(),
            field: field.to_string(),
            message,
            line: None,
        };
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(invalid("name", format!("`{}` is not an identifier", self.name)));
        }
        if !self.lower_bound.is_finite() || !self.upper_bound.is_finite() {
            return Err(invalid("lower", "bounds must be finite".into()));
        }
        if self.lower_bound >= self.upper_bound {
            return Err(invalid(
                "upper",
                format!("lower bound {} must be below upper bound {}", self.lower_bound, self.upper_bound),
            ));
        }
        if let Some(step) = self.min_change {
            if !(step.is_finite() && step > 0.0) {
                return Err(invalid("min_change", format!("must be positive, got {step}")));
            }
            if step >= self.range() {
                return Err(invalid(
                    "min_change",
                    format!("{step} is not smaller than the feature range {}", self.range()),
                ));
            }
        }
        if self.immutable && self.actionable {
            return Err(invalid("immutable", "an immutable feature cannot be actionable".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate feature name `{name}`{}", fmt_line(*.line))]
    Duplicate { name: String, line: Option<usize> },
    #[error("feature `{feature}`, field `{field}`: {message}{}", fmt_line(*.line))]
    Invalid {
        feature: String,
        field: String,
        message: String,
        line: Option<usize>,
    },
    #[error("catalog has no features")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_line(line: Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

/// Ordered feature schema. Order is the vector layout everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub version: String,
    specs: Vec<FeatureSpec>,
}

impl FeatureCatalog {
    pub fn new(version: impl Into<String>, specs: Vec<FeatureSpec>) -> Result<Self, CatalogError> {
        let catalog = FeatureCatalog { version: version.into(), specs };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.specs.is_empty() {
            return Err(CatalogError::Empty);
        }
        let mut seen = HashSet::new();
        for spec in &self.specs {
            if !seen.insert(spec.name.as_str()) {
                return Err(CatalogError::Duplicate { name: spec.name.clone(), line: None });
            }
            spec.validate()?;
        }
        Ok(())
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn spec(&self, name: &str) -> Option<&FeatureSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn spec_at(&self, index: usize) -> &FeatureSpec {
        &self.specs[index]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.specs.iter().map(|s| s.name.as_str())
    }

    /// Indices of features a counterfactual may change, in catalog order.
    pub fn eligible_indices(&self) -> Vec<usize> {
        self.specs
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_eligible())
            .map(|(i, _)| i)
            .collect()
    }

    /// Renders the policy file. Equal catalogs serialize to identical bytes.
    pub fn to_policy_string(&self) -> String {
        let mut out = String::new();
        out.push_str("# feature policy\n");
        out.push_str(&format!("# version: {}\n", self.version));
        out.push_str(POLICY_HEADER);
        out.push('\n');
        for s in &self.specs {
            let row = [
                s.name.clone(),
                s.unit.clone(),
                s.kind.to_string(),
                s.actionable.to_string(),
                s.actionable_time_days.map(|d| d.to_string()).unwrap_or_default(),
                s.confidence.to_string(),
                s.min_change.map(|m| m.to_string()).unwrap_or_default(),
                s.lower_bound.to_string(),
                s.upper_bound.to_string(),
                s.immutable.to_string(),
                s.excluded.to_string(),
            ];
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn parse_policy(text: &str) -> Result<Self, CatalogError> {
        let mut version = None;
        let mut specs: Vec<FeatureSpec> = Vec::new();
        let mut lines_of: Vec<usize> = Vec::new();
        let mut header_seen = false;

        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = Some(v.trim().to_string());
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.starts_with("name,") {
                    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                    let expected: Vec<&str> = POLICY_HEADER.split(',').collect();
                    if cols.len() < 10 || cols[..] != expected[..cols.len()] {
                        return Err(CatalogError::Parse {
                            line: line_no,
                            message: format!("unexpected header, expected `{POLICY_HEADER}`"),
                        });
                    }
                    continue;
                }
            }
            let spec = parse_row(line, line_no)?;
            if specs.iter().any(|s| s.name == spec.name) {
                return Err(CatalogError::Duplicate { name: spec.name, line: Some(line_no) });
            }
            specs.push(spec);
            lines_of.push(line_no);
        }

        if specs.is_empty() {
            return Err(CatalogError::Empty);
        }
        for (spec, line) in specs.iter().zip(&lines_of) {
            if let Err(CatalogError::Invalid { feature, field, message, .. }) = spec.validate() {
                return Err(CatalogError::Invalid { feature, field, message, line: Some(*line) });
            }
        }
        Ok(FeatureCatalog {
            version: version.unwrap_or_else(|| DEFAULT_CATALOG_VERSION.to_string()),
            specs,
        })
    }
}

fn parse_row(line: &str, line_no: usize) -> Result<FeatureSpec, CatalogError> {
    let cells: Vec<&str> = line.split(',').map(str::trim).collect();
    if cells.len() != 10 && cells.len() != 11 {
        return Err(CatalogError::Parse {
            line: line_no,
            message: format!("expected 10 or 11 columns, found {}", cells.len()),
        });
    }
    let name = cells[0].to_string();
    let field_err = |field: &str, message: String| CatalogError::Invalid {
        feature: name.clone(),
        field: field.to_string(),
        message,
        line: Some(line_no),
    };
    let parse_bool = |field: &str, cell: &str| -> Result<bool, CatalogError> {
        match cell.to_ascii_lowercase().as_str() {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(field_err(field, format!("`{other}` is not a boolean"))),
        }
    };
    let parse_f64 = |field: &str, cell: &str| -> Result<f64, CatalogError> {
        cell.parse::<f64>()
            .map_err(|_| field_err(field, format!("`{cell}` is not a number")))
    };

    let kind = cells[2].parse::<FeatureKind>().map_err(|m| field_err("kind", m))?;
    let actionable = parse_bool("actionable", cells[3])?;
    let actionable_time_days = match cells[4] {
        "" => None,
        c => Some(
            c.parse::<u32>()
                .map_err(|_| field_err("actionable_time_days", format!("`{c}` is not a day count")))?,
        ),
    };
    let confidence = cells[5].parse::<Confidence>().map_err(|m| field_err("confidence", m))?;
    let min_change = match cells[6] {
        "" => None,
        c => Some(parse_f64("min_change", c)?),
    };
    let lower_bound = parse_f64("lower", cells[7])?;
    let upper_bound = parse_f64("upper", cells[8])?;
    let immutable = parse_bool("immutable", cells[9])?;
    let excluded = match cells.get(10) {
        None | Some(&"") => false,
        Some(c) => parse_bool("excluded", c)?,
    };
    Ok(FeatureSpec {
        name,
        unit: cells[1].to_string(),
        kind,
        actionable,
        actionable_time_days,
        confidence,
        min_change,
        lower_bound,
        upper_bound,
        immutable,
        excluded,
    })
}

/// The herd feature schema: change policy for the sixteen model
/// features plus a 30-day skewness companion per milk characteristic.
pub fn default_catalog() -> FeatureCatalog {
    use Confidence::*;
    use FeatureKind::*;

    let mut specs = vec![
        FeatureSpec::new("scc", "x1000 cells/ml", Current, false, None, VeryHigh, Some(25.0), (0.0, 5000.0), false),
        FeatureSpec::new("yield", "kg", Current, true, None, Low, Some(2.0), (0.0, 80.0), false),
        FeatureSpec::new("fat_pct", "percentage units", Current, true, Some(2), Low, Some(0.05), (1.0, 10.0), false),
        FeatureSpec::new("protein_pct", "percentage units", Current, true, Some(2), Low, Some(0.05), (1.0, 8.0), false),
        FeatureSpec::new("lactose_pct", "percentage units", Current, false, None, Low, None, (2.0, 7.0), false),
        FeatureSpec::new("urea", "mg/dl", Current, true, None, Low, Some(1.0), (0.0, 100.0), false),
        FeatureSpec::new("bcs", "units", Current, true, Some(14), VeryHigh, Some(0.25), (1.0, 5.0), false),
        FeatureSpec::new("weight", "kg", Current, true, Some(7), Medium, Some(10.0), (250.0, 1000.0), false),
        FeatureSpec::new("genetic_merit", "index", Static, true, Some(5 * 365), VeryHigh, None, (-500.0, 500.0), false),
        FeatureSpec::new("parity", "calvings", Static, false, None, VeryHigh, None, (1.0, 15.0), true),
        FeatureSpec::new("days_since_calving", "days", Static, false, None, VeryHigh, None, (0.0, 1000.0), true),
        FeatureSpec::new("calendar_month", "month", Static, false, None, Low, None, (1.0, 12.0), true),
        FeatureSpec::new("infections_stage_farm", "count", HistoryDerived, false, None, VeryHigh, None, (0.0, 10000.0), true),
        FeatureSpec::new("infections_stage_cow", "count", HistoryDerived, false, None, VeryHigh, None, (0.0, 100.0), true),
        FeatureSpec::new("infections_cow", "count", HistoryDerived, false, None, VeryHigh, None, (0.0, 100.0), true),
        FeatureSpec::new("farm_infected_proportion", "proportion", HistoryDerived, false, None, VeryHigh, None, (0.0, 1.0), true),
    ];
    // Genetic merit is actionable only on a breeding timescale.
    specs[8].excluded = true;

    for series in SKEW_SERIES {
        specs.push(FeatureSpec::new(
            &format!("{series}_skew30"),
            "skewness",
            Skew30,
            false,
            None,
            Low,
            None,
            (-10.0, 10.0),
            true,
        ));
    }

    FeatureCatalog::new(DEFAULT_CATALOG_VERSION, specs).expect("default catalog is valid")
}

/// Milk characteristics with a 30-day skewness companion feature.
pub const SKEW_SERIES: [&str; 6] = ["yield", "fat_pct", "protein_pct", "lactose_pct", "scc", "urea"];

/// Names of the features a counterfactual may change, in catalog order.
pub fn eligible_features(catalog: &FeatureCatalog) -> Vec<String> {
    catalog
        .eligible_indices()
        .into_iter()
        .map(|i| catalog.spec_at(i).name.clone())
        .collect()
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<FeatureCatalog, CatalogError> {
    let text = std::fs::read_to_string(path)?;
    FeatureCatalog::parse_policy(&text)
}

pub fn save_catalog(catalog: &FeatureCatalog, path: impl AsRef<Path>) -> Result<(), CatalogError> {
    std::fs::write(path, catalog.to_policy_string())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE_FEATURES: [&str; 16] = [
        "scc",
        "yield",
        "fat_pct",
        "protein_pct",
        "lactose_pct",
        "urea",
        "bcs",
        "weight",
        "genetic_merit",
        "parity",
        "days_since_calving",
        "calendar_month",
        "infections_stage_farm",
        "infections_stage_cow",
        "infections_cow",
        "farm_infected_proportion",
    ];

    #[test]
    fn table_policies() {
        let c = default_catalog();
        assert_eq!(c.spec("bcs").unwrap().min_change, Some(0.25));
        assert_eq!(c.spec("weight").unwrap().min_change, Some(10.0));
        assert_eq!(c.spec("yield").unwrap().min_change, Some(2.0));
        assert_eq!(c.spec("fat_pct").unwrap().min_change, Some(0.05));
        assert_eq!(c.spec("protein_pct").unwrap().min_change, Some(0.05));
        let scc = c.spec("scc").unwrap();
        assert!(!scc.actionable);
        assert_eq!(scc.confidence, Confidence::VeryHigh);
        assert_eq!(c.spec("weight").unwrap().confidence, Confidence::Medium);
        assert_eq!(c.spec("bcs").unwrap().actionable_time_days, Some(14));
    }

    #[test]
    fn every_table_feature_once_plus_six_skews() {
        let c = default_catalog();
        for name in TABLE_FEATURES {
            assert_eq!(c.names().filter(|n| *n == name).count(), 1, "{name}");
        }
        let skews = c.specs().iter().filter(|s| s.kind == FeatureKind::Skew30).count();
        assert_eq!(skews, 6);
        assert_eq!(c.len(), 22);
    }

    #[test]
    fn eligibility() {
        let c = default_catalog();
        let e = eligible_features(&c);
        assert!(e.contains(&"yield".to_string()));
        assert!(e.contains(&"scc".to_string()));
        assert!(!e.contains(&"parity".to_string()));
        assert!(!e.contains(&"genetic_merit".to_string()));
        assert!(!e.contains(&"lactose_pct".to_string()));
        assert!(e.iter().all(|n| !n.ends_with("_skew30")));
        assert_eq!(e, ["scc", "yield", "fat_pct", "protein_pct", "urea", "bcs", "weight"]);
        for i in c.eligible_indices() {
            assert!(!c.spec_at(i).immutable);
        }
    }

    #[test]
    fn confidence_order() {
        assert!(Confidence::Low < Confidence::Medium);
        assert!(Confidence::Medium < Confidence::High);
        assert!(Confidence::High < Confidence::VeryHigh);
    }

    #[test]
    fn policy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.csv");
        let c = default_catalog();
        save_catalog(&c, &path).unwrap();
        let back = load_catalog(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_policy_string(), c.to_policy_string());
    }

    #[test]
    fn duplicate_rows_rejected() {
        let mut text = default_catalog().to_policy_string();
        text.push_str("yield,kg,current,true,,low,2,0,80,false,false\n");
        match FeatureCatalog::parse_policy(&text) {
            Err(CatalogError::Duplicate { name, line }) => {
                assert_eq!(name, "yield");
                assert_eq!(line, Some(text.lines().count()));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn negative_min_change_names_field() {
        let text = "name,unit,kind,actionable,actionable_time_days,confidence,min_change,lower,upper,immutable\n\
                    yield,kg,current,true,,low,-1,0,80,false\n";
        let err = FeatureCatalog::parse_policy(text).unwrap_err();
        match &err {
            CatalogError::Invalid { feature, field, line, .. } => {
                assert_eq!(feature, "yield");
                assert_eq!(field, "min_change");
                assert_eq!(*line, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("min_change"));
    }

    #[test]
    fn immutable_actionable_rejected() {
        let text = "parity,calvings,static,true,,very_high,,1,15,true\n";
        assert!(matches!(
            FeatureCatalog::parse_policy(text),
            Err(CatalogError::Invalid { ref field, .. }) if field == "immutable"
        ));
    }

    #[test]
    fn ten_column_rows_accepted() {
        let text = "# version: custom\nurea,mg/dl,current,true,,low,,0,100,false\n";
        let c = FeatureCatalog::parse_policy(text).unwrap();
        assert_eq!(c.version, "custom");
        assert!(!c.spec("urea").unwrap().excluded);
        assert_eq!(c.spec("urea").unwrap().min_change, None);
    }
}
