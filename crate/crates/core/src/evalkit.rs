//! Batch evaluation: infection recall by warning horizon, sampling of
//! confidently healthy predictions, and score shifts under counterfactuals.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfx::{self, CfxConfig, CfxError, CounterfactualResult, DistanceWeights};
use crate::dataset::{FeatureVector, Herd, LabeledInstance, MAX_HORIZON_DAYS};
use crate::featcat::FeatureCatalog;
use crate::gbm::ScoreModel;
use crate::stats;

pub const HORIZON_CURVE_FILE: &str = "horizon_curve.csv";
pub const SCORE_SHIFT_FILE: &str = "score_shift.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Quantile levels reported for score distributions.
pub const QUANTILE_LEVELS: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no infection has a scorable day in the week before onset")]
    NoPositives,
    #[error("min_healthy_confidence must be in (0.5, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("temporal split at {split} leaves the {side} set empty")]
    EmptySplit { split: NaiveDate, side: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Instances dated strictly before `split` train; the rest test.
pub fn temporal_split(
    instances: Vec<LabeledInstance>,
    split: NaiveDate,
) -> Result<(Vec<LabeledInstance>, Vec<LabeledInstance>), EvalError> {
    let (train, test): (Vec<_>, Vec<_>) = instances.into_iter().partition(|i| i.x.as_of < split);
    if train.is_empty() {
        return Err(EvalError::EmptySplit { split, side: "training" });
    }
    if test.is_empty() {
        return Err(EvalError::EmptySplit { split, side: "test" });
    }
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Infection {
    pub cow_id: String,
    pub onset: NaiveDate,
}

/// Recorded onsets on or after `from`.
pub fn infections_from(herd: &Herd, from: NaiveDate) -> Vec<Infection> {
    herd.cows
        .iter()
        .flat_map(|c| {
            c.infection_events
                .iter()
                .filter(move |e| e.onset >= from)
                .map(|e| Infection { cow_id: c.cow_id.clone(), onset: e.onset })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonPoint {
    pub horizon_days: u8,
    pub proportion_found: f64,
    pub n_infections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCurve {
    pub points: Vec<HorizonPoint>,
}

impl HorizonCurve {
    pub fn at(&self, horizon_days: u8) -> Option<&HorizonPoint> {
        self.points.iter().find(|p| p.horizon_days == horizon_days)
    }

    pub fn is_non_increasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].proportion_found <= w[0].proportion_found)
    }
}

/// Proportion of infections flagged at least `h` days ahead, h = 1..=7.
///
/// An infection counts when at least one of its cow's vectors dated in
/// `[onset - 7, onset - 1]` exists; it is found at horizon h if any vector
/// in `[onset - 7, onset - h]` scores at or above `threshold`. Every horizon
/// uses the same infections, so the curve cannot rise with h.
pub fn horizon_recall<M: ScoreModel + ?Sized>(
    model: &M,
    vectors: &[FeatureVector],
    infections: &[Infection],
    threshold: f64,
) -> Result<HorizonCurve, EvalError> {
    let mut by_cow: HashMap<&str, Vec<&FeatureVector>> = HashMap::new();
    for v in vectors {
        by_cow.entry(v.cow_id.as_str()).or_default().push(v);
    }
    // earliest lead time (in days) at which each infection is flagged
    let leads: Vec<Option<i64>> = infections
        .par_iter()
        .filter_map(|inf| {
            let window: Vec<&FeatureVector> = by_cow
                .get(inf.cow_id.as_str())?
                .iter()
                .copied()
                .filter(|v| {
                    let lead = (inf.onset - v.as_of).num_days();
                    (1..=MAX_HORIZON_DAYS as i64).contains(&lead)
                })
                .collect();
            if window.is_empty() {
                return None;
            }
            let best = window
                .iter()
                .filter(|v| model.score(&v.values) >= threshold)
                .map(|v| (inf.onset - v.as_of).num_days())
                .max();
            Some(best)
        })
        .collect();
    if leads.is_empty() {
        return Err(EvalError::NoPositives);
    }
    let n = leads.len();
    let points = (1..=MAX_HORIZON_DAYS)
        .map(|h| {
            let found = leads.iter().filter(|l| l.is_some_and(|l| l >= h as i64)).count();
            HorizonPoint { horizon_days: h, proportion_found: found as f64 / n as f64, n_infections: n }
        })
        .collect();
    Ok(HorizonCurve { points })
}

/// Seeded uniform sample of up to `n` vectors with
/// `P(Sick) <= 1 - min_healthy_confidence`, in input order.
pub fn sample_high_confidence_healthy<M: ScoreModel + ?Sized>(
    model: &M,
    vectors: &[FeatureVector],
    min_healthy_confidence: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<FeatureVector>, EvalError> {
    if !(min_healthy_confidence > 0.5 && min_healthy_confidence < 1.0) {
        return Err(EvalError::InvalidConfidence(min_healthy_confidence));
    }
    let cutoff = 1.0 - min_healthy_confidence;
    let eligible: Vec<&FeatureVector> = vectors.iter().filter(|v| model.score(&v.values) <= cutoff).collect();
    if n >= eligible.len() {
        return Ok(eligible.into_iter().cloned().collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, eligible.len(), n).into_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| eligible[i].clone()).collect())
}

/// Counterfactuals for every sample, in sample order.
pub fn explain_batch<M: ScoreModel + ?Sized>(
    model: &M,
    samples: &[FeatureVector],
    config: &CfxConfig,
    catalog: &FeatureCatalog,
    weights: &DistanceWeights,
) -> Vec<Result<CounterfactualResult, CfxError>> {
    samples.par_iter().map(|x| cfx::find_counterfactual(model, x, catalog, weights, config)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub score_original: f64,
    pub score_cf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile {
    pub level: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreShiftSummary {
    /// One pair per found counterfactual, in sample order.
    pub pairs: Vec<ScorePair>,
    pub n_samples: usize,
    pub n_found: usize,
    /// Found / samples; 0 when there are no samples.
    pub flip_rate: f64,
    pub original_quantiles: Vec<Quantile>,
    pub counterfactual_quantiles: Vec<Quantile>,
}

fn quantiles(values: impl Iterator<Item = f64>) -> Vec<Quantile> {
    let mut sorted: Vec<f64> = values.collect();
    sorted.sort_by(f64::total_cmp);
    QUANTILE_LEVELS
        .iter()
        .filter_map(|&level| stats::quantile_sorted(&sorted, level).map(|value| Quantile { level, value }))
        .collect()
}

/// Summarizes batch results; errors count as not found.
pub fn summarize(results: &[Result<CounterfactualResult, CfxError>]) -> ScoreShiftSummary {
    let pairs: Vec<ScorePair> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().filter(|r| r.is_found()))
        .map(|r| ScorePair { score_original: r.score_original, score_cf: r.score_cf })
        .collect();
    let n_samples = results.len();
    ScoreShiftSummary {
        n_samples,
        n_found: pairs.len(),
        flip_rate: if n_samples == 0 { 0.0 } else { pairs.len() as f64 / n_samples as f64 },
        original_quantiles: quantiles(pairs.iter().map(|p| p.score_original)),
        counterfactual_quantiles: quantiles(pairs.iter().map(|p| p.score_cf)),
        pairs,
    }
}

pub fn score_shift_summary<M: ScoreModel + ?Sized>(
    model: &M,
    samples: &[FeatureVector],
    config: &CfxConfig,
    catalog: &FeatureCatalog,
    weights: &DistanceWeights,
) -> ScoreShiftSummary {
    summarize(&explain_batch(model, samples, config, catalog, weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub horizon_curve: Vec<HorizonPoint>,
    pub n_samples: usize,
    pub n_found: usize,
    pub flip_rate: f64,
    pub original_quantiles: Vec<Quantile>,
    pub counterfactual_quantiles: Vec<Quantile>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

/// Writes `horizon_curve.csv`, `score_shift.csv` and `summary.json` into `dir`.
pub fn export_report(curve: &HorizonCurve, summary: &ScoreShiftSummary, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut text = String::from("horizon,proportion,n\n");
    for p in &curve.points {
        text.push_str(&format!("{},{},{}\n", p.horizon_days, p.proportion_found, p.n_infections));
    }
    let path = dir.join(HORIZON_CURVE_FILE);
    std::fs::write(&path, text).map_err(io_err(&path))?;

    let mut text = String::from("score_original,score_cf\n");
    for p in &summary.pairs {
        text.push_str(&format!("{},{}\n", p.score_original, p.score_cf));
    }
    let path = dir.join(SCORE_SHIFT_FILE);
    std::fs::write(&path, text).map_err(io_err(&path))?;

    let doc = ReportSummary {
        horizon_curve: curve.points.clone(),
        n_samples: summary.n_samples,
        n_found: summary.n_found,
        flip_rate: summary.flip_rate,
        original_quantiles: summary.original_quantiles.clone(),
        counterfactual_quantiles: summary.counterfactual_quantiles.clone(),
    };
    let path = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&doc).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))
}

fn parse_csv<T>(path: &Path, header: &str, parse: impl Fn(&[&str]) -> Option<T>) -> Result<Vec<T>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |message: String| EvalError::Format { path: path.to_path_buf(), message };
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(bad(format!("expected header `{header}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let cells: Vec<&str> = line.split(',').collect();
            parse(&cells).ok_or_else(|| bad(format!("line {}: cannot parse `{line}`", i + 2)))
        })
        .collect()
}

/// Reads back the two CSV files written by [`export_report`].
pub fn read_report(dir: impl AsRef<Path>) -> Result<(HorizonCurve, Vec<ScorePair>), EvalError> {
    let dir = dir.as_ref();
    let points = parse_csv(&dir.join(HORIZON_CURVE_FILE), "horizon,proportion,n", |c| match c {
        [h, p, n] => Some(HorizonPoint {
            horizon_days: h.parse().ok()?,
            proportion_found: p.parse().ok()?,
            n_infections: n.parse().ok()?,
        }),
        _ => None,
    })?;
    let pairs = parse_csv(&dir.join(SCORE_SHIFT_FILE), "score_original,score_cf", |c| match c {
        [a, b] => Some(ScorePair { score_original: a.parse().ok()?, score_cf: b.parse().ok()? }),
        _ => None,
    })?;
    Ok((HorizonCurve { points }, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use crate::featcat::default_catalog;
    use crate::gbm::Ensemble;

    struct SccAbove(usize, f64);

    impl ScoreModel for SccAbove {
        fn n_features(&self) -> usize {
            self.0
        }
        fn score(&self, v: &[f64]) -> f64 {
            if v[0] > self.1 {
                0.8
            } else {
                0.05
            }
        }
    }

    fn healthy_herd_vectors(n: usize) -> Vec<FeatureVector> {
        let cat = default_catalog();
        (0..n)
            .map(|i| {
                let mut v: Vec<f64> = cat.specs().iter().map(|s| s.lower_bound + s.range() / 3.0).collect();
                v[0] = 50.0 + i as f64;
                FeatureVector::new(format!("c{i}"), day(0), v)
            })
            .collect()
    }

    #[test]
    fn flip_rates_at_the_extremes() {
        let cat = default_catalog();
        let samples = healthy_herd_vectors(6);
        let weights = DistanceWeights::from_mad(vec![1.0; cat.len()], &cat);
        let cfg = CfxConfig::default();
        let s = score_shift_summary(&SccAbove(cat.len(), 200.0), &samples, &cfg, &cat, &weights);
        assert_eq!(s.flip_rate, 1.0);
        assert!(s.pairs.iter().all(|p| p.score_cf >= 0.55));
        let prior = Ensemble::prior_only(cat.version.clone(), cat.len(), -2.0);
        let s = score_shift_summary(&prior, &samples, &cfg, &cat, &weights);
        assert_eq!(s.flip_rate, 0.0);
        assert!(s.pairs.is_empty());
        assert_eq!(s.n_samples, 6);
    }

    struct Lookup(HashMap<u64, f64>);

    impl ScoreModel for Lookup {
        fn n_features(&self) -> usize {
            1
        }
        fn score(&self, v: &[f64]) -> f64 {
            self.0.get(&v[0].to_bits()).copied().unwrap_or(0.0)
        }
    }

    fn day(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2018, 5, 1).unwrap() + Duration::days(n)
    }

    /// Cow "a" infected on day 10, cow "b" on day 20; vectors carry their
    /// day number as the single feature.
    fn fixture() -> (Vec<FeatureVector>, Vec<Infection>) {
        let mut vectors = Vec::new();
        for (cow, range) in [("a", 0..10), ("b", 0..20)] {
            for d in range {
                vectors.push(FeatureVector::new(cow, day(d), vec![d as f64 + if cow == "b" { 100.0 } else { 0.0 }]));
            }
        }
        let infections =
            vec![Infection { cow_id: "a".into(), onset: day(10) }, Infection { cow_id: "b".into(), onset: day(20) }];
        (vectors, infections)
    }

    #[test]
    fn perfect_and_constant_models() {
        let (vectors, infections) = fixture();
        let perfect = Lookup(vectors.iter().map(|v| (v.values[0].to_bits(), 1.0)).collect());
        let c = horizon_recall(&perfect, &vectors, &infections, 0.5).unwrap();
        assert_eq!(c.points.len(), 7);
        assert!(c.points.iter().all(|p| p.proportion_found == 1.0 && p.n_infections == 2));
        let constant = Lookup(HashMap::new());
        let c = horizon_recall(&constant, &vectors, &infections, 0.5).unwrap();
        assert!(c.points.iter().all(|p| p.proportion_found == 0.0));
    }

    #[test]
    fn lead_time_counting() {
        let (vectors, infections) = fixture();
        // a flagged 3 days ahead, b flagged 1 day ahead
        let m = Lookup([(7.0f64.to_bits(), 0.9), (119.0f64.to_bits(), 0.9)].into_iter().collect());
        let c = horizon_recall(&m, &vectors, &infections, 0.5).unwrap();
        let got: Vec<f64> = c.points.iter().map(|p| p.proportion_found).collect();
        assert_eq!(got, vec![1.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert!(c.is_non_increasing());
        // a score eight days out is outside every window
        let m = Lookup([(2.0f64.to_bits(), 0.9)].into_iter().collect());
        assert_eq!(horizon_recall(&m, &vectors, &infections, 0.5).unwrap().at(1).unwrap().proportion_found, 0.0);
    }

    #[test]
    fn no_positives_is_an_error() {
        let (vectors, _) = fixture();
        let far = vec![Infection { cow_id: "a".into(), onset: day(100) }];
        assert!(matches!(horizon_recall(&Lookup(HashMap::new()), &vectors, &far, 0.5), Err(EvalError::NoPositives)));
    }

    #[test]
    fn sampling() {
        let (vectors, _) = fixture();
        let m = Lookup(vectors.iter().map(|v| (v.values[0].to_bits(), v.values[0] / 200.0)).collect());
        let healthy = sample_high_confidence_healthy(&m, &vectors, 0.8, 1000, 1).unwrap();
        assert!(healthy.iter().all(|v| m.score(&v.values) <= 0.2));
        assert_eq!(healthy.len(), vectors.iter().filter(|v| v.values[0] <= 40.0).count());
        let a = sample_high_confidence_healthy(&m, &vectors, 0.8, 5, 9).unwrap();
        let b = sample_high_confidence_healthy(&m, &vectors, 0.8, 5, 9).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(a, b);
        assert!(sample_high_confidence_healthy(&m, &vectors, 0.5, 5, 9).is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let curve = HorizonCurve {
            points: (1..=7)
                .map(|h| HorizonPoint { horizon_days: h, proportion_found: 1.0 / h as f64, n_infections: 13 })
                .collect(),
        };
        let summary = ScoreShiftSummary {
            pairs: vec![
                ScorePair { score_original: 0.0123, score_cf: 0.61 },
                ScorePair { score_original: 0.1, score_cf: 0.9 },
            ],
            n_samples: 3,
            n_found: 2,
            flip_rate: 2.0 / 3.0,
            original_quantiles: vec![],
            counterfactual_quantiles: vec![],
        };
        export_report(&curve, &summary, dir.path()).unwrap();
        let (c, pairs) = read_report(dir.path()).unwrap();
        assert_eq!(c, curve);
        assert_eq!(pairs, summary.pairs);
        let csv = std::fs::read_to_string(dir.path().join(HORIZON_CURVE_FILE)).unwrap();
        assert_eq!(csv.lines().count(), 8);
        let back: ReportSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
        assert_eq!(back.flip_rate, 2.0 / 3.0);
    }

    #[test]
    fn empty_summary_exports_headers_only() {
        let dir = tempfile::tempdir().unwrap();
        let summary = summarize(&[]);
        assert_eq!(summary.flip_rate, 0.0);
        export_report(&HorizonCurve { points: vec![] }, &summary, dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(SCORE_SHIFT_FILE)).unwrap();
        assert_eq!(csv, "score_original,score_cf\n");
    }
}
