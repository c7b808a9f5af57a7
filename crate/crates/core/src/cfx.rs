//! Counterfactual search: the smallest policy-compliant change that makes a
//! cow predicted healthy be predicted to succumb.
//!
//! Distance is the Manhattan distance weighted by inverse MAD. Sparsity is
//! handled by enumerating every subset of eligible features up to
//! `max_changes` and solving a small constrained problem per subset; the
//! winner is the verified candidate with the smallest distance, then fewest
//! features, then earliest support in catalog order, then smallest and
//! positive-first deltas.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cobyla::{self, OptProblem};
use crate::dataset::FeatureVector;
use crate::featcat::FeatureCatalog;
use crate::gbm::ScoreModel;
use crate::stats;

/// Zero-MAD features get weight `1 / (MAD_FALLBACK_FRACTION * range)`.
pub const MAD_FALLBACK_FRACTION: f64 = 1e-6;
/// Upper bound on candidates visited by the exhaustive grid searches.
pub const GRID_SEARCH_LIMIT: u64 = 10_000_000;

/// Slack when converting a continuous delta to a step count, so that solver
/// noise such as 0.75000000001 does not round up an extra step.
const STEP_ROUNDING_SLACK: f64 = 1e-9;
const SIGNIFICANT_DIGITS: usize = 3;

// Solver settings in range-normalized units. The final radius only needs to
// resolve well below the smallest policy step (half a percent of range);
// quantization and polishing take it from there.
const SOLVER_RHO_BEGIN: f64 = 0.25;
const SOLVER_RHO_END: f64 = 1e-3;
const SOLVER_EVALS_PER_FEATURE: usize = 250;

#[derive(Debug, Error, PartialEq)]
pub enum CfxError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("instance is already predicted to succumb (score {score:.4} >= threshold {threshold})")]
    AlreadySick { score: f64, threshold: f64 },
    #[error("invalid counterfactual config: {0}")]
    InvalidConfig(String),
    #[error("feature `{0}` has no min_change step, which grid search requires")]
    MissingStep(String),
    #[error("grid search would visit more than {limit} candidates")]
    SearchTooLarge { limit: u64 },
    #[error("weights file {path}: {message}")]
    WeightsFile { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceWeights {
    /// `1 / MAD` per feature, catalog order.
    pub w: Vec<f64>,
    pub mad: Vec<f64>,
    pub fallback_applied: BTreeSet<usize>,
}

impl DistanceWeights {
    pub fn from_mad(mad: Vec<f64>, catalog: &FeatureCatalog) -> Self {
        let mut fallback_applied = BTreeSet::new();
        let w = mad
            .iter()
            .enumerate()
            .map(|(j, &m)| {
                if m > 0.0 && m.is_finite() {
                    1.0 / m
                } else {
                    fallback_applied.insert(j);
                    1.0 / (MAD_FALLBACK_FRACTION * catalog.spec_at(j).range())
                }
            })
            .collect();
        DistanceWeights { w, mad, fallback_applied }
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

pub const WEIGHTS_FORMAT: &str = "mastitis-weights";

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    catalog_version: String,
    #[serde(flatten)]
    weights: DistanceWeights,
}

/// Where the weights of `model_path` live: `herd.json` -> `herd.weights.json`.
pub fn weights_path_for(model_path: &Path) -> PathBuf {
    let stem = model_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    model_path.with_file_name(format!("{stem}.weights.json"))
}

impl DistanceWeights {
    pub fn save(&self, path: &Path, catalog: &FeatureCatalog) -> Result<(), CfxError> {
        let err = |message: String| CfxError::WeightsFile { path: path.to_path_buf(), message };
        let file = WeightsFile {
            format: WEIGHTS_FORMAT.into(),
            catalog_version: catalog.version.clone(),
            weights: self.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path, catalog: &FeatureCatalog) -> Result<Self, CfxError> {
        let err = |message: String| CfxError::WeightsFile { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let file: WeightsFile = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if file.format != WEIGHTS_FORMAT {
            return Err(err(format!("unknown format `{}`", file.format)));
        }
        if file.catalog_version != catalog.version {
            return Err(err(format!(
                "catalog version `{}` does not match `{}`",
                file.catalog_version, catalog.version
            )));
        }
        let w = file.weights;
        if w.w.len() != catalog.len() || w.mad.len() != catalog.len() {
            return Err(err(format!("expected {} weights, got {}", catalog.len(), w.w.len())));
        }
        if w.w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(err("weights must be positive and finite".into()));
        }
        Ok(w)
    }
}

/// Per-feature MAD over the training rows and the inverse weights.
pub fn mad_weights<R: AsRef<[f64]>>(rows: &[R], catalog: &FeatureCatalog) -> Result<DistanceWeights, CfxError> {
    if rows.len() < 2 {
        return Err(CfxError::TooFewRows(rows.len()));
    }
    let d = catalog.len();
    if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != d) {
        return Err(CfxError::DimensionMismatch { expected: d, got: bad.as_ref().len() });
    }
    let mad = (0..d)
        .map(|j| {
            let column: Vec<f64> = rows.iter().map(|r| r.as_ref()[j]).collect();
            stats::mad(&column).unwrap_or(0.0)
        })
        .collect();
    Ok(DistanceWeights::from_mad(mad, catalog))
}

/// `sum_j w_j * |x_j - x'_j|`
pub fn weighted_manhattan(x: &[f64], x_prime: &[f64], weights: &[f64]) -> Result<f64, CfxError> {
    if x.len() != x_prime.len() || x.len() != weights.len() {
        return Err(CfxError::DimensionMismatch { expected: x.len(), got: x_prime.len().min(weights.len()) });
    }
    Ok(x.iter().zip(x_prime).zip(weights).map(|((a, b), w)| w * (a - b).abs()).sum())
}

/// Sparse signed changes keyed by catalog index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeltaMap(pub BTreeMap<usize, f64>);

impl DeltaMap {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.0.get(&index).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }

    pub fn support(&self) -> Vec<usize> {
        self.0.keys().copied().collect()
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let mut out = values.to_vec();
        for (j, d) in self.iter() {
            out[j] += d;
        }
        out
    }

    /// Weighted distance of the change; the one place distances are summed.
    pub fn distance(&self, weights: &DistanceWeights) -> f64 {
        self.iter().map(|(j, d)| weights.w[j] * d.abs()).sum()
    }
}

impl FromIterator<(usize, f64)> for DeltaMap {
    fn from_iter<T: IntoIterator<Item = (usize, f64)>>(iter: T) -> Self {
        DeltaMap(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfxConfig {
    pub max_changes: usize,
    pub flip_threshold: f64,
    /// A flip must reach `flip_threshold + flip_margin`.
    pub flip_margin: f64,
    pub n_restarts: usize,
    /// Search the `min_change` lattice exactly instead of solving continuously.
    pub grid_mode: bool,
}

impl Default for CfxConfig {
    fn default() -> Self {
        CfxConfig { max_changes: 3, flip_threshold: 0.5, flip_margin: 0.05, n_restarts: 3, grid_mode: false }
    }
}

impl CfxConfig {
    pub fn validate(&self) -> Result<(), CfxError> {
        let bad = |m: &str| Err(CfxError::InvalidConfig(m.to_string()));
        if self.max_changes < 1 {
            return bad("max_changes must be at least 1");
        }
        if !(self.flip_threshold > 0.0 && self.flip_threshold < 1.0) {
            return bad("flip_threshold must be strictly between 0 and 1");
        }
        if !(self.flip_margin >= 0.0 && self.flip_threshold + self.flip_margin < 1.0) {
            return bad("flip_margin must be non-negative with threshold + margin < 1");
        }
        Ok(())
    }

    pub fn target(&self) -> f64 {
        self.flip_threshold + self.flip_margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CfxStatus {
    Found,
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    /// Empty when nothing was found.
    pub delta: DeltaMap,
    /// `x + delta`; equals the input when nothing was found.
    pub x_cf: FeatureVector,
    pub score_original: f64,
    pub score_cf: f64,
    pub distance: f64,
    pub subsets_searched: usize,
    pub status: CfxStatus,
}

impl CounterfactualResult {
    pub fn is_found(&self) -> bool {
        self.status == CfxStatus::Found
    }

    /// `w_j * |delta_j|` per changed feature, catalog order.
    pub fn contributions(&self, weights: &DistanceWeights) -> Vec<(usize, f64)> {
        self.delta.iter().map(|(j, d)| (j, weights.w[j] * d.abs())).collect()
    }

    pub fn document(&self, original: &FeatureVector, catalog: &FeatureCatalog, weights: &DistanceWeights) -> CounterfactualDocument {
        let named = |values: &[f64]| {
            catalog
                .specs()
                .iter()
                .zip(values)
                .map(|(s, v)| FeatureValue { feature: s.name.clone(), value: *v, unit: s.unit.clone() })
                .collect()
        };
        CounterfactualDocument {
            cow_id: original.cow_id.clone(),
            as_of: original.as_of,
            status: self.status,
            original: named(&original.values),
            counterfactual: named(&self.x_cf.values),
            deltas: self
                .delta
                .iter()
                .map(|(j, d)| {
                    let s = catalog.spec_at(j);
                    DeltaEntry {
                        feature: s.name.clone(),
                        delta: d,
                        unit: s.unit.clone(),
                        contribution: weights.w[j] * d.abs(),
                    }
                })
                .collect(),
            score_original: self.score_original,
            score_cf: self.score_cf,
            distance: self.distance,
            subsets_searched: self.subsets_searched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub feature: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub feature: String,
    pub delta: f64,
    pub unit: String,
    /// Share of the weighted distance, `w * |delta|`.
    pub contribution: f64,
}

/// Wire format of a counterfactual shared by the service and the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualDocument {
    pub cow_id: String,
    pub as_of: NaiveDate,
    pub status: CfxStatus,
    pub original: Vec<FeatureValue>,
    pub counterfactual: Vec<FeatureValue>,
    pub deltas: Vec<DeltaEntry>,
    pub score_original: f64,
    pub score_cf: f64,
    pub distance: f64,
    pub subsets_searched: usize,
}

/// `k * step` as the double nearest its decimal value, so 3 x 0.05 is 0.15
/// rather than 0.15000000000000002.
pub fn step_multiple(k: f64, step: f64) -> f64 {
    let decimals = format!("{step}").split('.').nth(1).map_or(0, str::len);
    format!("{:.*}", decimals, k * step).parse().unwrap_or(k * step)
}

/// Whether `delta` is a nonzero whole number of `step`s in the canonical
/// form produced by [`step_multiple`].
pub fn is_step_multiple(delta: f64, step: f64) -> bool {
    let k = (delta / step).round();
    k != 0.0 && delta == step_multiple(k, step)
}

/// Rounds away from zero to `digits` significant digits.
fn round_significant(v: f64, digits: usize) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return 0.0;
    }
    let exponent = v.abs().log10().floor() as i32 - (digits as i32 - 1);
    let units = (v.abs() / 10f64.powi(exponent) - STEP_ROUNDING_SLACK).ceil();
    let magnitude: f64 = format!("{units}e{exponent}").parse().unwrap_or(0.0);
    v.signum() * magnitude
}

/// Snap raw deltas to the policy grid: away from zero to a multiple of
/// `min_change`, dropping anything under a quarter step. Features without a
/// step keep three significant digits.
pub fn quantize_deltas(raw: &DeltaMap, catalog: &FeatureCatalog) -> DeltaMap {
    raw.iter()
        .filter_map(|(j, d)| {
            if !d.is_finite() {
                return None;
            }
            let q = match catalog.spec_at(j).min_change {
                Some(step) => {
                    if d.abs() < 0.25 * step {
                        return None;
                    }
                    let k = (d.abs() / step - STEP_ROUNDING_SLACK).ceil().max(1.0);
                    step_multiple(d.signum() * k, step)
                }
                None => round_significant(d, SIGNIFICANT_DIGITS),
            };
            (q != 0.0).then_some((j, q))
        })
        .collect()
}

/// Pulls quantized deltas back toward zero until `x + delta` is in bounds.
fn fit_within_bounds(delta: DeltaMap, x: &[f64], catalog: &FeatureCatalog) -> DeltaMap {
    delta
        .iter()
        .filter_map(|(j, d)| {
            let spec = catalog.spec_at(j);
            if spec.contains(x[j] + d) {
                return Some((j, d));
            }
            match spec.min_change {
                Some(step) => {
                    let mut k = (d.abs() / step).round();
                    while k > 0.0 && !spec.contains(x[j] + step_multiple(d.signum() * k, step)) {
                        k -= 1.0;
                    }
                    (k > 0.0).then(|| (j, step_multiple(d.signum() * k, step)))
                }
                None => {
                    // truncate toward zero so the pulled-back value stays inside
                    let room = spec.clamp(x[j] + d) - x[j];
                    let exponent = room.abs().log10().floor() as i32 - (SIGNIFICANT_DIGITS as i32 - 1);
                    let units = (room.abs() / 10f64.powi(exponent)).floor();
                    let q = room.signum() * format!("{units}e{exponent}").parse::<f64>().unwrap_or(0.0);
                    (q != 0.0 && q.is_finite() && spec.contains(x[j] + q)).then_some((j, q))
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Candidate {
    delta: DeltaMap,
    distance: f64,
    score: f64,
}

/// Total order on deltas: per feature in catalog order, smaller magnitude
/// first, then positive before negative.
fn delta_order(a: &DeltaMap, b: &DeltaMap) -> Ordering {
    for ((_, da), (_, db)) in a.iter().zip(b.iter()) {
        let o = da.abs().total_cmp(&db.abs()).then((da < 0.0).cmp(&(db < 0.0)));
        if o != Ordering::Equal {
            return o;
        }
    }
    Ordering::Equal
}

fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.delta.len().cmp(&b.delta.len()))
        .then_with(|| a.delta.support().cmp(&b.delta.support()))
        .then_with(|| delta_order(&a.delta, &b.delta))
}

fn pick_better(best: Option<Candidate>, c: Option<Candidate>) -> Option<Candidate> {
    match (best, c) {
        (Some(a), Some(b)) => Some(if candidate_order(&b, &a) == Ordering::Less { b } else { a }),
        (a, None) => a,
        (None, b) => b,
    }
}

/// All subsets of `items` with 1..=max_size elements, by size then
/// lexicographically.
pub fn feature_subsets(items: &[usize], max_size: usize) -> Vec<Vec<usize>> {
    fn extend(items: &[usize], start: usize, size: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == size {
            out.push(current.clone());
            return;
        }
        for i in start..items.len() {
            current.push(items[i]);
            extend(items, i + 1, size, current, out);
            current.pop();
        }
    }
    let mut out = Vec::new();
    for size in 1..=max_size.min(items.len()) {
        extend(items, 0, size, &mut Vec::new(), &mut out);
    }
    out
}

struct Search<'a, M: ScoreModel + ?Sized> {
    model: &'a M,
    x: &'a FeatureVector,
    catalog: &'a FeatureCatalog,
    weights: &'a DistanceWeights,
    config: &'a CfxConfig,
}

impl<M: ScoreModel + ?Sized> Search<'_, M> {
    fn verify(&self, delta: &DeltaMap) -> Option<Candidate> {
        if delta.is_empty() {
            return None;
        }
        let values = delta.apply(&self.x.values);
        if !delta.iter().all(|(j, _)| self.catalog.spec_at(j).contains(values[j])) {
            return None;
        }
        let score = self.model.score(&values);
        (score >= self.config.target()).then(|| Candidate { distance: delta.distance(self.weights), delta: delta.clone(), score })
    }

    fn seed(&self, subset: &[usize]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.x.cow_id.as_bytes());
        h.update(self.x.as_of.to_string().as_bytes());
        for v in &self.x.values {
            h.update(v.to_bits().to_le_bytes());
        }
        for j in subset {
            h.update((*j as u64).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    fn continuous_subset(&self, subset: &[usize]) -> Option<Candidate> {
        let k = subset.len();
        let x = &self.x.values;
        let specs: Vec<_> = subset.iter().map(|&j| self.catalog.spec_at(j)).collect();
        let ranges: Vec<f64> = specs.iter().map(|s| s.range()).collect();
        let lo: Vec<f64> = subset.iter().zip(&specs).zip(&ranges).map(|((&j, s), r)| (s.lower_bound - x[j]) / r).collect();
        let hi: Vec<f64> = subset.iter().zip(&specs).zip(&ranges).map(|((&j, s), r)| (s.upper_bound - x[j]) / r).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed(subset));
        let mut starts = vec![vec![0.0; k]];
        for r in 1..=self.config.n_restarts {
            let scale = r as f64 / self.config.n_restarts as f64;
            starts.push((0..k).map(|i| rng.random_range(lo[i]..=hi[i]) * scale).collect());
        }
        // The score is piecewise constant, so a start with no flip in reach
        // gives the solver nothing to follow. Box corners flip whenever
        // anything in the box does and the solver then walks inward.
        for corner in 0u32..(1 << k) {
            starts.push((0..k).map(|i| if corner >> (k - 1 - i) & 1 == 1 { lo[i] } else { hi[i] }).collect());
        }

        for margin in [self.config.flip_margin, 2.0 * self.config.flip_margin] {
            let required = (self.config.flip_threshold + margin).min(1.0 - f64::EPSILON);
            let mut best: Option<Candidate> = None;
            for start in &starts {
                let to_values = |u: &[f64]| {
                    let mut v = x.clone();
                    for i in 0..k {
                        v[subset[i]] += u[i] * ranges[i];
                    }
                    v
                };
                let mut problem = OptProblem::new(start.clone(), |u: &[f64]| {
                    (0..k).map(|i| self.weights.w[subset[i]] * (u[i] * ranges[i]).abs()).sum()
                })
                .constraint(move |u: &[f64]| self.model.score(&to_values(u)) - required)
                .rho(SOLVER_RHO_BEGIN, SOLVER_RHO_END)
                .max_evals(SOLVER_EVALS_PER_FEATURE * k);
                for i in 0..k {
                    let (l, h) = (lo[i], hi[i]);
                    problem = problem.constraint(move |u: &[f64]| u[i] - l).constraint(move |u: &[f64]| h - u[i]);
                }
                let r = cobyla::minimize(&problem);
                let raw: DeltaMap = (0..k).map(|i| (subset[i], r.x_best[i] * ranges[i])).collect();
                let q = fit_within_bounds(quantize_deltas(&raw, self.catalog), x, self.catalog);
                if let Some(c) = self.verify(&q) {
                    best = pick_better(best, Some(self.polish(c)));
                }
            }
            if best.is_some() {
                return best;
            }
            if self.config.flip_margin == 0.0 {
                break;
            }
        }
        None
    }

    /// Shrinks a verified candidate one step at a time while it still flips.
    fn polish(&self, mut c: Candidate) -> Candidate {
        loop {
            let mut improved = false;
            for j in c.delta.support() {
                let Some(step) = self.catalog.spec_at(j).min_change else { continue };
                let d = c.delta.0[&j];
                let mut trial = c.delta.clone();
                let shrunk = d - d.signum() * step;
                if shrunk.abs() < 0.5 * step {
                    trial.0.remove(&j);
                } else {
                    let k = (shrunk.abs() / step).round();
                    trial.0.insert(j, step_multiple(d.signum() * k, step));
                }
                if let Some(t) = self.verify(&trial) {
                    c = t;
                    improved = true;
                }
            }
            if !improved {
                return c;
            }
        }
    }

    /// Largest step counts `(up, down)` that keep feature `j` in bounds.
    fn step_limits(&self, j: usize, step: f64) -> (u64, u64) {
        let spec = self.catalog.spec_at(j);
        let x = self.x.values[j];
        let count = |dir: f64| {
            let room = if dir > 0.0 { spec.upper_bound - x } else { x - spec.lower_bound };
            let mut k = (room / step).floor().max(0.0) as u64;
            while k > 0 && !spec.contains(x + step_multiple(dir * k as f64, step)) {
                k -= 1;
            }
            while spec.contains(x + step_multiple(dir * (k + 1) as f64, step)) {
                k += 1;
            }
            k
        };
        (count(1.0), count(-1.0))
    }

    fn steps(&self, features: &[usize]) -> Result<Vec<f64>, CfxError> {
        features
            .iter()
            .map(|&j| {
                let s = self.catalog.spec_at(j);
                s.min_change.ok_or_else(|| CfxError::MissingStep(s.name.clone()))
            })
            .collect()
    }

    /// Exact best-first search of one subset's lattice. Candidates at or
    /// beyond `incumbent` are not explored: an earlier subset wins ties.
    fn grid_subset(
        &self,
        subset: &[usize],
        incumbent: Option<f64>,
        visited_budget: &mut u64,
    ) -> Result<Option<Candidate>, CfxError> {
        let k = subset.len();
        let steps = self.steps(subset)?;
        let limits: Vec<(u64, u64)> = subset.iter().zip(&steps).map(|(&j, &s)| self.step_limits(j, s)).collect();
        let max_mag: Vec<u64> = limits.iter().map(|(u, d)| *u.max(d)).collect();
        if max_mag.contains(&0) {
            return Ok(None);
        }
        let magnitude_delta = |mags: &[u64]| -> DeltaMap {
            (0..k).map(|i| (subset[i], step_multiple(mags[i] as f64, steps[i]))).collect()
        };
        let cost = |mags: &[u64]| magnitude_delta(mags).distance(self.weights);

        // min-heap on (cost, magnitudes)
        let mut frontier: BTreeMap<(OrdF64, Vec<u64>), ()> = BTreeMap::new();
        let mut seen: HashSet<Vec<u64>> = HashSet::new();
        let first = vec![1u64; k];
        frontier.insert((OrdF64(cost(&first)), first.clone()), ());
        seen.insert(first);

        while let Some(((OrdF64(c), _), _)) = frontier.first_key_value().map(|(k, v)| (k.clone(), *v)) {
            if incumbent.is_some_and(|inc| c >= inc) {
                return Ok(None);
            }
            let mut group = Vec::new();
            while let Some(entry) = frontier.first_entry() {
                if entry.key().0 .0 != c {
                    break;
                }
                group.push(entry.remove_entry().0 .1);
            }
            let mut candidates: Vec<DeltaMap> = Vec::new();
            for mags in &group {
                for signs in 0u32..(1 << k) {
                    let ok = (0..k).all(|i| {
                        let negative = signs >> (k - 1 - i) & 1 == 1;
                        mags[i] <= if negative { limits[i].1 } else { limits[i].0 }
                    });
                    if ok {
                        candidates.push(
                            (0..k)
                                .map(|i| {
                                    let sign = if signs >> (k - 1 - i) & 1 == 1 { -1.0 } else { 1.0 };
                                    (subset[i], step_multiple(sign * mags[i] as f64, steps[i]))
                                })
                                .collect(),
                        );
                    }
                }
                for i in 0..k {
                    if mags[i] < max_mag[i] {
                        let mut next = mags.clone();
                        next[i] += 1;
                        if seen.insert(next.clone()) {
                            frontier.insert((OrdF64(cost(&next)), next), ());
                        }
                    }
                }
            }
            candidates.sort_by(delta_order);
            for delta in candidates {
                *visited_budget += 1;
                if *visited_budget > GRID_SEARCH_LIMIT {
                    return Err(CfxError::SearchTooLarge { limit: GRID_SEARCH_LIMIT });
                }
                if let Some(found) = self.verify(&delta) {
                    return Ok(Some(found));
                }
            }
        }
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn prepare<M: ScoreModel + ?Sized>(
    model: &M,
    x: &FeatureVector,
    catalog: &FeatureCatalog,
    weights: &DistanceWeights,
    config: &CfxConfig,
) -> Result<f64, CfxError> {
    config.validate()?;
    for got in [x.values.len(), model.n_features(), weights.len()] {
        if got != catalog.len() {
            return Err(CfxError::DimensionMismatch { expected: catalog.len(), got });
        }
    }
    let score = model.score(&x.values);
    if score >= config.flip_threshold {
        return Err(CfxError::AlreadySick { score, threshold: config.flip_threshold });
    }
    Ok(score)
}

fn finish(x: &FeatureVector, score_original: f64, best: Option<Candidate>, subsets_searched: usize) -> CounterfactualResult {
    match best {
        Some(c) => CounterfactualResult {
            x_cf: x.with_values(c.delta.apply(&x.values)),
            delta: c.delta,
            score_original,
            score_cf: c.score,
            distance: c.distance,
            subsets_searched,
            status: CfxStatus::Found,
        },
        None => CounterfactualResult {
            delta: DeltaMap::default(),
            x_cf: x.clone(),
            score_original,
            score_cf: score_original,
            distance: 0.0,
            subsets_searched,
            status: CfxStatus::NotFound,
        },
    }
}

/// Searches every eligible subset of up to `max_changes` features for the
/// closest verified flip to Sick.
pub fn find_counterfactual<M: ScoreModel + ?Sized>(
    model: &M,
    x: &FeatureVector,
    catalog: &FeatureCatalog,
    weights: &DistanceWeights,
    config: &CfxConfig,
) -> Result<CounterfactualResult, CfxError> {
    let score_original = prepare(model, x, catalog, weights, config)?;
    let search = Search { model, x, catalog, weights, config };
    let subsets = feature_subsets(&catalog.eligible_indices(), config.max_changes);

    let best = if config.grid_mode {
        search.steps(&catalog.eligible_indices())?;
        let mut best: Option<Candidate> = None;
        let mut budget = 0u64;
        for subset in &subsets {
            let found = search.grid_subset(subset, best.as_ref().map(|c| c.distance), &mut budget)?;
            best = pick_better(best, found);
        }
        best
    } else {
        subsets
            .par_iter()
            .map(|s| search.continuous_subset(s))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(None, pick_better)
    };
    Ok(finish(x, score_original, best, subsets.len()))
}

/// Exhaustive enumeration of every lattice point with up to `max_changes`
/// nonzero deltas. Exact but exponential; used as the test oracle.
pub fn brute_force_counterfactual<M: ScoreModel + ?Sized>(
    model: &M,
    x: &FeatureVector,
    catalog: &FeatureCatalog,
    weights: &DistanceWeights,
    config: &CfxConfig,
) -> Result<CounterfactualResult, CfxError> {
    let score_original = prepare(model, x, catalog, weights, config)?;
    let search = Search { model, x, catalog, weights, config };
    let eligible = catalog.eligible_indices();
    let steps: BTreeMap<usize, f64> = eligible.iter().copied().zip(search.steps(&eligible)?).collect();
    let choices: BTreeMap<usize, Vec<f64>> = eligible
        .iter()
        .map(|&j| {
            let step = steps[&j];
            let (up, down) = search.step_limits(j, step);
            let ks = (1..=down).rev().map(|k| -(k as f64)).chain((1..=up).map(|k| k as f64));
            (j, ks.map(|k| step_multiple(k, step)).collect())
        })
        .collect();

    let subsets = feature_subsets(&eligible, config.max_changes);
    let total: u128 = subsets.iter().map(|s| s.iter().map(|j| choices[j].len() as u128).product::<u128>()).sum();
    if total > GRID_SEARCH_LIMIT as u128 {
        return Err(CfxError::SearchTooLarge { limit: GRID_SEARCH_LIMIT });
    }

    let mut best: Option<Candidate> = None;
    for subset in &subsets {
        let options: Vec<&Vec<f64>> = subset.iter().map(|j| &choices[j]).collect();
        if options.iter().any(|o| o.is_empty()) {
            continue;
        }
        let mut odometer = vec![0usize; subset.len()];
        loop {
            let delta: DeltaMap = subset.iter().enumerate().map(|(i, &j)| (j, options[i][odometer[i]])).collect();
            if let Some(c) = search.verify(&delta) {
                best = pick_better(best, Some(c));
            }
            let mut i = 0;
            loop {
                odometer[i] += 1;
                if odometer[i] < options[i].len() {
                    break;
                }
                odometer[i] = 0;
                i += 1;
                if i == subset.len() {
                    break;
                }
            }
            if i == subset.len() {
                break;
            }
        }
    }
    Ok(finish(x, score_original, best, subsets.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featcat::{default_catalog, Confidence, FeatureKind, FeatureSpec};

    struct Threshold {
        feature: usize,
        above: f64,
        n: usize,
    }

    impl ScoreModel for Threshold {
        fn n_features(&self) -> usize {
            self.n
        }
        fn score(&self, v: &[f64]) -> f64 {
            if v[self.feature] > self.above {
                0.9
            } else {
                0.1
            }
        }
    }

    fn spec(name: &str, step: Option<f64>, lower: f64, upper: f64) -> FeatureSpec {
        FeatureSpec::new(name, "units", FeatureKind::Current, true, None, Confidence::High, step, (lower, upper), false)
    }

    #[test]
    fn mad_examples() {
        let cat = FeatureCatalog::new("t", vec![spec("a", None, 0.0, 10.0), spec("b", None, 0.0, 100.0)]).unwrap();
        let rows = vec![[1.0, 7.0], [2.0, 7.0], [3.0, 7.0], [4.0, 7.0], [5.0, 7.0]];
        let w = mad_weights(&rows, &cat).unwrap();
        assert_eq!(w.mad, vec![1.0, 0.0]);
        assert_eq!(w.w[0], 1.0);
        assert_eq!(w.w[1], 1.0 / (1e-6 * 100.0));
        assert_eq!(w.fallback_applied, BTreeSet::from([1]));
        assert_eq!(mad_weights(&rows[..1], &cat), Err(CfxError::TooFewRows(1)));
        let empty: Vec<[f64; 2]> = vec![];
        assert_eq!(mad_weights(&empty, &cat), Err(CfxError::TooFewRows(0)));
    }

    #[test]
    fn weights_file_round_trip() {
        let cat = default_catalog();
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("herd.json");
        let path = weights_path_for(&model);
        assert_eq!(path, dir.path().join("herd.weights.json"));
        let mut mad = vec![0.5; cat.len()];
        mad[3] = 0.0;
        let w = DistanceWeights::from_mad(mad, &cat);
        w.save(&path, &cat).unwrap();
        assert_eq!(DistanceWeights::load(&path, &cat).unwrap(), w);
        let other = FeatureCatalog::new("other", cat.specs().to_vec()).unwrap();
        assert!(matches!(DistanceWeights::load(&path, &other), Err(CfxError::WeightsFile { .. })));
    }

    #[test]
    fn manhattan_examples() {
        assert_eq!(weighted_manhattan(&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(weighted_manhattan(&[0.0, 0.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 3.0);
        assert_eq!(weighted_manhattan(&[0.0, 0.0], &[1.0, 2.0], &[2.0, 0.5]).unwrap(), 3.0);
        assert!(weighted_manhattan(&[0.0], &[1.0, 2.0], &[2.0, 0.5]).is_err());
    }

    #[test]
    fn quantize_examples() {
        let cat = default_catalog();
        let idx = |n: &str| cat.index_of(n).unwrap();
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("yield"), 1.5)]), &cat);
        assert_eq!(q.get(idx("yield")), Some(2.0));
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("bcs"), -0.30)]), &cat);
        assert_eq!(q.get(idx("bcs")), Some(-0.5));
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("fat_pct"), 0.005)]), &cat);
        assert!(q.is_empty());
        // solver noise just above a multiple does not add a step
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("bcs"), 0.7500000001)]), &cat);
        assert_eq!(q.get(idx("bcs")), Some(0.75));
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("protein_pct"), 0.13)]), &cat);
        assert_eq!(q.get(idx("protein_pct")), Some(0.15));
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("lactose_pct"), 0.0123456)]), &cat);
        assert_eq!(q.get(idx("lactose_pct")), Some(0.0124));
        let q = quantize_deltas(&DeltaMap::from_iter([(idx("lactose_pct"), -4.00001)]), &cat);
        assert_eq!(q.get(idx("lactose_pct")), Some(-4.01));
    }

    fn scc_catalog() -> FeatureCatalog {
        FeatureCatalog::new(
            "t",
            vec![spec("scc", Some(25.0), 0.0, 5000.0), spec("yield", Some(2.0), 0.0, 80.0)],
        )
        .unwrap()
    }

    #[test]
    fn threshold_model_needs_plus_75() {
        let cat = scc_catalog();
        let model = Threshold { feature: 0, above: 200.0, n: 2 };
        let weights = DistanceWeights::from_mad(vec![50.0, 4.0], &cat);
        let x = FeatureVector::new("c", "2018-05-01".parse().unwrap(), vec![150.0, 20.0]);
        for grid_mode in [false, true] {
            let cfg = CfxConfig { grid_mode, ..CfxConfig::default() };
            let r = find_counterfactual(&model, &x, &cat, &weights, &cfg).unwrap();
            assert_eq!(r.status, CfxStatus::Found);
            assert_eq!(r.delta, DeltaMap::from_iter([(0, 75.0)]), "grid_mode={grid_mode}");
            assert_eq!(r.score_cf, 0.9);
            assert_eq!(r.x_cf.values, vec![225.0, 20.0]);
        }
        let oracle = brute_force_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()).unwrap();
        assert_eq!(oracle.delta, DeltaMap::from_iter([(0, 75.0)]));
    }

    #[test]
    fn constant_model_not_found() {
        let cat = default_catalog();
        let model = crate::gbm::Ensemble::prior_only(cat.version.clone(), cat.len(), (0.1f64 / 0.9).ln());
        let weights = DistanceWeights::from_mad(vec![1.0; cat.len()], &cat);
        let mut values: Vec<f64> = cat.specs().iter().map(|s| (s.lower_bound + s.upper_bound) / 2.0).collect();
        values[0] = 100.0;
        let x = FeatureVector::new("c", "2018-05-01".parse().unwrap(), values);
        let r = find_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()).unwrap();
        assert_eq!(r.status, CfxStatus::NotFound);
        assert_eq!(r.subsets_searched, 7 + 21 + 35);
        assert!(r.delta.is_empty());
    }

    #[test]
    fn already_sick_and_bad_config() {
        let cat = scc_catalog();
        let model = Threshold { feature: 0, above: 200.0, n: 2 };
        let weights = DistanceWeights::from_mad(vec![50.0, 4.0], &cat);
        let x = FeatureVector::new("c", "2018-05-01".parse().unwrap(), vec![300.0, 20.0]);
        assert!(matches!(
            find_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()),
            Err(CfxError::AlreadySick { .. })
        ));
        assert!(matches!(
            brute_force_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()),
            Err(CfxError::AlreadySick { .. })
        ));
        let cfg = CfxConfig { max_changes: 0, ..CfxConfig::default() };
        assert!(matches!(find_counterfactual(&model, &x, &cat, &weights, &cfg), Err(CfxError::InvalidConfig(_))));
    }

    #[test]
    fn empty_eligible_set_not_found() {
        let s = FeatureSpec::new("scc", "u", FeatureKind::Current, false, None, Confidence::High, Some(25.0), (0.0, 5000.0), true);
        let cat = FeatureCatalog::new("t", vec![s]).unwrap();
        let model = Threshold { feature: 0, above: 200.0, n: 1 };
        let weights = DistanceWeights::from_mad(vec![50.0], &cat);
        let x = FeatureVector::new("c", "2018-05-01".parse().unwrap(), vec![150.0]);
        let r = brute_force_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()).unwrap();
        assert_eq!(r.status, CfxStatus::NotFound);
    }

    #[test]
    fn missing_step_rejected_by_grid_searches() {
        let cat = FeatureCatalog::new("t", vec![spec("a", None, 0.0, 10.0)]).unwrap();
        let model = Threshold { feature: 0, above: 5.0, n: 1 };
        let weights = DistanceWeights::from_mad(vec![1.0], &cat);
        let x = FeatureVector::new("c", "2018-05-01".parse().unwrap(), vec![1.0]);
        let grid = CfxConfig { grid_mode: true, ..CfxConfig::default() };
        assert_eq!(find_counterfactual(&model, &x, &cat, &weights, &grid), Err(CfxError::MissingStep("a".into())));
        assert!(matches!(
            brute_force_counterfactual(&model, &x, &cat, &weights, &grid),
            Err(CfxError::MissingStep(_))
        ));
        // the continuous search still works without a step
        let r = find_counterfactual(&model, &x, &cat, &weights, &CfxConfig::default()).unwrap();
        assert_eq!(r.status, CfxStatus::Found);
        assert!(r.x_cf.values[0] > 5.0);
    }

    #[test]
    fn step_multiples_are_canonical() {
        assert_eq!(step_multiple(3.0, 0.05), 0.15);
        assert_eq!(step_multiple(-7.0, 0.25), -1.75);
        assert_eq!(step_multiple(3.0, 25.0), 75.0);
        assert!(is_step_multiple(0.15, 0.05));
        assert!(!is_step_multiple(3.0 * 0.05, 0.05));
        assert!(!is_step_multiple(0.16, 0.05));
        assert!(!is_step_multiple(0.0, 0.05));
        assert!(is_step_multiple(-2.0, 2.0));
    }

    #[test]
    fn subsets_in_size_then_lexicographic_order() {
        let s = feature_subsets(&[1, 4, 6], 2);
        assert_eq!(s, vec![vec![1], vec![4], vec![6], vec![1, 4], vec![1, 6], vec![4, 6]]);
    }

    #[test]
    fn bounds_pull_back() {
        let cat = default_catalog();
        let bcs = cat.index_of("bcs").unwrap();
        let mut x = vec![0.0; cat.len()];
        x[bcs] = 4.9;
        let d = fit_within_bounds(DeltaMap::from_iter([(bcs, 0.25)]), &x, &cat);
        assert!(d.is_empty());
        let d = fit_within_bounds(DeltaMap::from_iter([(bcs, -0.5)]), &x, &cat);
        assert_eq!(d.get(bcs), Some(-0.5));
    }
}
