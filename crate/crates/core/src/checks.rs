//! Self-checks against independent oracles: the COBYLA example suite,
//! statistics versus naive reference code, and grid-mode counterfactuals
//! versus exhaustive enumeration. Shared by `mastitis oracle-check` and the
//! acceptance harness.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use crate::cfx::{self, CfxConfig, CfxError, CfxStatus, DistanceWeights};
use crate::cobyla::{self, OptProblem, OptResult, OptStatus};
use crate::dataset::FeatureVector;
use crate::featcat::{Confidence, FeatureCatalog, FeatureKind, FeatureSpec};
use crate::gbm::{self, Ensemble, ScoreModel, TrainConfig};
use crate::{oracle, stats};

/// Computes distance weights from training rows; swappable so a broken
/// implementation can be shown to fail.
pub type WeightsFn = fn(&[Vec<f64>], &FeatureCatalog) -> Result<DistanceWeights, CfxError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, failures: Vec<String>, ok_detail: String) -> Self {
        match failures.first() {
            None => CheckOutcome { name, passed: true, detail: ok_detail },
            Some(first) => CheckOutcome {
                name,
                passed: false,
                detail: format!("{} failure(s); first: {first}", failures.len()),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Random vectors per numeric oracle.
    pub n_vectors: usize,
    /// Random toy instances compared in the grid equivalence check.
    pub n_instances: usize,
    /// Repeated solver runs for the budget and determinism invariants.
    pub cobyla_repeats: usize,
    pub seed: u64,
    pub weights_fn: WeightsFn,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { n_vectors: 1000, n_instances: 50, cobyla_repeats: 100, seed: 1, weights_fn: default_weights }
    }
}

impl CheckOptions {
    /// `n` toy instances and `20 * n` random vectors.
    pub fn scaled(n: usize, seed: u64) -> Self {
        CheckOptions { n_vectors: 20 * n, n_instances: n, seed, ..CheckOptions::default() }
    }
}

fn default_weights(rows: &[Vec<f64>], catalog: &FeatureCatalog) -> Result<DistanceWeights, CfxError> {
    cfx::mad_weights(rows, catalog)
}

pub fn run_all(opts: &CheckOptions) -> Vec<CheckOutcome> {
    let mut out = cobyla_examples();
    out.push(cobyla_invariants(opts.cobyla_repeats));
    out.push(skewness_oracle(opts.n_vectors, opts.seed));
    out.push(mad_oracle(opts.n_vectors, opts.seed));
    out.push(mad_fallback(opts.weights_fn));
    out.push(manhattan_hand_cases());
    out.push(grid_equivalence(opts.n_instances, opts.seed, opts.weights_fn));
    out
}

fn quadratic() -> OptProblem<'static> {
    OptProblem::new(vec![0.0], |x| (x[0] - 1.0).powi(2)).rho(0.5, 1e-8)
}

fn disc() -> OptProblem<'static> {
    OptProblem::new(vec![0.0, 0.0], |x| x[0] + x[1]).constraint(|x| 1.0 - x[0] * x[0] - x[1] * x[1]).rho(0.5, 1e-6)
}

fn rosenbrock(x: &[f64]) -> f64 {
    10.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
}

fn rosenbrock_halfplane() -> OptProblem<'static> {
    OptProblem::new(vec![-1.0, 1.0], rosenbrock).constraint(|x| 1.0 - x[0] - x[1])
}

/// Minimum over the 1e-3 grid on [-2, 2]^2 restricted to x + y <= 1.
pub fn rosenbrock_grid_minimum() -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..=4000 {
        let x = -2.0 + i as f64 * 1e-3;
        for j in 0..=4000 {
            let y = -2.0 + j as f64 * 1e-3;
            if x + y <= 1.0 + 1e-12 {
                best = best.min(rosenbrock(&[x, y]));
            }
        }
    }
    best
}

/// The three reference problems at their stated tolerances.
pub fn cobyla_examples() -> Vec<CheckOutcome> {
    let mut out = Vec::new();

    let r = cobyla::minimize(&quadratic());
    let err = (r.x_best[0] - 1.0).abs();
    out.push(CheckOutcome::new(
        "cobyla_quadratic",
        if err <= 1e-6 { vec![] } else { vec![format!("|x - 1| = {err:e} > 1e-6 ({r:?})")] },
        format!("|x - 1| = {err:.1e}, {} evals", r.n_evals),
    ));

    let r = cobyla::minimize(&disc());
    let t = -std::f64::consts::FRAC_1_SQRT_2;
    let err = (r.x_best[0] - t).abs().max((r.x_best[1] - t).abs());
    out.push(CheckOutcome::new(
        "cobyla_disc",
        if err <= 1e-5 { vec![] } else { vec![format!("max |x - x*| = {err:e} > 1e-5 ({r:?})")] },
        format!("max |x - x*| = {err:.1e}, {} evals", r.n_evals),
    ));

    let r = cobyla::minimize(&rosenbrock_halfplane());
    let grid = rosenbrock_grid_minimum();
    let gap = (r.f_best - grid).abs();
    let mut failures = Vec::new();
    if gap > 1e-3 {
        failures.push(format!("|f - f_grid| = {gap:e} > 1e-3 (f = {}, grid = {grid})", r.f_best));
    }
    if r.max_violation > 1e-6 {
        failures.push(format!("infeasible result, violation {}", r.max_violation));
    }
    out.push(CheckOutcome::new(
        "cobyla_rosenbrock_grid",
        failures,
        format!("f = {:.6}, grid minimum = {grid:.6}, gap {gap:.1e}", r.f_best),
    ));
    out
}

fn same_result(a: &OptResult, b: &OptResult) -> bool {
    a.status == b.status
        && a.n_evals == b.n_evals
        && a.f_best.to_bits() == b.f_best.to_bits()
        && a.max_violation.to_bits() == b.max_violation.to_bits()
        && a.x_best.iter().map(|v| v.to_bits()).eq(b.x_best.iter().map(|v| v.to_bits()))
}

/// Budget: objective calls never exceed `max_evals` for budgets 1..=repeats.
/// Determinism: each example repeated `repeats` times is bit-identical.
pub fn cobyla_invariants(repeats: usize) -> CheckOutcome {
    let mut failures = Vec::new();
    for budget in 1..=repeats {
        let calls = AtomicUsize::new(0);
        let p = OptProblem::new(vec![-1.0, 1.0], |x| {
            calls.fetch_add(1, Ordering::Relaxed);
            rosenbrock(x)
        })
        .constraint(|x| 1.0 - x[0] - x[1])
        .max_evals(budget);
        let r = cobyla::minimize(&p);
        let calls = calls.load(Ordering::Relaxed);
        if calls > budget || r.n_evals > budget {
            failures.push(format!("budget {budget}: {calls} calls, n_evals {}", r.n_evals));
        }
        if r.n_evals < budget && r.status == OptStatus::MaxEvals {
            failures.push(format!("budget {budget}: MaxEvals after only {} evals", r.n_evals));
        }
    }
    for (name, make) in [
        ("quadratic", quadratic as fn() -> OptProblem<'static>),
        ("disc", disc),
        ("rosenbrock", rosenbrock_halfplane),
    ] {
        let first = cobyla::minimize(&make());
        for run in 1..repeats {
            if !same_result(&first, &cobyla::minimize(&make())) {
                failures.push(format!("{name}: run {run} differs from run 0"));
                break;
            }
        }
    }
    CheckOutcome::new(
        "cobyla_budget_and_determinism",
        failures,
        format!("{repeats} budgets and {repeats} repeats per example"),
    )
}

fn random_series(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = rng.random_range(3..=60);
    // milk series have a coefficient of variation of at least about 1%
    let center = rng.random_range(0.5..300.0);
    let spread = center * rng.random_range(0.01..1.0);
    if rng.random_bool(0.5) {
        let d = Normal::new(center, spread).expect("valid normal");
        (0..n).map(|_| d.sample(rng)).collect()
    } else {
        let d = LogNormal::new(0.0, rng.random_range(0.1..1.5)).expect("valid lognormal");
        (0..n).map(|_| center + spread * d.sample(rng)).collect()
    }
}

pub fn skewness_oracle(n_vectors: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..n_vectors {
        let v = random_series(&mut rng);
        let (fast, slow) = (stats::skewness(&v), oracle::skewness_direct(&v));
        let err = (fast - slow).abs();
        worst = worst.max(err);
        if !(err <= 1e-12) {
            failures.push(format!("vector {i} (len {}): {fast} vs {slow}", v.len()));
        }
    }
    CheckOutcome::new("skewness_oracle", failures, format!("{n_vectors} vectors, max error {worst:.1e}"))
}

pub fn mad_oracle(n_vectors: usize, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6164);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..n_vectors {
        let mut v = random_series(&mut rng);
        if i % 2 == 0 {
            // rounding produces ties, the awkward case for selection
            v.iter_mut().for_each(|x| *x = (*x * 10.0).round() / 10.0);
        }
        let fast = stats::mad(&v).expect("non-empty, finite");
        let slow = oracle::mad_sorted(&v);
        let err = (fast - slow).abs();
        worst = worst.max(err);
        if !(err <= 1e-12) {
            failures.push(format!("vector {i} (len {}): {fast} vs {slow}", v.len()));
        }
    }
    CheckOutcome::new("mad_oracle", failures, format!("{n_vectors} vectors, max error {worst:.1e}"))
}

fn toy_spec(name: &str, step: f64, upper: f64) -> FeatureSpec {
    FeatureSpec::new(name, "units", FeatureKind::Current, true, None, Confidence::High, Some(step), (0.0, upper), false)
}

/// Zero-MAD columns must fall back to `1 / (1e-6 * range)` and be recorded.
pub fn mad_fallback(weights_fn: WeightsFn) -> CheckOutcome {
    let catalog = FeatureCatalog::new("check", vec![toy_spec("a", 1.0, 10.0), toy_spec("b", 1.0, 200.0)])
        .expect("valid catalog");
    let rows: Vec<Vec<f64>> = (1..=5).map(|i| vec![i as f64, 7.0]).collect();
    let mut failures = Vec::new();
    match weights_fn(&rows, &catalog) {
        Ok(w) => {
            if w.w[0] != 1.0 {
                failures.push(format!("MAD 1 should give weight 1, got {}", w.w[0]));
            }
            let expected = 1.0 / (cfx::MAD_FALLBACK_FRACTION * 200.0);
            if w.w[1] != expected {
                failures.push(format!("constant column weight {} != {expected}", w.w[1]));
            }
            if !w.fallback_applied.contains(&1) || w.fallback_applied.contains(&0) {
                failures.push(format!("fallback set {:?} != {{1}}", w.fallback_applied));
            }
        }
        Err(e) => failures.push(e.to_string()),
    }
    CheckOutcome::new("mad_fallback", failures, "constant column falls back to 1/(1e-6 * range)".into())
}

pub fn manhattan_hand_cases() -> CheckOutcome {
    let cases: [(&[f64], &[f64], &[f64], f64); 5] = [
        (&[1.0, 2.0], &[1.0, 2.0], &[3.0, 4.0], 0.0),
        (&[0.0, 0.0], &[1.0, 2.0], &[1.0, 1.0], 3.0),
        (&[0.0, 0.0], &[1.0, 2.0], &[2.0, 0.5], 3.0),
        (&[5.0, -1.0, 2.0], &[3.0, 1.0, 2.0], &[0.5, 0.25, 10.0], 1.5),
        (&[150.0], &[225.0], &[1.0 / 25.0], 3.0),
    ];
    let mut failures = Vec::new();
    for (i, (x, y, w, expected)) in cases.iter().enumerate() {
        match cfx::weighted_manhattan(x, y, w) {
            Ok(d) if d == *expected => {}
            other => failures.push(format!("case {i}: {other:?} != {expected}")),
        }
    }
    if cfx::weighted_manhattan(&[0.0], &[0.0, 1.0], &[1.0, 1.0]).is_ok() {
        failures.push("dimension mismatch accepted".into());
    }
    CheckOutcome::new("weighted_manhattan", failures, format!("{} hand cases exact", cases.len()))
}

/// Five features whose bounds allow six steps each from the lower bound.
pub fn toy_catalog() -> FeatureCatalog {
    let steps = [1.0, 0.5, 0.25, 2.0, 0.1];
    let specs = steps
        .iter()
        .enumerate()
        .map(|(i, &s)| toy_spec(&format!("f{i}"), s, cfx::step_multiple(6.0, s)))
        .collect();
    FeatureCatalog::new("toy", specs).expect("valid toy catalog")
}

/// A small boosted model on the toy catalog with an interaction-heavy label.
pub fn toy_model(seed: u64) -> (Ensemble, Vec<Vec<f64>>) {
    let catalog = toy_catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..1500)
        .map(|_| catalog.specs().iter().map(|s| rng.random_range(s.lower_bound..=s.upper_bound)).collect())
        .collect();
    let labels: Vec<bool> = rows
        .iter()
        .map(|r| {
            let z = 0.8 * r[0] - 1.2 * r[1] + 2.0 * r[2] * r[4] + 0.3 * r[3] - 3.0;
            z + rng.random_range(-1.0..1.0) > 0.0
        })
        .collect();
    let config = TrainConfig {
        n_trees: 25,
        max_depth: 3,
        min_samples_leaf: 10,
        positive_class_weight: 1.0,
        seed,
        ..TrainConfig::default()
    };
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let (model, _) = gbm::train_matrix(&refs, &labels, &config, &catalog.version).expect("toy data has both classes");
    (model, rows)
}

/// Grid-mode search against brute force on random toy instances predicted
/// healthy; distances must agree exactly.
pub fn grid_equivalence(n_instances: usize, seed: u64, weights_fn: WeightsFn) -> CheckOutcome {
    let catalog = toy_catalog();
    let (model, rows) = toy_model(seed);
    let weights = match weights_fn(&rows, &catalog) {
        Ok(w) => w,
        Err(e) => return CheckOutcome::new("grid_vs_brute_force", vec![e.to_string()], String::new()),
    };
    let config = CfxConfig { grid_mode: true, ..CfxConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut failures = Vec::new();
    let (mut compared, mut found) = (0, 0);
    let mut attempts = 0;
    while compared < n_instances && attempts < 1000 * n_instances.max(1) {
        attempts += 1;
        let values: Vec<f64> =
            catalog.specs().iter().map(|s| rng.random_range(s.lower_bound..=s.upper_bound)).collect();
        if model.score(&values) >= config.flip_threshold {
            continue;
        }
        let x = FeatureVector::new(format!("toy{compared}"), chrono::NaiveDate::MIN, values);
        compared += 1;
        let grid = cfx::find_counterfactual(&model, &x, &catalog, &weights, &config);
        let brute = cfx::brute_force_counterfactual(&model, &x, &catalog, &weights, &config);
        match (grid, brute) {
            (Ok(g), Ok(b)) => {
                if g.status != b.status || g.distance != b.distance {
                    failures.push(format!(
                        "instance {compared}: grid {:?} {} vs brute force {:?} {}",
                        g.status, g.distance, b.status, b.distance
                    ));
                } else if g.status == CfxStatus::Found {
                    found += 1;
                }
            }
            (g, b) => failures.push(format!("instance {compared}: {:?} / {:?}", g.err(), b.err())),
        }
    }
    if compared < n_instances {
        failures.push(format!("only {compared} healthy toy instances drawn"));
    }
    CheckOutcome::new(
        "grid_vs_brute_force",
        failures,
        format!("{compared} instances, {found} found, distances identical"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wrong_fallback(rows: &[Vec<f64>], catalog: &FeatureCatalog) -> Result<DistanceWeights, CfxError> {
        let mut w = cfx::mad_weights(rows, catalog)?;
        for &j in &w.fallback_applied.clone() {
            w.w[j] = 1.0;
        }
        Ok(w)
    }

    #[test]
    fn quick_suite_passes() {
        let outcomes = run_all(&CheckOptions { cobyla_repeats: 10, ..CheckOptions::scaled(5, 3) });
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn injected_fallback_fails_by_name() {
        let o = mad_fallback(wrong_fallback);
        assert!(!o.passed);
        assert_eq!(o.name, "mad_fallback");
        assert!(o.detail.contains("constant column"));
    }

    #[test]
    fn zero_instances_is_vacuous() {
        let o = grid_equivalence(0, 1, default_weights);
        assert!(o.passed, "{}", o.detail);
        assert!(skewness_oracle(0, 1).passed);
    }
}
