use std::sync::OnceLock;

use mastitis_core::cfx::*;
use mastitis_core::checks::{toy_catalog, toy_model};
use mastitis_core::dataset::FeatureVector;
use mastitis_core::featcat::FeatureCatalog;
use mastitis_core::gbm::{Ensemble, ScoreModel};
use proptest::prelude::*;

struct Fixture {
    catalog: FeatureCatalog,
    model: Ensemble,
    weights: DistanceWeights,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let catalog = toy_catalog();
        let (model, rows) = toy_model(11);
        let weights = mad_weights(&rows, &catalog).unwrap();
        Fixture { catalog, model, weights }
    })
}

/// Healthy toy instances drawn from unit-cube coordinates.
fn healthy_instance() -> impl Strategy<Value = FeatureVector> {
    prop::collection::vec(0.0f64..=1.0, 5).prop_filter_map("predicted sick", |u| {
        let f = fixture();
        let values: Vec<f64> =
            f.catalog.specs().iter().zip(&u).map(|(s, t)| s.lower_bound + t * s.range()).collect();
        (f.model.score(&values) < 0.5).then(|| FeatureVector::new("p", chrono::NaiveDate::MIN, values))
    })
}

fn distance_or_inf(r: &CounterfactualResult) -> f64 {
    if r.is_found() {
        r.distance
    } else {
        f64::INFINITY
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn found_results_are_valid_sparse_and_on_policy(x in healthy_instance()) {
        let f = fixture();
        for grid_mode in [false, true] {
            let cfg = CfxConfig { grid_mode, ..CfxConfig::default() };
            let r = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &cfg).unwrap();
            if !r.is_found() {
                prop_assert!(r.delta.is_empty());
                continue;
            }
            prop_assert!(!r.delta.is_empty());
            prop_assert!(r.delta.len() <= 3);
            let eligible = f.catalog.eligible_indices();
            for (j, d) in r.delta.iter() {
                prop_assert!(eligible.contains(&j));
                let spec = f.catalog.spec_at(j);
                prop_assert!(is_step_multiple(d, spec.min_change.unwrap()), "{} not a step multiple", d);
                prop_assert!(spec.contains(r.x_cf.values[j]));
            }
            prop_assert_eq!(&r.x_cf.values, &r.delta.apply(&x.values));
            let rescored = f.model.score(&r.x_cf.values);
            prop_assert_eq!(rescored, r.score_cf);
            prop_assert!(rescored >= cfg.flip_threshold + cfg.flip_margin);
            prop_assert_eq!(r.distance, r.delta.distance(&f.weights));
        }
    }

    #[test]
    fn continuous_within_one_step_of_grid_optimum(x in healthy_instance()) {
        let f = fixture();
        let slack = f
            .catalog
            .eligible_indices()
            .iter()
            .map(|&j| f.weights.w[j] * f.catalog.spec_at(j).min_change.unwrap())
            .fold(0.0, f64::max);
        let grid = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &CfxConfig { grid_mode: true, ..CfxConfig::default() }).unwrap();
        let cont = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &CfxConfig::default()).unwrap();
        prop_assert!(distance_or_inf(&cont) >= distance_or_inf(&grid));
        if grid.is_found() {
            prop_assert!(cont.distance <= grid.distance + slack + 1e-9,
                "continuous {} vs grid {} + {}", cont.distance, grid.distance, slack);
        }
    }

    #[test]
    fn enlarging_max_changes_never_increases_distance(x in healthy_instance(), grid_mode in any::<bool>()) {
        let f = fixture();
        let mut last = f64::INFINITY;
        for max_changes in 1..=4 {
            let cfg = CfxConfig { max_changes, grid_mode, ..CfxConfig::default() };
            let r = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &cfg).unwrap();
            prop_assert!(r.delta.len() <= max_changes);
            let d = distance_or_inf(&r);
            prop_assert!(d <= last, "max_changes {}: {} > {}", max_changes, d, last);
            last = d;
        }
    }

    #[test]
    fn grid_matches_brute_force(x in healthy_instance(), max_changes in 1usize..=3) {
        let f = fixture();
        let cfg = CfxConfig { max_changes, grid_mode: true, ..CfxConfig::default() };
        let g = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &cfg).unwrap();
        let b = brute_force_counterfactual(&f.model, &x, &f.catalog, &f.weights, &cfg).unwrap();
        prop_assert_eq!(g.status, b.status);
        prop_assert_eq!(g.distance, b.distance);
        prop_assert_eq!(g.delta, b.delta);
    }

    #[test]
    fn repeated_calls_are_identical(x in healthy_instance()) {
        let f = fixture();
        let a = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &CfxConfig::default()).unwrap();
        let b = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &CfxConfig::default()).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn document_lists_deltas_in_catalog_order() {
    let f = fixture();
    let x = FeatureVector::new("7", chrono::NaiveDate::MIN, vec![0.5, 2.5, 0.25, 1.0, 0.05]);
    assert!(f.model.score(&x.values) < 0.5);
    let r = find_counterfactual(&f.model, &x, &f.catalog, &f.weights, &CfxConfig::default()).unwrap();
    let doc = r.document(&x, &f.catalog, &f.weights);
    assert_eq!(doc.original.len(), 5);
    assert_eq!(doc.counterfactual.len(), 5);
    let names: Vec<&str> = doc.deltas.iter().map(|d| d.feature.as_str()).collect();
    let mut sorted = names.clone();
    sorted.sort_by_key(|n| f.catalog.index_of(n));
    assert_eq!(names, sorted);
    let total: f64 = doc.deltas.iter().map(|d| d.contribution).sum();
    assert!((total - doc.distance).abs() < 1e-12);
    let json = serde_json::to_string(&doc).unwrap();
    let back: CounterfactualDocument = serde_json::from_str(&json).unwrap();
    assert_eq!(back, doc);
}
