use mastitis_core::cfx::{CfxStatus, CounterfactualResult, DeltaMap, DistanceWeights};
use mastitis_core::dataset::FeatureVector;
use mastitis_core::featcat::{default_catalog, FeatureCatalog};
use mastitis_core::narrate::{render, render_intro_example, render_worked_example, NarrationStyle, NumberStyle};

fn golden(name: &str) -> String {
    let path = format!("{}/tests/fixtures/narration/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(path).unwrap().trim_end_matches('\n').to_string()
}

fn found(catalog: &FeatureCatalog, deltas: &[(&str, f64)]) -> (FeatureVector, CounterfactualResult) {
    let mut values: Vec<f64> = catalog.specs().iter().map(|s| s.lower_bound + s.range() / 4.0).collect();
    values[catalog.index_of("scc").unwrap()] = 100.0;
    let x = FeatureVector::new("c", "2018-06-01".parse().unwrap(), values);
    let delta: DeltaMap = deltas.iter().map(|(n, d)| (catalog.index_of(n).unwrap(), *d)).collect();
    let r = CounterfactualResult {
        x_cf: x.with_values(delta.apply(&x.values)),
        delta,
        score_original: 0.1,
        score_cf: 0.6,
        distance: 0.0,
        subsets_searched: 63,
        status: CfxStatus::Found,
    };
    (x, r)
}

fn pinned_weights(catalog: &FeatureCatalog) -> DistanceWeights {
    let mut mad = vec![1.0; catalog.len()];
    for (name, m) in [("scc", 13.0), ("yield", 4.1), ("bcs", 0.25)] {
        mad[catalog.index_of(name).unwrap()] = m;
    }
    DistanceWeights::from_mad(mad, catalog)
}

#[test]
fn worked_example_in_words() {
    let cat = default_catalog();
    let (x, r) = found(&cat, &[("yield", 1.5)]);
    let doc = r.document(&x, &cat, &pinned_weights(&cat));
    let text = render("42", &doc, &NarrationStyle::for_catalog(&cat, NumberStyle::Words)).unwrap();
    assert_eq!(text, golden("cow42_words.txt"));
    assert_eq!(render_worked_example(), text);
}

#[test]
fn two_clauses_in_digits_ordered_by_contribution() {
    let cat = default_catalog();
    let (x, r) = found(&cat, &[("scc", 50.0), ("bcs", -0.25)]);
    let doc = r.document(&x, &cat, &pinned_weights(&cat));
    assert!(doc.deltas[0].contribution > doc.deltas[1].contribution);
    let text = render("7", &doc, &NarrationStyle::for_catalog(&cat, NumberStyle::Digits)).unwrap();
    assert_eq!(text, golden("cow7_digits.txt"));

    // reversing the weights reverses the clauses
    let mut flipped = doc.clone();
    flipped.deltas.iter_mut().for_each(|d| d.contribution = 1.0 / d.contribution);
    let text = render("7", &flipped, &NarrationStyle::for_catalog(&cat, NumberStyle::Digits)).unwrap();
    assert!(text.starts_with("If cow #7 had a decrease of 0.25 units with respect to Body condition score and"));
}

#[test]
fn intro_absolute_sentence() {
    assert_eq!(render_intro_example(), golden("intro_absolute.txt"));
}

#[test]
fn rendering_is_deterministic() {
    let cat = default_catalog();
    let (x, r) = found(&cat, &[("scc", 50.0), ("bcs", -0.25), ("weight", 20.0)]);
    let doc = r.document(&x, &cat, &pinned_weights(&cat));
    let style = NarrationStyle::for_catalog(&cat, NumberStyle::Digits);
    let a = render("7", &doc, &style).unwrap();
    assert_eq!(a, render("7", &doc, &style).unwrap());
    for d in &doc.deltas {
        assert!(a.contains(&format!("{} units", d.delta.abs())));
    }
}
