//! Acceptance run: prints one PASS or FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mastitis_cli::{
    eval, synth, train, CatalogArgs, EvalArgs, EvalSummary, SearchArgs, SplitArgs, SynthArgs, TrainArgs,
    TrainSummary, COUNTERFACTUALS_FILE, DEFAULT_SPLIT_DATE,
};
use mastitis_core::cfx::{is_step_multiple, CfxStatus, CounterfactualDocument};
use mastitis_core::checks::{self, CheckOptions, CheckOutcome};
use mastitis_core::featcat::default_catalog;
use mastitis_core::gbm::{self, ScoreModel};
use mastitis_core::narrate::{render_intro_example, render_worked_example};
use mastitis_service::contract;
use sha2::{Digest, Sha256};

const SAMPLE_N: usize = 200;
const MIN_FOUND_RATE: f64 = 0.95;
const MAX_CHANGES: usize = 3;
const MIN_CF_SCORE: f64 = 0.55;
const EVAL_TIME_LIMIT: Duration = Duration::from_secs(300);
const MIN_TEST_AUC: f64 = 0.75;
const MIN_RECALL_H1: f64 = 0.7;

type Verdict = Result<String, String>;

struct Run {
    dir: PathBuf,
    train: TrainSummary,
    eval: EvalSummary,
    eval_time: Duration,
}

/// synth, train and eval on the pinned seed, all output under `dir`.
fn pipeline(dir: &Path) -> Result<Run, String> {
    let mut sink = std::io::sink();
    let herd = dir.join("herd");
    let model = dir.join("model.json");
    let split = SplitArgs {
        data_dir: herd.clone(),
        split_date: DEFAULT_SPLIT_DATE.parse().expect("valid date"),
        horizon: 7,
        threshold: 0.5,
        catalog: CatalogArgs { policy_file: None },
    };
    synth(&SynthArgs { config: None, seed: 1, out: herd.clone(), n_cows: None, n_days: None }, &mut sink)
        .map_err(|f| format!("synth: {f}"))?;
    let train = train(&TrainArgs { split: split.clone(), config: None, out_model: model.clone() }, &mut sink)
        .map_err(|f| format!("train: {f}"))?;
    let started = Instant::now();
    let eval = eval(
        &EvalArgs {
            split,
            model,
            report_dir: dir.join("report"),
            sample_n: SAMPLE_N,
            min_healthy_confidence: 0.8,
            seed: 1,
            search: SearchArgs { max_changes: MAX_CHANGES, grid: false },
        },
        &mut sink,
    )
    .map_err(|f| format!("eval: {f}"))?;
    Ok(Run { dir: dir.to_path_buf(), train, eval, eval_time: started.elapsed() })
}

fn counterfactual_validity(run: &Run) -> Verdict {
    let catalog = default_catalog();
    let model = gbm::load_model(run.dir.join("model.json"), &catalog).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(run.dir.join("report").join(COUNTERFACTUALS_FILE)).map_err(|e| e.to_string())?;
    let docs: Vec<CounterfactualDocument> =
        text.lines().map(serde_json::from_str).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    if docs.len() != SAMPLE_N {
        return Err(format!("{} instances sampled, expected {SAMPLE_N}", docs.len()));
    }
    let eligible: Vec<&str> = catalog.eligible_indices().iter().map(|&j| catalog.spec_at(j).name.as_str()).collect();
    let mut found = 0;
    for d in &docs {
        let original: Vec<f64> = d.original.iter().map(|v| v.value).collect();
        if model.score(&original) > 0.2 {
            return Err(format!("cow {} on {} sampled with P(Sick) above 0.2", d.cow_id, d.as_of));
        }
        if d.status != CfxStatus::Found {
            continue;
        }
        found += 1;
        let id = format!("cow {} on {}", d.cow_id, d.as_of);
        if d.deltas.is_empty() || d.deltas.len() > MAX_CHANGES {
            return Err(format!("{id}: {} changed features", d.deltas.len()));
        }
        let mut expected = original.clone();
        for delta in &d.deltas {
            if !eligible.contains(&delta.feature.as_str()) {
                return Err(format!("{id}: `{}` is not eligible for change", delta.feature));
            }
            let j = catalog.index_of(&delta.feature).ok_or("unknown feature")?;
            if let Some(step) = catalog.spec_at(j).min_change {
                if !is_step_multiple(delta.delta, step) {
                    return Err(format!("{id}: {} change {} is not a multiple of {step}", delta.feature, delta.delta));
                }
            }
            expected[j] += delta.delta;
        }
        let cf: Vec<f64> = d.counterfactual.iter().map(|v| v.value).collect();
        if cf != expected {
            return Err(format!("{id}: counterfactual vector is not original plus deltas"));
        }
        let rescored = model.score(&cf);
        if rescored < MIN_CF_SCORE || rescored != d.score_cf {
            return Err(format!("{id}: re-scored P(Sick) {rescored} (reported {})", d.score_cf));
        }
    }
    let rate = found as f64 / docs.len() as f64;
    let detail = format!(
        "{found}/{} found ({:.1}%), all valid; eval took {:.1} s",
        docs.len(),
        100.0 * rate,
        run.eval_time.as_secs_f64()
    );
    if rate < MIN_FOUND_RATE {
        return Err(format!("{detail}; found rate below {:.0}%", 100.0 * MIN_FOUND_RATE));
    }
    if run.eval_time > EVAL_TIME_LIMIT {
        return Err(format!("{detail}; over the {} s limit", EVAL_TIME_LIMIT.as_secs()));
    }
    if run.eval.shift.n_found != found {
        return Err(format!("{detail}; summary reports {} found", run.eval.shift.n_found));
    }
    Ok(detail)
}

fn from_checks(outcomes: &[CheckOutcome], names: &[&str]) -> Verdict {
    let mut details = Vec::new();
    for name in names {
        let o = outcomes.iter().find(|o| o.name == *name).ok_or_else(|| format!("check {name} did not run"))?;
        if !o.passed {
            return Err(format!("{name}: {}", o.detail));
        }
        details.push(format!("{name}: {}", o.detail));
    }
    Ok(details.join("; "))
}

fn model_quality(run: &Run) -> Verdict {
    let auc = run.train.test_auc.ok_or("test set has one class only")?;
    let curve = run.train.curve.as_ref().ok_or("no horizon curve")?;
    let h1 = curve.at(1).ok_or("no h=1 point")?.proportion_found;
    let points: Vec<String> = curve.points.iter().map(|p| format!("{:.3}", p.proportion_found)).collect();
    let detail = format!("test AUC {auc:.3}; recall h=1..7 [{}]", points.join(", "));
    if auc < MIN_TEST_AUC {
        return Err(format!("{detail}; AUC below {MIN_TEST_AUC}"));
    }
    if !curve.is_non_increasing() {
        return Err(format!("{detail}; recall rises with the horizon"));
    }
    if h1 < MIN_RECALL_H1 {
        return Err(format!("{detail}; recall at h=1 below {MIN_RECALL_H1}"));
    }
    Ok(detail)
}

fn narration_golden() -> Verdict {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/narration");
    for (file, text) in [("intro_absolute.txt", render_intro_example()), ("cow42_words.txt", render_worked_example())] {
        let golden = std::fs::read_to_string(dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
        if golden.trim_end_matches('\n') != text {
            return Err(format!("{file} differs: {text:?}"));
        }
    }
    Ok("2 sentences byte-identical to their fixtures".into())
}

fn hashes(dir: &Path) -> Result<BTreeMap<PathBuf, String>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                let rel = path.strip_prefix(dir).expect("under dir").to_path_buf();
                out.insert(rel, hex::encode(Sha256::digest(bytes)));
            }
        }
    }
    Ok(out)
}

fn determinism(a: &Run, b: &Run) -> Verdict {
    let (ha, hb) = (hashes(&a.dir)?, hashes(&b.dir)?);
    if ha.keys().ne(hb.keys()) {
        return Err("the two runs wrote different files".into());
    }
    for (path, h) in &ha {
        if hb[path] != *h {
            return Err(format!("{} differs between runs", path.display()));
        }
    }
    Ok(format!("{} files hash-identical across two synth, train, eval runs", ha.len()))
}

fn service_contract(root: &Path) -> Verdict {
    let fixture = contract::Fixture::build(root)?;
    let outcomes = contract::run_all(&fixture);
    let failed: Vec<String> =
        outcomes.iter().filter_map(|o| o.result.as_ref().err().map(|e| format!("{}: {e}", o.name))).collect();
    if !failed.is_empty() {
        return Err(failed.join("; "));
    }
    Ok(format!(
        "{} endpoint examples pass, including {} interleaved requests under reloads",
        outcomes.len(),
        contract::STRESS_REQUESTS
    ))
}

fn report(name: &str, verdict: &Verdict) {
    match verdict {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(reason) => println!("FAIL {name}: {reason}"),
    }
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let (dir_a, dir_b) = (scratch.path().join("run_a"), scratch.path().join("run_b"));
    let runs = [&dir_a, &dir_b].map(|d| std::fs::create_dir_all(d).map_err(|e| e.to_string()).and_then(|_| pipeline(d)));
    let outcomes = checks::run_all(&CheckOptions::default());

    let verdicts: Vec<(&str, Verdict)> = vec![
        ("counterfactual_validity", runs[0].as_ref().map_err(Clone::clone).and_then(counterfactual_validity)),
        ("oracle_equivalence", from_checks(&outcomes, &["grid_vs_brute_force"])),
        (
            "cobyla_suite",
            from_checks(
                &outcomes,
                &["cobyla_quadratic", "cobyla_disc", "cobyla_rosenbrock_grid", "cobyla_budget_and_determinism"],
            ),
        ),
        (
            "numeric_oracles",
            from_checks(&outcomes, &["skewness_oracle", "mad_oracle", "mad_fallback", "weighted_manhattan"]),
        ),
        ("model_quality", runs[0].as_ref().map_err(Clone::clone).and_then(model_quality)),
        ("narration_golden", narration_golden()),
        (
            "determinism_end_to_end",
            match &runs {
                [Ok(a), Ok(b)] => determinism(a, b),
                [Err(e), _] | [_, Err(e)] => Err(e.clone()),
            },
        ),
        ("service_contract", service_contract(&scratch.path().join("service"))),
    ];

    for (name, v) in &verdicts {
        report(name, v);
    }
    if verdicts.iter().all(|(_, v)| v.is_ok()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
