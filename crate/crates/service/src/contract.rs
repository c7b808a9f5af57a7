//! Endpoint contract examples run in-process against a small synthetic
//! herd. Used by the crate tests and by the acceptance harness.

use std::collections::{HashMap, HashSet};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::pin::Pin;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::NaiveDate;
use http_body_util::BodyExt;
use mastitis_core::cfx::{self, DistanceWeights};
use mastitis_core::dataset::{self, FeatureVector, SynthConfig};
use mastitis_core::featcat::{default_catalog, save_catalog, FeatureCatalog};
use mastitis_core::gbm::{self, Ensemble, ScoreModel, TrainConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

use crate::api::{CowDetail, ExplainResponse, HerdResponse, WhatIfResponse};
use crate::error::ErrorEnvelope;
use crate::snapshot::Snapshot;
use crate::state::{AppState, LoadedModel, ModelInfo, ServiceConfig};

/// Requests issued by the reload stress example.
pub const STRESS_REQUESTS: usize = 1000;

/// Herd files and models written under one directory.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub root: PathBuf,
    pub data_dir: PathBuf,
    pub catalog: FeatureCatalog,
    pub model_a: PathBuf,
    pub model_b: PathBuf,
    /// Model A's trees tagged with another catalog version.
    pub model_foreign: PathBuf,
    pub corrupt: PathBuf,
}

fn train_and_save(instances: &[dataset::LabeledInstance], seed: u64, n_trees: usize, path: &Path) -> Result<(), String> {
    let cfg = TrainConfig { n_trees, seed, ..TrainConfig::default() };
    let model = gbm::train(instances, &cfg, &default_catalog().version).map_err(|e| e.to_string())?;
    gbm::save_model(&model, path).map_err(|e| e.to_string())
}

impl Fixture {
    /// Synthesizes 60 cows over 300 days and trains two models on them.
    pub fn build(root: impl Into<PathBuf>) -> Result<Self, String> {
        let root = root.into();
        let catalog = default_catalog();
        let herd = dataset::generate_herd(&SynthConfig { n_cows: 60, n_days: 300, ..SynthConfig::default() }, 5)
            .map_err(|e| e.to_string())?;
        let data_dir = root.join("herd");
        dataset::save_csv(&herd, &data_dir).map_err(|e| e.to_string())?;
        let instances = dataset::label_instances(&herd, 7, &catalog).map_err(|e| e.to_string())?;

        let model_a = root.join("a.json");
        let model_b = root.join("b.json");
        train_and_save(&instances, 1, 40, &model_a)?;
        train_and_save(&instances, 2, 25, &model_b)?;
        let rows: Vec<&[f64]> = instances.iter().map(|i| i.x.values.as_slice()).collect();
        let weights = cfx::mad_weights(&rows, &catalog).map_err(|e| e.to_string())?;
        weights.save(&cfx::weights_path_for(&model_a), &catalog).map_err(|e| e.to_string())?;

        let mut foreign = gbm::read_model(&model_a).map_err(|e| e.to_string())?;
        foreign.catalog_version = "some-other-catalog".into();
        let model_foreign = root.join("foreign.json");
        gbm::save_model(&foreign, &model_foreign).map_err(|e| e.to_string())?;
        let corrupt = root.join("corrupt.json");
        std::fs::write(&corrupt, "{ not a model").map_err(|e| e.to_string())?;

        Ok(Fixture { root, data_dir, catalog, model_a, model_b, model_foreign, corrupt })
    }

    fn model(&self, path: &Path) -> Result<Ensemble, String> {
        gbm::read_model(path).map_err(|e| e.to_string())
    }

    /// Config for a fresh service whose audit log lives in `scratch`.
    pub fn config(&self, scratch: &Path) -> ServiceConfig {
        let mut c = ServiceConfig::new(&self.data_dir);
        c.audit_log = scratch.join("audit.jsonl");
        c
    }

    /// The fixture herd served with model A.
    pub fn app(&self, scratch: &Path) -> Result<(Arc<AppState>, Router), String> {
        let mut c = self.config(scratch);
        c.model_path = Some(self.model_a.clone());
        let state = Arc::new(AppState::load(c).map_err(|e| e.to_string())?);
        Ok((state.clone(), crate::router(state)))
    }

    /// A service over `snapshot` with unit weights.
    pub fn app_with(
        &self,
        scratch: &Path,
        model: Option<Ensemble>,
        snapshot: Snapshot,
    ) -> Result<(Arc<AppState>, Router), String> {
        let catalog = self.catalog.clone();
        let weights = DistanceWeights::from_mad(vec![1.0; catalog.len()], &catalog);
        let model = model.map(|m| LoadedModel::new(m, weights, None));
        let state = AppState::new(catalog, model, snapshot, self.config(scratch)).map_err(|e| e.to_string())?;
        let state = Arc::new(state);
        Ok((state.clone(), crate::router(state)))
    }
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).expect("json body"))
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).expect("request")).await.expect("infallible");
    let status = resp.status();
    let bytes = resp.into_body().collect().await.map(|b| b.to_bytes()).unwrap_or_default();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

pub async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(body)).await
}

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn parse<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, String> {
    let text = v.to_string();
    serde_json::from_value(v).map_err(|e| format!("{e}: {text}"))
}

fn expect_error(got: (StatusCode, Value), status: StatusCode, code: &str) -> Result<ErrorEnvelope, String> {
    ensure!(got.0 == status, "expected {status}, got {} {}", got.0, got.1);
    let e: ErrorEnvelope = parse(got.1)?;
    ensure!(e.code == code, "expected code {code}, got {}", e.code);
    Ok(e)
}

fn scratch() -> Result<tempfile::TempDir, String> {
    tempfile::tempdir().map_err(|e| e.to_string())
}

/// Cows 10, 11 and 12 with low, high and middling SCC.
pub fn three_cows(catalog: &FeatureCatalog) -> Snapshot {
    let day = NaiveDate::from_ymd_opt(2018, 6, 1).expect("valid date");
    let base: Vec<f64> = catalog.specs().iter().map(|s| s.lower_bound + s.range() / 4.0).collect();
    let scc = catalog.index_of("scc").expect("scc in catalog");
    Snapshot::from_vectors(
        [("10", 50.0), ("11", 900.0), ("12", 300.0)]
            .into_iter()
            .map(|(id, v)| {
                let mut values = base.clone();
                values[scc] = v;
                FeatureVector::new(id, day, values)
            })
            .collect(),
    )
}

fn first_cow(state: &AppState) -> String {
    state.bundle().snapshot.cows.keys().next().cloned().unwrap_or_default()
}

pub async fn herd_sorted_descending(f: &Fixture) -> Check {
    let dir = scratch()?;
    let model = f.model(&f.model_a)?;
    let (_, app) = f.app_with(dir.path(), Some(model.clone()), three_cows(&f.catalog))?;
    let (status, body) = get(&app, "/api/herd").await;
    ensure!(status == StatusCode::OK, "status {status}");
    let herd: HerdResponse = parse(body)?;
    ensure!(herd.cows.len() == 3, "{} entries", herd.cows.len());
    ensure!(herd.cows.windows(2).all(|w| w[0].score >= w[1].score), "not sorted by descending score");
    ensure!(herd.model_hash == model.fingerprint(), "wrong model hash");
    let snapshot = three_cows(&f.catalog);
    for c in &herd.cows {
        let values = &snapshot.cows[&c.cow_id].vector.values;
        ensure!(c.score == model.score(values), "cow {} score differs from the model", c.cow_id);
    }
    Ok(())
}

pub async fn herd_empty(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app_with(dir.path(), Some(f.model(&f.model_a)?), Snapshot::default())?;
    let (status, body) = get(&app, "/api/herd").await;
    ensure!(status == StatusCode::OK, "status {status}");
    ensure!(body["cows"] == json!([]), "expected no cows, got {}", body["cows"]);
    Ok(())
}

pub async fn model_unloaded_is_503(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app_with(dir.path(), None, three_cows(&f.catalog))?;
    for (method, uri, body) in [
        (Method::GET, "/api/herd", None),
        (Method::GET, "/api/cows/10", None),
        (Method::POST, "/api/whatif", Some(json!({ "cow_id": "10" }))),
        (Method::POST, "/api/explain", Some(json!({ "cow_id": "10" }))),
    ] {
        expect_error(call(&app, method, uri, body).await, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded")
            .map_err(|e| format!("{uri}: {e}"))?;
    }
    Ok(())
}

pub async fn cow_detail(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let id = first_cow(&state);
    let (status, body) = get(&app, &format!("/api/cows/{id}")).await;
    ensure!(status == StatusCode::OK, "status {status}");
    let detail: CowDetail = parse(body)?;
    ensure!(detail.features.len() == f.catalog.len(), "vector length {}", detail.features.len());
    let values: Vec<f64> = detail.features.iter().map(|x| x.value).collect();
    ensure!(detail.score == f.model(&f.model_a)?.score(&values), "score differs from the model");
    ensure!(detail.history.dates.len() == 30, "history covers {} days", detail.history.dates.len());
    ensure!(detail.history.dates.last() == Some(&detail.as_of_date), "history does not end at the vector date");
    Ok(())
}

pub async fn cow_unknown_is_404(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app(dir.path())?;
    expect_error(get(&app, "/api/cows/no-such-cow").await, StatusCode::NOT_FOUND, "unknown_cow").map(drop)
}

pub async fn sparse_history_has_nulls(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let detail: CowDetail = parse(get(&app, &format!("/api/cows/{}", first_cow(&state))).await.1)?;
    let scc = detail.history.series.get("scc").ok_or("no scc series")?;
    ensure!(scc.len() == 30, "scc series has {} entries", scc.len());
    ensure!(scc.iter().any(Option::is_none), "no missing dates in the scc series");
    ensure!(scc.iter().any(Option::is_some), "no recorded scc values");
    Ok(())
}

/// Healthy cows in snapshot order until one yields a Found result.
async fn first_found(f: &Fixture, app: &Router, state: &AppState) -> Result<(String, ExplainResponse), String> {
    let model = f.model(&f.model_a)?;
    let cows: Vec<(String, Vec<f64>)> =
        state.bundle().snapshot.cows.iter().map(|(id, c)| (id.clone(), c.vector.values.clone())).collect();
    for (id, values) in cows {
        if model.score(&values) >= state.config.threshold {
            continue;
        }
        let (status, body) = post(app, "/api/explain", json!({ "cow_id": id })).await;
        ensure!(status == StatusCode::OK, "explain {id}: {status} {body}");
        let r: ExplainResponse = parse(body)?;
        if r.narration.is_some() {
            return Ok((id, r));
        }
    }
    Err("no healthy cow in the fixture herd can be flipped".into())
}

pub async fn explain_healthy_cow(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let (id, r) = first_found(f, &app, &state).await?;
    let doc = &r.result;
    ensure!(!doc.deltas.is_empty() && doc.deltas.len() <= 3, "{} deltas", doc.deltas.len());
    ensure!(doc.score_original < 0.5, "original score {}", doc.score_original);
    ensure!(doc.score_cf >= 0.55, "counterfactual score {}", doc.score_cf);
    let sentence = r.narration.as_deref().unwrap_or_default();
    ensure!(sentence.starts_with(&format!("If cow #{id} had ")), "sentence: {sentence}");
    ensure!(sentence.ends_with("she would be likely to succumb to mastitis."), "sentence: {sentence}");
    let again: ExplainResponse = parse(post(&app, "/api/explain", json!({ "cow_id": id })).await.1)?;
    ensure!(again.result == r.result && again.result_hash == r.result_hash, "repeat explain differs");
    Ok(())
}

pub async fn explain_sick_is_409(f: &Fixture) -> Check {
    let dir = scratch()?;
    let sick = Ensemble::prior_only(f.catalog.version.clone(), f.catalog.len(), 3.0);
    let (_, app) = f.app_with(dir.path(), Some(sick), three_cows(&f.catalog))?;
    expect_error(post(&app, "/api/explain", json!({ "cow_id": "10" })).await, StatusCode::CONFLICT, "already_sick")
        .map(drop)
}

pub async fn explain_invalid_overrides_is_422(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app_with(dir.path(), Some(f.model(&f.model_a)?), three_cows(&f.catalog))?;
    for config in [json!({ "max_changes": 0 }), json!({ "max_changes": -2 }), json!({ "no_such_field": 1 })] {
        let got = post(&app, "/api/explain", json!({ "cow_id": "10", "config": config })).await;
        expect_error(got, StatusCode::UNPROCESSABLE_ENTITY, "invalid_config").map_err(|e| format!("{config}: {e}"))?;
    }
    expect_error(post(&app, "/api/explain", json!({ "cow_id": "nope" })).await, StatusCode::NOT_FOUND, "unknown_cow")?;
    Ok(())
}

pub async fn explain_audit_log(f: &Fixture) -> Check {
    let dir = scratch()?;
    let log = dir.path().join("audit.jsonl");
    let read = || std::fs::read_to_string(&log).unwrap_or_default();
    let (state, app) = f.app(dir.path())?;
    let (id, r) = first_found(f, &app, &state).await?;
    let lines = read().lines().count();
    let last: Value = serde_json::from_str(read().lines().last().unwrap_or("null")).map_err(|e| e.to_string())?;
    ensure!(last["cow_id"] == id.as_str(), "audit cow {}", last["cow_id"]);
    ensure!(last["result_hash"] == r.result_hash.as_str(), "audit result hash mismatch");
    ensure!(last["model_hash"] == r.model_hash.as_str(), "audit model hash mismatch");

    get(&app, "/api/herd").await;
    get(&app, &format!("/api/cows/{id}")).await;
    post(&app, "/api/whatif", json!({ "cow_id": id })).await;
    ensure!(read().lines().count() == lines, "read endpoints wrote to the audit log");

    drop((state, app));
    let (_, app) = f.app(dir.path())?;
    post(&app, "/api/explain", json!({ "cow_id": id })).await;
    ensure!(read().lines().count() == lines + 1, "audit log not preserved across restart");
    Ok(())
}

pub async fn whatif_identity(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let id = first_cow(&state);
    let detail: CowDetail = parse(get(&app, &format!("/api/cows/{id}")).await.1)?;
    let w: WhatIfResponse = parse(post(&app, "/api/whatif", json!({ "cow_id": id, "overrides": {} })).await.1)?;
    ensure!(w.score == detail.score, "{} vs {}", w.score, detail.score);
    Ok(())
}

pub async fn whatif_counterfactual_vector(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let (id, r) = first_found(f, &app, &state).await?;
    let overrides: serde_json::Map<String, Value> =
        r.result.counterfactual.iter().map(|x| (x.feature.clone(), json!({ "value": x.value }))).collect();
    let w: WhatIfResponse = parse(post(&app, "/api/whatif", json!({ "cow_id": id, "overrides": overrides })).await.1)?;
    ensure!(w.score == r.result.score_cf, "what-if {} vs score_cf {}", w.score, r.result.score_cf);
    let deltas: serde_json::Map<String, Value> =
        r.result.deltas.iter().map(|d| (d.feature.clone(), json!({ "delta": d.delta }))).collect();
    let w: WhatIfResponse = parse(post(&app, "/api/whatif", json!({ "cow_id": id, "overrides": deltas })).await.1)?;
    ensure!(w.score == r.result.score_cf, "delta what-if {} vs score_cf {}", w.score, r.result.score_cf);
    Ok(())
}

pub async fn whatif_rejections(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let id = first_cow(&state);
    let cases = [
        (json!({ "weight": { "value": 10000.0 } }), "out_of_bounds", "weight"),
        (json!({ "tail_length": { "value": 1.0 } }), "unknown_feature", "tail_length"),
        (json!({ "bcs": { "value": 3.0, "delta": 0.25 } }), "invalid_override", "bcs"),
        (json!({ "bcs": {} }), "invalid_override", "bcs"),
    ];
    for (overrides, code, feature) in cases {
        let got = post(&app, "/api/whatif", json!({ "cow_id": id, "overrides": overrides })).await;
        let e = expect_error(got, StatusCode::UNPROCESSABLE_ENTITY, code)?;
        ensure!(e.details["feature"] == feature && e.message.contains(feature), "error does not name {feature}");
    }
    expect_error(post(&app, "/api/whatif", json!({ "cow_id": "nope" })).await, StatusCode::NOT_FOUND, "unknown_cow")?;
    Ok(())
}

pub async fn reload_same_file(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app(dir.path())?;
    let (status, body) = post(&app, "/api/model/reload", json!({ "model_path": f.model_a })).await;
    ensure!(status == StatusCode::OK, "status {status} {body}");
    let info: ModelInfo = parse(body)?;
    ensure!(info.model_hash == f.model(&f.model_a)?.fingerprint(), "hash changed on reloading the same file");
    Ok(())
}

pub async fn reload_rejections_keep_old_model(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app(dir.path())?;
    let hash = f.model(&f.model_a)?.fingerprint();
    let cases = [
        (&f.model_foreign, StatusCode::UNPROCESSABLE_ENTITY, "incompatible_model"),
        (&f.corrupt, StatusCode::INTERNAL_SERVER_ERROR, "model_load_failed"),
    ];
    for (path, status, code) in cases {
        expect_error(post(&app, "/api/model/reload", json!({ "model_path": path })).await, status, code)?;
        let serving = get(&app, "/api/herd").await.1;
        ensure!(serving["model_hash"] == hash.as_str(), "old model not retained after {code}");
    }
    Ok(())
}

/// Reads and reloads interleaved on a multi-threaded runtime. Every scored
/// response must match the model named by its own hash.
pub async fn reload_stress(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (state, app) = f.app(dir.path())?;
    let models: HashMap<String, Ensemble> = [&f.model_a, &f.model_b]
        .into_iter()
        .map(|p| f.model(p).map(|m| (m.fingerprint(), m)))
        .collect::<Result<_, _>>()?;
    let vectors: HashMap<String, Vec<f64>> =
        state.bundle().snapshot.cows.iter().map(|(id, c)| (id.clone(), c.vector.values.clone())).collect();
    let ids: Vec<String> = vectors.keys().cloned().collect();

    let mut tasks = Vec::with_capacity(STRESS_REQUESTS);
    for i in 0..STRESS_REQUESTS {
        let app = app.clone();
        let id = ids[i % ids.len()].clone();
        let path = if (i / 10) % 2 == 0 { f.model_b.clone() } else { f.model_a.clone() };
        tasks.push(tokio::spawn(async move {
            let (status, body) = match i % 10 {
                0 => post(&app, "/api/model/reload", json!({ "model_path": path })).await,
                1 => get(&app, "/api/herd").await,
                k if k % 2 == 0 => get(&app, &format!("/api/cows/{id}")).await,
                _ => post(&app, "/api/whatif", json!({ "cow_id": id })).await,
            };
            if status != StatusCode::OK {
                return Err(format!("request {i}: {status} {body}"));
            }
            let hash = body["model_hash"].as_str().unwrap_or_default().to_string();
            let scored: Vec<(String, String, f64)> = match i % 10 {
                0 => vec![],
                1 => body["cows"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|c| {
                        let id = c["cow_id"].as_str().unwrap_or_default().to_string();
                        (hash.clone(), id, c["score"].as_f64().unwrap_or(f64::NAN))
                    })
                    .collect(),
                _ => vec![(hash, id, body["score"].as_f64().unwrap_or(f64::NAN))],
            };
            Ok(scored)
        }));
    }

    let mut checked = 0;
    let mut seen = HashSet::new();
    for t in tasks {
        for (hash, id, score) in t.await.map_err(|e| e.to_string())?? {
            let model = models.get(&hash).ok_or_else(|| format!("unknown model hash `{hash}`"))?;
            let values = vectors.get(&id).ok_or_else(|| format!("unknown cow `{id}`"))?;
            ensure!(score == model.score(values), "torn read: cow {id} scored {score} under {hash}");
            seen.insert(hash);
            checked += 1;
        }
    }
    ensure!(seen.len() == 2, "only {} model(s) served requests", seen.len());
    ensure!(checked >= STRESS_REQUESTS * 9 / 10, "only {checked} scores checked");
    Ok(())
}

pub async fn policy_file_startup(f: &Fixture) -> Check {
    let dir = scratch()?;
    let policy = dir.path().join("policy.csv");
    save_catalog(&f.catalog, &policy).map_err(|e| e.to_string())?;
    let mut c = f.config(dir.path());
    c.policy_file = Some(policy);
    c.model_path = Some(f.model_a.clone());
    let state = AppState::load(c.clone()).map_err(|e| e.to_string())?;
    ensure!(!state.bundle().snapshot.cows.is_empty(), "empty snapshot");
    c.model_path = Some(f.model_foreign.clone());
    ensure!(AppState::load(c).is_err(), "started with an incompatible model");
    Ok(())
}

pub async fn unknown_route_and_static_files(f: &Fixture) -> Check {
    let dir = scratch()?;
    let (_, app) = f.app(dir.path())?;
    expect_error(get(&app, "/api/nothing").await, StatusCode::NOT_FOUND, "not_found")?;

    let ui = dir.path().join("ui");
    std::fs::create_dir_all(&ui).map_err(|e| e.to_string())?;
    std::fs::write(ui.join("index.html"), "<!doctype html>").map_err(|e| e.to_string())?;
    let mut c = f.config(dir.path());
    c.static_dir = Some(ui);
    let app = crate::router(Arc::new(AppState::load(c).map_err(|e| e.to_string())?));
    let resp = app
        .clone()
        .oneshot(Request::get("/").body(Body::empty()).expect("request"))
        .await
        .map_err(|e| e.to_string())?;
    ensure!(resp.status() == StatusCode::OK, "index status {}", resp.status());
    ensure!(resp.headers().get("content-type").is_some_and(|v| v == "text/html; charset=utf-8"), "index content type");
    ensure!(get(&app, "/missing.js").await.0 == StatusCode::NOT_FOUND, "missing static file not 404");
    Ok(())
}

type ExampleFn = for<'a> fn(&'a Fixture) -> Pin<Box<dyn Future<Output = Check> + Send + 'a>>;

macro_rules! examples {
    ($($name:ident),* $(,)?) => {
        /// Every contract example, by name.
        pub const EXAMPLES: &[(&str, ExampleFn)] = &[$((stringify!($name), |f| Box::pin($name(f)))),*];
    };
}

examples!(
    herd_sorted_descending,
    herd_empty,
    model_unloaded_is_503,
    cow_detail,
    cow_unknown_is_404,
    sparse_history_has_nulls,
    explain_healthy_cow,
    explain_sick_is_409,
    explain_invalid_overrides_is_422,
    explain_audit_log,
    whatif_identity,
    whatif_counterfactual_vector,
    whatif_rejections,
    reload_same_file,
    reload_rejections_keep_old_model,
    reload_stress,
    policy_file_startup,
    unknown_route_and_static_files,
);

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutcome {
    pub name: &'static str,
    pub result: Check,
}

/// Runs one example by name on a multi-threaded runtime.
pub fn run_example(fixture: &Fixture, name: &str) -> Option<Check> {
    let (_, example) = EXAMPLES.iter().find(|(n, _)| *n == name)?;
    Some(runtime().block_on(example(fixture)))
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().expect("tokio runtime")
}

/// Runs every example against `fixture`.
pub fn run_all(fixture: &Fixture) -> Vec<ExampleOutcome> {
    let rt = runtime();
    EXAMPLES.iter().map(|(name, example)| ExampleOutcome { name, result: rt.block_on(example(fixture)) }).collect()
}
