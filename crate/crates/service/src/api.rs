use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{NaiveDate, SecondsFormat, Utc};
use mastitis_core::cfx::{self, CfxConfig, CfxError, CounterfactualDocument, FeatureValue};
use mastitis_core::dataset::Label;
use mastitis_core::featcat::FeatureCatalog;
use mastitis_core::gbm::{label_for_score, GbmError, ScoreModel};
use mastitis_core::narrate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::snapshot::{CowSnapshot, History};
use crate::state::{load_model_bundle, AppState, AuditRecord, Bundle, LoadedModel, ModelInfo, ServiceError};

/// Features echoed in each herd list entry, when the catalog has them.
pub const HEADLINE_FEATURES: [&str; 3] = ["scc", "yield", "days_since_calving"];

type Shared = Arc<AppState>;
type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdEntry {
    pub cow_id: String,
    pub as_of_date: NaiveDate,
    pub score: f64,
    pub class: Label,
    pub top_feature_values: Vec<FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HerdResponse {
    pub model_hash: String,
    pub snapshot_date: Option<NaiveDate>,
    pub cows: Vec<HerdEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub actionable: bool,
    /// Whether counterfactual search may change this feature.
    pub eligible: bool,
    pub min_change: Option<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CowDetail {
    pub cow_id: String,
    pub as_of_date: NaiveDate,
    pub score: f64,
    pub class: Label,
    pub model_hash: String,
    pub features: Vec<FeatureRow>,
    pub history: History,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    pub cow_id: String,
    /// Partial counterfactual config merged over the service defaults.
    #[serde(default)]
    pub config: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub model_hash: String,
    pub result: CounterfactualDocument,
    /// Absent when no counterfactual was found.
    pub narration: Option<String>,
    pub result_hash: String,
}

/// Exactly one of `value` (absolute) or `delta` (signed change).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Override {
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhatIfRequest {
    pub cow_id: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Override>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub cow_id: String,
    pub score: f64,
    pub class: Label,
    pub model_hash: String,
    /// The vector that was scored, in catalog order.
    pub features: Vec<FeatureValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReloadRequest {
    pub model_path: PathBuf,
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/herd", get(herd))
        .route("/api/cows/{id}", get(cow))
        .route("/api/explain", post(explain))
        .route("/api/whatif", post(whatif))
        .route("/api/model/reload", post(reload))
        .fallback(fallback)
        .with_state(state)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::invalid("invalid_request", format!("malformed request body: {e}"), Value::Null))
}

fn require_model(bundle: &Bundle) -> Result<Arc<LoadedModel>, ApiError> {
    bundle.model.clone().ok_or_else(ApiError::model_not_loaded)
}

fn require_cow<'a>(bundle: &'a Bundle, cow_id: &str) -> Result<&'a CowSnapshot, ApiError> {
    bundle.snapshot.cows.get(cow_id).ok_or_else(|| ApiError::unknown_cow(cow_id))
}

fn feature_values(values: &[f64], catalog: &FeatureCatalog) -> Vec<FeatureValue> {
    catalog
        .specs()
        .iter()
        .zip(values)
        .map(|(s, &value)| FeatureValue { feature: s.name.clone(), value, unit: s.unit.clone() })
        .collect()
}

async fn herd(State(state): State<Shared>) -> ApiResult<HerdResponse> {
    let bundle = state.bundle();
    let model = require_model(&bundle)?;
    let headline: Vec<usize> = HEADLINE_FEATURES.iter().filter_map(|n| bundle.catalog.index_of(n)).collect();
    let mut cows: Vec<HerdEntry> = bundle
        .snapshot
        .cows
        .iter()
        .map(|(id, c)| {
            let score = model.ensemble.score(&c.vector.values);
            let top_feature_values = headline
                .iter()
                .map(|&j| {
                    let s = bundle.catalog.spec_at(j);
                    FeatureValue { feature: s.name.clone(), value: c.vector.values[j], unit: s.unit.clone() }
                })
                .collect();
            HerdEntry {
                cow_id: id.clone(),
                as_of_date: c.vector.as_of,
                score,
                class: label_for_score(score, state.config.threshold),
                top_feature_values,
            }
        })
        .collect();
    cows.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.cow_id.cmp(&b.cow_id)));
    Ok(Json(HerdResponse { model_hash: model.hash.clone(), snapshot_date: bundle.snapshot.date, cows }))
}

async fn cow(State(state): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<CowDetail> {
    let bundle = state.bundle();
    let model = require_model(&bundle)?;
    let c = require_cow(&bundle, &id)?;
    let score = model.ensemble.score(&c.vector.values);
    let features = bundle
        .catalog
        .specs()
        .iter()
        .zip(&c.vector.values)
        .map(|(s, &value)| FeatureRow {
            name: s.name.clone(),
            value,
            unit: s.unit.clone(),
            actionable: s.actionable,
            eligible: s.is_eligible(),
            min_change: s.min_change,
            lower: s.lower_bound,
            upper: s.upper_bound,
        })
        .collect();
    Ok(Json(CowDetail {
        cow_id: id,
        as_of_date: c.vector.as_of,
        score,
        class: label_for_score(score, state.config.threshold),
        model_hash: model.hash.clone(),
        features,
        history: c.history.clone(),
    }))
}

/// Service defaults with the request's fields laid over them.
fn merged_config(defaults: &CfxConfig, overrides: Option<&Value>) -> Result<CfxConfig, ApiError> {
    let invalid = |message: String| ApiError::invalid("invalid_config", message, Value::Null);
    let mut merged = serde_json::to_value(defaults).expect("config serializes");
    match overrides {
        None | Some(Value::Null) => {}
        Some(Value::Object(fields)) => {
            let target = merged.as_object_mut().expect("config is an object");
            for (k, v) in fields {
                target.insert(k.clone(), v.clone());
            }
        }
        Some(_) => return Err(invalid("config must be an object".into())),
    }
    let config: CfxConfig = serde_json::from_value(merged).map_err(|e| invalid(e.to_string()))?;
    config.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(config)
}

fn already_sick(cow_id: &str, score: f64, threshold: f64) -> ApiError {
    ApiError::new(
        StatusCode::CONFLICT,
        "already_sick",
        format!("cow {cow_id} is already predicted to succumb to mastitis"),
        json!({ "cow_id": cow_id, "score": score, "threshold": threshold }),
    )
}

async fn explain(State(state): State<Shared>, body: Bytes) -> ApiResult<ExplainResponse> {
    let req: ExplainRequest = parse_body(&body)?;
    let config = merged_config(&state.config.cfx, req.config.as_ref())?;
    let bundle = state.bundle();
    let model = require_model(&bundle)?;
    let x = require_cow(&bundle, &req.cow_id)?.vector.clone();
    let score = model.ensemble.score(&x.values);
    if label_for_score(score, state.config.threshold) == Label::Sick {
        return Err(already_sick(&req.cow_id, score, state.config.threshold));
    }

    let task = {
        let (model, catalog, x) = (model.clone(), bundle.catalog.clone(), x.clone());
        tokio::task::spawn_blocking(move || {
            cfx::find_counterfactual(&model.ensemble, &x, &catalog, &model.weights, &config)
        })
    };
    let result = match tokio::time::timeout(state.config.request_timeout, task).await {
        Err(_) => {
            return Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                "timeout",
                format!("no answer within {:?}", state.config.request_timeout),
                Value::Null,
            ))
        }
        Ok(Err(e)) => return Err(ApiError::internal(format!("search task failed: {e}"))),
        Ok(Ok(Err(CfxError::AlreadySick { score, threshold }))) => {
            return Err(already_sick(&req.cow_id, score, threshold))
        }
        Ok(Ok(Err(e))) => return Err(ApiError::invalid("invalid_config", e.to_string(), Value::Null)),
        Ok(Ok(Ok(r))) => r,
    };

    let doc = result.document(&x, &bundle.catalog, &model.weights);
    let narration = narrate::render(&req.cow_id, &doc, &bundle.style).ok();
    let result_hash = crate::state::sha256_hex(&serde_json::to_vec(&doc).expect("document serializes"));
    let status = serde_json::to_value(doc.status).expect("status serializes");
    state
        .audit
        .append(&AuditRecord {
            timestamp: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            cow_id: &req.cow_id,
            status: status.as_str().unwrap_or_default(),
            result_hash: &result_hash,
            model_hash: &model.hash,
        })
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(ExplainResponse { model_hash: model.hash.clone(), result: doc, narration, result_hash }))
}

/// The cow's vector with `overrides` applied, or the first offending feature.
pub fn apply_overrides(
    values: &[f64],
    overrides: &BTreeMap<String, Override>,
    catalog: &FeatureCatalog,
) -> Result<Vec<f64>, ApiError> {
    let mut out = values.to_vec();
    for (name, o) in overrides {
        let Some(j) = catalog.index_of(name) else {
            return Err(ApiError::invalid(
                "unknown_feature",
                format!("unknown feature `{name}`"),
                json!({ "feature": name }),
            ));
        };
        let value = match (o.value, o.delta) {
            (Some(v), None) => v,
            (None, Some(d)) => values[j] + d,
            _ => {
                return Err(ApiError::invalid(
                    "invalid_override",
                    format!("feature `{name}` needs exactly one of value or delta"),
                    json!({ "feature": name }),
                ))
            }
        };
        let spec = catalog.spec_at(j);
        if !value.is_finite() || !spec.contains(value) {
            return Err(ApiError::invalid(
                "out_of_bounds",
                format!("feature `{name}` value {value} is outside [{}, {}]", spec.lower_bound, spec.upper_bound),
                json!({ "feature": name, "value": value, "lower": spec.lower_bound, "upper": spec.upper_bound }),
            ));
        }
        out[j] = value;
    }
    Ok(out)
}

async fn whatif(State(state): State<Shared>, body: Bytes) -> ApiResult<WhatIfResponse> {
    let req: WhatIfRequest = parse_body(&body)?;
    let bundle = state.bundle();
    let model = require_model(&bundle)?;
    let c = require_cow(&bundle, &req.cow_id)?;
    let values = apply_overrides(&c.vector.values, &req.overrides, &bundle.catalog)?;
    let score = model.ensemble.score(&values);
    Ok(Json(WhatIfResponse {
        cow_id: req.cow_id,
        score,
        class: label_for_score(score, state.config.threshold),
        model_hash: model.hash.clone(),
        features: feature_values(&values, &bundle.catalog),
    }))
}

async fn reload(State(state): State<Shared>, body: Bytes) -> ApiResult<ModelInfo> {
    let req: ReloadRequest = parse_body(&body)?;
    let bundle = state.bundle();
    let (catalog, snapshot) = (bundle.catalog.clone(), bundle.snapshot.clone());
    let loaded = tokio::task::spawn_blocking(move || load_model_bundle(&req.model_path, &catalog, &snapshot))
        .await
        .map_err(|e| ApiError::internal(format!("reload task failed: {e}")))?;
    let model = loaded.map_err(|e| {
        let details = Value::Null;
        match &e {
            ServiceError::Model { source: GbmError::CatalogVersion { .. } | GbmError::DimensionMismatch { .. }, .. } => {
                ApiError::invalid("incompatible_model", e.to_string(), details)
            }
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "model_load_failed", e.to_string(), details),
        }
    })?;
    let info = model.info();
    state.swap_model(model);
    Ok(Json(info))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript; charset=utf-8",
        Some("css") => "text/css; charset=utf-8",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        Some("png") => "image/png",
        Some("ico") => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// File under `root` for a request path; `None` for anything escaping it.
fn static_file(root: &Path, uri_path: &str) -> Option<PathBuf> {
    let rel = uri_path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

async fn fallback(State(state): State<Shared>, method: Method, uri: Uri) -> Response {
    let not_found =
        || ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no route for {}", uri.path()), Value::Null);
    if uri.path().starts_with("/api/") || method != Method::GET {
        return not_found().into_response();
    }
    let Some(root) = &state.config.static_dir else { return not_found().into_response() };
    let Some(path) = static_file(root, uri.path()) else { return not_found().into_response() };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => not_found().into_response(),
    }
}
