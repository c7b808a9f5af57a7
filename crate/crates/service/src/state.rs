use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use mastitis_core::cfx::{self, CfxConfig, CfxError, DistanceWeights};
use mastitis_core::dataset::{self, CsvError};
use mastitis_core::featcat::{self, CatalogError, FeatureCatalog};
use mastitis_core::gbm::{self, Ensemble, GbmError, DEFAULT_THRESHOLD};
use mastitis_core::narrate::{NarrationStyle, NumberStyle};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::snapshot::Snapshot;

pub const DEFAULT_PORT: u16 = 8080;
pub const AUDIT_FILE: &str = "audit.jsonl";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("policy file: {0}")]
    Policy(#[from] CatalogError),
    #[error("herd data: {0}")]
    Data(#[from] CsvError),
    #[error("model {path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: GbmError,
    },
    #[error("distance weights: {0}")]
    Weights(#[from] CfxError),
    #[error("audit log {path}: {source}")]
    Audit {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid service config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub model_path: Option<PathBuf>,
    pub policy_file: Option<PathBuf>,
    pub port: u16,
    /// Accepted for a uniform command line; the service draws no random numbers.
    pub seed: u64,
    pub static_dir: Option<PathBuf>,
    pub audit_log: PathBuf,
    pub request_timeout: Duration,
    /// Scores at or above this are classified Sick.
    pub threshold: f64,
    /// Defaults for /api/explain; requests may override fields.
    pub cfx: CfxConfig,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        ServiceConfig {
            audit_log: data_dir.join(AUDIT_FILE),
            data_dir,
            model_path: None,
            policy_file: None,
            port: DEFAULT_PORT,
            seed: 0,
            static_dir: None,
            request_timeout: Duration::from_secs(10),
            threshold: DEFAULT_THRESHOLD,
            cfx: CfxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ServiceError::Config(format!("threshold must be in (0, 1), got {}", self.threshold)));
        }
        if self.request_timeout.is_zero() {
            return Err(ServiceError::Config("request timeout must be positive".into()));
        }
        self.cfx.validate()?;
        Ok(())
    }
}

/// A model together with the distance weights used to explain it.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub ensemble: Ensemble,
    pub weights: DistanceWeights,
    /// SHA-256 of the serialized model.
    pub hash: String,
    pub path: Option<PathBuf>,
}

impl LoadedModel {
    pub fn new(ensemble: Ensemble, weights: DistanceWeights, path: Option<PathBuf>) -> Self {
        let hash = ensemble.fingerprint();
        LoadedModel { ensemble, weights, hash, path }
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            model_hash: self.hash.clone(),
            catalog_version: self.ensemble.catalog_version.clone(),
            n_trees: self.ensemble.trees.len(),
            path: self.path.as_ref().map(|p| p.display().to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ModelInfo {
    pub model_hash: String,
    pub catalog_version: String,
    pub n_trees: usize,
    pub path: Option<String>,
}

/// Immutable view shared by a request from start to finish. A reload
/// builds a new bundle and swaps the pointer, so no request ever sees a
/// model paired with another model's weights or hash.
#[derive(Debug)]
pub struct Bundle {
    pub catalog: Arc<FeatureCatalog>,
    pub model: Option<Arc<LoadedModel>>,
    pub snapshot: Arc<Snapshot>,
    pub style: Arc<NarrationStyle>,
}

/// Reads a model file and its weights. Weights come from the sidecar file
/// when present, otherwise from the MAD of the snapshot vectors.
pub fn load_model_bundle(
    path: &Path,
    catalog: &FeatureCatalog,
    snapshot: &Snapshot,
) -> Result<LoadedModel, ServiceError> {
    let ensemble = gbm::load_model(path, catalog).map_err(|source| ServiceError::Model { path: path.into(), source })?;
    let sidecar = cfx::weights_path_for(path);
    let weights = if sidecar.exists() {
        DistanceWeights::load(&sidecar, catalog)?
    } else {
        let rows: Vec<&[f64]> = snapshot.cows.values().map(|c| c.vector.values.as_slice()).collect();
        cfx::mad_weights(&rows, catalog)?
    };
    Ok(LoadedModel::new(ensemble, weights, Some(path.to_path_buf())))
}

#[derive(Debug, Serialize)]
pub struct AuditRecord<'a> {
    pub timestamp: String,
    pub cow_id: &'a str,
    pub status: &'a str,
    pub result_hash: &'a str,
    pub model_hash: &'a str,
}

/// Append-only JSON-lines log with a single writer.
#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl AuditLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let path = path.into();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| ServiceError::Audit { path: path.clone(), source })?;
        Ok(AuditLog { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &AuditRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_string(record).expect("audit record serializes");
        line.push('\n');
        let mut file = self.file.lock().unwrap_or_else(|e| e.into_inner());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| ServiceError::Audit { path: self.path.clone(), source })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub struct AppState {
    bundle: RwLock<Arc<Bundle>>,
    pub audit: AuditLog,
    pub config: ServiceConfig,
}

impl AppState {
    pub fn new(
        catalog: FeatureCatalog,
        model: Option<LoadedModel>,
        snapshot: Snapshot,
        config: ServiceConfig,
    ) -> Result<Self, ServiceError> {
        config.validate()?;
        if let Some(m) = &model {
            m.ensemble
                .check_catalog(&catalog)
                .map_err(|source| ServiceError::Model { path: m.path.clone().unwrap_or_default(), source })?;
        }
        let style = NarrationStyle::for_catalog(&catalog, NumberStyle::Words);
        let bundle = Bundle {
            catalog: Arc::new(catalog),
            model: model.map(Arc::new),
            snapshot: Arc::new(snapshot),
            style: Arc::new(style),
        };
        let audit = AuditLog::open(&config.audit_log)?;
        Ok(AppState { bundle: RwLock::new(Arc::new(bundle)), audit, config })
    }

    /// Loads catalog, herd CSVs and (optionally) the model named in `config`.
    pub fn load(config: ServiceConfig) -> Result<Self, ServiceError> {
        let catalog = match &config.policy_file {
            Some(p) => featcat::load_catalog(p)?,
            None => featcat::default_catalog(),
        };
        let herd = dataset::load_csv(&config.data_dir)?;
        let snapshot = Snapshot::from_herd(&herd, &catalog);
        let model = match &config.model_path {
            Some(p) => Some(load_model_bundle(p, &catalog, &snapshot)?),
            None => None,
        };
        Self::new(catalog, model, snapshot, config)
    }

    pub fn bundle(&self) -> Arc<Bundle> {
        self.bundle.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs a new model; everything else in the bundle is carried over.
    pub fn swap_model(&self, model: LoadedModel) {
        let mut guard = self.bundle.write().unwrap_or_else(|e| e.into_inner());
        let next = Bundle {
            catalog: guard.catalog.clone(),
            model: Some(Arc::new(model)),
            snapshot: guard.snapshot.clone(),
            style: guard.style.clone(),
        };
        *guard = Arc::new(next);
    }
}

pub fn bind_addr(config: &ServiceConfig) -> SocketAddr {
    SocketAddr::from(([0, 0, 0, 0], config.port))
}
