//! HTTP service for herd risk, counterfactual explanations and what-if
//! scoring. Every score is computed on request from the live model; a
//! model reload swaps an immutable bundle so no request sees mixed state.

pub mod api;
pub mod contract;
pub mod error;
pub mod snapshot;
pub mod state;

use std::sync::Arc;

pub use api::router;
pub use error::{ApiError, ErrorEnvelope};
pub use snapshot::{CowSnapshot, History, Snapshot};
pub use state::{AppState, LoadedModel, ModelInfo, ServiceConfig, ServiceError};

/// Binds the configured port and serves until the process is stopped.
pub async fn serve(state: AppState) -> Result<(), ServiceError> {
    let addr = state::bind_addr(&state.config);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
