//! Moderation HTTP service.
//!
//! * `POST /v1/moderate` takes `{"text": ..}` or `{"logits": [..]}` (exactly
//!   one) plus an optional `"profile"`.
//! * `GET /v1/model` describes the loaded detector.
//! * `GET /healthz` is a liveness probe.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::acquisition::LogitBackend;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_PROFILE;
use crate::trainer::DetectorModel;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModerationRequest {
    pub text: Option<String>,
    pub logits: Option<Vec<f64>>,
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModerationResponse {
    pub score: f64,
    pub flagged: bool,
    pub profile: String,
    pub threshold: f64,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub vocab_size: usize,
    pub backend_fingerprint: String,
    pub transform: String,
    pub nnz: usize,
    pub thresholds: std::collections::BTreeMap<String, f64>,
    pub default_profile: String,
    pub dataset: String,
}

/// Request error with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: u16,
    pub message: String,
}

impl ApiError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (code, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

/// Scoring core shared by the HTTP layer and in-process callers.
pub struct Moderator {
    model: DetectorModel,
    model_id: String,
    default_profile: String,
    backend: Option<Arc<dyn LogitBackend>>,
}

impl Moderator {
    /// Fails when the profile is unknown or the backend does not match the model.
    pub fn new(
        model: DetectorModel,
        default_profile: &str,
        backend: Option<Arc<dyn LogitBackend>>,
        force: bool,
    ) -> Result<Self> {
        if model.threshold(default_profile).is_none() {
            return Err(Error::invalid(format!(
                "model has no threshold for profile '{default_profile}'"
            )));
        }
        if let Some(b) = &backend {
            let fp = b.fingerprint();
            crate::app::check_fingerprint(&model, &fp, force)?;
            if b.descriptor().vocab_size != model.vocab_size {
                return Err(Error::DimensionMismatch {
                    expected: model.vocab_size,
                    got: b.descriptor().vocab_size,
                });
            }
        }
        Ok(Moderator {
            model_id: model.model_id(),
            model,
            default_profile: default_profile.to_string(),
            backend,
        })
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            model_id: self.model_id.clone(),
            vocab_size: self.model.vocab_size,
            backend_fingerprint: self.model.backend_fingerprint.clone(),
            transform: self.model.transform.kind.name().to_string(),
            nnz: self.model.weights.nnz(),
            thresholds: self.model.thresholds.clone(),
            default_profile: self.default_profile.clone(),
            dataset: self.model.training_meta.dataset.clone(),
        }
    }

    /// Parses and scores a raw request body. Blocking when the request carries text.
    pub fn moderate_body(&self, body: &[u8]) -> std::result::Result<ModerationResponse, ApiError> {
        let req: ModerationRequest =
            serde_json::from_slice(body).map_err(|e| ApiError::new(400, format!("malformed request: {e}")))?;
        self.moderate(&req)
    }

    pub fn moderate(&self, req: &ModerationRequest) -> std::result::Result<ModerationResponse, ApiError> {
        let profile = req.profile.as_deref().unwrap_or(&self.default_profile);
        let threshold = self
            .model
            .threshold(profile)
            .ok_or_else(|| ApiError::new(400, format!("unknown profile '{profile}'")))?;
        let logits = match (&req.text, &req.logits) {
            (Some(_), Some(_)) => return Err(ApiError::new(400, "give either text or logits, not both")),
            (None, None) => return Err(ApiError::new(400, "request needs text or logits")),
            (None, Some(l)) => {
                if l.len() != self.model.vocab_size {
                    return Err(ApiError::new(
                        409,
                        format!("expected {} logits, got {}", self.model.vocab_size, l.len()),
                    ));
                }
                l.clone()
            }
            (Some(text), None) => {
                let backend = self
                    .backend
                    .as_ref()
                    .ok_or_else(|| ApiError::new(503, "no backend configured for text requests"))?;
                let dist = backend
                    .first_token(text)
                    .map_err(|e| ApiError::new(503, format!("backend unavailable: {e}")))?;
                dist.densify(self.model.vocab_size)
                    .map_err(|e| ApiError::new(502, e.to_string()))?
            }
        };
        let score = self.model.score(&logits).map_err(|e| match e {
            Error::DimensionMismatch { .. } => ApiError::new(409, e.to_string()),
            other => ApiError::new(400, other.to_string()),
        })?;
        Ok(ModerationResponse {
            score,
            flagged: score > threshold,
            profile: profile.to_string(),
            threshold,
            model_id: self.model_id.clone(),
        })
    }
}

pub fn default_profile() -> &'static str {
    DEFAULT_PROFILE
}

pub fn router(m: Arc<Moderator>) -> Router {
    Router::new()
        .route("/v1/moderate", post(moderate))
        .route("/v1/model", get(model_info))
        .route("/healthz", get(healthz))
        .with_state(m)
}

async fn healthz() -> &'static str {
    "ok"
}

async fn model_info(State(m): State<Arc<Moderator>>) -> Json<ModelInfo> {
    Json(m.info())
}

async fn moderate(State(m): State<Arc<Moderator>>, body: Bytes) -> Response {
    match tokio::task::spawn_blocking(move || m.moderate_body(&body)).await {
        Ok(Ok(r)) => Json(r).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(500, e.to_string()).into_response(),
    }
}

/// Binds and serves until ctrl-c.
pub async fn serve(m: Arc<Moderator>, bind: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| Error::invalid(format!("cannot bind {bind}: {e}")))?;
    log::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(m))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::invalid(format!("server error: {e}")))
}
