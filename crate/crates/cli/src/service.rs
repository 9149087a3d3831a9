//! Read-only HTTP facade over a trained model: decision traces and what-if
//! concept overrides for the intervention panel.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rec_cbm_core::{
    trace_with_labels, Dataset, DecisionTrace, EmbeddingMode, Error as CoreError, GradingInstance,
    Model, RubricSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

pub const DEFAULT_TOP_N: usize = 5;

/// Shared, immutable state behind every handler.
pub struct AppState {
    pub model: Model,
    pub instances: Option<Dataset>,
    pub split: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/instances", get(instances))
        .route("/api/trace", post(trace))
        .route("/api/intervene", post(intervene))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, r.body_text())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match e {
            CoreError::UnknownInstance(_) => StatusCode::NOT_FOUND,
            CoreError::InvalidArgument(_) | CoreError::DimensionMismatch(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": { "status": self.status.as_u16(), "message": self.message }
        });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub spec: RubricSpec,
    pub config: TrainConfig,
    pub embedding_mode: EmbeddingMode,
    pub embedding_dim: usize,
    pub epochs_trained: usize,
    pub split: Option<String>,
    pub num_instances: usize,
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    let m = &state.model;
    Json(ModelInfo {
        spec: m.spec.clone(),
        config: m.config.clone(),
        embedding_mode: m.embedding.mode,
        embedding_dim: m.embedding.d,
        epochs_trained: m.log.len(),
        split: state.split.clone(),
        num_instances: state.instances.as_ref().map_or(0, Dataset::len),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InstanceList {
    pub split: Option<String>,
    pub ids: Vec<String>,
}

async fn instances(State(state): State<Arc<AppState>>) -> Json<InstanceList> {
    let ids = state
        .instances
        .as_ref()
        .map(|d| d.instances.iter().map(|i| i.id.clone()).collect())
        .unwrap_or_default();
    Json(InstanceList {
        split: state.split.clone(),
        ids,
    })
}

/// A loaded instance by id, or ad-hoc text.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Target {
    pub id: Option<String>,
    pub question: Option<String>,
    pub response: Option<String>,
    pub context: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceRequest {
    #[serde(flatten)]
    pub target: Target,
    pub top_n: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InterventionRequest {
    #[serde(flatten)]
    pub target: Target,
    pub top_n: Option<usize>,
    /// Concept index (as a string key) → replacement `s̃` value in [0, 1].
    #[serde(default)]
    pub overrides: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResponse {
    pub trace: DecisionTrace,
    /// `s̃` after overrides.
    pub observed: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_grade: usize,
    /// `W[ŷ, k] · μ_k` for the new predicted grade.
    pub contributions: Vec<f64>,
    /// `W[ŷ, k] · (μ_k − μ_k^orig)`: per-concept change of the new grade's logit.
    pub contribution_deltas: Vec<f64>,
    pub bias: f64,
}

fn resolve_target(
    state: &AppState,
    target: &Target,
    top_n: usize,
) -> Result<DecisionTrace, ApiError> {
    let model = &state.model;
    match (&target.id, &target.response) {
        (Some(id), None) => {
            let inst = state
                .instances
                .as_ref()
                .and_then(|d| d.get(id))
                .ok_or_else(|| {
                    ApiError::new(StatusCode::NOT_FOUND, format!("unknown instance `{id}`"))
                })?;
            Ok(trace_with_labels(
                model,
                inst,
                Some((inst.concept_labels.as_slice(), inst.grade)),
                top_n,
            )?)
        }
        (None, Some(response)) => {
            if model.embedding.mode != EmbeddingMode::Toy {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "ad-hoc text needs a model with toy embeddings",
                ));
            }
            let inst = GradingInstance {
                id: "ad-hoc".into(),
                question: target.question.clone().unwrap_or_default(),
                response: response.clone(),
                context: target.context.clone(),
                concept_labels: vec![0; model.spec.num_concepts],
                grade: 0,
            };
            Ok(trace_with_labels(model, &inst, None, top_n)?)
        }
        _ => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "give either `id` or `response` (with optional `question` and `context`)",
        )),
    }
}

async fn trace(
    State(state): State<Arc<AppState>>,
    body: Result<Json<TraceRequest>, JsonRejection>,
) -> Result<Json<DecisionTrace>, ApiError> {
    let Json(req) = body?;
    let trace = resolve_target(&state, &req.target, req.top_n.unwrap_or(DEFAULT_TOP_N))?;
    Ok(Json(trace))
}

/// Parses and range-checks override keys and values.
pub fn parse_overrides(
    raw: &BTreeMap<String, f64>,
    k: usize,
) -> Result<Vec<(usize, f64)>, ApiError> {
    raw.iter()
        .map(|(key, &value)| {
            let idx: usize = key.parse().map_err(|_| {
                ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("override key `{key}` is not a concept index"),
                )
            })?;
            if idx >= k {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("concept index {idx} out of range 0..{k}"),
                ));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    format!("override for concept {idx} is {value}, outside [0, 1]"),
                ));
            }
            Ok((idx, value))
        })
        .collect()
}

pub fn apply_intervention(
    model: &Model,
    trace: DecisionTrace,
    overrides: &[(usize, f64)],
) -> Result<InterventionResponse, ApiError> {
    let mut observed: Vec<f64> = trace.concepts.iter().map(|c| c.observed).collect();
    for &(k, v) in overrides {
        observed[k] = v;
    }
    let post = model.grade_from_observed(&observed)?;
    let latent = model.latent()?;
    let grade = post.predicted_grade();
    let contributions: Vec<f64> = post
        .mean
        .iter()
        .enumerate()
        .map(|(k, mu)| latent.task_weights[(grade, k)] * mu)
        .collect();
    let contribution_deltas = trace
        .concepts
        .iter()
        .zip(&post.mean)
        .map(|(c, mu)| latent.task_weights[(grade, c.index)] * (mu - c.posterior_mean))
        .collect();
    Ok(InterventionResponse {
        trace,
        observed,
        posterior_mean: post.mean,
        logits: post.logits,
        probabilities: post.probs,
        predicted_grade: grade,
        contributions,
        contribution_deltas,
        bias: latent.task_bias[grade],
    })
}

async fn intervene(
    State(state): State<Arc<AppState>>,
    body: Result<Json<InterventionRequest>, JsonRejection>,
) -> Result<Json<InterventionResponse>, ApiError> {
    let Json(req) = body?;
    let overrides = parse_overrides(&req.overrides, state.model.spec.num_concepts)?;
    let trace = resolve_target(&state, &req.target, req.top_n.unwrap_or(DEFAULT_TOP_N))?;
    Ok(Json(apply_intervention(&state.model, trace, &overrides)?))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
