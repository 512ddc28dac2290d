//! JSON over HTTP.
//!
//! Model calls can block (observe waits for its shard), so every handler runs
//! on tokio's blocking pool.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{Item, Observation};
use crate::serving::{ModelStatus, Prediction, Scored, Server, TopK};

#[derive(Debug, Deserialize)]
pub struct PredictRequest {
    pub model: String,
    pub uid: u64,
    pub item: Item,
}

#[derive(Debug, Deserialize)]
pub struct TopKRequest {
    pub model: String,
    pub uid: u64,
    pub items: Vec<Item>,
    pub k: usize,
}

#[derive(Debug, Serialize)]
pub struct TopKResponse {
    pub results: Vec<Scored>,
    pub skipped: usize,
    pub version: u64,
}

#[derive(Debug, Deserialize)]
pub struct ObserveRequest {
    pub model: String,
    pub uid: u64,
    pub item: Item,
    pub label: f64,
    #[serde(default)]
    pub exploratory: bool,
}

#[derive(Debug, Serialize)]
pub struct ObserveResponse {
    pub ok: bool,
    pub error: f64,
    pub version: u64,
    pub seq: u64,
}

#[derive(Debug, Serialize)]
pub struct RetrainResponse {
    pub version: u64,
}

#[derive(Debug, Deserialize)]
pub struct RollbackQuery {
    pub version: u64,
}

#[derive(Debug, Serialize)]
pub struct RollbackResponse {
    pub version: u64,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    retriable: bool,
}

/// An [`Error`] rendered as a JSON response.
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_code(e: &Error) -> StatusCode {
    match e {
        Error::UnknownModel(_) | Error::UnknownItem(_) | Error::UnknownUser(_) | Error::UnknownVersion(_) => {
            StatusCode::NOT_FOUND
        }
        Error::DimensionMismatch { .. } | Error::NonFinite(_) | Error::InvalidSchema(_) | Error::InvalidArgument(_) => {
            StatusCode::BAD_REQUEST
        }
        Error::ModelExists(_) | Error::RetrainInFlight(_) => StatusCode::CONFLICT,
        Error::EmptyLog => StatusCode::UNPROCESSABLE_ENTITY,
        Error::LogAppend(_) | Error::ShuttingDown(_) => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.0.to_string(),
            retriable: self.0.is_retriable(),
        };
        (status_code(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> crate::Result<T> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(ApiError),
        Err(e) => Err(ApiError(Error::ShuttingDown(e.to_string()))),
    }
}

async fn predict(State(s): State<Arc<Server>>, Json(req): Json<PredictRequest>) -> ApiResult<Prediction> {
    blocking(move || s.predict(&req.model, req.uid, req.item)).await
}

async fn top_k(State(s): State<Arc<Server>>, Json(req): Json<TopKRequest>) -> ApiResult<TopKResponse> {
    blocking(move || {
        let TopK {
            results,
            skipped,
            version,
            ..
        } = s.top_k(&req.model, req.uid, &req.items, req.k)?;
        Ok(TopKResponse {
            results,
            skipped,
            version,
        })
    })
    .await
}

async fn observe(State(s): State<Arc<Server>>, Json(req): Json<ObserveRequest>) -> ApiResult<ObserveResponse> {
    blocking(move || {
        let mut obs = Observation::new(req.uid, req.item, req.label);
        obs.exploratory = req.exploratory;
        let ack = s.observe(&req.model, obs)?;
        Ok(ObserveResponse {
            ok: true,
            error: ack.error,
            version: ack.version,
            seq: ack.seq,
        })
    })
    .await
}

async fn status(State(s): State<Arc<Server>>, Path(name): Path<String>) -> ApiResult<ModelStatus> {
    blocking(move || s.status(&name)).await
}

async fn retrain(State(s): State<Arc<Server>>, Path(name): Path<String>) -> ApiResult<RetrainResponse> {
    blocking(move || {
        let handle = s.trigger_retrain(&name, "manual")?;
        Ok(RetrainResponse { version: handle.version })
    })
    .await
}

async fn rollback(
    State(s): State<Arc<Server>>,
    Path(name): Path<String>,
    Query(q): Query<RollbackQuery>,
) -> ApiResult<RollbackResponse> {
    blocking(move || {
        s.rollback(&name, q.version)?;
        Ok(RollbackResponse { version: q.version })
    })
    .await
}

async fn models(State(s): State<Arc<Server>>) -> Json<Vec<String>> {
    Json(s.model_names())
}

pub fn router(server: Arc<Server>) -> Router {
    Router::new()
        .route("/predict", post(predict))
        .route("/topk", post(top_k))
        .route("/observe", post(observe))
        .route("/models", get(models))
        .route("/models/{name}/status", get(status))
        .route("/models/{name}/retrain", post(retrain))
        .route("/models/{name}/rollback", post(rollback))
        .with_state(server)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    server: Arc<Server>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(server))
        .with_graceful_shutdown(shutdown)
        .await
}
