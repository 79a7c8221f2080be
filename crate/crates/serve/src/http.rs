use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use carrot_core::model::Model;
use serde::Serialize;
use serde_json::json;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;

use crate::kb::RemedyTable;
use crate::predict::{predict_image, PredictError, MAX_UPLOAD_BYTES};

const FALLBACK_INDEX: &str = include_str!("../static/index.html");

/// Room for multipart boundaries and headers on top of the image itself.
const MULTIPART_OVERHEAD: usize = 64 * 1024;

/// Shared, read-only service state.
#[derive(Clone)]
pub struct AppState {
    pub model: Option<Arc<Model>>,
    pub kb: Arc<RemedyTable>,
}

impl AppState {
    pub fn new(model: Option<Model>, kb: RemedyTable) -> Self {
        Self { model: model.map(Arc::new), kb: Arc::new(kb) }
    }
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

impl From<PredictError> for ApiError {
    fn from(e: PredictError) -> Self {
        let (status, code) = match e {
            PredictError::TooLarge(_) => (StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large"),
            PredictError::BadImage(_) => (StatusCode::BAD_REQUEST, "bad_image"),
            PredictError::ModelUnavailable => (StatusCode::SERVICE_UNAVAILABLE, "model_unavailable"),
            PredictError::Inference(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

fn too_large() -> ApiError {
    ApiError::new(
        StatusCode::PAYLOAD_TOO_LARGE,
        "payload_too_large",
        format!("upload exceeds the {MAX_UPLOAD_BYTES}-byte limit"),
    )
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_loaded": state.model.is_some() }))
}

#[derive(Serialize)]
struct ClassInfo<'a> {
    key: &'a str,
    name_en: &'a str,
    name_bn: &'a str,
}

async fn classes(State(state): State<AppState>) -> Response {
    let list: Vec<ClassInfo<'_>> = state
        .kb
        .entries()
        .iter()
        .map(|e| ClassInfo { key: &e.key, name_en: &e.disease_name_en, name_bn: &e.disease_name_bn })
        .collect();
    Json(list).into_response()
}

async fn predict(State(state): State<AppState>, mut multipart: Multipart) -> Result<Response, ApiError> {
    let mut image = None;
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large()),
            Err(e) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())),
        };
        if field.name() != Some("image") {
            continue;
        }
        match field.bytes().await {
            Ok(b) => image = Some(b),
            Err(e) if e.status() == StatusCode::PAYLOAD_TOO_LARGE => return Err(too_large()),
            Err(e) => return Err(ApiError::new(StatusCode::BAD_REQUEST, "bad_request", e.body_text())),
        }
    }
    let bytes = image.ok_or_else(|| {
        ApiError::new(StatusCode::BAD_REQUEST, "bad_image", "expected an image in multipart field 'image'")
    })?;
    if state.model.is_none() {
        return Err(PredictError::ModelUnavailable.into());
    }
    let result = tokio::task::spawn_blocking(move || predict_image(state.model.as_deref(), &state.kb, &bytes))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(result?).into_response())
}

/// API routes plus the web bundle at `/`. Without a bundle directory a
/// short page listing the endpoints is served at `/`.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/api/v1/classes", get(classes))
        .route("/api/v1/predict", post(predict).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + MULTIPART_OVERHEAD)))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(FALLBACK_INDEX) })),
    }
}

/// Serve on an already bound listener until `shutdown` resolves.
pub async fn serve_with_shutdown(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn termination_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutdown signal received");
}

/// Bind `addr` and serve until a termination signal arrives.
pub async fn run(addr: SocketAddr, state: AppState, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    serve_with_shutdown(listener, router(state, static_dir), termination_signal()).await
}
