//! HTTP routes over [`Service`].

use std::net::SocketAddr;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use qmw_core::telemetry::EXPOSITION_CONTENT_TYPE;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;
use tokio::sync::oneshot;

use crate::service::{ApiError, Caller, Service, SessionRequest, Settings, StartupError, SubmitRequest};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body())).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn bearer(headers: &HeaderMap) -> ApiResult<&str> {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| ApiError::Unauthorized("missing bearer token".into()))
}

fn admin(headers: &HeaderMap) -> ApiResult<&str> {
    headers
        .get("x-admin-token")
        .and_then(|v| v.to_str().ok())
        .ok_or_else(|| ApiError::Unauthorized("missing X-Admin-Token header".into()))
}

/// Admin token wins when both are present.
fn caller(headers: &HeaderMap) -> ApiResult<Caller<'_>> {
    match admin(headers) {
        Ok(t) => Ok(Caller::Admin(t)),
        Err(_) => bearer(headers).map(Caller::Session),
    }
}

fn json<T: serde::Serialize>(v: T) -> ApiResult<Json<Value>> {
    serde_json::to_value(v)
        .map(Json)
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn create_session(State(s): State<Service>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: SessionRequest = parse(&body)?;
    Ok((StatusCode::CREATED, json(s.create_session(&req)?)?))
}

async fn close_session(State(s): State<Service>, h: HeaderMap) -> ApiResult<Json<Value>> {
    Ok(Json(s.close_session(bearer(&h)?)?))
}

async fn submit(State(s): State<Service>, h: HeaderMap, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let token = bearer(&h)?;
    let req: SubmitRequest = parse(&body)?;
    Ok((StatusCode::CREATED, json(s.submit(token, req)?)?))
}

async fn list_jobs(State(s): State<Service>, h: HeaderMap) -> ApiResult<Json<Value>> {
    json(s.list_jobs(bearer(&h)?)?)
}

async fn get_job(State(s): State<Service>, h: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json(s.job(caller(&h)?, &id)?)
}

async fn cancel_job(State(s): State<Service>, h: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json(s.cancel(caller(&h)?, &id)?)
}

async fn resources(State(s): State<Service>, h: HeaderMap) -> ApiResult<Json<Value>> {
    json(s.resources(caller(&h)?)?)
}

async fn target(State(s): State<Service>, h: HeaderMap, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    json(s.target(caller(&h)?, &id)?)
}

async fn metrics(State(s): State<Service>) -> Response {
    ([(header::CONTENT_TYPE, EXPOSITION_CONTENT_TYPE)], s.render_metrics()).into_response()
}

async fn health(State(s): State<Service>) -> Json<Value> {
    Json(s.health())
}

// the body is ignored but read, so the connection stays reusable
async fn drain(State(s): State<Service>, h: HeaderMap, _body: Bytes) -> ApiResult<Json<Value>> {
    Ok(Json(s.drain(admin(&h)?)?))
}

async fn resume(State(s): State<Service>, h: HeaderMap, _body: Bytes) -> ApiResult<Json<Value>> {
    Ok(Json(s.resume(admin(&h)?)?))
}

#[derive(Deserialize)]
struct CalibrationRequest {
    resource_id: String,
    max_amplitude: f64,
}

async fn calibration(State(s): State<Service>, h: HeaderMap, body: Bytes) -> ApiResult<Json<Value>> {
    let token = admin(&h)?;
    let req: CalibrationRequest = parse(&body)?;
    json(s.set_calibration(token, &req.resource_id, req.max_amplitude)?)
}

async fn queue(State(s): State<Service>, h: HeaderMap) -> ApiResult<Json<Value>> {
    json(s.dump_queue(admin(&h)?)?)
}

async fn not_found() -> ApiError {
    ApiError::NotFound("no such route".into())
}

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/current", axum::routing::delete(close_session))
        .route("/v1/jobs", post(submit).get(list_jobs))
        .route("/v1/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/v1/resources", get(resources))
        .route("/v1/resources/{id}/target", get(target))
        .route("/v1/admin/drain", post(drain))
        .route("/v1/admin/resume", post(resume))
        .route("/v1/admin/calibration", post(calibration))
        .route("/v1/admin/queue", get(queue))
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .fallback(not_found)
        .with_state(service)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Startup(#[from] StartupError),
    #[error("binding {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A daemon running on background threads.
pub struct DaemonHandle {
    pub addr: SocketAddr,
    pub service: Service,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl DaemonHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops the HTTP server and the batch drivers. Batches in flight are
    /// abandoned exactly as in a crash; the event log holds everything
    /// committed so far.
    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.service.shutdown();
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

fn bind(addr: &str) -> Result<std::net::TcpListener, ServeError> {
    let l = std::net::TcpListener::bind(addr).map_err(|source| ServeError::Bind {
        addr: addr.to_string(),
        source,
    })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
}

/// Starts a daemon on `addr` (use port 0 for an ephemeral one) and returns
/// once it accepts connections.
pub fn spawn(settings: Settings, addr: &str) -> Result<DaemonHandle, ServeError> {
    let listener = bind(addr)?;
    let local = listener.local_addr()?;
    let service = Service::start(settings)?;
    let app = router(service.clone());
    let rt = runtime()?;
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            // open connections are dropped, not drained
            tokio::select! {
                _ = axum::serve(listener, app) => {}
                _ = rx => {}
            }
        });
        rt.shutdown_background();
    });
    Ok(DaemonHandle {
        addr: local,
        service,
        stop: Some(tx),
        thread: Some(thread),
    })
}

/// Runs a daemon in the foreground until Ctrl-C.
pub fn serve(settings: Settings, addr: &str) -> Result<(), ServeError> {
    let listener = bind(addr)?;
    let service = Service::start(settings)?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let app = router(service.clone());
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    service.shutdown();
    Ok(())
}
