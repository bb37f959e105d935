//! HTTP interface for the interactive preview client.
//!
//! The prepared scene is immutable and shared. Deformations run one at a
//! time in arrival order; later requests wait in the queue and any running
//! solve can be cancelled.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use splatdeform::handles::HandleSpec;
use splatdeform::pipeline::{deform, Deformation, PipelineConfig, PreparedScene};
use splatdeform::{Error, Vec3};

pub type Solver =
    Arc<dyn Fn(&PreparedScene, &HandleSpec, &PipelineConfig, &AtomicBool) -> splatdeform::Result<Deformation> + Send + Sync>;

const PREVIEW_SEED: u64 = 0x5eed;
const POINTS_PER_CHUNK: usize = 4096;

pub struct AppState {
    scene: Arc<PreparedScene>,
    config: PipelineConfig,
    preview: Vec<usize>,
    solver: Solver,
    run: tokio::sync::Mutex<()>,
    queued: AtomicUsize,
    next_id: AtomicU64,
    completed: AtomicU64,
    current: Mutex<Option<(u64, Arc<AtomicBool>)>>,
}

/// Sorted indices of at most `max` splats, the same on every start.
pub fn preview_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(PREVIEW_SEED);
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

impl AppState {
    pub fn new(scene: PreparedScene, config: PipelineConfig, max_preview: usize) -> Self {
        let preview = preview_indices(scene.splats.len(), max_preview);
        AppState {
            scene: Arc::new(scene),
            config,
            preview,
            solver: Arc::new(|scene, spec, config, cancel| deform(scene, spec, config, Some(cancel))),
            run: tokio::sync::Mutex::new(()),
            queued: AtomicUsize::new(0),
            next_id: AtomicU64::new(1),
            completed: AtomicU64::new(0),
            current: Mutex::new(None),
        }
    }

    /// Replaces the deformation routine, e.g. to instrument it.
    pub fn with_solver(mut self, solver: Solver) -> Self {
        self.solver = solver;
        self
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scene", get(scene))
        .route("/handles", post(handles))
        .route("/deform", post(deform_handler))
        .route("/status", get(status))
        .route("/cancel", post(cancel))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    field: Option<String>,
    message: String,
}

impl ApiError {
    fn bad_request(field: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            kind: "request",
            field: Some(field.into()),
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, kind, field) = match e {
            Error::Handle { field, .. } => (StatusCode::BAD_REQUEST, "handle", Some(field)),
            Error::Cancelled => (StatusCode::CONFLICT, "cancelled", None),
            Error::Singular { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "singular", None),
            Error::Numerical(_) => (StatusCode::UNPROCESSABLE_ENTITY, "numerical", None),
            Error::DegenerateTriangle(_) => (StatusCode::UNPROCESSABLE_ENTITY, "degenerate", None),
            Error::InvalidArgument(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_argument", None),
            _ => (StatusCode::UNPROCESSABLE_ENTITY, "engine", None),
        };
        ApiError { status, kind, field, message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.message, "kind": self.kind, "field": self.field });
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    #[default]
    Json,
    Binary,
}

#[derive(Debug, Default, Deserialize)]
struct FormatQuery {
    #[serde(default)]
    format: Format,
}

#[derive(Serialize)]
struct PreviewEllipse {
    axis1: Vec3,
    axis2: Vec3,
    semi_a: f64,
    semi_b: f64,
}

fn binary_points(points: impl ExactSizeIterator<Item = Vec3> + Send + 'static) -> Body {
    let mut header = Vec::with_capacity(4);
    header.extend_from_slice(&(points.len() as u32).to_le_bytes());
    let mut chunks = vec![header];
    let mut buf = Vec::with_capacity(POINTS_PER_CHUNK * 12);
    for p in points {
        for k in 0..3 {
            buf.extend_from_slice(&(p[k] as f32).to_le_bytes());
        }
        if buf.len() == POINTS_PER_CHUNK * 12 {
            chunks.push(std::mem::take(&mut buf));
        }
    }
    if !buf.is_empty() {
        chunks.push(buf);
    }
    Body::from_stream(futures_util::stream::iter(chunks.into_iter().map(Ok::<_, std::io::Error>)))
}

fn octet_stream(body: Body, id: Option<u64>) -> Response {
    let mut r = Response::new(body);
    r.headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    if let Some(id) = id {
        r.headers_mut().insert("x-deform-id", HeaderValue::from(id));
    }
    r
}

async fn scene(State(state): State<Arc<AppState>>, Query(q): Query<FormatQuery>) -> Response {
    let scene = &state.scene;
    match q.format {
        Format::Binary => {
            let means: Vec<Vec3> = state.preview.iter().map(|&i| scene.means[i]).collect();
            octet_stream(binary_points(means.into_iter()), None)
        }
        Format::Json => {
            let c = scene.splats.layout.options.min_contribution;
            let ellipses: Vec<Option<PreviewEllipse>> = state
                .preview
                .iter()
                .map(|&i| {
                    splatdeform::splat::occupancy_ellipse(&scene.splats.splats[i], c).map(|e| PreviewEllipse {
                        axis1: e.axis1,
                        axis2: e.axis2,
                        semi_a: e.semi_a,
                        semi_b: e.semi_b,
                    })
                })
                .collect();
            let means: Vec<Vec3> = state.preview.iter().map(|&i| scene.means[i]).collect();
            Json(json!({
                "splats": scene.splats.len(),
                "scale": scene.scale.value(),
                "indices": state.preview,
                "means": means,
                "ellipses": ellipses,
            }))
            .into_response()
        }
    }
}

fn parse_spec(body: &Bytes) -> Result<HandleSpec, ApiError> {
    let value: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request("$", e.to_string()))?;
    Ok(HandleSpec::from_json(&value)?)
}

async fn handles(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let spec = parse_spec(&body)?;
    let resolved = state.scene.resolve(&spec)?;
    let out: Vec<Value> = resolved
        .iter()
        .map(|h| {
            let p = state.scene.means[h.anchor];
            json!({ "anchor": h.anchor, "position": p, "target": h.apply(&p), "transform": h.transform })
        })
        .collect();
    Ok(Json(json!({ "method": spec.method, "handles": out })))
}

/// Queue slot; released even when the client goes away while waiting.
struct Waiting<'a>(&'a AtomicUsize);

impl Drop for Waiting<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Marks a job as running. Dropping it cancels the solve, so an abandoned
/// request does not keep the worker busy.
struct Running<'a> {
    state: &'a AppState,
    flag: Arc<AtomicBool>,
    finished: bool,
}

impl Drop for Running<'_> {
    fn drop(&mut self) {
        if !self.finished {
            self.flag.store(true, Ordering::SeqCst);
        }
        *self.state.current.lock().unwrap() = None;
    }
}

async fn deform_handler(
    State(state): State<Arc<AppState>>,
    Query(q): Query<FormatQuery>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let spec = parse_spec(&body)?;
    let id = state.next_id.fetch_add(1, Ordering::SeqCst);

    state.queued.fetch_add(1, Ordering::SeqCst);
    let waiting = Waiting(&state.queued);
    let _turn = state.run.lock().await;
    drop(waiting);

    let flag = Arc::new(AtomicBool::new(false));
    *state.current.lock().unwrap() = Some((id, flag.clone()));
    let mut running = Running { state: &state, flag: flag.clone(), finished: false };
    let (scene, config, solver) = (state.scene.clone(), state.config.clone(), state.solver.clone());
    let result = tokio::task::spawn_blocking(move || solver(&scene, &spec, &config, &flag))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal",
            field: None,
            message: e.to_string(),
        })?;
    running.finished = true;
    drop(running);
    let d = result?;
    state.completed.fetch_add(1, Ordering::SeqCst);

    Ok(match q.format {
        Format::Binary => octet_stream(binary_points(d.positions.into_iter()), Some(id)),
        Format::Json => {
            let (iterations, converged) = d.arap.as_ref().map_or((None, None), |r| (Some(r.iterations), Some(r.converged)));
            Json(json!({
                "id": id,
                "method": d.method,
                "iterations": iterations,
                "converged": converged,
                "positions": d.positions,
            }))
            .into_response()
        }
    })
}

async fn status(State(state): State<Arc<AppState>>) -> Json<Value> {
    let running = state.current.lock().unwrap().as_ref().map(|(id, _)| *id);
    Json(json!({
        "state": if running.is_some() { "running" } else { "idle" },
        "running": running,
        "queue_depth": state.queued.load(Ordering::SeqCst),
        "completed": state.completed.load(Ordering::SeqCst),
    }))
}

async fn cancel(State(state): State<Arc<AppState>>) -> Json<Value> {
    let current = state.current.lock().unwrap().clone();
    let cancelled = current.map(|(id, flag)| {
        flag.store(true, Ordering::SeqCst);
        id
    });
    Json(json!({ "cancelled": cancelled }))
}
