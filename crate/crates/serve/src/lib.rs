//! HTTP session service for interactive iterative segmentation.
//!
//! Each session owns one [`EvolutionState`]; requests on the same session
//! are serialized by its lock while different sessions run concurrently.
//! See `docs/api.md` for request and response bodies.

pub mod rle;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path as FsPath, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iterseg::evolve::{export_history, EvolutionState, EvolveOptions, Override};
use iterseg::grid::{seed_to_map, Image, Seed};
use iterseg::segnet::{Model, NetMode};
use iterseg::{gridio, SegError};
use serde::{Deserialize, Serialize};

pub use rle::RleMap;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<SegError> for ApiError {
    fn from(e: SegError) -> Self {
        match e {
            SegError::OutOfBounds { .. }
            | SegError::Param(_)
            | SegError::Shape(_)
            | SegError::Grid(_)
            | SegError::Label { .. }
            | SegError::Config(_) => ApiError::Unprocessable(e.to_string()),
            SegError::Format(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Errors raised while assembling the server.
#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("no models given")]
    NoModels,
    #[error("model {0:?} is not an iterative model")]
    NotIterative(String),
    #[error("default model {0:?} is not among the loaded models")]
    MissingDefault(String),
    #[error(transparent)]
    Seg(#[from] SegError),
}

pub struct ServerConfig {
    pub models: BTreeMap<String, Model>,
    pub default_model: String,
    pub options: EvolveOptions,
    /// Directory receiving a history snapshot of every session after each change.
    pub persist_dir: Option<PathBuf>,
    /// Directory served at `/` for the browser client.
    pub static_dir: Option<PathBuf>,
}

struct ImageRecord {
    image: Image,
    source: &'static str,
}

struct Session {
    image_id: String,
    model: String,
    state: EvolutionState,
    created: u64,
    updated: u64,
}

struct Inner {
    models: BTreeMap<String, Arc<Model>>,
    default_model: String,
    options: EvolveOptions,
    persist_dir: Option<PathBuf>,
    images: RwLock<BTreeMap<String, Arc<ImageRecord>>>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
    next_upload: AtomicU64,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
    static_dir: Option<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl AppState {
    pub fn new(config: ServerConfig) -> Result<Self, SetupError> {
        if config.models.is_empty() {
            return Err(SetupError::NoModels);
        }
        for (name, m) in &config.models {
            if m.config.mode != NetMode::Iterative {
                return Err(SetupError::NotIterative(name.clone()));
            }
        }
        if !config.models.contains_key(&config.default_model) {
            return Err(SetupError::MissingDefault(config.default_model));
        }
        let models = config.models.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        Ok(Self {
            inner: Arc::new(Inner {
                models,
                default_model: config.default_model,
                options: config.options,
                persist_dir: config.persist_dir,
                images: RwLock::new(BTreeMap::new()),
                sessions: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(1),
                next_upload: AtomicU64::new(1),
            }),
            static_dir: config.static_dir,
        })
    }

    /// Registers an image under `id`; fails if the id is taken.
    pub fn add_image(&self, id: &str, image: Image) -> Result<(), ApiError> {
        self.insert_image(id, image, "dataset")
    }

    fn insert_image(&self, id: &str, image: Image, source: &'static str) -> Result<(), ApiError> {
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(ApiError::BadRequest(format!("invalid image id {id:?}")));
        }
        let mut images = self.inner.images.write().expect("image lock");
        if images.contains_key(id) {
            return Err(ApiError::Conflict(format!("image {id:?} already exists")));
        }
        images.insert(id.to_string(), Arc::new(ImageRecord { image, source }));
        Ok(())
    }

    /// Registers every case image of a saved dataset as `<prefix>/case_XXX`.
    pub fn add_dataset(&self, dir: &FsPath, prefix: &str) -> Result<usize, SetupError> {
        let ds = iterseg::synthgen::load_dataset(dir)?;
        for c in &ds.cases {
            self.add_image(&format!("{prefix}/case_{:03}", c.id), c.image.clone())
                .map_err(|e| SetupError::Seg(SegError::Param(e.to_string())))?;
        }
        Ok(ds.cases.len())
    }

    fn image(&self, id: &str) -> Result<Arc<ImageRecord>, ApiError> {
        self.inner
            .images
            .read()
            .expect("image lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown image {id:?}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.inner
            .sessions
            .lock()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn persist(&self, id: &str, s: &Session) -> Result<(), ApiError> {
        if let Some(dir) = &self.inner.persist_dir {
            export_history(&dir.join(id), &s.state)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub dims: Vec<usize>,
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageData {
    pub id: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub image: String,
    /// Seed voxel coordinates in grid order (row, column).
    pub seed: Vec<usize>,
    #[serde(default)]
    pub radius: Option<u32>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub options: Option<EvolveOptions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub t: usize,
    pub map: RleMap,
    pub stop_prob: Option<f64>,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub image: String,
    pub model: String,
    pub seed: Vec<usize>,
    pub radius: u32,
    pub options: EvolveOptions,
    pub step: usize,
    pub first_stop: Option<usize>,
    pub stopped_at: Option<usize>,
    pub max_steps_reached: bool,
    pub stop_probs: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    #[serde(flatten)]
    pub view: SessionView,
    pub created: u64,
    pub updated: u64,
}

/// Session summary plus a range of steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSteps {
    pub session: SessionView,
    pub steps: Vec<StepView>,
}

fn view(id: &str, s: &Session) -> SessionView {
    let st = &s.state;
    SessionView {
        id: id.to_string(),
        image: s.image_id.clone(),
        model: s.model.clone(),
        seed: st.seed.coord.clone(),
        radius: st.seed.radius,
        options: st.options.clone(),
        step: st.step(),
        first_stop: st.first_stop(),
        stopped_at: st.stopped_at(),
        max_steps_reached: st.step() >= st.options.max_steps,
        stop_probs: st.stop_probs(),
    }
}

fn steps_from(id: &str, s: &Session, from: usize) -> SessionSteps {
    let steps = s.state.history()[from.min(s.state.history().len())..]
        .iter()
        .enumerate()
        .map(|(k, r)| StepView {
            t: from + k,
            map: rle::encode(&r.map),
            stop_prob: r.stop_prob,
            stop: r.stop,
        })
        .collect();
    SessionSteps { session: view(id, s), steps }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn list_images(State(app): State<AppState>) -> ApiResult<Vec<ImageInfo>> {
    let images = app.inner.images.read().expect("image lock");
    Ok(Json(
        images
            .iter()
            .map(|(id, r)| ImageInfo {
                id: id.clone(),
                dims: r.image.dims().as_slice().to_vec(),
                source: r.source.to_string(),
            })
            .collect(),
    ))
}

async fn get_image(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<ImageData> {
    let r = app.image(&id)?;
    Ok(Json(ImageData {
        id,
        dims: r.image.dims().as_slice().to_vec(),
        data: r.image.data().to_vec(),
    }))
}

#[derive(Debug, Deserialize)]
struct UploadQuery {
    name: Option<String>,
}

async fn upload_image(
    State(app): State<AppState>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> Result<(StatusCode, Json<ImageInfo>), ApiError> {
    let image = if body.starts_with(gridio::MAGIC) {
        gridio::decode_image(&body)?
    } else if body.starts_with(b"P5") {
        gridio::decode_pgm(&body)?
    } else {
        return Err(ApiError::BadRequest("body is neither a grid image file nor a binary PGM".into()));
    };
    let id = match q.name {
        Some(n) => n,
        None => format!("upload/{}", app.inner.next_upload.fetch_add(1, Ordering::Relaxed)),
    };
    let dims = image.dims().as_slice().to_vec();
    app.insert_image(&id, image, "upload")?;
    Ok((StatusCode::CREATED, Json(ImageInfo { id, dims, source: "upload".into() })))
}

async fn create_session(
    State(app): State<AppState>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionSteps>), ApiError> {
    let record = app.image(&req.image)?;
    let model = req.model.unwrap_or_else(|| app.inner.default_model.clone());
    let net = app
        .inner
        .models
        .get(&model)
        .ok_or_else(|| ApiError::NotFound(format!("unknown model {model:?}")))?;
    net.config.check_dims(record.image.dims())?;
    let options = req.options.unwrap_or_else(|| app.inner.options.clone());
    if !(0.0..=1.0).contains(&options.stop_threshold) {
        return Err(ApiError::Unprocessable(format!("stop_threshold {} outside [0, 1]", options.stop_threshold)));
    }
    let seed = Seed::new(req.seed, req.radius.unwrap_or(2));
    let initial = seed_to_map(&seed, record.image.dims())?;
    let state = EvolutionState::start(record.image.clone(), seed, initial, options)?;
    let id = format!("s{}", app.inner.next_session.fetch_add(1, Ordering::Relaxed));
    let t = now();
    let session = Session {
        image_id: req.image,
        model,
        state,
        created: t,
        updated: t,
    };
    app.persist(&id, &session)?;
    let out = steps_from(&id, &session, 0);
    app.inner
        .sessions
        .lock()
        .expect("session table lock")
        .insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(out)))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionInfo> {
    let s = app.session(&id)?;
    let s = s.lock().expect("session lock");
    Ok(Json(SessionInfo {
        view: view(&id, &s),
        created: s.created,
        updated: s.updated,
    }))
}

async fn step_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<StepRequest>,
) -> ApiResult<SessionSteps> {
    let handle = app.session(&id)?;
    blocking(move || {
        let mut s = handle.lock().expect("session lock");
        let model = app.inner.models[&s.model].clone();
        let before = s.state.step();
        let room = s.state.options.max_steps.saturating_sub(before);
        s.state.advance(&model, req.n.min(room))?;
        s.updated = now();
        app.persist(&id, &s)?;
        Ok(Json(steps_from(&id, &s, before + 1)))
    })
    .await
}

async fn override_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Json(action): Json<Override>,
) -> ApiResult<SessionSteps> {
    let handle = app.session(&id)?;
    blocking(move || {
        let mut s = handle.lock().expect("session lock");
        let model = app.inner.models[&s.model].clone();
        let next = s.state.apply(&model, &action).map_err(|e| match e {
            SegError::Nd(_) | SegError::Io(_) => ApiError::from(e),
            other => ApiError::Unprocessable(other.to_string()),
        })?;
        let keep = common_prefix(&s.state, &next);
        s.state = next;
        s.updated = now();
        app.persist(&id, &s)?;
        Ok(Json(steps_from(&id, &s, keep)))
    })
    .await
}

/// First step index whose record differs between two states.
fn common_prefix(a: &EvolutionState, b: &EvolutionState) -> usize {
    a.history().iter().zip(b.history()).take_while(|(x, y)| x == y).count()
}

async fn history(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionSteps> {
    let s = app.session(&id)?;
    let s = s.lock().expect("session lock");
    Ok(Json(steps_from(&id, &s, 0)))
}

async fn delete_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    app.inner
        .sessions
        .lock()
        .expect("session table lock")
        .remove(&id)
        .map(|_| StatusCode::NO_CONTENT)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
}

async fn list_models(State(app): State<AppState>) -> Json<serde_json::Value> {
    let models: Vec<_> = app
        .inner
        .models
        .iter()
        .map(|(name, m)| serde_json::json!({ "name": name, "config": m.config, "default": *name == app.inner.default_model }))
        .collect();
    Json(serde_json::Value::Array(models))
}

pub fn router(app: AppState) -> Router {
    let static_dir = app.static_dir.clone();
    let api = Router::new()
        .route("/images", get(list_images).post(upload_image))
        .route("/images/{*id}", get(get_image))
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/step", post(step_session))
        .route("/sessions/{id}/override", post(override_session))
        .route("/sessions/{id}/history", get(history))
        .with_state(app);
    match static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until the process is stopped.
pub async fn serve(app: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(app)).await
}
