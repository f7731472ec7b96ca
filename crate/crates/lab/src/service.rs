//! Interactive steering service.
//!
//! Sessions live in memory and expire after `ttl` of inactivity. All routes
//! speak JSON; errors come back as `{"error": "...", "unknown_words": [...]}`
//! with the `unknown_words` field only present for rejected thoughts.
//!
//! ```text
//! POST   /sessions            {"family","n_objects","seed","mode","checkpoint"[,"low_level_checkpoint"]}
//! POST   /sessions/{id}/step  {"thought"?: string, "mode"?: string}
//! GET    /sessions/{id}
//! DELETE /sessions/{id}
//! GET    /checkpoints
//! GET    /vocab[?checkpoint=name]
//! ```
//!
//! `mode` on a step request is only accepted when it equals the session's
//! mode; anything else is a 409. Checkpoint names are file names inside the
//! served checkpoint directory.

use std::collections::HashMap;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hyt_core::codec::{parse_thought_text, render_thought, CodecError, ModalityConfig, Vocabulary};
use hyt_core::eval::{Decision, DecodeConfig, Mode, Models, Policy, ProvidedThought, ThoughtSource};
use hyt_core::net::ModelParameters;
use hyt_core::rng::{self, Rng};
use hyt_core::world::{self, check_success, Action, TaskFamily, WorldConfig, WorldState};
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;

use crate::checkpoint::{manifest, Checkpoint, VocabManifest};
use crate::runner::vocabulary;
use crate::WallClock;

pub const DEFAULT_TTL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, PartialEq)]
pub enum ServiceError {
    NotFound(String),
    BadRequest(String),
    UnknownWords(Vec<String>),
    Conflict(String),
    Internal(String),
}

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownWords(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknown_words: Option<Vec<String>>,
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = self.status();
        let body = match self {
            ServiceError::UnknownWords(w) => {
                ErrorBody { error: format!("unknown words: {}", w.join(", ")), unknown_words: Some(w) }
            }
            ServiceError::NotFound(m)
            | ServiceError::BadRequest(m)
            | ServiceError::Conflict(m)
            | ServiceError::Internal(m) => ErrorBody { error: m, unknown_words: None },
        };
        (status, Json(body)).into_response()
    }
}

type SResult<T> = std::result::Result<T, ServiceError>;

/// A checkpoint loaded once and shared read-only by every session using it.
#[derive(Debug)]
pub struct LoadedModel {
    pub name: String,
    pub params: ModelParameters,
    pub vocab: Vocabulary,
    pub modality: ModalityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub family: TaskFamily,
    pub n_objects: usize,
    pub seed: u64,
    pub mode: Mode,
    pub checkpoint: String,
    /// Follow-mode executor, hierarchical sessions only.
    #[serde(default)]
    pub low_level_checkpoint: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRequest {
    #[serde(default)]
    pub thought: Option<String>,
    #[serde(default)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub actions: Vec<Action>,
    pub thought: Option<String>,
    pub thought_source: Option<ThoughtSource>,
    pub tokens_generated: usize,
    pub decode_seconds: f64,
    pub malformed: bool,
    pub success: bool,
    pub warning: Option<String>,
    pub scene: WorldState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub mode: Mode,
    pub checkpoint: String,
    pub low_level_checkpoint: Option<String>,
    pub task: String,
    pub scene: WorldState,
    pub success: bool,
    /// Unix seconds.
    pub created_at: u64,
    pub history: Vec<StepRecord>,
}

struct Session {
    id: String,
    mode: Mode,
    model: Arc<LoadedModel>,
    low_level: Option<Arc<LoadedModel>>,
    state: WorldState,
    rng: Rng,
    history: Vec<StepRecord>,
    created_at: u64,
    last_used: Instant,
}

impl Session {
    fn view(&self) -> SessionView {
        SessionView {
            id: self.id.clone(),
            mode: self.mode,
            checkpoint: self.model.name.clone(),
            low_level_checkpoint: self.low_level.as_ref().map(|m| m.name.clone()),
            task: self.state.task.text.clone(),
            scene: self.state.clone(),
            success: check_success(&self.state),
            created_at: self.created_at,
            history: self.history.clone(),
        }
    }
}

/// Where checkpoints come from. The directory-backed source is what the CLI
/// serves; tests may register models in memory.
pub struct ModelSource {
    dir: Option<PathBuf>,
    cache: Mutex<HashMap<String, Arc<LoadedModel>>>,
}

impl ModelSource {
    pub fn directory(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()), cache: Mutex::new(HashMap::new()) }
    }

    pub fn in_memory() -> Self {
        Self { dir: None, cache: Mutex::new(HashMap::new()) }
    }

    pub fn insert(&self, name: &str, params: ModelParameters, vocab: Vocabulary, modality: ModalityConfig) {
        let m = LoadedModel { name: name.to_string(), params, vocab, modality };
        self.cache.lock().unwrap().insert(name.to_string(), Arc::new(m));
    }

    fn resolve(dir: &Path, name: &str) -> SResult<PathBuf> {
        let rel = Path::new(name);
        if name.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(ServiceError::BadRequest(format!("checkpoint `{name}` must be a plain file name inside the checkpoint directory")));
        }
        Ok(dir.join(rel))
    }

    pub fn load(&self, name: &str) -> SResult<Arc<LoadedModel>> {
        if let Some(m) = self.cache.lock().unwrap().get(name) {
            return Ok(m.clone());
        }
        let dir = self.dir.as_ref().ok_or_else(|| ServiceError::BadRequest(format!("unknown checkpoint `{name}`")))?;
        let path = Self::resolve(dir, name)?;
        let ck = Checkpoint::load(&path).map_err(|e| ServiceError::BadRequest(format!("checkpoint `{name}`: {e}")))?;
        let vocab = ck.vocabulary();
        ck.check_vocab(&vocab).map_err(|e| ServiceError::BadRequest(format!("checkpoint `{name}`: {e}")))?;
        let m = Arc::new(LoadedModel {
            name: name.to_string(),
            modality: ck.header.train.modality,
            params: ck.params,
            vocab,
        });
        Ok(self.cache.lock().unwrap().entry(name.to_string()).or_insert(m).clone())
    }

    pub fn list(&self) -> Vec<String> {
        let mut names: Vec<String> = self.cache.lock().unwrap().keys().cloned().collect();
        if let Some(dir) = &self.dir {
            if let Ok(rd) = std::fs::read_dir(dir) {
                for e in rd.flatten() {
                    let p = e.path();
                    if p.extension().is_some_and(|x| x == "bin") {
                        if let Some(n) = p.file_name().and_then(|n| n.to_str()) {
                            names.push(n.to_string());
                        }
                    }
                }
            }
        }
        names.sort();
        names.dedup();
        names
    }
}

/// Thread-safe session table. Every operation takes the caller's notion of
/// "now" so expiry is testable without sleeping.
pub struct SessionStore {
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    models: ModelSource,
    ttl: Duration,
    decode: DecodeConfig,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Turns human text into thought tokens: the structured thought grammar
/// first, then plain in-vocabulary words.
pub fn human_thought(vocab: &Vocabulary, modality: &ModalityConfig, text: &str) -> SResult<Vec<u32>> {
    if text.trim().is_empty() {
        return Err(ServiceError::BadRequest("thought is empty".into()));
    }
    if let Ok(t) = parse_thought_text(text) {
        if let Ok(ids) = render_thought(vocab, &t, modality.thought_format) {
            return Ok(ids);
        }
    }
    match vocab.tokenize(text) {
        Ok(ids) => Ok(ids),
        Err(CodecError::UnknownWords(w)) => Err(ServiceError::UnknownWords(w)),
        Err(e) => Err(ServiceError::BadRequest(e.to_string())),
    }
}

impl SessionStore {
    pub fn new(models: ModelSource, ttl: Duration) -> Self {
        Self { sessions: Mutex::new(HashMap::new()), models, ttl, decode: DecodeConfig::default() }
    }

    pub fn models(&self) -> &ModelSource {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn session(&self, id: &str) -> SResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("no session `{id}`")))
    }

    pub fn create(&self, req: &CreateRequest, now: Instant) -> SResult<SessionView> {
        let model = self.models.load(&req.checkpoint)?;
        let low_level = match (&req.low_level_checkpoint, req.mode) {
            (Some(name), Mode::Hierarchical) => {
                let low = self.models.load(name)?;
                if low.vocab.hash() != model.vocab.hash() {
                    return Err(ServiceError::BadRequest("the two checkpoints use different vocabularies".into()));
                }
                Some(low)
            }
            (None, Mode::Hierarchical) => {
                return Err(ServiceError::BadRequest("hierarchical sessions need low_level_checkpoint".into()))
            }
            (Some(_), _) => {
                return Err(ServiceError::BadRequest("low_level_checkpoint is only used in hierarchical mode".into()))
            }
            (None, _) => None,
        };
        let cfg = WorldConfig { grid_size: model.vocab.config().grid_size };
        let state = world::reset(&cfg, req.family, req.n_objects, req.seed)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            mode: req.mode,
            model,
            low_level,
            state,
            rng: rng::seeded(req.seed, 0xdec0de),
            history: Vec::new(),
            created_at: unix_now(),
            last_used: now,
        };
        let view = session.view();
        self.evict_expired(now);
        self.sessions.lock().unwrap().insert(view.id.clone(), Arc::new(Mutex::new(session)));
        Ok(view)
    }

    /// Runs one decision. Steps on the same session are serialized by its lock.
    pub fn step(&self, id: &str, req: &StepRequest, now: Instant) -> SResult<StepRecord> {
        let handle = self.session(id)?;
        let mut s = handle.lock().unwrap();
        if let Some(m) = req.mode {
            if m != s.mode {
                return Err(ServiceError::Conflict(format!("session mode is {} and cannot change to {m}", s.mode)));
            }
        }
        if check_success(&s.state) {
            return Err(ServiceError::Conflict("episode already succeeded".into()));
        }
        let model = s.model.clone();
        let low_level = s.low_level.clone();
        let mut warning = None;
        let provided = match (s.mode, &req.thought) {
            (Mode::Follow, None) => return Err(ServiceError::BadRequest("follow mode needs a thought on every step".into())),
            (Mode::Follow | Mode::Hierarchical, Some(t)) => Some(ProvidedThought {
                tokens: human_thought(&model.vocab, &model.modality, t)?,
                source: ThoughtSource::Human,
            }),
            (Mode::Act | Mode::Think, Some(_)) => {
                warning = Some(format!("thought ignored: {} mode does not take external thoughts", s.mode));
                None
            }
            (_, None) => None,
        };
        let policy = Policy {
            models: Models { primary: &model.params, low_level: low_level.as_ref().map(|m| &m.params) },
            vocab: &model.vocab,
            modality: &model.modality,
            decode: self.decode,
        };
        let clock = WallClock::new();
        let session = &mut *s;
        let d: Decision = policy
            .decide(&session.state, session.mode, provided.as_ref(), &clock, &mut session.rng)
            .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
        for &a in &d.actions {
            if check_success(&session.state) {
                break;
            }
            session.state = world::step(&session.state, a);
        }
        let rec = StepRecord {
            step: session.history.len() + 1,
            actions: d.actions,
            thought: d.thought,
            thought_source: d.thought_source,
            tokens_generated: d.tokens_generated,
            decode_seconds: d.decode_seconds,
            malformed: d.malformed,
            success: check_success(&session.state),
            warning,
            scene: session.state.clone(),
        };
        session.history.push(rec.clone());
        session.last_used = now;
        Ok(rec)
    }

    pub fn get(&self, id: &str, now: Instant) -> SResult<SessionView> {
        let handle = self.session(id)?;
        let mut s = handle.lock().unwrap();
        s.last_used = now;
        Ok(s.view())
    }

    pub fn delete(&self, id: &str) -> SResult<()> {
        self.sessions
            .lock()
            .unwrap()
            .remove(id)
            .map(drop)
            .ok_or_else(|| ServiceError::NotFound(format!("no session `{id}`")))
    }

    /// Drops sessions idle for longer than the TTL; returns how many went.
    /// A session whose lock is held (a step in flight) is kept.
    pub fn evict_expired(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.saturating_duration_since(s.last_used) <= self.ttl,
            Err(_) => true,
        });
        before - map.len()
    }
}

#[derive(Debug, Deserialize)]
struct VocabQuery {
    checkpoint: Option<String>,
}

type AppState = Arc<SessionStore>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> SResult<T> + Send + 'static) -> SResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ServiceError::Internal(e.to_string()))?
}

async fn create(State(store): State<AppState>, Json(req): Json<CreateRequest>) -> SResult<(StatusCode, Json<SessionView>)> {
    let view = blocking(move || store.create(&req, Instant::now())).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn step(
    State(store): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Option<Json<StepRequest>>,
) -> SResult<Json<StepRecord>> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    Ok(Json(blocking(move || store.step(&id, &req, Instant::now())).await?))
}

async fn get_session(State(store): State<AppState>, UrlPath(id): UrlPath<String>) -> SResult<Json<SessionView>> {
    Ok(Json(store.get(&id, Instant::now())?))
}

async fn delete_session(State(store): State<AppState>, UrlPath(id): UrlPath<String>) -> SResult<StatusCode> {
    store.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn checkpoints(State(store): State<AppState>) -> Json<Vec<String>> {
    Json(store.models().list())
}

async fn vocab(State(store): State<AppState>, Query(q): Query<VocabQuery>) -> SResult<Json<VocabManifest>> {
    let v = match q.checkpoint {
        Some(name) => blocking(move || store.models().load(&name)).await?.vocab.clone(),
        None => vocabulary(world::DEFAULT_GRID, &ModalityConfig::default()),
    };
    Ok(Json(manifest(&v)))
}

pub fn router(store: Arc<SessionStore>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/step", post(step))
        .route("/checkpoints", get(checkpoints))
        .route("/vocab", get(vocab))
        .layer(CorsLayer::permissive())
        .with_state(store)
}

/// Serves until the process is stopped, sweeping expired sessions every minute.
pub async fn serve(store: Arc<SessionStore>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let sweeper = store.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            sweeper.evict_expired(Instant::now());
        }
    });
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(store)).await
}
