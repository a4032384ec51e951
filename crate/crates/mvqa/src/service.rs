//! HTTP facade under `/api/v1`: studies, diagnosis sessions and questions.
//!
//! Studies and the model are immutable shared state. Each session sits
//! behind its own mutex, held from prediction to append, so turns of one
//! session are numbered in the order their answers were computed.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mvqa_core::eval::{activated_rois_by_modality, top_answers_with, ACTIVATION_TOP_K, SCORE_THRESHOLD, TOP_K};
use mvqa_core::graph::{Modality, RoiSet};
use mvqa_core::kg::KnowledgeGraph;
use mvqa_core::model::{ImageContext, Model, ModelError};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

use crate::io;

/// Image files looked up next to a fixture, in this order.
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub port: u16,
    pub fixtures: PathBuf,
    /// Without a checkpoint the study endpoints work and `ask` fails.
    pub checkpoint: Option<PathBuf>,
    /// Append-only session logs, replayed at start-up.
    pub sessions_dir: Option<PathBuf>,
    /// Built UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
    pub top_k: usize,
    pub score_threshold: f64,
    pub activation_k: usize,
    /// `None` means `1.5/N`.
    pub activation_theta: Option<f64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            port: 8080,
            fixtures: PathBuf::from("fixtures"),
            checkpoint: None,
            sessions_dir: None,
            static_dir: None,
            top_k: TOP_K,
            score_threshold: SCORE_THRESHOLD,
            activation_k: ACTIVATION_TOP_K,
            activation_theta: None,
        }
    }
}

/// Error body of every failed request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> ApiError {
        ApiError { status: status.as_u16(), code: code.to_string(), message: message.into() }
    }

    fn not_found(what: &str, id: &str) -> ApiError {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} {id:?}"))
    }

    fn invalid(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn internal(message: impl Into<String>) -> ApiError {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> ApiError {
        ApiError::invalid(r.body_text())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub image_id: String,
    pub n: usize,
    pub class_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyView {
    pub study_id: String,
    pub image_id: String,
    pub n: usize,
    /// `[x, y, w, h]`, normalized to the image.
    pub boxes: Vec<[f64; 4]>,
    pub class_names: Vec<String>,
    /// URL of the source image, when the fixture directory holds one.
    pub image: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub label: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub turn_index: usize,
    pub question: String,
    pub top_answers: Vec<ScoredAnswer>,
    /// ROI indices per modality, most activated first.
    pub activated_rois: BTreeMap<Modality, Vec<usize>>,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub study_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct CreateSession {
    pub study_id: String,
}

#[derive(Clone, Debug, Deserialize)]
pub struct AskRequest {
    pub question: String,
}

/// One line of a session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogEntry {
    Created { session_id: String, study_id: String },
    Turn(Turn),
}

pub struct Study {
    pub rois: RoiSet,
    pub context: ImageContext,
    pub image: Option<String>,
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub struct AppState {
    pub config: ServiceConfig,
    pub studies: BTreeMap<String, Study>,
    pub model: Option<Arc<Model>>,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<Session>>>>,
    next_session: AtomicU64,
    clock: Clock,
}

impl AppState {
    /// Builds the shared state from in-memory parts.
    pub fn new(
        config: ServiceConfig,
        fixtures: Vec<RoiSet>,
        kg: &KnowledgeGraph,
        model: Option<Model>,
        clock: Option<Clock>,
    ) -> Result<AppState> {
        let (threshold, eps) = match &model {
            Some(m) => (m.config.spatial_threshold, m.config.geometry_eps),
            None => {
                let d = mvqa_core::model::ModelConfig::default();
                (d.spatial_threshold, d.geometry_eps)
            }
        };
        let mut studies = BTreeMap::new();
        for rois in io::fixtures_by_study(fixtures).into_values() {
            let (context, unresolved) = ImageContext::from_roiset(&rois, kg, threshold, eps)
                .with_context(|| format!("study {}", rois.study_id))?;
            if !unresolved.is_empty() {
                log::warn!("study {}: ROI classes not in the knowledge graph: {unresolved:?}", rois.study_id);
            }
            let image = find_image(&config.fixtures, &rois.image_id);
            studies.insert(rois.study_id.clone(), Study { rois, context, image });
        }
        let mut state = AppState {
            config,
            studies,
            model: model.map(Arc::new),
            sessions: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            clock: clock.unwrap_or_else(|| Arc::new(wall_clock)),
        };
        state.replay_sessions()?;
        Ok(state)
    }

    /// Loads fixtures, checkpoint and knowledge graph named by `config`.
    pub fn load(config: ServiceConfig) -> Result<AppState> {
        let fixtures = io::read_fixture_dir(&config.fixtures)?;
        let (model, kg) = match &config.checkpoint {
            Some(dir) => {
                let (_, model) = io::load_checkpoint(dir)?;
                (Some(model), io::load_checkpoint_kg(dir)?)
            }
            None => (None, KnowledgeGraph::bundled_anatomical()),
        };
        log::info!(
            "loaded {} fixtures; model {}",
            fixtures.len(),
            if model.is_some() { "ready" } else { "not loaded" }
        );
        AppState::new(config, fixtures, &kg, model, None)
    }

    fn replay_sessions(&mut self) -> Result<()> {
        let Some(dir) = self.config.sessions_dir.clone() else { return Ok(()) };
        if !dir.exists() {
            return Ok(());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        paths.sort();
        let sessions = self.sessions.get_mut();
        let mut max_id = 0;
        for path in paths {
            let mut session: Option<Session> = None;
            for entry in io::read_jsonl::<LogEntry>(&path)? {
                match (entry, session.as_mut()) {
                    (LogEntry::Created { session_id, study_id }, None) => {
                        session = Some(Session { session_id, study_id, turns: Vec::new() })
                    }
                    (LogEntry::Turn(t), Some(s)) if t.turn_index == s.turns.len() => s.turns.push(t),
                    _ => anyhow::bail!("{}: malformed session log", path.display()),
                }
            }
            let Some(s) = session else { continue };
            if let Some(n) = s.session_id.strip_prefix("s").and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            sessions.insert(s.session_id.clone(), Arc::new(Mutex::new(s)));
        }
        self.next_session = AtomicU64::new(max_id + 1);
        Ok(())
    }

    fn log(&self, session_id: &str, entry: &LogEntry) -> Result<(), ApiError> {
        let Some(dir) = &self.config.sessions_dir else { return Ok(()) };
        let write = || -> std::io::Result<()> {
            fs::create_dir_all(dir)?;
            let mut f = OpenOptions::new().create(true).append(true).open(dir.join(format!("{session_id}.jsonl")))?;
            let mut line = serde_json::to_vec(entry)?;
            line.push(b'\n');
            f.write_all(&line)
        };
        write().map_err(|e| ApiError::internal(format!("persisting session: {e}")))
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))
    }

    pub fn list_studies(&self) -> Vec<StudySummary> {
        self.studies
            .values()
            .map(|s| StudySummary {
                study_id: s.rois.study_id.clone(),
                image_id: s.rois.image_id.clone(),
                n: s.rois.rois.len(),
                class_names: s.rois.rois.iter().map(|r| r.class_name.clone()).collect(),
            })
            .collect()
    }

    pub fn get_study(&self, id: &str) -> Result<StudyView, ApiError> {
        let s = self.studies.get(id).ok_or_else(|| ApiError::not_found("study", id))?;
        Ok(StudyView {
            study_id: s.rois.study_id.clone(),
            image_id: s.rois.image_id.clone(),
            n: s.rois.rois.len(),
            boxes: s.rois.rois.iter().map(|r| [r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h]).collect(),
            class_names: s.rois.rois.iter().map(|r| r.class_name.clone()).collect(),
            image: s.image.clone(),
        })
    }

    pub async fn create_session(&self, study_id: &str) -> Result<Session, ApiError> {
        if !self.studies.contains_key(study_id) {
            return Err(ApiError::not_found("study", study_id));
        }
        let mut sessions = self.sessions.write().await;
        let id = format!("s{:06}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let session = Session { session_id: id.clone(), study_id: study_id.to_string(), turns: Vec::new() };
        self.log(&id, &LogEntry::Created { session_id: id.clone(), study_id: study_id.to_string() })?;
        sessions.insert(id, Arc::new(Mutex::new(session.clone())));
        Ok(session)
    }

    pub async fn get_session(&self, id: &str) -> Result<Session, ApiError> {
        Ok(self.session(id).await?.lock().await.clone())
    }

    pub async fn ask(self: &Arc<Self>, session_id: &str, question: &str) -> Result<Turn, ApiError> {
        let handle = self.session(session_id).await?;
        let question = question.trim().to_string();
        if question.is_empty() {
            return Err(ApiError::invalid("question is empty"));
        }
        let model = self.model.clone().ok_or_else(|| {
            ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded", "no model checkpoint is loaded")
        })?;
        let mut session = handle.lock().await;
        let state = Arc::clone(self);
        let study_id = session.study_id.clone();
        let q = question.clone();
        let (top, activated) = tokio::task::spawn_blocking(move || state.answer(&model, &study_id, &q))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))??;
        let turn = Turn {
            turn_index: session.turns.len(),
            question,
            top_answers: top,
            activated_rois: activated,
            timestamp: (self.clock)(),
        };
        self.log(session_id, &LogEntry::Turn(turn.clone()))?;
        session.turns.push(turn.clone());
        Ok(turn)
    }

    #[allow(clippy::type_complexity)]
    fn answer(
        &self,
        model: &Model,
        study_id: &str,
        question: &str,
    ) -> Result<(Vec<ScoredAnswer>, BTreeMap<Modality, Vec<usize>>), ApiError> {
        let study = self.studies.get(study_id).ok_or_else(|| ApiError::not_found("study", study_id))?;
        let pred = model.predict(&study.context, question).map_err(|e| match e {
            ModelError::EmptyQuestion => ApiError::invalid("question has no tokens"),
            e => ApiError::internal(e.to_string()),
        })?;
        let top = top_answers_with(&pred.scores, &model.answers, self.config.top_k, self.config.score_threshold)
            .into_iter()
            .map(|(label, score)| ScoredAnswer { label, score })
            .collect();
        let activated = activated_rois_by_modality(
            &pred.final_attention_by_modality(),
            self.config.activation_k,
            self.config.activation_theta,
        );
        Ok((top, activated))
    }
}

fn find_image(dir: &Path, image_id: &str) -> Option<String> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| format!("{image_id}.{ext}"))
        .find(|f| dir.join(f).is_file())
        .map(|f| format!("/images/{f}"))
}

type Shared = State<Arc<AppState>>;

async fn list_studies(State(s): Shared) -> Json<Vec<StudySummary>> {
    Json(s.list_studies())
}

async fn get_study(State(s): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<StudyView>, ApiError> {
    s.get_study(&id).map(Json)
}

async fn create_session(
    State(s): Shared,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<Session>), ApiError> {
    let Json(req) = body?;
    Ok((StatusCode::CREATED, Json(s.create_session(&req.study_id).await?)))
}

async fn ask(
    State(s): Shared,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<AskRequest>, JsonRejection>,
) -> Result<Json<Turn>, ApiError> {
    let Json(req) = body?;
    s.ask(&id, &req.question).await.map(Json)
}

async fn get_session(State(s): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Session>, ApiError> {
    s.get_session(&id).await.map(Json)
}

async fn api_not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/studies", get(list_studies))
        .route("/studies/{id}", get(get_study))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/ask", post(ask))
        .fallback(api_not_found);
    let mut app = Router::new()
        .nest("/api/v1", api)
        .nest_service("/images", ServeDir::new(&state.config.fixtures));
    if let Some(dir) = &state.config.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.with_state(state)
}

pub async fn serve(config: ServiceConfig) -> Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let state = Arc::new(AppState::load(config)?);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{addr}/api/v1");
    axum::serve(listener, router(state)).await?;
    Ok(())
}
