//! HTTP service over stored descriptions, exemplars and what-if ablation sessions.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use neurodesc::analyze::AblationSession;
use neurodesc::audit::{audit_model, AuditReport};
use neurodesc::cnn::SmallCnn;
use neurodesc::describe::{read_description_table, DescriptionRow};
use neurodesc::dissect::exemplar_dir;
use neurodesc::edit::{load_split, Split};
use neurodesc::keywords::KeywordSet;
use neurodesc::{Classifier, LabeledSet, LayerInfo, NeuronRef, UnitId};

pub const VALIDATION: &str = "validation";
pub const ADVERSARIAL_TEST: &str = "adversarial-test";

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error("unknown layer {0}")]
    UnknownLayer(String),
    #[error("unknown unit {0}")]
    UnknownUnit(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("split {0} is not configured")]
    UnknownSplit(String),
    #[error("{0}")]
    InvalidUnit(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn code(&self) -> &'static str {
        match self {
            ApiError::UnknownModel(_) => "unknown_model",
            ApiError::UnknownLayer(_) => "unknown_layer",
            ApiError::UnknownUnit(_) => "unknown_unit",
            ApiError::UnknownSession(_) => "unknown_session",
            ApiError::UnknownSplit(_) => "unknown_split",
            ApiError::InvalidUnit(_) => "invalid_unit",
            ApiError::BadRequest(_) => "bad_request",
            ApiError::Internal(_) => "internal",
        }
    }

    fn status(&self) -> StatusCode {
        match self {
            ApiError::UnknownModel(_)
            | ApiError::UnknownLayer(_)
            | ApiError::UnknownUnit(_)
            | ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::UnknownSplit(_) | ApiError::InvalidUnit(_) | ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().into(),
            message: self.to_string(),
        };
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

/// One served model with its precomputed artifacts.
pub struct ModelEntry {
    pub model: Arc<dyn Classifier + Send + Sync>,
    pub descriptions: Vec<DescriptionRow>,
    pub exemplar_root: Option<PathBuf>,
    pub splits: BTreeMap<String, Arc<LabeledSet>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub validation: Option<f64>,
    pub adversarial_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub model_id: String,
    pub units: Vec<UnitId>,
    pub last_evaluation: Evaluation,
    pub created: u64,
    pub updated: u64,
}

struct Session {
    id: String,
    inner: AblationSession,
    last: Evaluation,
    created: u64,
    updated: u64,
}

impl Session {
    fn state(&self) -> SessionState {
        SessionState {
            id: self.id.clone(),
            model_id: self.inner.model_id.clone(),
            units: self.inner.zeroed().iter().cloned().collect(),
            last_evaluation: self.last,
            created: self.created,
            updated: self.updated,
        }
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Default)]
pub struct AppState {
    models: BTreeMap<String, ModelEntry>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, entry: ModelEntry) {
        self.models.insert(entry.model.model_id().to_string(), entry);
    }

    pub fn model_ids(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    fn model(&self, id: &str) -> ApiResult<&ModelEntry> {
        self.models.get(id).ok_or_else(|| ApiError::UnknownModel(id.into()))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<Session>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.into()))
    }
}

/// Register every `seed_*` directory of an editing run: `classifier.json`,
/// `descriptions.jsonl`, `exemplars/` and `dataset/`.
pub fn load_edit_output(state: &mut AppState, dir: &Path) -> neurodesc::Result<usize> {
    let mut n = 0;
    let mut seeds: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| neurodesc::Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|f| f.to_string_lossy().starts_with("seed_")))
        .collect();
    seeds.sort();
    for s in seeds {
        state.register(load_model_dir(&s)?);
        n += 1;
    }
    Ok(n)
}

/// Model artifacts from one directory laid out by the editing pipeline.
pub fn load_model_dir(dir: &Path) -> neurodesc::Result<ModelEntry> {
    let model = SmallCnn::load(&dir.join("classifier.json"))?;
    let table = dir.join("descriptions.jsonl");
    let descriptions = if table.exists() { read_description_table(&table)? } else { Vec::new() };
    let data = dir.join("dataset");
    let mut splits = BTreeMap::new();
    if data.join("manifest.json").exists() {
        splits.insert(VALIDATION.to_string(), Arc::new(load_split(&data, Split::Val)?));
        splits.insert(ADVERSARIAL_TEST.to_string(), Arc::new(load_split(&data, Split::Test)?));
    }
    let ex = dir.join("exemplars");
    Ok(ModelEntry {
        model: Arc::new(model),
        descriptions,
        exemplar_root: ex.is_dir().then_some(ex),
        splits,
    })
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/models/{model}/layers/{layer}/units", get(list_units))
        .route("/units/{model}/{layer}/{unit}/exemplars", get(exemplars))
        .route("/units/{model}/{layer}/{unit}/description", get(description))
        .route("/files/{model}/{layer}/{unit}/{file}", get(exemplar_file))
        .route("/audit", get(audit))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/ablations", post(apply_ablations))
        .route("/sessions/{id}/reset", post(reset_session))
        .route("/sessions/{id}/metrics", get(metrics))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr, "listening");
    axum::serve(listener, router(Arc::new(state))).await
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub layers: Vec<LayerInfo>,
    pub splits: Vec<String>,
    pub described_units: usize,
}

async fn list_models(State(st): State<Arc<AppState>>) -> Json<Vec<ModelSummary>> {
    Json(
        st.models
            .iter()
            .map(|(id, m)| ModelSummary {
                model_id: id.clone(),
                layers: m.model.ablatable_layers(),
                splits: m.splits.keys().cloned().collect(),
                described_units: m.descriptions.len(),
            })
            .collect(),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UnitSummary {
    pub unit: usize,
    pub description: Option<String>,
}

fn layer_info(m: &ModelEntry, layer: &str) -> ApiResult<LayerInfo> {
    m.model
        .ablatable_layers()
        .into_iter()
        .find(|l| l.id == layer)
        .ok_or_else(|| ApiError::UnknownLayer(layer.into()))
}

async fn list_units(
    State(st): State<Arc<AppState>>,
    UrlPath((model, layer)): UrlPath<(String, String)>,
) -> ApiResult<Json<Vec<UnitSummary>>> {
    let m = st.model(&model)?;
    let info = layer_info(m, &layer)?;
    Ok(Json(
        (0..info.channels)
            .map(|u| UnitSummary {
                unit: u,
                description: m
                    .descriptions
                    .iter()
                    .find(|r| r.layer_id == layer && r.unit == u)
                    .map(|r| r.description.clone()),
            })
            .collect(),
    ))
}

fn check_unit(m: &ModelEntry, layer: &str, unit: usize) -> ApiResult<()> {
    let info = layer_info(m, layer)?;
    if unit >= info.channels {
        return Err(ApiError::UnknownUnit(format!("{layer}/{unit}")));
    }
    Ok(())
}

async fn description(
    State(st): State<Arc<AppState>>,
    UrlPath((model, layer, unit)): UrlPath<(String, String, usize)>,
) -> ApiResult<Json<DescriptionRow>> {
    let m = st.model(&model)?;
    check_unit(m, &layer, unit)?;
    m.descriptions
        .iter()
        .find(|r| r.layer_id == layer && r.unit == unit)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::UnknownUnit(format!("{layer}/{unit} has no description")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExemplarRef {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExemplarListing {
    pub model_id: String,
    pub layer_id: String,
    pub unit: usize,
    pub exemplars: Vec<ExemplarRef>,
    pub metadata: serde_json::Value,
}

async fn exemplars(
    State(st): State<Arc<AppState>>,
    UrlPath((model, layer, unit)): UrlPath<(String, String, usize)>,
) -> ApiResult<Json<ExemplarListing>> {
    let m = st.model(&model)?;
    check_unit(m, &layer, unit)?;
    let root = m
        .exemplar_root
        .as_ref()
        .ok_or_else(|| ApiError::UnknownUnit(format!("no exemplars stored for {model}")))?;
    let neuron = NeuronRef::new(&model, &layer, unit);
    let dir = exemplar_dir(root, &neuron);
    let meta_raw = std::fs::read(dir.join("metadata.json"))
        .map_err(|_| ApiError::UnknownUnit(format!("no exemplars stored for {neuron}")))?;
    let metadata: serde_json::Value = serde_json::from_slice(&meta_raw).map_err(internal)?;
    let k = metadata["k"].as_u64().unwrap_or(0) as usize;
    let base = format!("/files/{model}/{layer}/{}", neuron.unit_dir());
    Ok(Json(ExemplarListing {
        model_id: model.clone(),
        layer_id: layer.clone(),
        unit,
        exemplars: (0..k)
            .map(|j| ExemplarRef {
                image: format!("{base}/image_{j:02}.png"),
                mask: format!("{base}/mask_{j:02}.png"),
            })
            .collect(),
        metadata,
    }))
}

async fn exemplar_file(
    State(st): State<Arc<AppState>>,
    UrlPath((model, layer, unit_dir, file)): UrlPath<(String, String, String, String)>,
) -> ApiResult<Response> {
    let m = st.model(&model)?;
    let root = m.exemplar_root.as_ref().ok_or_else(|| ApiError::UnknownUnit(unit_dir.clone()))?;
    let safe = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c)) && !s.starts_with('.');
    if !(safe(&layer) && safe(&unit_dir) && safe(&file)) || !file.ends_with(".png") {
        return Err(ApiError::BadRequest("invalid file reference".into()));
    }
    let path = root.join(&model).join(&layer).join(&unit_dir).join(&file);
    let bytes = std::fs::read(&path).map_err(|_| ApiError::UnknownUnit(format!("{layer}/{unit_dir}/{file}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct AuditQuery {
    keywords: Option<String>,
    model: Option<String>,
}

async fn audit(State(st): State<Arc<AppState>>, Query(q): Query<AuditQuery>) -> ApiResult<Json<Vec<AuditReport>>> {
    let keywords = match q.keywords.as_deref() {
        Some(k) if !k.trim().is_empty() => KeywordSet::new(k.split(',')),
        _ => KeywordSet::faces(),
    };
    let ids: Vec<&String> = match &q.model {
        Some(m) => vec![st.models.get_key_value(m).ok_or_else(|| ApiError::UnknownModel(m.clone()))?.0],
        None => st.models.keys().collect(),
    };
    Ok(Json(ids.into_iter().map(|id| audit_model(&st.models[id].descriptions, &keywords)).collect()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub model_id: String,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionState>)> {
    st.model(&req.model_id)?;
    let id = format!("s{}", st.next_id.fetch_add(1, Ordering::SeqCst) + 1);
    let t = now();
    let session = Session {
        id: id.clone(),
        inner: AblationSession::new(&req.model_id),
        last: Evaluation {
            validation: None,
            adversarial_test: None,
        },
        created: t,
        updated: t,
    };
    let state = session.state();
    st.sessions.write().expect("session map poisoned").insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(state)))
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionState>> {
    let s = st.session(&id)?;
    let state = s.lock().expect("session poisoned").state();
    Ok(Json(state))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRequest {
    pub units: Vec<UnitId>,
}

async fn apply_ablations(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<AblationRequest>,
) -> ApiResult<Json<SessionState>> {
    let s = st.session(&id)?;
    let mut s = s.lock().expect("session poisoned");
    let m = st.model(&s.inner.model_id)?;
    let before = s.inner.zeroed().clone();
    s.inner
        .ablate(m.model.as_ref(), req.units)
        .map_err(|e| ApiError::InvalidUnit(e.to_string()))?;
    if *s.inner.zeroed() != before {
        s.last = Evaluation {
            validation: None,
            adversarial_test: None,
        };
        s.updated = now();
    }
    Ok(Json(s.state()))
}

async fn reset_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionState>> {
    let s = st.session(&id)?;
    let mut s = s.lock().expect("session poisoned");
    s.inner.reset();
    s.last = Evaluation {
        validation: None,
        adversarial_test: None,
    };
    s.updated = now();
    Ok(Json(s.state()))
}

#[derive(Debug, Deserialize)]
struct MetricsQuery {
    split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub session_id: String,
    pub model_id: String,
    pub split: String,
    pub n_ablated: usize,
    pub accuracy: f64,
}

async fn metrics(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<MetricsQuery>,
) -> ApiResult<Json<Metrics>> {
    let split = q.split.unwrap_or_else(|| VALIDATION.to_string());
    if split != VALIDATION && split != ADVERSARIAL_TEST {
        return Err(ApiError::BadRequest(format!(
            "split must be {VALIDATION} or {ADVERSARIAL_TEST}, got {split}"
        )));
    }
    let session = st.session(&id)?;
    let st2 = st.clone();
    let split2 = split.clone();
    let result = tokio::task::spawn_blocking(move || -> ApiResult<Metrics> {
        let mut s = session.lock().expect("session poisoned");
        let m = st2.model(&s.inner.model_id)?;
        let set = m.splits.get(&split2).ok_or_else(|| ApiError::UnknownSplit(split2.clone()))?;
        let acc = s.inner.accuracy(m.model.as_ref(), &split2, set).map_err(internal)?;
        if split2 == VALIDATION {
            s.last.validation = Some(acc);
        } else {
            s.last.adversarial_test = Some(acc);
        }
        Ok(Metrics {
            session_id: s.id.clone(),
            model_id: s.inner.model_id.clone(),
            split: split2,
            n_ablated: s.inner.zeroed().len(),
            accuracy: acc,
        })
    })
    .await
    .map_err(internal)??;
    Ok(Json(result))
}
