//! HTTP handlers and shared server state.

use std::collections::{BTreeSet, HashMap};
use std::future::Future;
use std::io;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use veto_core::data::{load_csv_with, CsvOptions};
use veto_core::optimizer::{fit_with_feedback_observed, FitMonitor, FitPhase};
use veto_core::{Dataset, FitConfig};

use crate::error::ApiError;
use crate::session::{
    ClusterSummary, FitMeta, Session, SessionDocument, SessionStatus, DOCUMENT_VERSION,
};
use crate::store::{valid_id, Store};

const MAX_BODY_BYTES: usize = 256 * 1024 * 1024;
const DEFAULT_TOP_MEMBERS: usize = 6;

struct Slot {
    session: Mutex<Session>,
    /// Present while a fit is running. Always locked after `session`.
    monitor: Mutex<Option<Arc<FitMonitor>>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Datasets and sessions shared by all handlers.
pub struct AppState {
    store: Store,
    datasets: RwLock<HashMap<String, Arc<Dataset>>>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
}

impl AppState {
    /// Loads everything in `store`. Fits that were running when the store was written are marked failed.
    pub fn open(store: Store) -> io::Result<Arc<Self>> {
        let datasets = store
            .load_datasets()?
            .into_iter()
            .map(|(id, d)| (id, Arc::new(d)))
            .collect();
        let mut sessions = HashMap::new();
        for mut s in store.load_sessions()? {
            if s.status == SessionStatus::Fitting {
                s.recover_interrupted();
                store.save_session(&s)?;
            }
            sessions.insert(
                s.session_id.clone(),
                Arc::new(Slot {
                    session: Mutex::new(s),
                    monitor: Mutex::new(None),
                }),
            );
        }
        Ok(Arc::new(AppState {
            store,
            datasets: RwLock::new(datasets),
            sessions: RwLock::new(sessions),
        }))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn dataset(&self, id: &str) -> Result<Arc<Dataset>, ApiError> {
        self.datasets
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("dataset", id))
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("session", id))
    }

    fn save(&self, session: &Session) -> Result<(), ApiError> {
        self.store
            .save_session(session)
            .map_err(|e| ApiError::internal(format!("could not persist session: {e}")))
    }

    /// Applies `f` to a copy and commits it only once it is persisted.
    fn mutate<T>(&self, slot: &Slot, f: impl FnOnce(&mut Session) -> Result<T, ApiError>) -> Result<T, ApiError> {
        let mut guard = lock(&slot.session);
        let mut next = guard.clone();
        let out = f(&mut next)?;
        self.save(&next)?;
        *guard = next;
        Ok(out)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", post(upload_dataset))
        .route("/sessions", post(create_session))
        .route("/sessions/import", post(import_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/fit", post(start_fit))
        .route("/sessions/{id}/cancel", post(cancel_fit))
        .route("/sessions/{id}/progress", get(get_progress))
        .route("/sessions/{id}/clusters", get(get_clusters))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/history", get(get_history))
        .route("/sessions/{id}/export", get(export_session))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route", Value::Null) })
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(listener: TcpListener, state: Arc<AppState>, shutdown: impl Future<Output = ()> + Send + 'static) -> io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "schema_error",
            format!("invalid document at {path}: {}", e.inner()),
            json!({ "path": path }),
        )
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetUpload {
    points: Vec<Vec<f64>>,
    #[serde(default)]
    gold_labels: Option<Vec<String>>,
    #[serde(default)]
    point_ids: Option<Vec<String>>,
    #[serde(default)]
    feature_names: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetCreated {
    pub dataset_ref: String,
    pub n: usize,
    pub d: usize,
    pub has_labels: bool,
}

async fn upload_dataset(
    State(app): State<Arc<AppState>>,
    Query(q): Query<HashMap<String, String>>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<(StatusCode, Json<DatasetCreated>), ApiError> {
    let is_json = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("json"));
    let data = if is_json {
        let up: DatasetUpload = parse_json(&body)?;
        let base = Dataset::from_rows(&up.points, up.gold_labels).map_err(|e| ApiError::validation(e.to_string()))?;
        if up.point_ids.is_none() && up.feature_names.is_none() {
            base
        } else {
            Dataset::with_metadata(
                base.points().clone(),
                base.gold_labels().map(<[String]>::to_vec),
                up.point_ids.unwrap_or_else(|| base.point_ids().to_vec()),
                up.feature_names.unwrap_or_else(|| base.feature_names().to_vec()),
            )
            .map_err(|e| ApiError::validation(e.to_string()))?
        }
    } else {
        let opts = CsvOptions {
            label_column: q.get("label_column").cloned(),
            id_column: q.get("id_column").cloned(),
        };
        load_csv_with(&body[..], &opts).map_err(|e| ApiError::validation(e.to_string()))?
    };
    let dataset_ref = format!("ds-{}", uuid::Uuid::new_v4().simple());
    app.store
        .save_dataset(&dataset_ref, &data)
        .map_err(|e| ApiError::internal(format!("could not persist dataset: {e}")))?;
    let out = DatasetCreated {
        dataset_ref: dataset_ref.clone(),
        n: data.n(),
        d: data.dim(),
        has_labels: data.gold_labels().is_some(),
    };
    app.datasets
        .write()
        .unwrap_or_else(|e| e.into_inner())
        .insert(dataset_ref, Arc::new(data));
    Ok((StatusCode::CREATED, Json(out)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    dataset_ref: String,
    k: usize,
    #[serde(default)]
    config: Option<FitConfig>,
}

/// Session without the responsibility matrices.
#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub dataset_ref: String,
    pub k: usize,
    pub config: FitConfig,
    pub status: SessionStatus,
    pub feedback_iterations: usize,
    pub fits: Vec<FitMeta>,
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        SessionView {
            session_id: s.session_id.clone(),
            dataset_ref: s.dataset_ref.clone(),
            k: s.k,
            config: s.config,
            status: s.status,
            feedback_iterations: s.history.len(),
            fits: s.clusterings.iter().map(|c| c.meta.clone()).collect(),
            created_at: s.created_at,
            updated_at: s.updated_at,
            error: s.error.clone(),
        }
    }
}

fn insert_session(app: &AppState, session: Session) -> Result<SessionView, ApiError> {
    let view = SessionView::from(&session);
    let mut map = app.sessions.write().unwrap_or_else(|e| e.into_inner());
    if map.contains_key(&session.session_id) {
        return Err(ApiError::conflict(
            "session_exists",
            format!("session {:?} already exists", session.session_id),
        ));
    }
    app.save(&session)?;
    map.insert(
        session.session_id.clone(),
        Arc::new(Slot {
            session: Mutex::new(session),
            monitor: Mutex::new(None),
        }),
    );
    Ok(view)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = parse_json(&body)?;
    let data = app.dataset(&req.dataset_ref)?;
    if req.k == 0 || req.k > data.n() {
        return Err(ApiError::validation(format!("k must lie in 1..={}, got {}", data.n(), req.k))
            .with_detail(json!({ "field": "k" })));
    }
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = Session::new(id, req.dataset_ref, req.k, req.config.unwrap_or_default())?;
    Ok((StatusCode::CREATED, Json(insert_session(&app, session)?)))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    Ok(Json(SessionView::from(&*s)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FitAccepted {
    pub session_id: String,
    pub status: SessionStatus,
    pub round: usize,
}

async fn start_fit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<FitAccepted>), ApiError> {
    let slot = app.slot(&id)?;
    let monitor = Arc::new(FitMonitor::new());
    let (job, data, round) = {
        let mut guard = lock(&slot.session);
        let data = app.dataset(&guard.dataset_ref)?;
        let mut next = guard.clone();
        let job = next.begin_fit()?;
        app.save(&next)?;
        let round = next.clusterings.len();
        *guard = next;
        *lock(&slot.monitor) = Some(monitor.clone());
        (job, data, round)
    };

    let slot_bg = slot.clone();
    let app_bg = app.clone();
    tokio::spawn(async move {
        let seed = job.config.seed;
        let outcome = tokio::task::spawn_blocking(move || {
            fit_with_feedback_observed(&data, job.k, &job.history, &job.config, Some(&monitor), |_| {})
        })
        .await;
        let mut s = lock(&slot_bg.session);
        match outcome {
            Ok(Ok(fit)) => {
                if let Err(e) = s.complete_fit(fit, seed) {
                    tracing::error!(session = %s.session_id, "{e}");
                }
            }
            Ok(Err(e)) => s.fail_fit(e.to_string()),
            Err(e) => s.fail_fit(format!("fit aborted: {e}")),
        }
        *lock(&slot_bg.monitor) = None;
        tracing::info!(session = %s.session_id, status = %s.status, "fit finished");
        if let Err(e) = app_bg.store.save_session(&s) {
            tracing::warn!(session = %s.session_id, "could not persist session: {e}");
        }
    });

    Ok((
        StatusCode::ACCEPTED,
        Json(FitAccepted {
            session_id: id,
            status: SessionStatus::Fitting,
            round,
        }),
    ))
}

async fn cancel_fit(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    let monitor = lock(&slot.monitor).clone();
    match monitor {
        Some(m) if s.status == SessionStatus::Fitting => {
            m.cancel();
            Ok((StatusCode::ACCEPTED, Json(json!({ "session_id": id, "cancelling": true }))))
        }
        _ => Err(ApiError::conflict("wrong_state", format!("no fit is running; session is {}", s.status))
            .with_detail(json!({ "status": s.status }))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<FitPhase>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

async fn get_progress(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Progress>, ApiError> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    let mut p = Progress {
        status: s.status,
        outer_iter: None,
        objective: None,
        kl_residual: None,
        phase: None,
        converged: None,
        error: s.error.clone(),
    };
    if s.status == SessionStatus::Fitting {
        if let Some(m) = lock(&slot.monitor).as_ref() {
            let snap = m.snapshot();
            p.outer_iter = Some(snap.outer_iter);
            p.objective = snap.objective;
            p.kl_residual = snap.kl_residual;
            p.phase = Some(snap.phase);
        }
    } else if let (SessionStatus::AwaitingFeedback | SessionStatus::Stable, Some(last)) = (s.status, s.latest()) {
        p.outer_iter = Some(last.meta.iterations);
        p.objective = last.meta.objective;
        p.kl_residual = last.meta.kl_residual;
        p.phase = Some(FitPhase::Done);
        p.converged = Some(last.meta.converged);
    }
    Ok(Json(p))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClustersView {
    pub session_id: String,
    pub iteration: usize,
    pub converged: bool,
    pub clusters: Vec<ClusterSummary>,
}

async fn get_clusters(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Json<ClustersView>, ApiError> {
    let m = match q.get("m") {
        None => DEFAULT_TOP_MEMBERS,
        Some(raw) => raw
            .parse::<usize>()
            .map_err(|_| ApiError::validation(format!("m must be a positive integer, got {raw:?}")))?,
    };
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    let data = app.dataset(&s.dataset_ref)?;
    let clusters = s.summaries(&data, m)?;
    let last = s.latest().expect("summaries succeeded");
    Ok(Json(ClustersView {
        session_id: id,
        iteration: s.clusterings.len() - 1,
        converged: last.meta.converged,
        clusters,
    }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    #[serde(default)]
    accepted: BTreeSet<usize>,
    #[serde(default)]
    rejected: BTreeSet<usize>,
}

async fn submit_feedback(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let fb: FeedbackBody = parse_json(&body)?;
    let slot = app.slot(&id)?;
    let view = app.mutate(&slot, |s| {
        s.submit_feedback(fb.accepted, fb.rejected)?;
        Ok(SessionView::from(&*s))
    })?;
    Ok(Json(view))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub accepted: BTreeSet<usize>,
    pub rejected: BTreeSet<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    pub status: SessionStatus,
    pub records: Vec<HistoryEntry>,
    pub fits: Vec<FitMeta>,
}

async fn get_history(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<HistoryView>, ApiError> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    Ok(Json(HistoryView {
        session_id: id,
        status: s.status,
        records: s
            .history
            .iter()
            .map(|r| HistoryEntry {
                iteration: r.iteration(),
                accepted: r.accepted().clone(),
                rejected: r.rejected().clone(),
            })
            .collect(),
        fits: s.clusterings.iter().map(|c| c.meta.clone()).collect(),
    }))
}

async fn export_session(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionDocument>, ApiError> {
    let slot = app.slot(&id)?;
    let s = lock(&slot.session);
    Ok(Json(SessionDocument {
        version: DOCUMENT_VERSION,
        session: s.clone(),
    }))
}

async fn import_session(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let raw: Value = parse_json(&body)?;
    match raw.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(DOCUMENT_VERSION) => {}
        Some(v) => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "unsupported_version",
                format!("document version {v} is not supported; expected {DOCUMENT_VERSION}"),
                json!({ "path": "version", "supported": [DOCUMENT_VERSION] }),
            ))
        }
        None => {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "schema_error",
                "invalid document at version: missing or not an integer",
                json!({ "path": "version" }),
            ))
        }
    }
    let doc: SessionDocument = serde_path_to_error::deserialize(raw).map_err(|e| {
        let path = e.path().to_string();
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "schema_error",
            format!("invalid document at {path}: {}", e.inner()),
            json!({ "path": path }),
        )
    })?;
    let mut session = doc.session;
    if !valid_id(&session.session_id) {
        return Err(ApiError::validation("session_id must be 1-64 characters from [A-Za-z0-9_-]")
            .with_detail(json!({ "path": "session.session_id" })));
    }
    let data = app.dataset(&session.dataset_ref)?;
    session
        .validate(&data)
        .map_err(|msg| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_document", msg, Value::Null))?;
    session.recover_interrupted();
    Ok((StatusCode::CREATED, Json(insert_session(&app, session)?)))
}
