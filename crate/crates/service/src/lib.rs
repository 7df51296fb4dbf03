//! REST facade over active-learning sessions.
//!
//! Sessions live in an in-memory registry. Requests against one session are
//! serialized by a per-session mutex; status reads come from a snapshot that
//! is refreshed after every mutation and never wait for training. When a
//! state directory is configured, every mutation writes a checkpoint there
//! and sessions found in it are restored at startup.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use namestruct::activeloop::{
    HeldOutScores, LoopError, LoopParams, Phase, PoolSizes, Session, SessionCheckpoint, StopReason, Verdict,
    VerificationBatch, VerificationItem,
};
use namestruct::corpus::{infer_schema, load_corpus, tokenize, DEFAULT_SEPARATOR};
use namestruct::embed::{EmbeddingProvider, ProviderConfig};
use namestruct::seqmodel::TrainConfig;
use namestruct::{Corpus, LabelSchema, Mention};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::Mutex;

mod error;

pub use error::ApiError;

type ApiResult<T> = Result<T, ApiError>;

/// Server-wide settings.
#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Corpus used when a create request names none.
    pub default_corpus: Option<PathBuf>,
    /// Schema used when a create request names none; otherwise inferred
    /// from the corpus labels.
    pub default_schema: Option<LabelSchema>,
    pub provider: ProviderConfig,
    /// Checkpoint directory; `None` keeps sessions in memory only.
    pub state_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingLabel,
    Training,
    AwaitingVerification,
    Stopped,
}

impl From<Phase> for SessionStatus {
    fn from(p: Phase) -> Self {
        match p {
            Phase::AwaitingLabel => Self::AwaitingLabel,
            Phase::AwaitingVerification => Self::AwaitingVerification,
            Phase::Stopped => Self::Stopped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Point {
    pub iteration: usize,
    pub budget_used: usize,
    pub entity_f1: f64,
    pub token_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub session_id: String,
    pub status: SessionStatus,
    pub iteration: usize,
    pub budget_used: usize,
    pub budget_max: usize,
    pub pool: PoolSizes,
    pub pool_total: usize,
    pub low_conf_correct_rate: Option<f64>,
    pub stop_reason: Option<StopReason>,
    /// Label palette: schema components followed by the separator.
    pub labels: Vec<String>,
    pub has_test_set: bool,
    pub latest_f1: Option<HeldOutScores>,
    pub f1_history: Vec<F1Point>,
}

struct Slot {
    session: Arc<Mutex<Session>>,
    snapshot: RwLock<StatusSnapshot>,
    f1_history: std::sync::Mutex<Vec<F1Point>>,
}

impl Slot {
    fn snapshot(&self) -> StatusSnapshot {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn set_status(&self, status: SessionStatus) {
        self.snapshot.write().expect("snapshot lock").status = status;
    }

    fn refresh(&self, id: &str, session: &Session) {
        let snap = build_snapshot(id, session, &self.f1_history.lock().expect("history lock"));
        *self.snapshot.write().expect("snapshot lock") = snap;
    }
}

fn build_snapshot(id: &str, session: &Session, history: &[F1Point]) -> StatusSnapshot {
    let st = session.state();
    let schema = session.schema();
    let pool = st.pool_sizes();
    StatusSnapshot {
        session_id: id.to_string(),
        status: st.phase.into(),
        iteration: st.iteration,
        budget_used: st.budget_used,
        budget_max: st.budget_max,
        pool,
        pool_total: pool.total(),
        low_conf_correct_rate: st.low_conf_correct_rate,
        stop_reason: st.stop_reason,
        labels: (0..schema.label_count())
            .map(|i| schema.name_of(namestruct::LabelId(i)).expect("id in schema").to_string())
            .collect(),
        has_test_set: session.test_set().is_some(),
        latest_f1: history.last().map(|p| HeldOutScores {
            entity_f1: p.entity_f1,
            token_f1: p.token_f1,
        }),
        f1_history: history.to_vec(),
    }
}

/// On-disk form of one service session.
#[derive(Serialize, Deserialize)]
struct StoredSession {
    session_id: String,
    f1_history: Vec<F1Point>,
    session: SessionCheckpoint,
}

pub struct AppState {
    config: ServiceConfig,
    provider: Arc<EmbeddingProvider>,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl AppState {
    /// Builds the registry, restoring any checkpoints in the state directory.
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, String> {
        let provider = Arc::new(EmbeddingProvider::from_config(&config.provider).map_err(|e| e.to_string())?);
        let mut sessions = HashMap::new();
        let mut max_seq = 0;
        if let Some(dir) = &config.state_dir {
            std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| e.to_string())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            for path in paths {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                let stored: StoredSession =
                    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
                let session = Session::from_checkpoint_with(stored.session, provider.clone())
                    .map_err(|e| format!("{}: {e}", path.display()))?;
                max_seq = max_seq.max(sequence_of(&stored.session_id));
                let snap = build_snapshot(&stored.session_id, &session, &stored.f1_history);
                sessions.insert(
                    stored.session_id,
                    Arc::new(Slot {
                        session: Arc::new(Mutex::new(session)),
                        snapshot: RwLock::new(snap),
                        f1_history: std::sync::Mutex::new(stored.f1_history),
                    }),
                );
            }
        }
        Ok(Arc::new(Self {
            config,
            provider,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(max_seq + 1),
        }))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("registry lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<Slot>> {
        self.sessions
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }

    fn checkpoint_path(&self, id: &str) -> Option<PathBuf> {
        self.config.state_dir.as_ref().map(|d| d.join(format!("{id}.json")))
    }

    fn write_checkpoint(&self, id: &str, slot: &Slot, session: &Session) -> Result<(), String> {
        let Some(path) = self.checkpoint_path(id) else {
            return Ok(());
        };
        let stored = StoredSession {
            session_id: id.to_string(),
            f1_history: slot.f1_history.lock().expect("history lock").clone(),
            session: session.to_checkpoint(),
        };
        let bytes = serde_json::to_vec(&stored).map_err(|e| e.to_string())?;
        write_atomic(&path, &bytes).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// Writes a checkpoint for every session; used at shutdown.
    pub async fn checkpoint_all(&self) -> Result<usize, String> {
        let slots: Vec<(String, Arc<Slot>)> = self
            .sessions
            .read()
            .expect("registry lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (id, slot) in &slots {
            let session = slot.session.lock().await;
            self.write_checkpoint(id, slot, &session)?;
        }
        Ok(slots.len())
    }
}

fn sequence_of(id: &str) -> u64 {
    id.strip_prefix("s").and_then(|n| n.parse().ok()).unwrap_or(0)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_query))
        .route("/sessions/{id}/label", post(submit_label))
        .route("/sessions/{id}/verify", get(verification))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/predict", post(predict))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then checkpoints every session.
pub async fn serve(
    state: Arc<AppState>,
    listener: TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<usize> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await?;
    state.checkpoint_all().await.map_err(std::io::Error::other)
}

/// JSON body parsing with 400 on any malformed or ill-typed input.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    corpus: Option<PathBuf>,
    schema: Option<Vec<String>>,
    separator: Option<String>,
    test_corpus: Option<PathBuf>,
    k: Option<i64>,
    p: Option<i64>,
    q: Option<i64>,
    budget: Option<i64>,
    seed: Option<u64>,
    hidden: Option<i64>,
    epochs: Option<i64>,
}

#[derive(Debug, Serialize)]
struct CreateResponse {
    session_id: String,
    status: SessionStatus,
}

fn non_negative(name: &str, v: Option<i64>, default: usize) -> ApiResult<usize> {
    match v {
        None => Ok(default),
        Some(x) if x >= 0 => Ok(x as usize),
        Some(x) => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_params",
            format!("{name} must be non-negative, got {x}"),
        )),
    }
}

fn load_mentions(path: &Path, schema: &LabelSchema) -> ApiResult<Corpus> {
    Ok(load_corpus(path, schema)?)
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let req: CreateRequest = parse_body(&body)?;
    let defaults = LoopParams::default();
    let params = LoopParams {
        k: non_negative("k", req.k, defaults.k)?,
        p: non_negative("p", req.p, defaults.p)?,
        q: non_negative("q", req.q, defaults.q)?,
        budget: non_negative("budget", req.budget, defaults.budget)?,
        hidden: non_negative("hidden", req.hidden, defaults.hidden)?,
        seed: req.seed.unwrap_or(defaults.seed),
        train: TrainConfig {
            epochs: non_negative("epochs", req.epochs, defaults.train.epochs)?,
            ..defaults.train
        },
    };
    params.validate().map_err(ApiError::from)?;
    let corpus_path = req
        .corpus
        .or_else(|| app.config.default_corpus.clone())
        .ok_or_else(|| ApiError::bad_request("no corpus given and the server has no default"))?;
    let separator = req.separator.clone().unwrap_or_else(|| DEFAULT_SEPARATOR.to_string());
    let provider = app.provider.clone();
    let default_schema = app.config.default_schema.clone();

    let session = tokio::task::spawn_blocking(move || -> ApiResult<Session> {
        if !corpus_path.exists() {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "corpus_not_found",
                format!("corpus {} not found", corpus_path.display()),
            ));
        }
        let schema = match (req.schema, default_schema) {
            (Some(names), _) => LabelSchema::new(names, separator.as_str()).map_err(ApiError::from)?,
            (None, Some(s)) => s,
            (None, None) => infer_schema(&corpus_path, &separator)?,
        };
        let pool = load_mentions(&corpus_path, &schema)?;
        if pool.is_empty() {
            return Err(ApiError::bad_request("corpus is empty"));
        }
        let test: Option<Vec<Mention>> = match &req.test_corpus {
            Some(p) => Some(load_mentions(p, &schema)?.mentions),
            None => None,
        };
        Ok(Session::new(pool, provider, params, test)?)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;

    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let snap = build_snapshot(&id, &session, &[]);
    let slot = Arc::new(Slot {
        session: Arc::new(Mutex::new(session)),
        snapshot: RwLock::new(snap.clone()),
        f1_history: std::sync::Mutex::new(Vec::new()),
    });
    {
        let session = slot.session.lock().await;
        app.write_checkpoint(&id, &slot, &session).map_err(ApiError::internal)?;
    }
    app.sessions.write().expect("registry lock").insert(id.clone(), slot);
    Ok((
        StatusCode::CREATED,
        Json(CreateResponse {
            session_id: id,
            status: snap.status,
        }),
    ))
}

async fn next_query(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<namestruct::activeloop::Query>> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    Ok(Json(session.next_query()?))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    mention_id: String,
    labels: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ItemView {
    mention_id: String,
    raw: String,
    tokens: Vec<String>,
    labels: Vec<String>,
    confidence: f64,
    bucket: namestruct::activeloop::Bucket,
}

#[derive(Debug, Serialize)]
struct BatchView {
    high: Vec<ItemView>,
    low: Vec<ItemView>,
}

fn batch_view(session: &Session, batch: &VerificationBatch) -> BatchView {
    let view = |items: &[VerificationItem]| {
        items
            .iter()
            .map(|i| {
                let m = session.mention(&i.mention_id).expect("batch ids are in the pool");
                ItemView {
                    mention_id: i.mention_id.clone(),
                    raw: m.raw.clone(),
                    tokens: m.tokens.clone(),
                    labels: session.schema().names(&i.labels),
                    confidence: i.confidence,
                    bucket: i.bucket,
                }
            })
            .collect()
    };
    BatchView {
        high: view(&batch.high),
        low: view(&batch.low),
    }
}

#[derive(Debug, Serialize)]
struct LabelResponse {
    iteration: usize,
    mention_id: String,
    weak_labeled_count: usize,
    weak_labeled: Vec<String>,
    loss_trace: Vec<f64>,
    verification: BatchView,
    status: SessionStatus,
    stop_reason: Option<StopReason>,
    held_out: Option<HeldOutScores>,
}

async fn submit_label(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<LabelResponse>> {
    let slot = app.slot(&id)?;
    let req: LabelRequest = parse_body(&body)?;
    let mut session = slot.session.clone().lock_owned().await;
    // state and id conflicts take precedence over label validation
    let pending = session.next_query()?.mention_id;
    if pending != req.mention_id {
        return Err(LoopError::NotPending {
            expected: pending,
            got: req.mention_id,
        }
        .into());
    }
    let token_count = session.mention(&pending).expect("pending query in pool").len();
    let labels = session
        .schema()
        .resolve(&req.labels, token_count)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_labels", e.to_string()))?;

    slot.set_status(SessionStatus::Training);
    let worker_slot = slot.clone();
    let worker_app = app.clone();
    let result = tokio::task::spawn_blocking(move || -> ApiResult<LabelResponse> {
        let outcome = session.submit_label(&req.mention_id, labels);
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                worker_slot.refresh(&id, &session);
                return Err(e.into());
            }
        };
        let held_out = session.evaluate_test()?.map(|r| HeldOutScores {
            entity_f1: r.entity.f1,
            token_f1: r.token.f1,
        });
        if let Some(h) = held_out {
            worker_slot.f1_history.lock().expect("history lock").push(F1Point {
                iteration: session.state().iteration,
                budget_used: session.state().budget_used,
                entity_f1: h.entity_f1,
                token_f1: h.token_f1,
            });
        }
        worker_slot.refresh(&id, &session);
        worker_app
            .write_checkpoint(&id, &worker_slot, &session)
            .map_err(ApiError::internal)?;
        Ok(LabelResponse {
            iteration: outcome.iteration,
            mention_id: outcome.mention_id,
            weak_labeled_count: outcome.weak_labeled.len(),
            weak_labeled: outcome.weak_labeled,
            loss_trace: outcome.loss_trace,
            verification: batch_view(&session, &outcome.verification),
            status: outcome.phase.into(),
            stop_reason: outcome.stop_reason,
            held_out,
        })
    })
    .await;
    match result {
        Ok(r) => Ok(Json(r?)),
        Err(e) => {
            slot.set_status(SessionStatus::AwaitingLabel);
            Err(ApiError::internal(format!("training task failed: {e}")))
        }
    }
}

async fn verification(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<BatchView>> {
    let slot = app.slot(&id)?;
    let session = slot.session.lock().await;
    let batch = session.pending_verification()?;
    Ok(Json(batch_view(&session, batch)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackRequest {
    verdicts: BTreeMap<String, Verdict>,
}

#[derive(Debug, Serialize)]
struct FeedbackResponse {
    correct: usize,
    incorrect: usize,
    should_stop: bool,
    #[serde(flatten)]
    status: StatusSnapshot,
}

async fn submit_feedback(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<FeedbackResponse>> {
    let slot = app.slot(&id)?;
    let req: FeedbackRequest = parse_body(&body)?;
    let mut session = slot.session.lock().await;
    let outcome = session.apply_feedback(&req.verdicts)?;
    slot.refresh(&id, &session);
    app.write_checkpoint(&id, &slot, &session).map_err(ApiError::internal)?;
    Ok(Json(FeedbackResponse {
        correct: outcome.correct,
        incorrect: outcome.incorrect,
        should_stop: outcome.stop_reason.is_some(),
        status: slot.snapshot(),
    }))
}

async fn status(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<StatusSnapshot>> {
    Ok(Json(app.slot(&id)?.snapshot()))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictRequest {
    mention: String,
}

#[derive(Debug, Serialize)]
struct PredictResponse {
    tokens: Vec<String>,
    labels: Vec<String>,
    confidence: f64,
    log_prob: f64,
}

async fn predict(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<PredictResponse>> {
    let slot = app.slot(&id)?;
    let req: PredictRequest = parse_body(&body)?;
    let tokens = tokenize(&req.mention).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let session = slot.session.lock().await;
    let model = session.model();
    if !model.is_trained() {
        return Err(ApiError::conflict("untrained", "the model has not been trained yet"));
    }
    let pred = model.predict(&tokens).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(PredictResponse {
        labels: session.schema().names(&pred.labels),
        confidence: pred.probability(),
        log_prob: pred.log_prob,
        tokens,
    }))
}
