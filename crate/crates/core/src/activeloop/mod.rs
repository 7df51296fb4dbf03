//! The active-learning session.
//!
//! One iteration: the annotator labels the most informative unlabeled
//! mention, up to `k` structurally equivalent mentions receive weak labels,
//! the model is retrained on everything labeled so far, and the `p` most and
//! `q` least confident machine-labeled mentions go out for a yes/no check.
//! The session stops when the label budget is spent, when a full low bucket
//! comes back at least 90% correct, or when nothing is left unlabeled.
//!
//! The session is a small state machine (`AwaitingLabel` →
//! `AwaitingVerification` → `AwaitingLabel` | `Stopped`) so that a remote
//! annotator can drive it one step at a time; [`Session::run_iteration`]
//! drives a full iteration with an [`Oracle`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_atomic, Corpus, CorpusError, LabelId, LabelSchema, Mention};
use crate::embed::EmbeddingProvider;
use crate::metrics::{evaluate, EvalOptions, EvalReport, MetricsError};
use crate::seqmodel::{Checkpoint, EncodedMention, ModelError, SequenceModel, TrainConfig, DEFAULT_HIDDEN};
use crate::structsig::{raw_signature, Signature, SignatureKey};

mod propagate;
pub mod sampling;

pub use propagate::transfer_labels;
pub use sampling::{Bucket, VerificationBatch, VerificationItem};

pub const SESSION_FORMAT_VERSION: u32 = 1;
pub const CONVERGENCE_RATE: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("session is complete ({0})")]
    SessionComplete(StopReason),
    #[error("session is {actual:?}, operation needs {expected:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("mention {got:?} is not the pending query (expected {expected:?})")]
    NotPending { expected: String, got: String },
    #[error("mention {0:?} is not in the current verification batch")]
    UnknownVerification(String),
    #[error("invalid labels: {0}")]
    InvalidLabels(String),
    #[error("invalid loop parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("session checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("corrupt session checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LoopError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingLabel,
    AwaitingVerification,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Budget,
    Converged,
    PoolExhausted,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::Budget => "budget",
            StopReason::Converged => "converged",
            StopReason::PoolExhausted => "pool_exhausted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopParams {
    /// Cap on weak labels created per human label.
    pub k: usize,
    /// High-confidence verification batch size.
    pub p: usize,
    /// Low-confidence verification batch size.
    pub q: usize,
    /// Number of full human labels allowed.
    pub budget: usize,
    pub hidden: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for LoopParams {
    fn default() -> Self {
        Self {
            k: 50,
            p: 15,
            q: 15,
            budget: 20,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

impl LoopParams {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(LoopError::InvalidParams("hidden width must be positive".into()));
        }
        if self.train.epochs == 0 || !(self.train.learning_rate > 0.0) {
            return Err(LoopError::InvalidParams("training needs epochs and a positive learning rate".into()));
        }
        Ok(())
    }
}

/// Persistent bookkeeping of one session.
///
/// `unlabeled`, `human_labeled`, `weak_labeled`, and `verified` partition the
/// pool. `flagged` holds unlabeled ids whose machine labels were rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub unlabeled: BTreeSet<String>,
    pub human_labeled: BTreeMap<String, Vec<LabelId>>,
    pub weak_labeled: BTreeMap<String, Vec<LabelId>>,
    pub verified: BTreeMap<String, Vec<LabelId>>,
    pub flagged: BTreeSet<String>,
    pub budget_used: usize,
    pub budget_max: usize,
    pub k: usize,
    pub p: usize,
    pub q: usize,
    pub low_conf_correct_rate: Option<f64>,
    /// Whether the latest round returned verdicts for a full low bucket.
    pub low_bucket_full: bool,
    pub iteration: usize,
    pub phase: Phase,
    pub stop_reason: Option<StopReason>,
    pub pending_query: Option<String>,
    pub pending_verification: Option<VerificationBatch>,
    pub history: Vec<Event>,
}

impl SessionState {
    pub fn pool_sizes(&self) -> PoolSizes {
        PoolSizes {
            unlabeled: self.unlabeled.len(),
            human_labeled: self.human_labeled.len(),
            weak_labeled: self.weak_labeled.len(),
            verified: self.verified.len(),
            flagged: self.flagged.len(),
        }
    }

    /// Pure stop rule over the current bookkeeping.
    pub fn should_stop(&self) -> Option<StopReason> {
        if self.budget_used >= self.budget_max {
            Some(StopReason::Budget)
        } else if self.low_bucket_full
            && self.low_conf_correct_rate.is_some_and(|r| r >= CONVERGENCE_RATE)
        {
            Some(StopReason::Converged)
        } else if self.unlabeled.is_empty() {
            Some(StopReason::PoolExhausted)
        } else {
            None
        }
    }

    pub fn is_labeled(&self, id: &str) -> bool {
        self.human_labeled.contains_key(id) || self.weak_labeled.contains_key(id) || self.verified.contains_key(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub unlabeled: usize,
    pub human_labeled: usize,
    pub weak_labeled: usize,
    pub verified: usize,
    pub flagged: usize,
}

impl PoolSizes {
    /// Size of the whole pool; constant over a session.
    pub fn total(&self) -> usize {
        self.unlabeled + self.human_labeled + self.weak_labeled + self.verified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Labeled { iteration: usize, mention_id: String, weak_labeled: usize },
    Trained { iteration: usize, epochs: usize, final_loss: f64 },
    Feedback { iteration: usize, correct: usize, incorrect: usize, low_rate: Option<f64> },
    Stopped { reason: StopReason },
}

/// The most informative mention, with what an annotator needs to label it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub mention_id: String,
    pub raw: String,
    pub tokens: Vec<String>,
    /// Token ranges sharing one collapsed structure vector.
    pub structure_groups: Vec<std::ops::Range<usize>>,
    pub representativeness: usize,
    pub uncertainty: f64,
    pub info: f64,
    pub log_info: f64,
    pub pool: PoolSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelOutcome {
    pub iteration: usize,
    pub mention_id: String,
    pub weak_labeled: Vec<String>,
    pub loss_trace: Vec<f64>,
    pub verification: VerificationBatch,
    pub phase: Phase,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub correct: usize,
    pub incorrect: usize,
    pub low_conf_correct_rate: Option<f64>,
    pub phase: Phase,
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScores {
    pub entity_f1: f64,
    pub token_f1: f64,
}

/// One line of the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub mention_id: String,
    pub budget_used: usize,
    pub budget_max: usize,
    pub pool: PoolSizes,
    pub weak_labeled: usize,
    pub loss_trace: Vec<f64>,
    pub verification_high: usize,
    pub verification_low: usize,
    pub low_conf_correct_rate: Option<f64>,
    pub held_out: Option<HeldOutScores>,
    pub stop_reason: Option<StopReason>,
}

/// Answers queries and verification requests, e.g. from gold labels.
pub trait Oracle {
    fn label(&mut self, mention: &Mention) -> Vec<LabelId>;
    fn verify(&mut self, mention: &Mention, machine: &[LabelId]) -> Verdict;
}

/// Oracle backed by gold labels keyed by mention id.
#[derive(Debug, Clone)]
pub struct GoldOracle {
    gold: HashMap<String, Vec<LabelId>>,
}

impl GoldOracle {
    pub fn new(mentions: &[Mention]) -> Self {
        Self {
            gold: mentions
                .iter()
                .filter_map(|m| Some((m.id.clone(), m.labels.clone()?)))
                .collect(),
        }
    }
}

impl Oracle for GoldOracle {
    fn label(&mut self, mention: &Mention) -> Vec<LabelId> {
        self.gold[&mention.id].clone()
    }

    fn verify(&mut self, mention: &Mention, machine: &[LabelId]) -> Verdict {
        if self.gold.get(&mention.id).is_some_and(|g| g == machine) {
            Verdict::Correct
        } else {
            Verdict::Incorrect
        }
    }
}

pub struct Session {
    pool: Corpus,
    index: HashMap<String, usize>,
    raw_signatures: Vec<Vec<u16>>,
    signatures: Vec<Signature>,
    encoded: Vec<EncodedMention>,
    model: SequenceModel,
    params: LoopParams,
    state: SessionState,
    test_set: Option<Vec<Mention>>,
    audit_log: Option<PathBuf>,
}

impl Session {
    /// Starts a session over `pool`. Any labels in the pool are discarded:
    /// the session learns only from what it is told.
    pub fn new(
        pool: Corpus,
        provider: Arc<EmbeddingProvider>,
        params: LoopParams,
        test_set: Option<Vec<Mention>>,
    ) -> Result<Self> {
        params.validate()?;
        let model = SequenceModel::new(pool.schema.clone(), provider, params.hidden, params.seed);
        let state = SessionState {
            unlabeled: pool.mentions.iter().map(|m| m.id.clone()).collect(),
            human_labeled: BTreeMap::new(),
            weak_labeled: BTreeMap::new(),
            verified: BTreeMap::new(),
            flagged: BTreeSet::new(),
            budget_used: 0,
            budget_max: params.budget,
            k: params.k,
            p: params.p,
            q: params.q,
            low_conf_correct_rate: None,
            low_bucket_full: false,
            iteration: 0,
            phase: Phase::AwaitingLabel,
            stop_reason: None,
            pending_query: None,
            pending_verification: None,
            history: Vec::new(),
        };
        let mut session = Self::assemble(pool, model, params, state, test_set)?;
        session.enter_awaiting_label()?;
        Ok(session)
    }

    fn assemble(
        mut pool: Corpus,
        model: SequenceModel,
        params: LoopParams,
        state: SessionState,
        test_set: Option<Vec<Mention>>,
    ) -> Result<Self> {
        for m in &mut pool.mentions {
            m.labels = None;
        }
        if let Some(test) = &test_set {
            for m in test {
                m.validate(&pool.schema)?;
                if !m.is_labeled() {
                    return Err(LoopError::Metrics(MetricsError::UnlabeledGold(m.id.clone())));
                }
            }
        }
        let index = pool
            .mentions
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.clone(), i))
            .collect();
        let raw_signatures = pool
            .mentions
            .iter()
            .map(|m| raw_signature(&m.tokens))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ModelError::from)?;
        let signatures = raw_signatures.iter().map(|r| Signature::from_raw(r)).collect();
        let encoded = pool
            .mentions
            .iter()
            .map(|m| model.encode(&m.tokens))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            pool,
            index,
            raw_signatures,
            signatures,
            encoded,
            model,
            params,
            state,
            test_set,
            audit_log: None,
        })
    }

    /// Appends one JSON line per iteration to `path`.
    pub fn set_audit_log(&mut self, path: Option<PathBuf>) {
        self.audit_log = path;
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn model(&self) -> &SequenceModel {
        &self.model
    }

    pub fn params(&self) -> &LoopParams {
        &self.params
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.pool.schema
    }

    pub fn pool(&self) -> &Corpus {
        &self.pool
    }

    pub fn test_set(&self) -> Option<&[Mention]> {
        self.test_set.as_deref()
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn mention(&self, id: &str) -> Option<&Mention> {
        self.index.get(id).map(|&i| &self.pool.mentions[i])
    }

    fn idx(&self, id: &str) -> usize {
        self.index[id]
    }

    fn expect_phase(&self, expected: Phase) -> Result<()> {
        if let Some(reason) = self.state.stop_reason {
            return Err(LoopError::SessionComplete(reason));
        }
        if self.state.phase != expected {
            return Err(LoopError::WrongPhase {
                expected,
                actual: self.state.phase,
            });
        }
        Ok(())
    }

    fn signature_counts(&self) -> HashMap<SignatureKey, usize> {
        let mut counts = HashMap::new();
        for id in &self.state.unlabeled {
            *counts.entry(self.signatures[self.idx(id)].key()).or_insert(0) += 1;
        }
        counts
    }

    /// Unlabeled mentions sharing `id`'s signature, itself included.
    pub fn representativeness(&self, id: &str) -> usize {
        let key = self.signatures[self.idx(id)].key();
        self.state
            .unlabeled
            .iter()
            .filter(|other| self.signatures[self.idx(other)].key() == key)
            .count()
    }

    /// `log Uncertain`; zero (Uncertain = 1) before the first training.
    pub fn log_uncertainty(&self, id: &str) -> f64 {
        if !self.model.is_trained() {
            return 0.0;
        }
        let enc = &self.encoded[self.idx(id)];
        let pred = self.model.predict_encoded(enc);
        sampling::log_uncertainty(enc.len(), pred.log_prob)
    }

    /// `log Info = log Rep + log Uncertain`.
    pub fn log_informative_score(&self, id: &str) -> f64 {
        sampling::log_informative(self.representativeness(id), self.log_uncertainty(id))
    }

    /// The mention to ask about next: flagged mentions first, then the
    /// whole unlabeled pool.
    pub fn select_query(&self) -> Result<String> {
        if self.state.unlabeled.is_empty() {
            return Err(LoopError::SessionComplete(StopReason::PoolExhausted));
        }
        let counts = self.signature_counts();
        let candidates: Vec<&String> = if self.state.flagged.is_empty() {
            self.state.unlabeled.iter().collect()
        } else {
            self.state.flagged.iter().collect()
        };
        let scored: Vec<(&str, f64)> = candidates
            .into_iter()
            .map(|id| {
                let rep = counts[&self.signatures[self.idx(id)].key()];
                (id.as_str(), sampling::log_informative(rep, self.log_uncertainty(id)))
            })
            .collect();
        Ok(sampling::argmax_by_score(scored).expect("non-empty candidates").to_string())
    }

    fn query_payload(&self, id: &str) -> Query {
        let m = self.mention(id).expect("pending query is in the pool");
        let rep = self.representativeness(id);
        let log_unc = self.log_uncertainty(id);
        let log_info = sampling::log_informative(rep, log_unc);
        Query {
            mention_id: id.to_string(),
            raw: m.raw.clone(),
            tokens: m.tokens.clone(),
            structure_groups: self.signatures[self.idx(id)].spans(),
            representativeness: rep,
            uncertainty: log_unc.exp(),
            info: log_info.exp(),
            log_info,
            pool: self.state.pool_sizes(),
        }
    }

    /// The pending query. Repeated calls return the same payload until a
    /// label is submitted.
    pub fn next_query(&self) -> Result<Query> {
        self.expect_phase(Phase::AwaitingLabel)?;
        let id = self
            .state
            .pending_query
            .as_ref()
            .expect("awaiting-label sessions always have a pending query");
        Ok(self.query_payload(id))
    }

    fn stop(&mut self, reason: StopReason) {
        self.state.phase = Phase::Stopped;
        self.state.stop_reason = Some(reason);
        self.state.pending_query = None;
        self.state.pending_verification = None;
        self.state.history.push(Event::Stopped { reason });
    }

    fn enter_awaiting_label(&mut self) -> Result<()> {
        if let Some(reason) = self.state.should_stop() {
            self.stop(reason);
            return Ok(());
        }
        self.state.pending_query = Some(self.select_query()?);
        self.state.phase = Phase::AwaitingLabel;
        Ok(())
    }

    /// Weak labels for unlabeled mentions structurally equivalent to a
    /// freshly labeled `source_id`, at most `k`, in ascending id order.
    pub fn propagate_weak_labels(&self, source_id: &str, labels: &[LabelId]) -> Vec<(String, Vec<LabelId>)> {
        let src = self.idx(source_id);
        let key = self.signatures[src].key();
        let mut out = Vec::new();
        for id in &self.state.unlabeled {
            if out.len() >= self.state.k {
                break;
            }
            if id == source_id {
                continue;
            }
            let t = self.idx(id);
            if self.signatures[t].key() != key {
                continue;
            }
            if let Some(l) = transfer_labels(&self.raw_signatures[src], labels, &self.raw_signatures[t]) {
                out.push((id.clone(), l));
            }
        }
        out
    }

    fn training_examples(&self) -> Result<Vec<crate::seqmodel::Example>> {
        let s = &self.state;
        s.human_labeled
            .iter()
            .chain(&s.weak_labeled)
            .chain(&s.verified)
            .map(|(id, labels)| {
                Ok(crate::seqmodel::Example {
                    input: self.encoded[self.idx(id)].clone(),
                    gold: labels.iter().map(|l| l.0).collect(),
                })
            })
            .collect()
    }

    /// Ranks the unlabeled pool by `Pr / |E|` and takes the top `p` and
    /// bottom `q`.
    pub fn select_verification(&self) -> VerificationBatch {
        let candidates = self
            .state
            .unlabeled
            .iter()
            .map(|id| {
                let enc = &self.encoded[self.idx(id)];
                let pred = self.model.predict_encoded(enc);
                let confidence = pred.probability() / enc.len() as f64;
                (id.clone(), pred.labels, confidence)
            })
            .collect();
        sampling::split_verification(candidates, self.state.p, self.state.q)
    }

    /// Records the annotator's labels for the pending query, propagates weak
    /// labels, retrains, and prepares the verification batch.
    pub fn submit_label(&mut self, mention_id: &str, labels: Vec<LabelId>) -> Result<LabelOutcome> {
        self.expect_phase(Phase::AwaitingLabel)?;
        let pending = self.state.pending_query.clone().expect("pending query");
        if pending != mention_id {
            return Err(LoopError::NotPending {
                expected: pending,
                got: mention_id.to_string(),
            });
        }
        let m = self.mention(mention_id).expect("pending query is in the pool");
        if labels.len() != m.len() {
            return Err(LoopError::InvalidLabels(format!(
                "{} labels for {} tokens",
                labels.len(),
                m.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !self.pool.schema.contains(**l)) {
            return Err(LoopError::InvalidLabels(format!("label id {} outside schema", bad.0)));
        }

        let weak = self.propagate_weak_labels(mention_id, &labels);
        let mut next = self.state.clone();
        next.unlabeled.remove(mention_id);
        next.flagged.remove(mention_id);
        next.human_labeled.insert(mention_id.to_string(), labels);
        next.budget_used += 1;
        next.iteration += 1;
        for (id, l) in &weak {
            next.unlabeled.remove(id);
            next.flagged.remove(id);
            next.weak_labeled.insert(id.clone(), l.clone());
        }
        next.pending_query = None;
        next.history.push(Event::Labeled {
            iteration: next.iteration,
            mention_id: mention_id.to_string(),
            weak_labeled: weak.len(),
        });

        let previous = std::mem::replace(&mut self.state, next);
        let mut config = self.params.train.clone();
        config.seed = self.params.seed.wrapping_add(self.state.iteration as u64);
        let report = match self.training_examples().and_then(|ex| Ok(self.model.train(&ex, &config)?)) {
            Ok(r) => r,
            Err(e) => {
                self.state = previous;
                return Err(e);
            }
        };
        self.state.history.push(Event::Trained {
            iteration: self.state.iteration,
            epochs: report.epoch_losses.len(),
            final_loss: report.epoch_losses.last().copied().unwrap_or(0.0),
        });

        let batch = self.select_verification();
        if batch.is_empty() {
            let reason = self.state.should_stop().unwrap_or(StopReason::PoolExhausted);
            self.stop(reason);
        } else {
            self.state.pending_verification = Some(batch.clone());
            self.state.phase = Phase::AwaitingVerification;
        }
        Ok(LabelOutcome {
            iteration: self.state.iteration,
            mention_id: mention_id.to_string(),
            weak_labeled: weak.into_iter().map(|(id, _)| id).collect(),
            loss_trace: report.epoch_losses,
            verification: batch,
            phase: self.state.phase,
            stop_reason: self.state.stop_reason,
        })
    }

    pub fn pending_verification(&self) -> Result<&VerificationBatch> {
        self.expect_phase(Phase::AwaitingVerification)?;
        Ok(self
            .state
            .pending_verification
            .as_ref()
            .expect("awaiting-verification sessions have a batch"))
    }

    /// Applies yes/no verdicts for (a subset of) the pending batch.
    /// Accepted machine labels join the training data; rejected mentions stay
    /// unlabeled and are queried first from now on.
    pub fn apply_feedback(&mut self, verdicts: &BTreeMap<String, Verdict>) -> Result<FeedbackOutcome> {
        self.expect_phase(Phase::AwaitingVerification)?;
        let batch = self.state.pending_verification.clone().expect("pending batch");
        if let Some(bad) = verdicts.keys().find(|id| batch.get(id).is_none()) {
            return Err(LoopError::UnknownVerification(bad.clone()));
        }
        let (mut correct, mut incorrect) = (0, 0);
        let (mut low_seen, mut low_correct) = (0, 0);
        for (id, verdict) in verdicts {
            let item = batch.get(id).expect("checked above");
            if item.bucket == Bucket::Low {
                low_seen += 1;
            }
            match verdict {
                Verdict::Correct => {
                    correct += 1;
                    if item.bucket == Bucket::Low {
                        low_correct += 1;
                    }
                    self.state.unlabeled.remove(id);
                    self.state.flagged.remove(id);
                    self.state.verified.insert(id.clone(), item.labels.clone());
                }
                Verdict::Incorrect => {
                    incorrect += 1;
                    self.state.flagged.insert(id.clone());
                }
            }
        }
        self.state.low_conf_correct_rate =
            (low_seen > 0).then(|| low_correct as f64 / low_seen as f64);
        self.state.low_bucket_full = self.state.q > 0 && batch.low.len() == self.state.q && low_seen == self.state.q;
        self.state.pending_verification = None;
        self.state.history.push(Event::Feedback {
            iteration: self.state.iteration,
            correct,
            incorrect,
            low_rate: self.state.low_conf_correct_rate,
        });
        self.enter_awaiting_label()?;
        Ok(FeedbackOutcome {
            correct,
            incorrect,
            low_conf_correct_rate: self.state.low_conf_correct_rate,
            phase: self.state.phase,
            stop_reason: self.state.stop_reason,
        })
    }

    /// Current stop decision without changing state.
    pub fn should_stop(&self) -> Option<StopReason> {
        self.state.stop_reason.or_else(|| self.state.should_stop())
    }

    /// Scores the model on the attached held-out set.
    pub fn evaluate_test(&self) -> Result<Option<EvalReport>> {
        let Some(test) = &self.test_set else {
            return Ok(None);
        };
        let mut predicted = HashMap::new();
        for m in test {
            predicted.insert(m.id.clone(), self.model.predict(&m.tokens)?.labels);
        }
        Ok(Some(evaluate(&self.pool.schema, test, &predicted, EvalOptions::default())?))
    }

    /// One full iteration: query, label, propagate, train, verify, decide.
    pub fn run_iteration(&mut self, oracle: &mut dyn Oracle) -> Result<IterationReport> {
        self.expect_phase(Phase::AwaitingLabel)?;
        let id = self.state.pending_query.clone().expect("pending query");
        let mention = self.mention(&id).expect("query in pool").clone();
        let labels = oracle.label(&mention);
        let outcome = self.submit_label(&id, labels)?;
        if self.state.phase == Phase::AwaitingVerification {
            let batch = self.state.pending_verification.clone().expect("batch");
            let verdicts: BTreeMap<String, Verdict> = batch
                .high
                .iter()
                .chain(&batch.low)
                .map(|item| {
                    let m = self.mention(&item.mention_id).expect("batch ids are in the pool");
                    (item.mention_id.clone(), oracle.verify(m, &item.labels))
                })
                .collect();
            self.apply_feedback(&verdicts)?;
        }
        let held_out = self.evaluate_test()?.map(|r| HeldOutScores {
            entity_f1: r.entity.f1,
            token_f1: r.token.f1,
        });
        let report = IterationReport {
            iteration: self.state.iteration,
            mention_id: id,
            budget_used: self.state.budget_used,
            budget_max: self.state.budget_max,
            pool: self.state.pool_sizes(),
            weak_labeled: outcome.weak_labeled.len(),
            loss_trace: outcome.loss_trace,
            verification_high: outcome.verification.high.len(),
            verification_low: outcome.verification.low.len(),
            low_conf_correct_rate: self.state.low_conf_correct_rate,
            held_out,
            stop_reason: self.state.stop_reason,
        };
        if let Some(path) = &self.audit_log {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            writeln!(f, "{}", serde_json::to_string(&report).expect("report serializes"))?;
        }
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> SessionCheckpoint {
        SessionCheckpoint {
            format_version: SESSION_FORMAT_VERSION,
            params: self.params.clone(),
            pool: self.pool.clone(),
            test_set: self.test_set.clone(),
            state: self.state.clone(),
            model: self.model.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ckpt: SessionCheckpoint) -> Result<Self> {
        let model = SequenceModel::from_checkpoint(ckpt.model)?;
        Self::restore(ckpt.pool, model, ckpt.params, ckpt.state, ckpt.test_set)
    }

    /// Restores around an existing provider instance (avoids reconnecting).
    pub fn from_checkpoint_with(ckpt: SessionCheckpoint, provider: Arc<EmbeddingProvider>) -> Result<Self> {
        let model = SequenceModel::from_checkpoint_with(ckpt.model, provider)?;
        Self::restore(ckpt.pool, model, ckpt.params, ckpt.state, ckpt.test_set)
    }

    fn restore(
        pool: Corpus,
        model: SequenceModel,
        params: LoopParams,
        state: SessionState,
        test_set: Option<Vec<Mention>>,
    ) -> Result<Self> {
        if model.schema() != &pool.schema {
            return Err(LoopError::Corrupt("model schema differs from pool schema".into()));
        }
        let ids: BTreeSet<&String> = pool.mentions.iter().map(|m| &m.id).collect();
        let known = state
            .unlabeled
            .iter()
            .chain(state.human_labeled.keys())
            .chain(state.weak_labeled.keys())
            .chain(state.verified.keys())
            .all(|id| ids.contains(id));
        if !known || state.pool_sizes().total() != pool.len() {
            return Err(LoopError::Corrupt("pools do not partition the corpus".into()));
        }
        Self::assemble(pool, model, params, state, test_set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(&self.to_checkpoint()).expect("session serializes");
        write_atomic(path, &bytes).map_err(|e| match e {
            CorpusError::Io(io) => LoopError::Io(io),
            other => LoopError::Corpus(other),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint(SessionCheckpoint::from_slice(&bytes)?)
    }
}

/// Versioned JSON session document with the model embedded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCheckpoint {
    pub format_version: u32,
    pub params: LoopParams,
    pub pool: Corpus,
    pub test_set: Option<Vec<Mention>>,
    pub state: SessionState,
    pub model: Checkpoint,
}

impl SessionCheckpoint {
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| LoopError::Corrupt(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| LoopError::Corrupt("missing format_version".into()))?;
        if version != SESSION_FORMAT_VERSION as u64 {
            return Err(LoopError::Version {
                found: version,
                expected: SESSION_FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| LoopError::Corrupt(e.to_string()))
    }
}

/// Checks audit-log records: constant pool total, one budget unit per
/// iteration, budget never exceeded.
pub fn check_audit_log(records: &[IterationReport]) -> std::result::Result<(), String> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let total = first.pool.total();
    for (i, r) in records.iter().enumerate() {
        if r.pool.total() != total {
            return Err(format!("iteration {}: pool total {} != {}", r.iteration, r.pool.total(), total));
        }
        if r.budget_used > r.budget_max {
            return Err(format!("iteration {}: budget {} over {}", r.iteration, r.budget_used, r.budget_max));
        }
        if r.budget_used != r.iteration {
            return Err(format!("iteration {}: budget_used {}", r.iteration, r.budget_used));
        }
        if i > 0 {
            let prev = &records[i - 1];
            if r.budget_used != prev.budget_used + 1 {
                return Err(format!("iteration {}: budget did not advance by one", r.iteration));
            }
            let labeled = |p: &PoolSizes| p.human_labeled + p.weak_labeled + p.verified;
            if labeled(&r.pool) < labeled(&prev.pool) {
                return Err(format!("iteration {}: labeled count shrank", r.iteration));
            }
        }
        if r.pool.flagged > r.pool.unlabeled {
            return Err(format!("iteration {}: more flagged than unlabeled", r.iteration));
        }
    }
    Ok(())
}

/// Reads an audit log written by [`Session::run_iteration`].
pub fn read_audit_log(path: &Path) -> Result<Vec<IterationReport>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| LoopError::Corrupt(e.to_string())))
        .collect()
}
