//! Oracle-driven sessions over a gold corpus.
//!
//! The corpus is split into a pool (70%) and a held-out test set (30%) with a
//! seeded shuffle. Gold labels answer every query and verification request,
//! and the model is scored on the test set after each iteration.

use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activeloop::{GoldOracle, IterationReport, LoopError, LoopParams, Phase, Session, StopReason};
use crate::corpus::{Corpus, Mention};
use crate::embed::EmbeddingProvider;
use crate::metrics::{EvalReport, MetricsError};
use crate::seqmodel::SequenceModel;

pub const POOL_FRACTION: f64 = 0.7;

/// Seeded pool/test split. Each side keeps the corpus order.
pub fn split_corpus(corpus: &Corpus, seed: u64) -> (Corpus, Vec<Mention>) {
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pool_n = (corpus.len() as f64 * POOL_FRACTION).round() as usize;
    let mut in_pool = vec![false; corpus.len()];
    for &i in &order[..pool_n] {
        in_pool[i] = true;
    }
    let (pool, test): (Vec<_>, Vec<_>) = corpus
        .mentions
        .iter()
        .cloned()
        .zip(in_pool)
        .partition(|(_, p)| *p);
    (
        Corpus {
            schema: corpus.schema.clone(),
            mentions: pool.into_iter().map(|(m, _)| m).collect(),
        },
        test.into_iter().map(|(m, _)| m).collect(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub pool_size: usize,
    pub test_size: usize,
    pub iterations: Vec<IterationReport>,
    pub stop_reason: StopReason,
    pub budget_used: usize,
    /// Held-out scores of the final model; `None` when no training happened.
    pub final_eval: Option<EvalReport>,
}

impl SimulationReport {
    pub fn final_entity_f1(&self) -> f64 {
        self.final_eval.as_ref().map_or(0.0, |r| r.entity.f1)
    }

    pub fn first_entity_f1(&self) -> Option<f64> {
        self.iterations.first()?.held_out.map(|h| h.entity_f1)
    }
}

/// Runs a session to completion with a gold oracle. Returns the report and
/// the final model.
pub fn simulate(
    corpus: &Corpus,
    provider: Arc<EmbeddingProvider>,
    params: LoopParams,
    audit_log: Option<PathBuf>,
) -> Result<(SimulationReport, SequenceModel), LoopError> {
    if let Some(m) = corpus.mentions.iter().find(|m| !m.is_labeled()) {
        return Err(LoopError::Metrics(MetricsError::UnlabeledGold(m.id.clone())));
    }
    let (pool, test) = split_corpus(corpus, params.seed);
    let mut oracle = GoldOracle::new(&pool.mentions);
    let (pool_size, test_size) = (pool.len(), test.len());
    let mut session = Session::new(pool, provider, params, Some(test))?;
    session.set_audit_log(audit_log);

    let mut iterations = Vec::new();
    while session.phase() == Phase::AwaitingLabel {
        iterations.push(session.run_iteration(&mut oracle)?);
    }
    let final_eval = if session.model().is_trained() {
        session.evaluate_test()?
    } else {
        None
    };
    let report = SimulationReport {
        pool_size,
        test_size,
        iterations,
        stop_reason: session.state().stop_reason.expect("loop ends only when stopped"),
        budget_used: session.state().budget_used,
        final_eval,
    };
    Ok((report, session.model().clone()))
}
