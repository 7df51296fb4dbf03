//! Informativeness scores and the verification split.
//!
//! Scores are kept in log space: `log Info = log Rep + log Uncertain`, with
//! `log Uncertain = log |E| − log Pr(M(E))`.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelId;

/// `log(|E| / Pr)` from the decoded path's log-probability.
pub fn log_uncertainty(token_count: usize, log_prob: f64) -> f64 {
    (token_count as f64).ln() - log_prob
}

pub fn uncertainty(token_count: usize, probability: f64) -> f64 {
    token_count as f64 / probability
}

pub fn log_informative(representativeness: usize, log_uncertain: f64) -> f64 {
    (representativeness as f64).ln() + log_uncertain
}

/// Highest score wins; equal scores go to the smallest id.
pub fn argmax_by_score<'a>(scored: impl IntoIterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (id, s) in scored {
        best = match best {
            None => Some((id, s)),
            Some((bid, bs)) if s > bs || (s == bs && id < bid) => Some((id, s)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationItem {
    pub mention_id: String,
    pub labels: Vec<LabelId>,
    /// `Pr(M(E)) / |E|`.
    pub confidence: f64,
    pub bucket: Bucket,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationBatch {
    pub high: Vec<VerificationItem>,
    pub low: Vec<VerificationItem>,
}

impl VerificationBatch {
    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty() && self.low.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VerificationItem> {
        self.high.iter().chain(&self.low).find(|i| i.mention_id == id)
    }
}

/// Splits candidates `(id, labels, confidence)` into the `p` most and `q`
/// least confident. When fewer than `p + q` candidates exist the low bucket
/// is filled first and the high bucket takes what remains, up to `p`.
pub fn split_verification(
    mut candidates: Vec<(String, Vec<LabelId>, f64)>,
    p: usize,
    q: usize,
) -> VerificationBatch {
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    let n = candidates.len();
    let low_n = q.min(n);
    let high_n = p.min(n - low_n);
    let item = |(mention_id, labels, confidence): (String, Vec<LabelId>, f64), bucket| VerificationItem {
        mention_id,
        labels,
        confidence,
        bucket,
    };
    let mut low: Vec<VerificationItem> = candidates
        .split_off(n - low_n)
        .into_iter()
        .map(|c| item(c, Bucket::Low))
        .collect();
    low.reverse();
    let high = candidates
        .into_iter()
        .take(high_n)
        .map(|c| item(c, Bucket::High))
        .collect();
    VerificationBatch { high, low }
}
