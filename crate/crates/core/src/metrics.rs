//! Entity-, token-, and component-level precision/recall/F1.
//!
//! A model may abstain on a whole mention. Precision counts only what was
//! predicted and recall measures how much was predicted at all, so a model
//! that always answers has token recall 1.0. Any ratio with a zero
//! denominator is taken as 1.0 (vacuously satisfied); F1 is 0 when both
//! precision and recall are 0.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LabelId, LabelSchema, Mention};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("gold mention {0:?} has no labels")]
    UnlabeledGold(String),
    #[error("prediction for unknown mention {0:?}")]
    UnknownId(String),
    #[error("mention {0:?} carries a label outside the schema")]
    LabelOutOfRange(String),
    #[error("mention {id:?}: {predicted} predicted labels for {tokens} tokens")]
    LengthMismatch {
        id: String,
        predicted: usize,
        tokens: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, recall_num: usize, recall_den: usize) -> Self {
        Self::new(ratio(correct, predicted), ratio(recall_num, recall_den))
    }

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    /// Rounded to two decimals, the precision used in reports.
    pub fn rounded(&self) -> (f64, f64, f64) {
        let r = |v: f64| (v * 100.0).round() / 100.0;
        (r(self.precision), r(self.recall), r(self.f1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub name: String,
    pub scores: Prf,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entity: Prf,
    pub token: Prf,
    /// Components in schema order; classes absent from both gold and
    /// predictions are omitted.
    pub per_component: Vec<ComponentScore>,
    pub entities: usize,
    pub tokens: usize,
    pub correct_tokens: usize,
    pub include_separator: bool,
}

impl EvalReport {
    pub fn component(&self, name: &str) -> Option<&ComponentScore> {
        self.per_component.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub include_separator: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            include_separator: true,
        }
    }
}

/// Scores predictions keyed by mention id against gold mentions. A gold
/// mention with no entry in `predicted` counts as abstained.
pub fn evaluate(
    schema: &LabelSchema,
    gold: &[Mention],
    predicted: &HashMap<String, Vec<LabelId>>,
    options: EvalOptions,
) -> Result<EvalReport, MetricsError> {
    let by_id: HashMap<&str, &Mention> = gold.iter().map(|m| (m.id.as_str(), m)).collect();
    if let Some(id) = predicted.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(MetricsError::UnknownId(id.clone()));
    }
    let sep = schema.separator_id();
    let counted = |l: LabelId| options.include_separator || l != sep;
    let labels = schema.label_count();
    let mut gold_c = vec![0usize; labels];
    let mut pred_c = vec![0usize; labels];
    let mut correct_c = vec![0usize; labels];
    let (mut all_tokens, mut pred_tokens, mut correct_tokens) = (0, 0, 0);
    let (mut entities_predicted, mut entities_correct) = (0, 0);

    for m in gold {
        let g = m
            .labels
            .as_ref()
            .ok_or_else(|| MetricsError::UnlabeledGold(m.id.clone()))?;
        if g.iter().any(|l| l.0 >= labels) {
            return Err(MetricsError::LabelOutOfRange(m.id.clone()));
        }
        let positions: Vec<usize> = (0..g.len()).filter(|&i| counted(g[i])).collect();
        all_tokens += positions.len();
        for &i in &positions {
            gold_c[g[i].0] += 1;
        }
        let Some(p) = predicted.get(&m.id) else {
            continue;
        };
        if p.len() != g.len() {
            return Err(MetricsError::LengthMismatch {
                id: m.id.clone(),
                predicted: p.len(),
                tokens: g.len(),
            });
        }
        if p.iter().any(|l| l.0 >= labels) {
            return Err(MetricsError::LabelOutOfRange(m.id.clone()));
        }
        entities_predicted += 1;
        let mut all_right = true;
        for &i in &positions {
            pred_tokens += 1;
            pred_c[p[i].0] += 1;
            if p[i] == g[i] {
                correct_tokens += 1;
                correct_c[g[i].0] += 1;
            } else {
                all_right = false;
            }
        }
        if all_right {
            entities_correct += 1;
        }
    }

    let per_component = (0..labels)
        .filter(|&c| counted(LabelId(c)) && (gold_c[c] > 0 || pred_c[c] > 0))
        .map(|c| ComponentScore {
            name: schema.name_of(LabelId(c)).unwrap_or("?").to_string(),
            scores: Prf::from_counts(correct_c[c], pred_c[c], correct_c[c], gold_c[c]),
            gold: gold_c[c],
            predicted: pred_c[c],
            correct: correct_c[c],
        })
        .collect();

    Ok(EvalReport {
        entity: Prf::from_counts(entities_correct, entities_predicted, entities_predicted, gold.len()),
        token: Prf::from_counts(correct_tokens, pred_tokens, pred_tokens, all_tokens),
        per_component,
        entities: gold.len(),
        tokens: all_tokens,
        correct_tokens,
        include_separator: options.include_separator,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>9} {:>9} {:>9}", "level", "precision", "recall", "f1")?;
        let mut row = |name: &str, s: &Prf| {
            writeln!(f, "{:<16} {:>9.4} {:>9.4} {:>9.4}", name, s.precision, s.recall, s.f1)
        };
        row("entity", &self.entity)?;
        row("token", &self.token)?;
        for c in &self.per_component {
            row(&c.name, &c.scores)?;
        }
        Ok(())
    }
}
