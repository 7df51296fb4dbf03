//! The labeling model: a rectified dense layer condenses each token embedding,
//! the token's structure vector is appended, a second dense layer produces
//! per-label emission scores, and a linear-chain CRF decodes the sequence.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{write_atomic, LabelId, LabelSchema, Mention};
use crate::embed::{EmbedError, EmbeddingProvider, ProviderConfig};
use crate::structsig::{structure_vectors, StructError, PREDICATE_TABLE_VERSION, STRUCTURE_BITS};

pub mod crf;
mod matrix;

pub use crf::{log_partition, viterbi_decode};
pub use matrix::Matrix;

pub const DEFAULT_HIDDEN: usize = 50;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Structure(#[from] StructError),
    #[error("mention {0:?} has no labels")]
    Unlabeled(String),
    #[error("no labeled mentions to train on")]
    NoTrainingData,
    #[error("label {label} outside the {count}-label schema")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("training diverged at epoch {epoch}: loss {loss} (learning rate {learning_rate})")]
    NonFinite {
        epoch: usize,
        loss: f64,
        learning_rate: f64,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub early_stop_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            lr_decay: 1e-4,
            early_stop_delta: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.learning_rate > 0.0
            && self.lr_decay >= 0.0
            && self.early_stop_delta >= 0.0
            && self.learning_rate.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ModelError::Config(format!("{self:?}")))
        }
    }

    /// Inverse-time decay by epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * epoch as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<LabelId>,
    /// Log-probability of the decoded path, `score − log Z`.
    pub log_prob: f64,
    /// Unnormalized Viterbi path score.
    pub score: f64,
}

impl Prediction {
    pub fn probability(&self) -> f64 {
        self.log_prob.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub early_stopped: bool,
}

/// Model inputs for one mention, computed once per mention since the
/// embedding provider is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedMention {
    pub embeddings: Vec<Vec<f64>>,
    pub structure: Vec<[f64; STRUCTURE_BITS]>,
}

impl EncodedMention {
    pub fn len(&self) -> usize {
        self.structure.len()
    }

    pub fn is_empty(&self) -> bool {
        self.structure.is_empty()
    }
}

/// An encoded mention with its gold label indices.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: EncodedMention,
    pub gold: Vec<usize>,
}

/// Parameter gradients, shaped like the model's parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub transitions: Matrix,
}

impl Gradients {
    pub fn blocks(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("w1", self.w1.as_slice()),
            ("b1", &self.b1),
            ("w2", self.w2.as_slice()),
            ("b2", &self.b2),
            ("transitions", self.transitions.as_slice()),
        ]
    }
}

/// Intermediate activations kept for backpropagation.
struct Forward {
    pre_hidden: Vec<Vec<f64>>,
    concat: Vec<Vec<f64>>,
    emissions: Matrix,
}

#[derive(Debug, Clone)]
pub struct SequenceModel {
    schema: LabelSchema,
    provider: Arc<EmbeddingProvider>,
    hidden: usize,
    seed: u64,
    trained: bool,
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    transitions: Matrix,
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl SequenceModel {
    pub fn new(schema: LabelSchema, provider: Arc<EmbeddingProvider>, hidden: usize, seed: u64) -> Self {
        let dim = provider.dimension();
        let labels = schema.label_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = xavier(hidden, dim, &mut rng);
        let w2 = xavier(labels, hidden + STRUCTURE_BITS, &mut rng);
        Self {
            schema,
            provider,
            hidden,
            seed,
            trained: false,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; labels],
            transitions: Matrix::zeros(labels + 2, labels + 2),
        }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn provider(&self) -> &Arc<EmbeddingProvider> {
        &self.provider
    }

    pub fn label_count(&self) -> usize {
        self.schema.label_count()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Whether `train` has completed at least once.
    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn transitions(&self) -> &Matrix {
        &self.transitions
    }

    /// Parameter blocks in a fixed order, for inspection and gradient checks.
    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [f64]); 5] {
        [
            ("w1", self.w1.as_mut_slice()),
            ("b1", &mut self.b1),
            ("w2", self.w2.as_mut_slice()),
            ("b2", &mut self.b2),
            ("transitions", self.transitions.as_mut_slice()),
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.transitions.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    pub fn encode(&self, tokens: &[String]) -> Result<EncodedMention> {
        let embeddings = self
            .provider
            .embed_mention(tokens)?
            .into_iter()
            .map(|e| e.0)
            .collect();
        let structure = structure_vectors(tokens)?
            .into_iter()
            .map(|v| v.features())
            .collect();
        Ok(EncodedMention {
            embeddings,
            structure,
        })
    }

    /// Encodes a labeled mention for training.
    pub fn example(&self, mention: &Mention) -> Result<Example> {
        let labels = mention
            .labels
            .as_ref()
            .ok_or_else(|| ModelError::Unlabeled(mention.id.clone()))?;
        self.example_with(&mention.tokens, labels)
    }

    pub fn example_with(&self, tokens: &[String], labels: &[LabelId]) -> Result<Example> {
        let count = self.label_count();
        if let Some(bad) = labels.iter().find(|l| l.0 >= count) {
            return Err(ModelError::LabelOutOfRange { label: bad.0, count });
        }
        Ok(Example {
            input: self.encode(tokens)?,
            gold: labels.iter().map(|l| l.0).collect(),
        })
    }

    fn forward(&self, input: &EncodedMention) -> Forward {
        let n = input.len();
        let labels = self.label_count();
        let mut pre_hidden = Vec::with_capacity(n);
        let mut concat = Vec::with_capacity(n);
        let mut emissions = Matrix::zeros(n, labels);
        for i in 0..n {
            let mut pre = vec![0.0; self.hidden];
            self.w1.mul_vec_into(&input.embeddings[i], &mut pre);
            for (p, b) in pre.iter_mut().zip(&self.b1) {
                *p += b;
            }
            let mut z: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            z.extend_from_slice(&input.structure[i]);
            let row = emissions.row_mut(i);
            self.w2.mul_vec_into(&z, row);
            for (e, b) in row.iter_mut().zip(&self.b2) {
                *e += b;
            }
            pre_hidden.push(pre);
            concat.push(z);
        }
        Forward {
            pre_hidden,
            concat,
            emissions,
        }
    }

    /// Emission scores, `tokens × labels`.
    pub fn emissions(&self, input: &EncodedMention) -> Matrix {
        self.forward(input).emissions
    }

    pub fn predict_encoded(&self, input: &EncodedMention) -> Prediction {
        let em = self.emissions(input);
        let (path, score) = crf::viterbi_decode(&em, &self.transitions);
        let log_z = crf::log_partition(&em, &self.transitions);
        Prediction {
            labels: path.into_iter().map(LabelId).collect(),
            log_prob: (score - log_z).min(0.0),
            score,
        }
    }

    pub fn predict(&self, tokens: &[String]) -> Result<Prediction> {
        Ok(self.predict_encoded(&self.encode(tokens)?))
    }

    /// NLL of one example and its parameter gradients.
    pub fn loss_and_grad(&self, ex: &Example) -> (f64, Gradients) {
        let fwd = self.forward(&ex.input);
        let crf_grad = crf::nll_with_grad(&fwd.emissions, &self.transitions, &ex.gold);
        let mut g = Gradients {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            b1: vec![0.0; self.hidden],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![0.0; self.b2.len()],
            transitions: crf_grad.transitions,
        };
        let mut d_concat = vec![0.0; self.w2.cols()];
        for i in 0..ex.input.len() {
            let g_em = crf_grad.emissions.row(i);
            g.w2.add_outer(g_em, &fwd.concat[i], 1.0);
            for (b, v) in g.b2.iter_mut().zip(g_em) {
                *b += v;
            }
            d_concat.iter_mut().for_each(|v| *v = 0.0);
            for (l, &ge) in g_em.iter().enumerate() {
                for (d, w) in d_concat.iter_mut().zip(self.w2.row(l)) {
                    *d += ge * w;
                }
            }
            let d_hidden: Vec<f64> = d_concat[..self.hidden]
                .iter()
                .zip(&fwd.pre_hidden[i])
                .map(|(d, pre)| if *pre > 0.0 { *d } else { 0.0 })
                .collect();
            g.w1.add_outer(&d_hidden, &ex.input.embeddings[i], 1.0);
            for (b, v) in g.b1.iter_mut().zip(&d_hidden) {
                *b += v;
            }
        }
        (crf_grad.loss, g)
    }

    pub fn example_loss(&self, ex: &Example) -> f64 {
        let em = self.emissions(&ex.input);
        let log_z = crf::log_partition(&em, &self.transitions);
        let gold = crf::path_score(&em, &self.transitions, &ex.gold);
        (log_z - gold).max(0.0)
    }

    /// Summed negative log-likelihood over labeled mentions.
    pub fn nll(&self, mentions: &[Mention]) -> Result<f64> {
        let mut total = 0.0;
        for m in mentions {
            total += self.example_loss(&self.example(m)?);
        }
        Ok(total)
    }

    fn apply(&mut self, g: &Gradients, lr: f64) {
        let step = |p: &mut [f64], d: &[f64]| {
            for (a, b) in p.iter_mut().zip(d) {
                *a -= lr * b;
            }
        };
        step(self.w1.as_mut_slice(), g.w1.as_slice());
        step(&mut self.b1, &g.b1);
        step(self.w2.as_mut_slice(), g.w2.as_slice());
        step(&mut self.b2, &g.b2);
        step(self.transitions.as_mut_slice(), g.transitions.as_slice());
    }

    /// Per-example SGD from the current parameters. The shuffle order is
    /// drawn from `config.seed`. On divergence the parameters are left as
    /// they were before the call.
    pub fn train(&mut self, examples: &[Example], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        if examples.is_empty() {
            return Err(ModelError::NoTrainingData);
        }
        let count = self.label_count();
        for ex in examples {
            if let Some(&bad) = ex.gold.iter().find(|&&l| l >= count) {
                return Err(ModelError::LabelOutOfRange { label: bad, count });
            }
        }
        let backup = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut losses: Vec<f64> = Vec::new();
        let mut early_stopped = false;
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let lr = config.learning_rate_at(epoch);
            let mut total = 0.0;
            for &i in &order {
                let (loss, grad) = self.loss_and_grad(&examples[i]);
                total += loss;
                self.apply(&grad, lr);
            }
            if !total.is_finite() || !self.is_finite() {
                *self = backup;
                return Err(ModelError::NonFinite {
                    epoch,
                    loss: total,
                    learning_rate: lr,
                });
            }
            let prev = losses.last().copied();
            losses.push(total);
            if prev.is_some_and(|p| (total - p).abs() < config.early_stop_delta) {
                early_stopped = true;
                break;
            }
        }
        self.trained = true;
        Ok(TrainReport {
            epoch_losses: losses,
            early_stopped,
        })
    }

    /// Encodes and trains on labeled mentions.
    pub fn train_mentions(&mut self, mentions: &[Mention], config: &TrainConfig) -> Result<TrainReport> {
        let examples = mentions
            .iter()
            .map(|m| self.example(m))
            .collect::<Result<Vec<_>>>()?;
        self.train(&examples, config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            predicate_table_version: PREDICATE_TABLE_VERSION,
            schema: self.schema.clone(),
            provider: self.provider.config(),
            hidden: self.hidden,
            seed: self.seed,
            trained: self.trained,
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2.clone(),
            transitions: self.transitions.clone(),
        }
    }

    /// Rebuilds a model, creating the embedding provider from the stored config.
    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let provider = Arc::new(EmbeddingProvider::from_config(&ckpt.provider)?);
        Self::from_checkpoint_with(ckpt, provider)
    }

    /// Rebuilds a model around an existing provider instance.
    pub fn from_checkpoint_with(ckpt: Checkpoint, provider: Arc<EmbeddingProvider>) -> Result<Self> {
        ckpt.check_version()?;
        let labels = ckpt.schema.label_count();
        let dim = provider.dimension();
        if provider.config().digest() != ckpt.provider.digest() {
            return Err(ModelError::Corrupt("provider does not match checkpoint".into()));
        }
        let shapes_ok = ckpt.w1.rows() == ckpt.hidden
            && ckpt.w1.cols() == dim
            && ckpt.b1.len() == ckpt.hidden
            && ckpt.w2.rows() == labels
            && ckpt.w2.cols() == ckpt.hidden + STRUCTURE_BITS
            && ckpt.b2.len() == labels
            && ckpt.transitions.rows() == labels + 2
            && ckpt.transitions.cols() == labels + 2;
        if !shapes_ok {
            return Err(ModelError::Corrupt("parameter shapes disagree with schema".into()));
        }
        let model = Self {
            schema: ckpt.schema,
            provider,
            hidden: ckpt.hidden,
            seed: ckpt.seed,
            trained: ckpt.trained,
            w1: ckpt.w1,
            b1: ckpt.b1,
            w2: ckpt.w2,
            b2: ckpt.b2,
            transitions: ckpt.transitions,
        };
        if !model.is_finite() {
            return Err(ModelError::Corrupt("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(&self.to_checkpoint()).expect("checkpoint serializes");
        write_atomic(path, &json).map_err(|e| match e {
            crate::corpus::CorpusError::Io(io) => ModelError::Io(io),
            other => ModelError::Corrupt(other.to_string()),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_checkpoint(Checkpoint::from_slice(&bytes)?)
    }
}

/// Versioned JSON model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub predicate_table_version: u32,
    pub schema: LabelSchema,
    pub provider: ProviderConfig,
    pub hidden: usize,
    pub seed: u64,
    pub trained: bool,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub transitions: Matrix,
}

impl Checkpoint {
    fn check_version(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION || self.predicate_table_version != PREDICATE_TABLE_VERSION {
            return Err(ModelError::Version {
                found: self.format_version as u64,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(())
    }

    /// Parses a checkpoint, reporting version problems ahead of shape problems.
    pub fn from_slice(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        Self::from_value(value)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| ModelError::Corrupt("missing format_version".into()))?;
        if version != CHECKPOINT_VERSION as u64 {
            return Err(ModelError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        ckpt.check_version()?;
        Ok(ckpt)
    }
}
