//! Learning to segment contextless entity names (people, organizations,
//! dates) into semantic components from a handful of human labels.
//!
//! The pieces:
//!
//! - [`corpus`]: mentions, label schemas, tokenization, JSONL and synthetic data.
//! - [`structsig`]: boolean structure predicates and collapsed signatures.
//! - [`embed`]: token embedding providers.
//! - [`seqmodel`]: dense layers plus a linear-chain CRF, trained by SGD.
//! - [`metrics`]: entity/token/component F1.
//! - [`activeloop`]: the active-learning session with weak-label propagation.
//! - [`simulate`]: oracle-driven sessions over gold corpora.

pub mod activeloop;
pub mod corpus;
pub mod embed;
pub mod metrics;
pub mod seqmodel;
pub mod simulate;
pub mod structsig;

pub use corpus::{Corpus, LabelId, LabelSchema, Mention};
pub use seqmodel::{Prediction, SequenceModel, TrainConfig};
