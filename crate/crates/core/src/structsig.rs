//! Boolean structure predicates over tokens and the collapsed entity signatures
//! built from them.
//!
//! Bit `i` of a [`StructureVector`] is the outcome of `PREDICATES[i]`. The order
//! is part of the checkpoint format: models store emission weights per bit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

/// Everything a predicate may look at.
#[derive(Debug, Clone, Copy)]
pub struct TokenContext<'a> {
    pub token: &'a str,
    pub index: usize,
    pub length: usize,
}

pub struct Predicate {
    pub name: &'static str,
    pub positional: bool,
    pub eval: fn(&TokenContext<'_>) -> bool,
}

/// Bumped whenever the table below changes meaning or order.
pub const PREDICATE_TABLE_VERSION: u32 = 1;

pub const PREDICATES: [Predicate; 15] = [
    Predicate { name: "hasAllCapsTokens", positional: false, eval: |c| all_alpha_are(c.token, char::is_uppercase) },
    Predicate { name: "hasAllLowerTokens", positional: false, eval: |c| all_alpha_are(c.token, char::is_lowercase) },
    Predicate { name: "hasAllAlphbeticalToken", positional: false, eval: |c| c.token.chars().all(char::is_alphabetic) },
    Predicate { name: "hasPunctuationOnly", positional: false, eval: |c| c.token.chars().all(is_punct) },
    Predicate { name: "isAlphanumToken", positional: false, eval: |c| is_alphanum(c.token) },
    Predicate { name: "containsNumber", positional: false, eval: |c| c.token.chars().any(|ch| ch.is_ascii_digit()) },
    Predicate { name: "containsPunctuation", positional: false, eval: |c| c.token.chars().any(is_punct) },
    Predicate { name: "isFirstLetterCapitalized", positional: false, eval: |c| c.token.chars().next().is_some_and(char::is_uppercase) },
    Predicate { name: "isTwoDigitNumber", positional: false, eval: |c| is_n_digits(c.token, 2) },
    Predicate { name: "isFourDigitNumber", positional: false, eval: |c| is_n_digits(c.token, 4) },
    Predicate { name: "isSingleDigitNumber", positional: false, eval: |c| is_n_digits(c.token, 1) },
    Predicate { name: "isInteger", positional: false, eval: |c| is_integer(c.token) },
    Predicate { name: "isNumericToken", positional: false, eval: |c| is_decimal(c.token) },
    Predicate { name: "appearAtBegining", positional: true, eval: |c| c.index == 0 },
    Predicate { name: "appearAtEnd", positional: true, eval: |c| c.index + 1 == c.length },
];

pub const STRUCTURE_BITS: usize = PREDICATES.len();
/// The leading predicates that do not depend on token position.
pub const SIGNATURE_BITS: usize = 13;

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn all_alpha_are(token: &str, case: fn(char) -> bool) -> bool {
    let mut any = false;
    for c in token.chars().filter(|c| c.is_alphabetic()) {
        if !case(c) {
            return false;
        }
        any = true;
    }
    any
}

fn is_alphanum(token: &str) -> bool {
    token.chars().all(|c| c.is_alphabetic() || c.is_ascii_digit())
        && token.chars().any(char::is_alphabetic)
        && token.chars().any(|c| c.is_ascii_digit())
}

fn is_n_digits(token: &str, n: usize) -> bool {
    token.len() == n && token.bytes().all(|b| b.is_ascii_digit())
}

fn strip_sign(token: &str) -> &str {
    token
        .strip_prefix('+')
        .or_else(|| token.strip_prefix('-'))
        .unwrap_or(token)
}

fn is_integer(token: &str) -> bool {
    let digits = strip_sign(token);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_decimal(token: &str) -> bool {
    let body = strip_sign(token);
    let mut dots = 0;
    let mut digits = 0;
    for b in body.bytes() {
        match b {
            b'.' => dots += 1,
            b'0'..=b'9' => digits += 1,
            _ => return false,
        }
    }
    digits > 0 && dots <= 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StructureVector(u16);

impl StructureVector {
    pub fn from_bits(bits: u16) -> Self {
        Self(bits & ((1 << STRUCTURE_BITS) - 1))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn get(self, i: usize) -> bool {
        i < STRUCTURE_BITS && self.0 >> i & 1 == 1
    }

    /// Drops the positional bits.
    pub fn positionless(self) -> u16 {
        self.0 & ((1 << SIGNATURE_BITS) - 1)
    }

    /// Bits as 0.0/1.0 features in predicate order.
    pub fn features(self) -> [f64; STRUCTURE_BITS] {
        std::array::from_fn(|i| if self.get(i) { 1.0 } else { 0.0 })
    }

    pub fn active_names(self) -> Vec<&'static str> {
        PREDICATES
            .iter()
            .enumerate()
            .filter(|(i, _)| self.get(*i))
            .map(|(_, p)| p.name)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StructError {
    #[error("empty token")]
    EmptyToken,
    #[error("token index {index} out of range for length {length}")]
    IndexOutOfRange { index: usize, length: usize },
    #[error("empty token sequence")]
    EmptySequence,
}

pub fn eval_predicates(token: &str, index: usize, length: usize) -> Result<StructureVector, StructError> {
    if token.is_empty() {
        return Err(StructError::EmptyToken);
    }
    if index >= length {
        return Err(StructError::IndexOutOfRange { index, length });
    }
    let ctx = TokenContext { token, index, length };
    let bits = PREDICATES
        .iter()
        .enumerate()
        .filter(|(_, p)| (p.eval)(&ctx))
        .fold(0u16, |acc, (i, _)| acc | 1 << i);
    Ok(StructureVector(bits))
}

/// Structure vectors for every token of a mention.
pub fn structure_vectors<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<StructureVector>, StructError> {
    if tokens.is_empty() {
        return Err(StructError::EmptySequence);
    }
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| eval_predicates(t.as_ref(), i, tokens.len()))
        .collect()
}

/// Per-token positionless vectors, uncollapsed.
pub fn raw_signature<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<u16>, StructError> {
    Ok(structure_vectors(tokens)?
        .into_iter()
        .map(StructureVector::positionless)
        .collect())
}

/// A run of consecutive tokens sharing one positionless vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SignatureGroup {
    pub vector: u16,
    pub run: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub groups: Vec<SignatureGroup>,
}

/// Equivalence key of a signature: the group vectors without run lengths.
pub type SignatureKey = Vec<u16>;

impl Signature {
    pub fn from_raw(raw: &[u16]) -> Self {
        let mut groups: Vec<SignatureGroup> = Vec::new();
        for &v in raw {
            match groups.last_mut() {
                Some(g) if g.vector == v => g.run += 1,
                _ => groups.push(SignatureGroup { vector: v, run: 1 }),
            }
        }
        Self { groups }
    }

    pub fn key(&self) -> SignatureKey {
        self.groups.iter().map(|g| g.vector).collect()
    }

    pub fn token_count(&self) -> usize {
        self.groups.iter().map(|g| g.run).sum()
    }

    /// Back to one vector per token.
    pub fn expand(&self) -> Vec<u16> {
        self.groups
            .iter()
            .flat_map(|g| std::iter::repeat_n(g.vector, g.run))
            .collect()
    }

    /// Token index ranges covered by each group.
    pub fn spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.groups
            .iter()
            .map(|g| {
                let r = start..start + g.run;
                start += g.run;
                r
            })
            .collect()
    }

    /// Signature equality ignoring run lengths.
    pub fn matches(&self, other: &Signature) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| a.vector == b.vector)
    }
}

pub fn signature<S: AsRef<str>>(tokens: &[S]) -> Result<Signature, StructError> {
    Ok(Signature::from_raw(&raw_signature(tokens)?))
}

/// Partitions a corpus by signature key; ids keep corpus order within a bucket.
pub fn group_by_signature(corpus: &Corpus) -> BTreeMap<SignatureKey, Vec<String>> {
    let mut buckets: BTreeMap<SignatureKey, Vec<String>> = BTreeMap::new();
    for m in &corpus.mentions {
        let key = signature(&m.tokens)
            .expect("corpus mentions have non-empty tokens")
            .key();
        buckets.entry(key).or_default().push(m.id.clone());
    }
    buckets
}
