//! Entity mentions, label schemas, and JSONL corpus ingestion.
//!
//! A corpus is a flat list of standalone entity names. Each mention carries
//! its token sequence and, for gold data, one component label per token.
//! Punctuation that the tokenizer detaches from a word (commas, brackets,
//! colons) is labeled with the schema's reserved separator label.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod synth;

pub use synth::{gen_synthetic, SyntheticKind};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("mention is empty after trimming whitespace")]
    EmptyMention,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("duplicate mention id {0:?}")]
    DuplicateId(String),
    #[error("unknown synthetic corpus kind {0:?} (expected person, org or date)")]
    UnknownKind(String),
    #[error("synthetic corpus size must be at least 1")]
    EmptyRequest,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Index into a [`LabelSchema`]: components occupy `0..k`, the separator is `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelId(pub usize);

impl LabelId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The set of semantic components for a session plus the separator label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct LabelSchema {
    components: Vec<String>,
    separator: String,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    components: Vec<String>,
    separator: String,
}

impl TryFrom<RawSchema> for LabelSchema {
    type Error = CorpusError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        LabelSchema::new(raw.components, raw.separator)
    }
}

impl From<LabelSchema> for RawSchema {
    fn from(schema: LabelSchema) -> Self {
        RawSchema {
            components: schema.components,
            separator: schema.separator,
        }
    }
}

pub const DEFAULT_SEPARATOR: &str = "sep";

impl LabelSchema {
    pub fn new<S: Into<String>>(
        components: impl IntoIterator<Item = S>,
        separator: impl Into<String>,
    ) -> Result<Self> {
        let components: Vec<String> = components.into_iter().map(Into::into).collect();
        let separator = separator.into();
        if components.is_empty() {
            return Err(CorpusError::Schema("schema needs at least one component".into()));
        }
        let mut seen = HashSet::new();
        for c in &components {
            if c.trim().is_empty() {
                return Err(CorpusError::Schema("component names must be non-empty".into()));
            }
            if !seen.insert(c.as_str()) {
                return Err(CorpusError::Schema(format!("duplicate component {c:?}")));
            }
        }
        if separator.trim().is_empty() {
            return Err(CorpusError::Schema("separator name must be non-empty".into()));
        }
        if seen.contains(separator.as_str()) {
            return Err(CorpusError::Schema(format!(
                "separator {separator:?} collides with a component name"
            )));
        }
        Ok(Self {
            components,
            separator,
        })
    }

    /// Schema with the default separator name.
    pub fn with_components<S: Into<String>>(components: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(components, DEFAULT_SEPARATOR)
    }

    /// Parses `"first,middle,last"`.
    pub fn parse_list(list: &str, separator: &str) -> Result<Self> {
        Self::new(
            list.split(',').map(str::trim).filter(|s| !s.is_empty()),
            separator,
        )
    }

    pub fn components(&self) -> &[String] {
        &self.components
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn separator_id(&self) -> LabelId {
        LabelId(self.components.len())
    }

    /// Number of labels including the separator.
    pub fn label_count(&self) -> usize {
        self.components.len() + 1
    }

    pub fn id_of(&self, name: &str) -> Option<LabelId> {
        if name == self.separator {
            return Some(self.separator_id());
        }
        self.components.iter().position(|c| c == name).map(LabelId)
    }

    pub fn name_of(&self, id: LabelId) -> Option<&str> {
        if id == self.separator_id() {
            Some(&self.separator)
        } else {
            self.components.get(id.0).map(String::as_str)
        }
    }

    pub fn contains(&self, id: LabelId) -> bool {
        id.0 < self.label_count()
    }

    pub fn names(&self, labels: &[LabelId]) -> Vec<String> {
        labels
            .iter()
            .map(|&l| self.name_of(l).unwrap_or("?").to_string())
            .collect()
    }

    /// Resolves label names to ids, checking the length against `tokens`.
    pub fn resolve(&self, names: &[String], token_count: usize) -> Result<Vec<LabelId>> {
        if names.len() != token_count {
            return Err(CorpusError::Schema(format!(
                "{} labels for {} tokens",
                names.len(),
                token_count
            )));
        }
        names
            .iter()
            .map(|n| {
                self.id_of(n)
                    .ok_or_else(|| CorpusError::Schema(format!("unknown label {n:?}")))
            })
            .collect()
    }
}

/// One entity name with its tokens and optional gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub id: String,
    pub raw: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<LabelId>>,
}

impl Mention {
    /// Tokenizes `raw` and builds an unlabeled mention.
    pub fn from_raw(id: impl Into<String>, raw: impl Into<String>) -> Result<Self> {
        let raw = raw.into();
        let tokens = tokenize(&raw)?;
        Ok(Self {
            id: id.into(),
            raw,
            tokens,
            labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        if self.tokens.is_empty() || self.tokens.iter().any(|t| t.is_empty()) {
            return Err(CorpusError::EmptyMention);
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.tokens.len() {
                return Err(CorpusError::Schema(format!(
                    "mention {:?}: {} labels for {} tokens",
                    self.id,
                    labels.len(),
                    self.tokens.len()
                )));
            }
            if let Some(bad) = labels.iter().find(|l| !schema.contains(**l)) {
                return Err(CorpusError::Schema(format!(
                    "mention {:?}: label id {} outside schema",
                    self.id, bad.0
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub schema: LabelSchema,
    pub mentions: Vec<Mention>,
}

impl Corpus {
    pub fn new(schema: LabelSchema, mentions: Vec<Mention>) -> Result<Self> {
        let mut ids = HashSet::new();
        for m in &mentions {
            m.validate(&schema)?;
            if !ids.insert(m.id.as_str()) {
                return Err(CorpusError::DuplicateId(m.id.clone()));
            }
        }
        Ok(Self { schema, mentions })
    }

    pub fn len(&self) -> usize {
        self.mentions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mentions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Mention> {
        self.mentions.iter().find(|m| m.id == id)
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.mentions.iter().all(Mention::is_labeled)
    }

    /// Serializes to the JSONL record format, labels as names.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for m in &self.mentions {
            let record = Record {
                id: m.id.clone(),
                mention: m.raw.clone(),
                tokens: Some(m.tokens.clone()),
                labels: m.labels.as_ref().map(|l| self.schema.names(l)),
            };
            out.push_str(&serde_json::to_string(&record).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes the corpus as JSONL, replacing `path` atomically.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// JSONL wire record.
#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    mention: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

/// Splits a raw entity string into tokens.
///
/// Whitespace separates words. Leading punctuation characters and trailing
/// punctuation characters are detached as single-character tokens, except that
/// a word keeps one trailing period (`"Inc."`, `"B.S."`). Interior punctuation
/// stays attached (`"6/13/2012"`).
pub fn tokenize(raw: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    for word in raw.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        if chars.iter().all(|c| c.is_ascii_punctuation()) {
            tokens.extend(chars.iter().map(|c| c.to_string()));
            continue;
        }
        let start = chars
            .iter()
            .position(|c| !c.is_ascii_punctuation())
            .expect("word has a non-punctuation char");
        let mut end = chars.len();
        while end > start + 1 && chars[end - 1].is_ascii_punctuation() && chars[end - 1] != '.' {
            end -= 1;
        }
        // `end` now stops at either a period or a word char
        tokens.extend(chars[..start].iter().map(|c| c.to_string()));
        tokens.push(chars[start..end].iter().collect());
        tokens.extend(chars[end..].iter().map(|c| c.to_string()));
    }
    if tokens.is_empty() {
        return Err(CorpusError::EmptyMention);
    }
    Ok(tokens)
}

/// Reads a JSONL corpus, validating labels against `schema`.
pub fn load_corpus(path: &Path, schema: &LabelSchema) -> Result<Corpus> {
    let file = File::open(path)?;
    parse_corpus(BufReader::new(file), schema)
}

pub fn parse_corpus(reader: impl BufRead, schema: &LabelSchema) -> Result<Corpus> {
    let mut mentions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let tokens = match record.tokens {
            Some(t) if !t.is_empty() && t.iter().all(|t| !t.is_empty()) => t,
            Some(_) => {
                return Err(CorpusError::Parse {
                    line: line_no,
                    message: "tokens must be non-empty strings".into(),
                })
            }
            None => tokenize(&record.mention).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
        };
        let labels = match record.labels {
            Some(names) => Some(schema.resolve(&names, tokens.len()).map_err(|e| match e {
                CorpusError::Schema(msg) => CorpusError::Schema(format!("line {line_no}: {msg}")),
                other => other,
            })?),
            None => None,
        };
        mentions.push(Mention {
            id: record.id,
            raw: record.mention,
            tokens,
            labels,
        });
    }
    Corpus::new(schema.clone(), mentions)
}

/// Collects label names from a JSONL corpus in first-seen order, treating
/// `separator` as the reserved label.
pub fn infer_schema(path: &Path, separator: &str) -> Result<LabelSchema> {
    let reader = BufReader::new(File::open(path)?);
    let mut components: Vec<String> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        for name in record.labels.unwrap_or_default() {
            if name != separator && !components.contains(&name) {
                components.push(name);
            }
        }
    }
    LabelSchema::new(components, separator)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| CorpusError::Io(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(raw: &str) -> Vec<String> {
        tokenize(raw).unwrap()
    }

    #[test]
    fn tokenize_keeps_abbreviation_dot() {
        assert_eq!(toks("Apple Inc."), ["Apple", "Inc."]);
        assert_eq!(toks("Hagop Youssoufia, B.S."), ["Hagop", "Youssoufia", ",", "B.S."]);
    }

    #[test]
    fn tokenize_detaches_comma() {
        assert_eq!(toks("Jordan, Michael"), ["Jordan", ",", "Michael"]);
        assert_eq!(toks("STAPLES, INC."), ["STAPLES", ",", "INC."]);
    }

    #[test]
    fn tokenize_keeps_interior_punctuation() {
        assert_eq!(toks("6/13/2012"), ["6/13/2012"]);
        assert_eq!(toks("2019-06-13"), ["2019-06-13"]);
    }

    #[test]
    fn tokenize_brackets_and_standalone_punctuation() {
        assert_eq!(toks("Acme Inc. (Japan)"), ["Acme", "Inc.", "(", "Japan", ")"]);
        assert_eq!(toks("a , b"), ["a", ",", "b"]);
        assert_eq!(toks("Co.),"), ["Co.", ")", ","]);
        assert_eq!(toks("..."), [".", ".", "."]);
    }

    #[test]
    fn tokenize_rejects_blank() {
        assert!(matches!(tokenize("   \t "), Err(CorpusError::EmptyMention)));
        assert!(matches!(tokenize(""), Err(CorpusError::EmptyMention)));
    }

    #[test]
    fn schema_rules() {
        assert!(LabelSchema::with_components(["a", "a"]).is_err());
        assert!(LabelSchema::with_components(["a", ""]).is_err());
        assert!(LabelSchema::new(["sep"], "sep").is_err());
        let s = LabelSchema::with_components(["name", "suffix"]).unwrap();
        assert_eq!(s.label_count(), 3);
        assert_eq!(s.id_of("suffix"), Some(LabelId(1)));
        assert_eq!(s.id_of("sep"), Some(LabelId(2)));
        assert_eq!(s.name_of(LabelId(2)), Some("sep"));
        assert_eq!(s.name_of(LabelId(3)), None);
    }

    #[test]
    fn schema_deserialization_validates() {
        let bad = r#"{"components":["x","x"],"separator":"sep"}"#;
        assert!(serde_json::from_str::<LabelSchema>(bad).is_err());
    }

    fn schema() -> LabelSchema {
        LabelSchema::with_components(["name", "suffix"]).unwrap()
    }

    #[test]
    fn load_unlabeled_record() {
        let c = parse_corpus(r#"{"id":"1","mention":"Apple Inc."}"#.as_bytes(), &schema()).unwrap();
        assert_eq!(c.mentions[0].tokens, ["Apple", "Inc."]);
        assert!(c.mentions[0].labels.is_none());
    }

    #[test]
    fn load_labeled_record() {
        let line = r#"{"id":"1","mention":"Apple Inc.","labels":["name","suffix"]}"#;
        let c = parse_corpus(line.as_bytes(), &schema()).unwrap();
        assert_eq!(c.mentions[0].labels, Some(vec![LabelId(0), LabelId(1)]));
    }

    #[test]
    fn load_rejects_length_mismatch() {
        let line = r#"{"id":"1","mention":"Apple Inc.","labels":["name"]}"#;
        assert!(matches!(parse_corpus(line.as_bytes(), &schema()), Err(CorpusError::Schema(_))));
    }

    #[test]
    fn load_rejects_unknown_label_and_bad_json() {
        let line = r#"{"id":"1","mention":"Apple Inc.","labels":["name","city"]}"#;
        assert!(matches!(parse_corpus(line.as_bytes(), &schema()), Err(CorpusError::Schema(_))));
        let text = "{\"id\":\"1\",\"mention\":\"a\"}\n{oops";
        match parse_corpus(text.as_bytes(), &schema()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let text = "{\"id\":\"1\",\"mention\":\"a\"}\n{\"id\":\"1\",\"mention\":\"b\"}";
        assert!(matches!(parse_corpus(text.as_bytes(), &schema()), Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn explicit_tokens_win() {
        let line = r#"{"id":"1","mention":"Apple Inc.","tokens":["Apple Inc."],"labels":["name"]}"#;
        let c = parse_corpus(line.as_bytes(), &schema()).unwrap();
        assert_eq!(c.mentions[0].tokens, ["Apple Inc."]);
    }

    #[test]
    fn jsonl_round_trip() {
        let line = r#"{"id":"1","mention":"Apple Inc.","labels":["name","suffix"]}"#;
        let c = parse_corpus(line.as_bytes(), &schema()).unwrap();
        let again = parse_corpus(c.to_jsonl().as_bytes(), &schema()).unwrap();
        assert_eq!(c, again);
    }
}
