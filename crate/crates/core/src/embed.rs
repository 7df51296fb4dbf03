//! Token embedding providers.
//!
//! The model only needs a fixed-width vector per token. Two providers exist:
//! a local hashed character n-gram embedder, and a client for a remote
//! embedding service (`POST /embed`) with an append-only on-disk cache.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::hash::Hasher;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_HASHED_DIM: usize = 64;
pub const DEFAULT_REMOTE_DIM: usize = 768;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed an empty token")]
    EmptyToken,
    #[error("cannot embed an empty token sequence")]
    EmptySequence,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("merge needs at least one part")]
    NoParts,
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("remote provider: {0}")]
    Remote(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbedding(pub Vec<f64>);

impl TokenEmbedding {
    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Element-wise sum of subword embeddings.
pub fn merge_subwords(parts: &[TokenEmbedding]) -> Result<TokenEmbedding> {
    let (first, rest) = parts.split_first().ok_or(EmbedError::NoParts)?;
    let mut out = first.0.clone();
    for p in rest {
        if p.dimension() != out.len() {
            return Err(EmbedError::DimensionMismatch {
                expected: out.len(),
                got: p.dimension(),
            });
        }
        for (o, v) in out.iter_mut().zip(&p.0) {
            *o += v;
        }
    }
    Ok(TokenEmbedding(out))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProviderConfig {
    HashedNgram {
        dimension: usize,
    },
    Remote {
        url: String,
        dimension: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cache_path: Option<PathBuf>,
    },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::HashedNgram {
            dimension: DEFAULT_HASHED_DIM,
        }
    }
}

impl ProviderConfig {
    pub fn dimension(&self) -> usize {
        match self {
            ProviderConfig::HashedNgram { dimension } | ProviderConfig::Remote { dimension, .. } => {
                *dimension
            }
        }
    }

    /// Stable digest over the fields that determine vector values.
    pub fn digest(&self) -> String {
        let ident = match self {
            ProviderConfig::HashedNgram { dimension } => format!("hashed-ngram|{dimension}"),
            ProviderConfig::Remote { url, dimension, .. } => format!("remote|{url}|{dimension}"),
        };
        hex::encode(&Sha256::digest(ident.as_bytes())[..8])
    }
}

/// Signed feature hashing of lowercase character 2- and 3-grams plus the
/// whole token, scaled to unit length.
#[derive(Debug, Clone)]
pub struct HashedNgram {
    dimension: usize,
}

impl HashedNgram {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        Ok(Self { dimension })
    }

    pub fn embed(&self, token: &str) -> Result<TokenEmbedding> {
        if token.is_empty() {
            return Err(EmbedError::EmptyToken);
        }
        let lower = token.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let mut out = vec![0.0; self.dimension];
        let mut add = |feature: &str| {
            let mut h = FnvHasher::default();
            h.write(feature.as_bytes());
            let h = h.finish();
            let slot = (h % self.dimension as u64) as usize;
            out[slot] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        };
        let mut buf = String::new();
        for n in [2usize, 3] {
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                add(&buf);
            }
        }
        add(&lower);
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        // features can cancel exactly; leave such a vector at zero
        if norm > 0.0 {
            out.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(TokenEmbedding(out))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    tokens: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    token: String,
    vector: Vec<f64>,
}

/// Client for a remote embedding service.
pub struct RemoteProvider {
    url: String,
    dimension: usize,
    cache_path: Option<PathBuf>,
    digest: String,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, Vec<f64>>>,
    writer: Mutex<Option<File>>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("url", &self.url)
            .field("dimension", &self.dimension)
            .field("cache_path", &self.cache_path)
            .finish()
    }
}

impl RemoteProvider {
    pub fn new(url: impl Into<String>, dimension: usize, cache_path: Option<PathBuf>) -> Result<Self> {
        if dimension == 0 {
            return Err(EmbedError::ZeroDimension);
        }
        let url = url.into();
        let digest = ProviderConfig::Remote {
            url: url.clone(),
            dimension,
            cache_path: None,
        }
        .digest();
        let mut cache = HashMap::new();
        let mut writer = None;
        if let Some(path) = &cache_path {
            if path.exists() {
                let reader = BufReader::new(File::open(path)?);
                for line in reader.lines() {
                    let line = line?;
                    // a torn final write is skipped, the entry is refetched
                    let Ok(rec) = serde_json::from_str::<CacheRecord>(&line) else {
                        continue;
                    };
                    if rec.key == digest && rec.vector.len() == dimension {
                        cache.insert(rec.token, rec.vector);
                    }
                }
            }
            writer = Some(OpenOptions::new().create(true).append(true).open(path)?);
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Ok(Self {
            url,
            dimension,
            cache_path,
            digest,
            agent,
            cache: RwLock::new(cache),
            writer: Mutex::new(writer),
            requests: AtomicUsize::new(0),
        })
    }

    /// Number of HTTP requests issued so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn endpoint(&self) -> String {
        format!("{}/embed", self.url.trim_end_matches('/'))
    }

    fn fetch(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut resp = self
            .agent
            .post(&self.endpoint())
            .send_json(EmbedRequest { tokens })
            .map_err(|e| EmbedError::Remote(e.to_string()))?;
        if resp.status() != 200 {
            return Err(EmbedError::Remote(format!("status {}", resp.status())));
        }
        let body: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Remote(format!("bad response body: {e}")))?;
        if body.vectors.len() != tokens.len() {
            return Err(EmbedError::Remote(format!(
                "{} vectors for {} tokens",
                body.vectors.len(),
                tokens.len()
            )));
        }
        for v in &body.vectors {
            if v.len() != self.dimension {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.dimension,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EmbedError::Remote("non-finite vector entry".into()));
            }
        }
        Ok(body.vectors)
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<TokenEmbedding>> {
        if tokens.iter().any(String::is_empty) {
            return Err(EmbedError::EmptyToken);
        }
        let mut missing: Vec<String> = {
            let cache = self.cache.read().expect("cache lock");
            tokens.iter().filter(|t| !cache.contains_key(*t)).cloned().collect()
        };
        missing.sort();
        missing.dedup();
        if !missing.is_empty() {
            let vectors = self.fetch(&missing)?;
            let mut writer = self.writer.lock().expect("cache writer lock");
            let mut cache = self.cache.write().expect("cache lock");
            for (token, vector) in missing.into_iter().zip(vectors) {
                if let Some(file) = writer.as_mut() {
                    let rec = CacheRecord {
                        key: self.digest.clone(),
                        token: token.clone(),
                        vector: vector.clone(),
                    };
                    let line = serde_json::to_string(&rec).expect("cache record serializes");
                    writeln!(file, "{line}")?;
                }
                cache.insert(token, vector);
            }
            if let Some(file) = writer.as_mut() {
                file.flush()?;
            }
        }
        let cache = self.cache.read().expect("cache lock");
        Ok(tokens
            .iter()
            .map(|t| TokenEmbedding(cache[t].clone()))
            .collect())
    }
}

#[derive(Debug)]
pub enum EmbeddingProvider {
    Hashed(HashedNgram),
    Remote(RemoteProvider),
}

impl EmbeddingProvider {
    pub fn from_config(config: &ProviderConfig) -> Result<Self> {
        Ok(match config {
            ProviderConfig::HashedNgram { dimension } => Self::Hashed(HashedNgram::new(*dimension)?),
            ProviderConfig::Remote {
                url,
                dimension,
                cache_path,
            } => Self::Remote(RemoteProvider::new(url.clone(), *dimension, cache_path.clone())?),
        })
    }

    pub fn hashed(dimension: usize) -> Result<Self> {
        Ok(Self::Hashed(HashedNgram::new(dimension)?))
    }

    pub fn config(&self) -> ProviderConfig {
        match self {
            Self::Hashed(h) => ProviderConfig::HashedNgram {
                dimension: h.dimension,
            },
            Self::Remote(r) => ProviderConfig::Remote {
                url: r.url.clone(),
                dimension: r.dimension,
                cache_path: r.cache_path.clone(),
            },
        }
    }

    pub fn dimension(&self) -> usize {
        match self {
            Self::Hashed(h) => h.dimension,
            Self::Remote(r) => r.dimension,
        }
    }

    pub fn embed_token(&self, token: &str) -> Result<TokenEmbedding> {
        match self {
            Self::Hashed(h) => h.embed(token),
            Self::Remote(r) => Ok(r
                .embed_tokens(&[token.to_string()])?
                .pop()
                .expect("one vector per token")),
        }
    }

    /// Subword pieces for one token. Neither provider splits tokens today:
    /// the remote protocol returns one vector per whole token.
    fn token_parts(&self, token: &str) -> Result<Vec<TokenEmbedding>> {
        Ok(vec![self.embed_token(token)?])
    }

    /// One embedding per token, in order.
    pub fn embed_mention(&self, tokens: &[String]) -> Result<Vec<TokenEmbedding>> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptySequence);
        }
        match self {
            Self::Remote(r) => r.embed_tokens(tokens),
            Self::Hashed(_) => tokens
                .iter()
                .map(|t| merge_subwords(&self.token_parts(t)?))
                .collect(),
        }
    }
}
