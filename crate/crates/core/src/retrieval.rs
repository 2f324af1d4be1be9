//! Diagnostic-criteria retrieval: embed the user's side of a dialogue and
//! every subtype criteria document, then pick the closest document by
//! cosine similarity.

use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Dialogue, Speaker};

#[derive(Debug, Clone, Error)]
pub enum RetrievalError {
    #[error("dialogue {0} has no user turns")]
    EmptyContent(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("no criteria document has a usable embedding")]
    NoUsableDocument,
    #[error("embedding transport failed: {0}")]
    Transport(String),
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("corpus {path}: {reason}")]
    Corpus { path: String, reason: String },
}

impl RetrievalError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, RetrievalError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaDocument {
    pub index: usize,
    pub subtype_name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaCorpus {
    pub source_id: String,
    documents: Vec<CriteriaDocument>,
}

impl CriteriaCorpus {
    /// Builds a corpus from `(subtype_name, text)` pairs, assigning indices
    /// in order.
    pub fn new(
        source_id: impl Into<String>,
        docs: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, RetrievalError> {
        let source_id = source_id.into();
        let documents: Vec<_> = docs
            .into_iter()
            .enumerate()
            .map(|(index, (subtype_name, text))| CriteriaDocument { index, subtype_name, text })
            .collect();
        if documents.is_empty() {
            return Err(RetrievalError::Corpus { path: source_id, reason: "zero documents".into() });
        }
        if let Some(d) = documents.iter().find(|d| d.text.trim().is_empty()) {
            return Err(RetrievalError::Corpus {
                path: source_id,
                reason: format!("document {} has empty text", d.index),
            });
        }
        Ok(Self { source_id, documents })
    }

    pub fn documents(&self) -> &[CriteriaDocument] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&CriteriaDocument> {
        self.documents.get(index)
    }
}

#[derive(Deserialize)]
struct CorpusRecord {
    subtype_name: String,
    text: String,
}

/// Loads a JSONL corpus of `{"subtype_name", "text"}` records.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<CriteriaCorpus, RetrievalError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let raw = std::fs::read_to_string(path)
        .map_err(|e| RetrievalError::Corpus { path: shown.clone(), reason: e.to_string() })?;
    let mut docs = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(line).map_err(|e| RetrievalError::Corpus {
            path: shown.clone(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        if docs.iter().any(|(name, _): &(String, String)| *name == rec.subtype_name) {
            log::warn!("{shown}: duplicate subtype_name `{}` at line {}", rec.subtype_name, lineno + 1);
        }
        docs.push((rec.subtype_name, rec.text));
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(shown.clone());
    CriteriaCorpus::new(stem, docs).map_err(|e| match e {
        RetrievalError::Corpus { reason, .. } => RetrievalError::Corpus { path: shown, reason },
        other => other,
    })
}

/// Subtype names that occur more than once, in first-seen order.
pub fn duplicate_subtypes(corpus: &CriteriaCorpus) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut dups = Vec::new();
    for d in corpus.documents() {
        if !seen.insert(d.subtype_name.as_str()) && !dups.contains(&d.subtype_name) {
            dups.push(d.subtype_name.clone());
        }
    }
    dups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, RetrievalError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RetrievalError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, alpha: f64) -> Result<Self, RetrievalError> {
        Self::new(self.0.iter().map(|v| v * alpha).collect())
    }
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, RetrievalError> {
    if a.dim() != b.dim() {
        return Err(RetrievalError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    let dot: f64 = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

#[async_trait]
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    async fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError>;
}

/// Offline embedder: hashed bag of words over 256 buckets, L2-normalised.
///
/// Text is lowercased and split on non-alphanumeric boundaries; CJK
/// codepoints become single-character tokens. Each token lands in bucket
/// `fnv1a64(token) % 256`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashingEmbedder;

impl HashingEmbedder {
    pub const BUCKETS: usize = 256;

    pub fn tokenize(text: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        let mut current = String::new();
        for ch in text.chars().flat_map(char::to_lowercase) {
            if is_cjk(ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else if ch.is_alphanumeric() {
                current.push(ch);
            } else if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
        tokens
    }

    /// Raw bucket counts before normalisation.
    pub fn term_counts(text: &str) -> Vec<f64> {
        let mut counts = vec![0.0; Self::BUCKETS];
        for tok in Self::tokenize(text) {
            counts[(fnv1a64(tok.as_bytes()) % Self::BUCKETS as u64) as usize] += 1.0;
        }
        counts
    }

    pub fn embed_sync(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let mut counts = Self::term_counts(text);
        let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            counts.iter_mut().for_each(|v| *v /= norm);
        }
        EmbeddingVector::new(counts)
    }
}

#[async_trait]
impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        Self::BUCKETS
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        self.embed_sync(text)
    }
}

fn is_cjk(ch: char) -> bool {
    matches!(ch as u32,
        0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F
        | 0x3040..=0x30FF | 0xAC00..=0xD7AF)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Client for an HTTP embedding endpoint speaking
/// `{"model", "prompt"} -> {"embedding": [...]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    dim: usize,
    timeout: Duration,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, dim: usize) -> Self {
        Self {
            client: reqwest::Client::new(),
            endpoint: endpoint.into(),
            model: model.into(),
            dim,
            timeout: Duration::from_secs(30),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }
}

#[async_trait]
impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    async fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let resp = self
            .client
            .post(&self.endpoint)
            .timeout(self.timeout)
            .json(&EmbedRequest { model: &self.model, prompt: text })
            .send()
            .await
            .map_err(|e| RetrievalError::Transport(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(RetrievalError::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(RetrievalError::Provider(format!("HTTP {status}: {body}")));
        }
        let body: EmbedResponse =
            resp.json().await.map_err(|e| RetrievalError::Provider(e.to_string()))?;
        if body.embedding.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch(body.embedding.len(), self.dim));
        }
        EmbeddingVector::new(body.embedding)
    }
}

/// User-turn texts in order, newline-joined. Assistant turns are dropped.
pub fn extract_user_content(dialogue: &Dialogue) -> Result<String, RetrievalError> {
    let parts: Vec<&str> = dialogue
        .turns
        .iter()
        .filter(|t| t.speaker == Speaker::User)
        .map(|t| t.text.as_str())
        .collect();
    if parts.is_empty() {
        return Err(RetrievalError::EmptyContent(dialogue.id.clone()));
    }
    Ok(parts.join("\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub index: usize,
    pub document: CriteriaDocument,
    pub score: f64,
}

/// Index of the first maximum, skipping `None` entries.
pub fn first_argmax(scores: &[Option<f64>]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best
}

/// Selects the criteria document most similar to `user_content`. Ties go to
/// the lowest index; documents whose embedding has zero norm are skipped.
pub async fn retrieve_criteria(
    user_content: &str,
    corpus: &CriteriaCorpus,
    provider: &dyn EmbeddingProvider,
) -> Result<RetrievalResult, RetrievalError> {
    if user_content.trim().is_empty() {
        return Err(RetrievalError::EmptyText);
    }
    let query = provider.embed(user_content).await?;
    if query.norm() == 0.0 {
        return Err(RetrievalError::ZeroNorm);
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for doc in corpus.documents() {
        let emb = provider.embed(&doc.text).await?;
        scores.push(match cosine_similarity(&query, &emb) {
            Ok(s) => Some(s),
            Err(RetrievalError::ZeroNorm) => None,
            Err(e) => return Err(e),
        });
    }
    let (index, score) = first_argmax(&scores).ok_or(RetrievalError::NoUsableDocument)?;
    Ok(RetrievalResult { index, document: corpus.documents()[index].clone(), score })
}
