//! Encoders map entity text into the latent space.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::llm::{post_json, HttpSettings, RetryPolicy, ServiceError};
use crate::embedding::{EmbeddingCatalog, EmbeddingError, EmbeddingVector, ItemId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodeError {
    #[error("cannot encode empty text")]
    EmptyText,
    #[error("text does not belong to a known entity")]
    UnknownEntity,
    #[error("encoder service: {0}")]
    Service(ServiceError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError>;
}

/// Returns stored embeddings for known entity texts.
#[derive(Debug, Clone, Default)]
pub struct LookupEncoder {
    dim: usize,
    table: HashMap<String, EmbeddingVector>,
}

impl LookupEncoder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            table: HashMap::new(),
        }
    }

    /// Pairs each `(item id, text)` with the catalog's stored vector.
    pub fn from_catalog<'a>(
        catalog: &EmbeddingCatalog,
        texts: impl IntoIterator<Item = (ItemId, &'a str)>,
    ) -> Self {
        let mut enc = Self::new(catalog.dim());
        for (id, text) in texts {
            if let Some(v) = catalog.item(id) {
                enc.table.insert(text.to_string(), v.clone());
            }
        }
        enc
    }

    pub fn insert(&mut self, text: impl Into<String>, embedding: EmbeddingVector) -> Result<(), EncodeError> {
        if embedding.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                actual: embedding.dim(),
            }
            .into());
        }
        self.table.insert(text.into(), embedding);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Encoder for LookupEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        if text.is_empty() {
            return Err(EncodeError::EmptyText);
        }
        self.table.get(text).cloned().ok_or(EncodeError::UnknownEntity)
    }
}

/// Deterministic bag-of-tokens encoder: every whitespace token maps to a
/// pseudo-random dense vector seeded by its hash, and a text is the sum of
/// its token vectors divided by the square root of the token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEncoder {
    pub dim: usize,
    pub seed: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl Encoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(EncodeError::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for tok in &tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(tok.as_bytes()) ^ self.seed);
            for a in acc.iter_mut() {
                *a += rng.random_range(-1.0..1.0);
            }
        }
        let scale = 1.0 / (tokens.len() as f64).sqrt();
        Ok(EmbeddingVector::new(acc.into_iter().map(|a| a * scale).collect())?)
    }
}

#[derive(Serialize)]
struct EncodeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EncodeResponse {
    embedding: Vec<f64>,
}

/// Client for an external encoder: POST `{text}` returning `{embedding}`.
#[derive(Debug, Clone)]
pub struct ServiceEncoder {
    dim: usize,
    http: HttpSettings,
    retry: RetryPolicy,
}

impl ServiceEncoder {
    pub fn new(dim: usize, http: HttpSettings, retry: RetryPolicy) -> Self {
        Self { dim, http, retry }
    }
}

impl Encoder for ServiceEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector, EncodeError> {
        if text.is_empty() {
            return Err(EncodeError::EmptyText);
        }
        let resp: EncodeResponse = self
            .retry
            .run(|| post_json(&self.http, &EncodeRequest { text }))
            .map_err(EncodeError::Service)?;
        let v = EmbeddingVector::new(resp.embedding)?;
        if v.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                actual: v.dim(),
            }
            .into());
        }
        Ok(v)
    }
}
