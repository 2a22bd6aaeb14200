//! Binary state files: little-endian f64 payload plus a JSON sidecar header
//! at `<path>.json`. Both files are written via temp-file-then-rename, the
//! payload first.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::design::{ActionId, DesignDistribution, StateId};
use crate::embedding::{EmbeddingCatalog, EmbeddingVector, ItemId, UserId};
use crate::policy::{FeatureSpec, PolicyParams, ReferenceKind, ReferencePolicy, ValueParams};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("file holds a {found}, expected a {expected}")]
    KindMismatch { expected: &'static str, found: String },
    #[error("payload checksum mismatch: header {expected}, payload {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("dimension mismatch: expected n = {expected}, file has n = {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corrupt state file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateHeader {
    pub version: u32,
    pub kind: String,
    /// Latent dimension; 0 for dimension-free payloads.
    pub n: usize,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    /// Hex SHA-256 of the payload bytes.
    pub sha256: String,
    pub meta: Value,
}

/// Something that round-trips through a state file.
pub trait Persist: Sized {
    const KIND: &'static str;

    /// `(n, counts, meta, payload)`.
    fn encode(&self) -> (usize, BTreeMap<String, usize>, Value, Vec<f64>);

    fn decode(header: &StateHeader, payload: Vec<f64>) -> Result<Self, PersistError>;
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PersistError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_state<T: Persist>(obj: &T, path: &Path, config_hash: &str) -> Result<StateHeader, PersistError> {
    let (n, counts, meta, payload) = obj.encode();
    let bytes: Vec<u8> = payload.iter().flat_map(|x| x.to_le_bytes()).collect();
    let header = StateHeader {
        version: FORMAT_VERSION,
        kind: T::KIND.to_string(),
        n,
        counts,
        config_hash: config_hash.to_string(),
        sha256: checksum(&bytes),
        meta,
    };
    write_atomic(path, &bytes)?;
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    write_atomic(&sidecar_path(path), text.as_bytes())?;
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<StateHeader, PersistError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(io_err(&side))?;
    serde_json::from_str(&text).map_err(|e| PersistError::Corrupt(format!("{}: {e}", side.display())))
}

/// Loads a state file, checking version, kind, checksum and (when given)
/// the latent dimension.
pub fn load_state<T: Persist>(path: &Path, expected_n: Option<usize>) -> Result<(T, StateHeader), PersistError> {
    let header = read_header(path)?;
    if header.version != FORMAT_VERSION {
        return Err(PersistError::VersionMismatch { found: header.version });
    }
    if header.kind != T::KIND {
        return Err(PersistError::KindMismatch {
            expected: T::KIND,
            found: header.kind,
        });
    }
    if let Some(expected) = expected_n {
        if header.n != 0 && header.n != expected {
            return Err(PersistError::DimensionMismatch {
                expected,
                found: header.n,
            });
        }
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let actual = checksum(&bytes);
    if actual != header.sha256 {
        return Err(PersistError::ChecksumMismatch {
            expected: header.sha256,
            actual,
        });
    }
    if bytes.len() % 8 != 0 {
        return Err(PersistError::Corrupt(format!("payload length {} is not a multiple of 8", bytes.len())));
    }
    let payload = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let obj = T::decode(&header, payload)?;
    Ok((obj, header))
}

fn count(header: &StateHeader, key: &str) -> Result<usize, PersistError> {
    header
        .counts
        .get(key)
        .copied()
        .ok_or_else(|| PersistError::Corrupt(format!("missing count {key:?}")))
}

fn meta_field<T: serde::de::DeserializeOwned>(header: &StateHeader, key: &str) -> Result<T, PersistError> {
    let v = header
        .meta
        .get(key)
        .ok_or_else(|| PersistError::Corrupt(format!("missing meta field {key:?}")))?;
    serde_json::from_value(v.clone()).map_err(|e| PersistError::Corrupt(format!("meta field {key:?}: {e}")))
}

fn corrupt(e: impl std::fmt::Display) -> PersistError {
    PersistError::Corrupt(e.to_string())
}

fn expect_len(payload: &[f64], expected: usize) -> Result<(), PersistError> {
    if payload.len() != expected {
        return Err(PersistError::Corrupt(format!(
            "payload has {} values, header implies {expected}",
            payload.len()
        )));
    }
    Ok(())
}

impl Persist for EmbeddingCatalog {
    const KIND: &'static str = "catalog";

    fn encode(&self) -> (usize, BTreeMap<String, usize>, Value, Vec<f64>) {
        let user_ids: Vec<UserId> = self.users().keys().copied().collect();
        let item_ids: Vec<ItemId> = self.items().keys().copied().collect();
        let payload = self
            .users()
            .values()
            .chain(self.items().values())
            .flat_map(|v| v.as_slice().iter().copied())
            .collect();
        let counts = [("users".to_string(), user_ids.len()), ("items".to_string(), item_ids.len())].into();
        (self.dim(), counts, json!({ "user_ids": user_ids, "item_ids": item_ids }), payload)
    }

    fn decode(header: &StateHeader, payload: Vec<f64>) -> Result<Self, PersistError> {
        let n = header.n;
        let user_ids: Vec<UserId> = meta_field(header, "user_ids")?;
        let item_ids: Vec<ItemId> = meta_field(header, "item_ids")?;
        if user_ids.len() != count(header, "users")? || item_ids.len() != count(header, "items")? {
            return Err(corrupt("id lists disagree with counts"));
        }
        expect_len(&payload, n * (user_ids.len() + item_ids.len()))?;
        let mut chunks = payload.chunks_exact(n.max(1));
        let mut take = |ids: &[u64]| -> Result<BTreeMap<u64, EmbeddingVector>, PersistError> {
            ids.iter()
                .map(|&id| {
                    let c = chunks.next().ok_or_else(|| corrupt("short payload"))?;
                    Ok((id, EmbeddingVector::new(c.to_vec()).map_err(corrupt)?))
                })
                .collect()
        };
        let users = take(&user_ids)?;
        let items = take(&item_ids)?;
        EmbeddingCatalog::new(n, users, items).map_err(corrupt)
    }
}

impl Persist for PolicyParams {
    const KIND: &'static str = "policy";

    fn encode(&self) -> (usize, BTreeMap<String, usize>, Value, Vec<f64>) {
        let counts = [("weights".to_string(), self.weights.len())].into();
        (self.dim, counts, json!({ "spec": self.spec }), self.weights.clone())
    }

    fn decode(header: &StateHeader, payload: Vec<f64>) -> Result<Self, PersistError> {
        let spec: FeatureSpec = meta_field(header, "spec")?;
        expect_len(&payload, count(header, "weights")?)?;
        let params = PolicyParams {
            spec,
            dim: header.n,
            weights: payload,
        };
        params.check().map_err(corrupt)?;
        Ok(params)
    }
}

impl Persist for ValueParams {
    const KIND: &'static str = "value";

    fn encode(&self) -> (usize, BTreeMap<String, usize>, Value, Vec<f64>) {
        let counts = [("weights".to_string(), self.weights.len())].into();
        (self.weights.len().saturating_sub(1), counts, json!({}), self.weights.clone())
    }

    fn decode(header: &StateHeader, payload: Vec<f64>) -> Result<Self, PersistError> {
        expect_len(&payload, header.n + 1)?;
        Ok(ValueParams { weights: payload })
    }
}

#[derive(Serialize, Deserialize)]
struct DesignRow {
    state: StateId,
    support: Vec<ActionId>,
}

impl Persist for ReferencePolicy {
    const KIND: &'static str = "design_table";

    fn encode(&self) -> (usize, BTreeMap<String, usize>, Value, Vec<f64>) {
        let rows: Vec<DesignRow> = self
            .table
            .iter()
            .map(|(&state, q)| DesignRow {
                state,
                support: q.support().to_vec(),
            })
            .collect();
        let payload: Vec<f64> = self.table.values().flat_map(|q| q.weights().iter().copied()).collect();
        let counts = [("states".to_string(), rows.len()), ("weights".to_string(), payload.len())].into();
        (0, counts, json!({ "reference": self.kind, "rows": rows }), payload)
    }

    fn decode(header: &StateHeader, payload: Vec<f64>) -> Result<Self, PersistError> {
        let kind: ReferenceKind = meta_field(header, "reference")?;
        let rows: Vec<DesignRow> = meta_field(header, "rows")?;
        expect_len(&payload, count(header, "weights")?)?;
        let mut rest = payload.as_slice();
        let mut table = BTreeMap::new();
        for row in rows {
            if row.support.len() > rest.len() {
                return Err(corrupt("short payload"));
            }
            let (w, tail) = rest.split_at(row.support.len());
            rest = tail;
            table.insert(row.state, DesignDistribution::new(row.support, w.to_vec()).map_err(corrupt)?);
        }
        if !rest.is_empty() {
            return Err(corrupt("trailing payload values"));
        }
        Ok(ReferencePolicy { kind, table })
    }
}
