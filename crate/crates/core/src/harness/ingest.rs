//! Input file readers: ratings CSV and line-delimited JSON records.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{ActionCandidate, ActionCategory, ActionId, ActionSet, ActionTable, StateId};
use crate::embedding::{EmbeddingVector, ItemId, RatingCell, RatingsMatrix, UserId};

pub const RATINGS_HEADER: [&str; 4] = ["userId", "movieId", "rating", "timestamp"];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("cannot read {0}")]
    Io(String),
    #[error("missing header row (expected {})", RATINGS_HEADER.join(","))]
    MissingHeader,
    #[error("unexpected header {found:?} (expected {})", RATINGS_HEADER.join(","))]
    BadHeader { found: String },
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: rating {rating} outside [{low}, {high}]")]
    OutOfScale { line: u64, rating: f64, low: f64, high: f64 },
    #[error("user {user} rated item {item} on both line {first} and line {second}")]
    DuplicateRating { user: UserId, item: ItemId, first: u64, second: u64 },
    #[error("no rating rows after the header")]
    Empty,
    #[error("line {line}: feature has {actual} values, expected {expected}")]
    FeatureLength { line: usize, expected: usize, actual: usize },
    #[error("line {line}: action {action} appears twice for state {state}")]
    DuplicateAction { line: usize, state: StateId, action: ActionId },
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64) -> Result<T, IngestError> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| IngestError::Malformed {
        line,
        message: format!("{} is not numeric: {raw:?}", RATINGS_HEADER[i]),
    })
}

/// Parses ratings, reindexing user and item ids densely in ascending order.
pub fn read_ratings(input: impl Read, scale: (f64, f64)) -> Result<RatingsMatrix, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(IngestError::MissingHeader),
        Some(r) => r.map_err(|e| IngestError::Malformed {
            line: 1,
            message: e.to_string(),
        })?,
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != RATINGS_HEADER {
        return Err(IngestError::BadHeader {
            found: names.join(","),
        });
    }
    let mut rows: Vec<(UserId, ItemId, f64)> = Vec::new();
    let mut seen: HashMap<(UserId, ItemId), u64> = HashMap::new();
    for rec in records {
        let rec = rec.map_err(|e| IngestError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec.get(0).is_some_and(|f| f.trim().is_empty()) {
            continue;
        }
        if rec.len() != 4 {
            return Err(IngestError::Malformed {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let user: UserId = field(&rec, 0, line)?;
        let item: ItemId = field(&rec, 1, line)?;
        let rating: f64 = field(&rec, 2, line)?;
        let _timestamp: i64 = field(&rec, 3, line)?;
        if !(rating >= scale.0 && rating <= scale.1) {
            return Err(IngestError::OutOfScale {
                line,
                rating,
                low: scale.0,
                high: scale.1,
            });
        }
        if let Some(&first) = seen.get(&(user, item)) {
            return Err(IngestError::DuplicateRating {
                user,
                item,
                first,
                second: line,
            });
        }
        seen.insert((user, item), line);
        rows.push((user, item, rating));
    }
    if rows.is_empty() {
        return Err(IngestError::Empty);
    }
    let index = |ids: Vec<u64>| -> (Vec<u64>, HashMap<u64, usize>) {
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        let map = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        (ids, map)
    };
    let (user_ids, user_ix) = index(rows.iter().map(|r| r.0).collect());
    let (item_ids, item_ix) = index(rows.iter().map(|r| r.1).collect());
    let cells = rows
        .iter()
        .map(|&(u, i, r)| RatingCell::new(user_ix[&u], item_ix[&i], r))
        .collect();
    RatingsMatrix::with_ids(cells, user_ids, item_ids).map_err(|e| IngestError::Malformed {
        line: 0,
        message: e.to_string(),
    })
}

pub fn ingest_ratings(path: &Path, scale: (f64, f64)) -> Result<RatingsMatrix, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    read_ratings(BufReader::new(file), scale)
}

/// External-to-dense id mapping written next to a fitted catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub user_ids: Vec<UserId>,
    pub item_ids: Vec<ItemId>,
}

impl IdMap {
    pub fn of(ratings: &RatingsMatrix) -> Self {
        Self {
            user_ids: ratings.user_ids().to_vec(),
            item_ids: ratings.item_ids().to_vec(),
        }
    }
}

/// One line of the action candidates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionRecord {
    pub state_id: StateId,
    pub action_id: ActionId,
    pub prompt_text: String,
    pub personalized: bool,
    pub category: ActionCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
}

fn json_lines<T: serde::de::DeserializeOwned>(input: impl BufRead) -> Result<Vec<(usize, T)>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| IngestError::Io(e.to_string()))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&text).map_err(|e| IngestError::Malformed {
            line: line_no as u64,
            message: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedActions {
    pub table: ActionTable,
    /// `(state, action)` pairs whose feature must be estimated.
    pub missing_features: Vec<(StateId, ActionId)>,
}

/// Groups candidate records into per-state action sets. Features, when
/// present, must have `n` values.
pub fn read_action_candidates(input: impl BufRead, n: usize) -> Result<LoadedActions, IngestError> {
    let mut grouped: BTreeMap<StateId, Vec<ActionCandidate>> = BTreeMap::new();
    let mut missing = Vec::new();
    for (line, rec) in json_lines::<ActionRecord>(input)? {
        let feature = match rec.feature {
            Some(f) if f.len() != n => {
                return Err(IngestError::FeatureLength {
                    line,
                    expected: n,
                    actual: f.len(),
                })
            }
            Some(f) => Some(EmbeddingVector::new(f).map_err(|e| IngestError::Malformed {
                line: line as u64,
                message: e.to_string(),
            })?),
            None => {
                missing.push((rec.state_id, rec.action_id));
                None
            }
        };
        let set = grouped.entry(rec.state_id).or_default();
        if set.iter().any(|c| c.id == rec.action_id) {
            return Err(IngestError::DuplicateAction {
                line,
                state: rec.state_id,
                action: rec.action_id,
            });
        }
        set.push(ActionCandidate {
            id: rec.action_id,
            prompt_text: rec.prompt_text,
            feature,
            personalized: rec.personalized,
            category: rec.category,
        });
    }
    let table = grouped
        .into_iter()
        .map(|(s, c)| {
            ActionSet::new(s, c).map(|set| (s, set)).map_err(|e| IngestError::Malformed {
                line: 0,
                message: format!("state {s}: {e}"),
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(LoadedActions {
        table,
        missing_features: missing,
    })
}

pub fn load_action_candidates(path: &Path, n: usize) -> Result<LoadedActions, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    read_action_candidates(BufReader::new(file), n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub id: ItemId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRecord {
    pub text: String,
    pub embedding: Vec<f64>,
}

/// Reads `{id, text}` lines.
pub fn load_descriptions(path: &Path) -> Result<BTreeMap<ItemId, String>, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    Ok(json_lines::<DescriptionRecord>(BufReader::new(file))?
        .into_iter()
        .map(|(_, r)| (r.id, r.text))
        .collect())
}

/// Reads `{text, embedding}` lines.
pub fn load_profiles(path: &Path) -> Result<Vec<(String, EmbeddingVector)>, IngestError> {
    let file = std::fs::File::open(path).map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
    json_lines::<ProfileRecord>(BufReader::new(file))?
        .into_iter()
        .map(|(line, r)| {
            EmbeddingVector::new(r.embedding)
                .map(|e| (r.text, e))
                .map_err(|e| IngestError::Malformed {
                    line: line as u64,
                    message: e.to_string(),
                })
        })
        .collect()
}
