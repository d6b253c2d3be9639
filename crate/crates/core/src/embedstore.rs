//! Strain records with gene embeddings, cosine top-k retrieval and the
//! `rag_tool` observation document.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::scalar::{cosine, norm};
use crate::schema::AnswerValue;

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenomeRecord {
    pub strain_id: String,
    pub embedding: Vec<f64>,
    #[serde(default)]
    pub phenotypes: BTreeMap<String, AnswerValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Neighbor {
    pub rank: usize,
    pub strain_id: String,
    pub similarity: f64,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("record `{id}` has dimension {got}, store dimension is {expected}")]
    DimensionMismatch { id: String, expected: usize, got: usize },
    #[error("duplicate strain id `{0}`")]
    DuplicateId(String),
    #[error("zero-norm embedding ({0})")]
    ZeroVector(String),
    #[error("unknown genome handle `{0}`")]
    UnknownHandle(String),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("store line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable embedding store.
#[derive(Clone, Debug, Default)]
pub struct Store {
    records: Vec<GenomeRecord>,
    unit: Vec<Option<Vec<f64>>>,
    by_id: HashMap<String, usize>,
    dim: usize,
}

impl Store {
    pub fn load(records: Vec<GenomeRecord>) -> Result<Store, StoreError> {
        let dim = records.first().map_or(0, |r| r.embedding.len());
        let mut by_id = HashMap::with_capacity(records.len());
        let mut unit = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.embedding.len() != dim {
                return Err(StoreError::DimensionMismatch {
                    id: r.strain_id.clone(),
                    expected: dim,
                    got: r.embedding.len(),
                });
            }
            if by_id.insert(r.strain_id.clone(), i).is_some() {
                return Err(StoreError::DuplicateId(r.strain_id.clone()));
            }
            let n = norm(&r.embedding);
            unit.push((n > 0.0).then(|| r.embedding.iter().map(|x| x / n).collect()));
        }
        Ok(Store { records, unit, by_id, dim })
    }

    /// Reads a JSONL store file (one record per line; blank lines skipped).
    pub fn from_jsonl(reader: impl BufRead) -> Result<Store, StoreError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|source| StoreError::Parse { line: i + 1, source })?;
            records.push(rec);
        }
        Store::load(records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, strain_id: &str) -> Option<&GenomeRecord> {
        self.by_id.get(strain_id).map(|&i| &self.records[i])
    }

    pub fn records(&self) -> &[GenomeRecord] {
        &self.records
    }

    /// The `k` most cosine-similar records, excluding `exclude`; ties are
    /// broken by ascending strain id.
    pub fn top_k_similar(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Vec<Neighbor>, StoreError> {
        if k == 0 {
            return Err(StoreError::InvalidK);
        }
        if self.records.is_empty() {
            return Ok(Vec::new());
        }
        if query.len() != self.dim {
            return Err(StoreError::DimensionMismatch { id: "<query>".into(), expected: self.dim, got: query.len() });
        }
        let qn = norm(query);
        if qn == 0.0 {
            return Err(StoreError::ZeroVector("query".into()));
        }
        let mut scored = Vec::with_capacity(self.records.len());
        for (rec, unit) in self.records.iter().zip(&self.unit) {
            if Some(rec.strain_id.as_str()) == exclude {
                continue;
            }
            let unit = unit.as_ref().ok_or_else(|| StoreError::ZeroVector(rec.strain_id.clone()))?;
            let dot: f64 = unit.iter().zip(query).map(|(a, b)| a * b).sum();
            scored.push((dot / qn, rec.strain_id.as_str()));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        Ok(scored
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(i, (s, id))| Neighbor { rank: i + 1, strain_id: id.to_string(), similarity: s.clamp(-1.0, 1.0) })
            .collect())
    }

    /// Brute-force reference ranking (full cosine recomputation, stable sort).
    pub fn brute_force_top_k(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Vec<(String, f64)> {
        let mut all: Vec<(String, f64)> = self
            .records
            .iter()
            .filter(|r| Some(r.strain_id.as_str()) != exclude)
            .filter_map(|r| cosine(query, &r.embedding).map(|s| (r.strain_id.clone(), s)))
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }
}

/// What the retrieval tool is asked about.
#[derive(Clone, Debug, PartialEq)]
pub enum QueryHandle {
    /// A stored strain; its own record is excluded from the results.
    Strain(String),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RagRecord {
    pub rank: usize,
    pub similarity: f64,
    pub phenotypes: Map<String, Value>,
}

/// Observation document; field order is the wire order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RagObservation {
    pub tool: &'static str,
    pub top_similar_records: Vec<RagRecord>,
    pub retrieved_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RagObservation {
    pub fn error(message: impl Into<String>) -> Self {
        RagObservation {
            tool: "rag_tool",
            top_similar_records: Vec::new(),
            retrieved_count: 0,
            error: Some(message.into()),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("observation serializes")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("observation serializes")
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Builds the retrieval observation for `handle`, projecting neighbor
/// phenotypes onto `requested_fields` (in request order).
pub fn rag_observation(
    store: &Store,
    handle: &QueryHandle,
    requested_fields: &[String],
    k: usize,
) -> Result<RagObservation, StoreError> {
    if store.is_empty() {
        return Ok(RagObservation {
            tool: "rag_tool",
            top_similar_records: Vec::new(),
            retrieved_count: 0,
            error: None,
        });
    }
    let neighbors = match handle {
        QueryHandle::Strain(id) => {
            let rec = store.get(id).ok_or_else(|| StoreError::UnknownHandle(id.clone()))?;
            store.top_k_similar(&rec.embedding, k, Some(id))?
        }
        QueryHandle::Vector(v) => store.top_k_similar(v, k, None)?,
    };
    let records: Vec<RagRecord> = neighbors
        .iter()
        .map(|n| {
            let rec = store.get(&n.strain_id).expect("neighbor comes from store");
            let mut phenotypes = Map::new();
            for f in requested_fields {
                if let Some(v) = rec.phenotypes.get(f) {
                    phenotypes.insert(f.clone(), v.to_json());
                }
            }
            RagRecord { rank: n.rank, similarity: round2(n.similarity), phenotypes }
        })
        .collect();
    Ok(RagObservation { tool: "rag_tool", retrieved_count: records.len(), top_similar_records: records, error: None })
}
