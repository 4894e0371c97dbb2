//! Label-similarity protocols used for label quality.
//!
//! Learned similarities (sentence embeddings, lexical databases, CLIP text
//! towers) are computed offline and supplied as a JSONL table of
//! `{"a": str, "b": str, "sim": float}` rows.

use std::collections::HashMap;

use serde::Deserialize;
use thiserror::Error;

use crate::tree::normalize_label;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabelSimError {
    #[error("no similarity entry for ({0:?}, {1:?})")]
    MissingPair(String, String),
    #[error("line {line}: similarity {value} outside [0, 1]")]
    OutOfRange { line: usize, value: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("default similarity {0} outside [0, 1]")]
    InvalidDefault(f64),
}

/// What a table protocol does with a label pair it has no entry for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MissingPolicy {
    Reject,
    Default(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    entries: HashMap<(String, String), f64>,
    missing: MissingPolicy,
}

fn key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SimilarityTable {
    pub fn new(missing: MissingPolicy) -> Result<Self, LabelSimError> {
        if let MissingPolicy::Default(v) = missing {
            if !(0.0..=1.0).contains(&v) {
                return Err(LabelSimError::InvalidDefault(v));
            }
        }
        Ok(SimilarityTable {
            entries: HashMap::new(),
            missing,
        })
    }

    /// Inserts an unordered pair; returns the previous value if one existed.
    pub fn insert(&mut self, a: &str, b: &str, sim: f64) -> Option<f64> {
        self.entries
            .insert(key(&normalize_label(a), &normalize_label(b)), sim)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn missing_policy(&self) -> MissingPolicy {
        self.missing
    }

    pub fn get(&self, a: &str, b: &str) -> Result<f64, LabelSimError> {
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        // Borrowed lookup would need a custom key type; labels are short.
        if let Some(&v) = self.entries.get(&(x.to_string(), y.to_string())) {
            return Ok(v);
        }
        if a == b {
            return Ok(1.0);
        }
        match self.missing {
            MissingPolicy::Default(v) => Ok(v),
            MissingPolicy::Reject => Err(LabelSimError::MissingPair(x.to_string(), y.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityProtocol {
    /// 1 for identical normalized labels, 0 otherwise.
    Strict,
    /// Label-agnostic: every pair scores 1.
    ConstantOne,
    Table(SimilarityTable),
}

impl SimilarityProtocol {
    /// Similarity of two normalized labels.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, LabelSimError> {
        match self {
            SimilarityProtocol::Strict => Ok(if a == b { 1.0 } else { 0.0 }),
            SimilarityProtocol::ConstantOne => Ok(1.0),
            SimilarityProtocol::Table(t) => t.get(a, b),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityProtocol::Strict => "strict",
            SimilarityProtocol::ConstantOne => "lq1",
            SimilarityProtocol::Table(_) => "table",
        }
    }
}

#[derive(Deserialize)]
struct Row {
    a: String,
    b: String,
    sim: f64,
}

/// Loads a JSONL similarity table. Later rows for the same pair win.
pub fn load_similarity_table(
    document: &[u8],
    missing: MissingPolicy,
) -> Result<SimilarityProtocol, LabelSimError> {
    let text = std::str::from_utf8(document).map_err(|e| LabelSimError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let mut table = SimilarityTable::new(missing)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(line).map_err(|e| LabelSimError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.sim) {
            return Err(LabelSimError::OutOfRange {
                line: i + 1,
                value: row.sim,
            });
        }
        if let Some(prev) = table.insert(&row.a, &row.b, row.sim) {
            log::warn!(
                "line {}: duplicate similarity for ({:?}, {:?}); {} replaces {}",
                i + 1,
                row.a,
                row.b,
                row.sim,
                prev
            );
        }
    }
    Ok(SimilarityProtocol::Table(table))
}
