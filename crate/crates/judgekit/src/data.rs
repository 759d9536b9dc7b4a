//! Domain record types and line-delimited dataset persistence.
//!
//! Datasets are stored one JSON record per line. Field names match the
//! struct fields below; optional fields are omitted entirely rather than
//! written as null. Iteration order is insertion order, stable across a
//! save/load round trip.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instruction category tag. Inputs that carry no tag default to `Unknown`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Common,
    Coding,
    Academic,
    #[default]
    Unknown,
}

/// A record kind that can live in a [`Dataset`].
pub trait Record: Clone + std::fmt::Debug + Serialize + DeserializeOwned {
    /// Human-readable kind name, used in diagnostics.
    const KIND: &'static str;

    /// Uniqueness key within a dataset, when the kind declares one.
    fn key(&self) -> Option<String>;

    /// Check the kind's invariants.
    fn validate(&self) -> std::result::Result<(), String>;
}

/// An instruction `x` with an optional gold reference answer `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default)]
    pub category: Category,
}

impl Record for InstructionRecord {
    const KIND: &'static str = "instruction";

    fn key(&self) -> Option<String> {
        Some(self.id.clone())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if self.instruction.is_empty() {
            return Err("instruction must be non-empty".into());
        }
        Ok(())
    }
}

/// A sampled model response `y'`, optionally with per-token logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub instruction_id: String,
    pub model_id: String,
    pub sample_index: u32,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
}

impl ResponseRecord {
    /// Deterministic record id derived from the join key, so the same
    /// response keeps the same id across pipeline stages.
    pub fn derived_id(&self) -> String {
        derived_id(&self.instruction_id, &self.model_id, self.sample_index)
    }
}

/// The shared derived-id scheme for anything keyed by a response.
pub fn derived_id(instruction_id: &str, model_id: &str, sample_index: u32) -> String {
    format!("{instruction_id}::{model_id}::{sample_index}")
}

impl Record for ResponseRecord {
    const KIND: &'static str = "response";

    fn key(&self) -> Option<String> {
        Some(self.derived_id())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.instruction_id.is_empty() {
            return Err("instruction_id must be non-empty".into());
        }
        if self.model_id.is_empty() {
            return Err("model_id must be non-empty".into());
        }
        if let Some(lps) = &self.token_logprobs {
            for (i, &lp) in lps.iter().enumerate() {
                if lp.is_nan() || lp > 0.0 {
                    return Err(format!("token_logprobs[{i}] = {lp} must be <= 0"));
                }
            }
        }
        Ok(())
    }
}

/// Score pipeline state for one (instruction, response, reference) triple.
///
/// `self_eval` is the model's own 1-10 rating, `cosine_raw` the raw
/// response-reference similarity, `cosine_class` its 1-10 discretization,
/// `combined` the weighted mixture before uniformization, and
/// `final_class` the 0-9 training label after the subtract-1 shift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub instruction_id: String,
    pub model_id: String,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub self_eval: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_class: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_class: Option<u8>,
}

impl RatingRecord {
    pub fn derived_id(&self) -> String {
        derived_id(&self.instruction_id, &self.model_id, self.sample_index)
    }
}

impl Record for RatingRecord {
    const KIND: &'static str = "rating";

    fn key(&self) -> Option<String> {
        Some(self.derived_id())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if let Some(v) = self.self_eval {
            if !(1..=10).contains(&v) {
                return Err(format!("self_eval = {v} outside 1..=10"));
            }
        }
        if let Some(v) = self.cosine_raw {
            if !v.is_finite() || v.abs() > 1.0 + 1e-9 {
                return Err(format!("cosine_raw = {v} outside [-1, 1]"));
            }
        }
        if let Some(v) = self.cosine_class {
            if !(1..=10).contains(&v) {
                return Err(format!("cosine_class = {v} outside 1..=10"));
            }
            if self.cosine_raw.is_none() {
                return Err("cosine_class present without cosine_raw".into());
            }
        }
        if let Some(v) = self.combined {
            if !v.is_finite() {
                return Err(format!("combined = {v} is not finite"));
            }
        }
        if let Some(v) = self.final_class {
            if v > 9 {
                return Err(format!("final_class = {v} outside 0..=9"));
            }
        }
        Ok(())
    }
}

/// A per-record score emitted by the judge or a baseline, keyed by the
/// derived response id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub instruction_id: String,
    pub model_id: String,
    pub sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub score: f64,
}

impl Record for ScoreRecord {
    const KIND: &'static str = "score";

    fn key(&self) -> Option<String> {
        Some(self.id.clone())
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be non-empty".into());
        }
        if !self.score.is_finite() {
            return Err(format!("score = {} is not finite", self.score));
        }
        Ok(())
    }
}

/// One entry of a failure report: which record failed, at which stage, why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub id: String,
    pub stage: String,
    pub reason: String,
}

impl Record for FailureEntry {
    const KIND: &'static str = "failure";

    fn key(&self) -> Option<String> {
        None
    }

    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

/// A dense embedding with its declared dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub dim: usize,
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let v = EmbeddingVector {
            dim: values.len(),
            values,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::EmptyInput("embedding values"));
        }
        if self.dim != self.values.len() {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: self.values.len(),
            });
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding values"));
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// An ordered, validated collection of one record kind.
#[derive(Debug, Clone)]
pub struct Dataset<R: Record> {
    records: Vec<R>,
    keys: HashSet<String>,
    source_path: Option<PathBuf>,
}

impl<R: Record> Default for Dataset<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Record + PartialEq> PartialEq for Dataset<R> {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl<R: Record> Dataset<R> {
    pub fn new() -> Self {
        Dataset {
            records: Vec::new(),
            keys: HashSet::new(),
            source_path: None,
        }
    }

    pub fn from_records(records: Vec<R>) -> Result<Self> {
        let mut ds = Dataset::new();
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    /// Validate a record and append it, rejecting duplicate keys.
    pub fn push(&mut self, record: R) -> Result<()> {
        record.validate().map_err(|message| Error::MalformedLine {
            path: self.source_path.clone().unwrap_or_default(),
            line: self.records.len() + 1,
            message,
        })?;
        if let Some(key) = record.key() {
            if !self.keys.insert(key.clone()) {
                return Err(Error::DuplicateKey {
                    path: self.source_path.clone().unwrap_or_default(),
                    line: self.records.len() + 1,
                    key,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn iter(&self) -> std::slice::Iter<'_, R> {
        self.records.iter()
    }

    pub fn into_records(self) -> Vec<R> {
        self.records
    }

    pub fn source_path(&self) -> Option<&Path> {
        self.source_path.as_deref()
    }
}

/// Load a line-delimited dataset, validating every record.
///
/// Malformed lines are reported with their 1-based line number; blank
/// lines are ignored.
pub fn load_dataset<R: Record>(path: &Path) -> Result<Dataset<R>> {
    let file = fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut dataset = Dataset::new();
    dataset.source_path = Some(path.to_path_buf());

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: R = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message: format!("{} record: {e}", R::KIND),
        })?;
        record.validate().map_err(|message| Error::MalformedLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        if let Some(key) = record.key() {
            if !dataset.keys.insert(key.clone()) {
                return Err(Error::DuplicateKey {
                    path: path.to_path_buf(),
                    line: line_no,
                    key,
                });
            }
        }
        dataset.records.push(record);
    }
    Ok(dataset)
}

/// Save a dataset so that loading the file reproduces it exactly.
pub fn save_dataset<R: Record>(dataset: &Dataset<R>, path: &Path) -> Result<()> {
    let to_io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(to_io)?;
    for record in dataset.iter() {
        let line = serde_json::to_string(record).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        file.write_all(line.as_bytes()).map_err(to_io)?;
        file.write_all(b"\n").map_err(to_io)?;
    }
    file.flush().map_err(to_io)?;
    Ok(())
}

/// Save any slice of records without constructing a dataset first.
pub fn save_records<R: Record>(records: &[R], path: &Path) -> Result<()> {
    let to_io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(to_io)?;
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        file.write_all(line.as_bytes()).map_err(to_io)?;
        file.write_all(b"\n").map_err(to_io)?;
    }
    file.flush().map_err(to_io)?;
    Ok(())
}
