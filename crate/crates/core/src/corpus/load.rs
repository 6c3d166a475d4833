//! Reading and validating CMeEE-format JSON.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::Deserialize;

use super::types::{EntityAnnotation, EntityType, SentenceRecord};
use crate::error::{Error, Result};

/// An entity as it appears on disk, before type and bounds checks.
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct RawEntity {
    pub start_idx: i64,
    pub end_idx: i64,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub entity: String,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct RawRecord {
    pub text: String,
    #[serde(default)]
    pub entities: Vec<RawEntity>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    OutOfBounds { entity: usize, start: i64, end: i64, len: usize },
    SurfaceMismatch { entity: usize, expected: String, found: String },
    UnknownType { entity: usize, name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::OutOfBounds { entity, start, end, len } => write!(
                f,
                "entity {entity}: span [{start}, {end}] out of bounds for text of {len} characters"
            ),
            Violation::SurfaceMismatch {
                entity,
                expected,
                found,
            } => write!(f, "entity {entity}: surface '{expected}' but text has '{found}'"),
            Violation::UnknownType { entity, name } => write!(f, "entity {entity}: unknown type '{name}'"),
        }
    }
}

/// Checks index bounds, surface agreement and type names. An empty result
/// means the record is valid.
pub fn validate(record: &RawRecord) -> Vec<Violation> {
    let chars: Vec<char> = record.text.chars().collect();
    let mut out = Vec::new();
    for (i, e) in record.entities.iter().enumerate() {
        if e.entity_type.parse::<EntityType>().is_err() {
            out.push(Violation::UnknownType {
                entity: i,
                name: e.entity_type.clone(),
            });
        }
        let in_bounds = 0 <= e.start_idx && e.start_idx <= e.end_idx && (e.end_idx as usize) < chars.len();
        if !in_bounds {
            out.push(Violation::OutOfBounds {
                entity: i,
                start: e.start_idx,
                end: e.end_idx,
                len: chars.len(),
            });
            continue;
        }
        let found: String = chars[e.start_idx as usize..=e.end_idx as usize].iter().collect();
        if found != e.entity {
            out.push(Violation::SurfaceMismatch {
                entity: i,
                expected: e.entity.clone(),
                found,
            });
        }
    }
    out
}

impl RawRecord {
    /// Converts a validated record, dropping duplicate (start, end, type)
    /// triples. Returns the record and the number of duplicates removed.
    fn into_record(self) -> (SentenceRecord, usize) {
        let mut seen = HashSet::new();
        let mut entities = Vec::with_capacity(self.entities.len());
        let mut dropped = 0;
        for e in self.entities {
            let ann = EntityAnnotation::new(
                e.start_idx as usize,
                e.end_idx as usize,
                e.entity_type.parse().expect("validated"),
                e.entity,
            );
            if seen.insert(ann.key()) {
                entities.push(ann);
            } else {
                dropped += 1;
            }
        }
        (SentenceRecord::new(self.text, entities), dropped)
    }
}

pub fn read_raw_corpus(path: &Path) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&text, path)
}

fn parse_raw(text: &str, path: &Path) -> Result<Vec<RawRecord>> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Validates every record, failing on the first violation, and removes
/// duplicate entity triples with a warning.
pub fn records_from_raw(raw: Vec<RawRecord>) -> Result<Vec<SentenceRecord>> {
    let mut records = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        if let Some(v) = validate(&r).first() {
            return Err(Error::Validation {
                record: i,
                message: v.to_string(),
            });
        }
        let (record, dropped) = r.into_record();
        if dropped > 0 {
            log::warn!("record {i}: removed {dropped} duplicate entity annotation(s)");
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<SentenceRecord>> {
    records_from_raw(read_raw_corpus(path)?)
}

/// Parses a corpus from an in-memory JSON string.
pub fn parse_corpus(json: &str) -> Result<Vec<SentenceRecord>> {
    records_from_raw(parse_raw(json, Path::new("<memory>"))?)
}

pub fn save_corpus(records: &[SentenceRecord], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(records)?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}
