use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The nine CMeEE entity categories. The discriminant is the type id used
/// throughout the model (query embedding row, label class `1 + id`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityType {
    Bod,
    Dis,
    Sym,
    Pro,
    Equ,
    Dru,
    Ite,
    Dep,
    Mic,
}

pub const NUM_TYPES: usize = 9;

impl EntityType {
    pub const ALL: [EntityType; NUM_TYPES] = [
        EntityType::Bod,
        EntityType::Dis,
        EntityType::Sym,
        EntityType::Pro,
        EntityType::Equ,
        EntityType::Dru,
        EntityType::Ite,
        EntityType::Dep,
        EntityType::Mic,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityType::Bod => "bod",
            EntityType::Dis => "dis",
            EntityType::Sym => "sym",
            EntityType::Pro => "pro",
            EntityType::Equ => "equ",
            EntityType::Dru => "dru",
            EntityType::Ite => "ite",
            EntityType::Dep => "dep",
            EntityType::Mic => "mic",
        }
    }
}

impl fmt::Display for EntityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EntityType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EntityType::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown entity type '{s}'")))
    }
}

/// A typed span over a sentence, with inclusive code-point offsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityAnnotation {
    #[serde(rename = "start_idx")]
    pub start: usize,
    #[serde(rename = "end_idx")]
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    #[serde(rename = "entity")]
    pub surface: String,
}

impl EntityAnnotation {
    pub fn new(start: usize, end: usize, entity_type: EntityType, surface: impl Into<String>) -> Self {
        EntityAnnotation {
            start,
            end,
            entity_type,
            surface: surface.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn key(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
            entity_type: self.entity_type,
        }
    }

    /// True if `self` lies inside `other` and `other` covers strictly more
    /// characters.
    pub fn strictly_inside(&self, other: &EntityAnnotation) -> bool {
        other.start <= self.start && self.end <= other.end && other.len() > self.len()
    }
}

/// (start, end, type) identity of an entity, used for matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub text: String,
    pub entities: Vec<EntityAnnotation>,
}

impl SentenceRecord {
    pub fn new(text: impl Into<String>, entities: Vec<EntityAnnotation>) -> Self {
        SentenceRecord {
            text: text.into(),
            entities,
        }
    }

    pub fn chars(&self) -> Vec<char> {
        self.text.chars().collect()
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    pub fn spans(&self) -> Vec<Span> {
        self.entities.iter().map(EntityAnnotation::key).collect()
    }
}
