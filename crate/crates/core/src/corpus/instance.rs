//! Per-type MRC instances: `[<cls>] query [<sep>] context [<sep>] [<pad>…]`
//! with an N×N span label grid and loss mask.

use serde::{Deserialize, Serialize};

use super::query::query_for;
use super::types::{EntityType, SentenceRecord, NUM_TYPES};
use super::vocab::{Vocab, CLS, PAD, SEP};
use crate::error::{Error, Result};

/// How entity cells are labelled in a per-type instance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScheme {
    /// Ten classes: 0 = non-entity, 1 + type id for each entity type.
    #[default]
    PerType,
    /// Two classes: 0 = non-entity, 1 = entity of the queried type.
    Binary,
}

impl LabelScheme {
    pub fn n_classes(self) -> usize {
        match self {
            LabelScheme::PerType => NUM_TYPES + 1,
            LabelScheme::Binary => 2,
        }
    }

    pub fn class_for(self, t: EntityType) -> usize {
        match self {
            LabelScheme::PerType => 1 + t.id(),
            LabelScheme::Binary => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceOptions {
    pub max_len: usize,
    /// Pad the token sequence with `<pad>` up to this length (capped at
    /// `max_len`). `None` keeps the natural length.
    pub pad_to: Option<usize>,
    pub label_scheme: LabelScheme,
}

impl Default for InstanceOptions {
    fn default() -> Self {
        InstanceOptions {
            max_len: 200,
            pad_to: None,
            label_scheme: LabelScheme::PerType,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MrcInstance {
    pub entity_type: EntityType,
    pub token_ids: Vec<usize>,
    pub context_offset: usize,
    pub context_len: usize,
    /// Length of the source sentence before truncation.
    pub sentence_len: usize,
    /// Row-major N×N class ids.
    pub label_grid: Vec<usize>,
    /// Row-major N×N; true iff both positions are context tokens and i ≤ j.
    pub loss_mask: Vec<bool>,
    pub label_scheme: LabelScheme,
    /// Gold entities of the queried type dropped because they cross or lie
    /// beyond the truncation boundary.
    pub truncated_entities: usize,
}

impl MrcInstance {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.label_scheme.n_classes()
    }

    pub fn target_class(&self) -> usize {
        self.label_scheme.class_for(self.entity_type)
    }

    pub fn label(&self, i: usize, j: usize) -> usize {
        self.label_grid[i * self.len() + j]
    }

    pub fn masked(&self, i: usize, j: usize) -> bool {
        self.loss_mask[i * self.len() + j]
    }

    pub fn is_truncated(&self) -> bool {
        self.context_len < self.sentence_len
    }

    /// Key mask for attention: true for every non-padding position.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| t != PAD).collect()
    }

    pub fn supervised_cells(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

pub fn build_instance(
    record: &SentenceRecord,
    entity_type: EntityType,
    vocab: &Vocab,
    opts: &InstanceOptions,
) -> Result<MrcInstance> {
    let query: Vec<usize> = vocab.encode(query_for(entity_type));
    let budget = opts.max_len as isize - query.len() as isize - 3;
    if budget < 1 {
        return Err(Error::config(format!(
            "query for '{entity_type}' ({} chars) leaves no room for context at max_len {}",
            query.len(),
            opts.max_len
        )));
    }
    let chars = record.chars();
    let context_len = chars.len().min(budget as usize);

    let mut token_ids = Vec::with_capacity(opts.max_len);
    token_ids.push(CLS);
    token_ids.extend_from_slice(&query);
    token_ids.push(SEP);
    let context_offset = token_ids.len();
    token_ids.extend(chars[..context_len].iter().map(|&c| vocab.id(c)));
    token_ids.push(SEP);
    if let Some(p) = opts.pad_to {
        let target = p.min(opts.max_len);
        while token_ids.len() < target {
            token_ids.push(PAD);
        }
    }

    let n = token_ids.len();
    let mut loss_mask = vec![false; n * n];
    for i in context_offset..context_offset + context_len {
        for j in i..context_offset + context_len {
            loss_mask[i * n + j] = true;
        }
    }
    let mut label_grid = vec![0; n * n];
    let class = opts.label_scheme.class_for(entity_type);
    let mut truncated_entities = 0;
    for e in record.entities.iter().filter(|e| e.entity_type == entity_type) {
        if e.end >= context_len {
            truncated_entities += 1;
            continue;
        }
        label_grid[(context_offset + e.start) * n + context_offset + e.end] = class;
    }

    Ok(MrcInstance {
        entity_type,
        token_ids,
        context_offset,
        context_len,
        sentence_len: chars.len(),
        label_grid,
        loss_mask,
        label_scheme: opts.label_scheme,
        truncated_entities,
    })
}

/// One instance per entity type for every record, in record-major order.
pub fn build_all_instances(records: &[SentenceRecord], vocab: &Vocab, opts: &InstanceOptions) -> Result<Vec<MrcInstance>> {
    let mut out = Vec::with_capacity(records.len() * NUM_TYPES);
    for r in records {
        for t in EntityType::ALL {
            out.push(build_instance(r, t, vocab, opts)?);
        }
    }
    Ok(out)
}

/// Entities lost to truncation across a set of instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    pub truncated_instances: usize,
    pub dropped_entities: usize,
}

impl TruncationReport {
    pub fn add(&mut self, inst: &MrcInstance) {
        if inst.is_truncated() {
            self.truncated_instances += 1;
        }
        self.dropped_entities += inst.truncated_entities;
    }
}
