use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_instance, EntityType, InstanceOptions, MrcInstance, SentenceRecord, Span, TruncationReport, Vocab};
use crate::diffcore::Float;
use crate::error::{Error, Result};
use crate::model::Model;

/// A decoded span with inclusive sentence offsets and the probability of its
/// winning class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub score: Float,
}

impl PredictedEntity {
    pub fn key(&self) -> Span {
        Span {
            start: self.start,
            end: self.end,
            entity_type: self.entity_type,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub entities: Vec<PredictedEntity>,
    /// Supervised cells whose argmax was an entity class other than the
    /// queried one. They are dropped, not re-routed.
    pub other_type_cells: usize,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[Float]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

/// Reads entities of the instance's queried type off a probability grid
/// [N, N, C] (row-major).
pub fn decode_grid(probs: &[Float], inst: &MrcInstance) -> Result<Decoded> {
    let n = inst.len();
    let c = inst.n_classes();
    if probs.len() != n * n * c {
        return Err(Error::contract(format!(
            "probability grid of {} values for a {n}×{n}×{c} instance",
            probs.len()
        )));
    }
    let target = inst.target_class();
    let mut best: BTreeMap<(usize, usize), Float> = BTreeMap::new();
    let mut other_type_cells = 0;
    for i in 0..n {
        for j in i..n {
            if !inst.masked(i, j) {
                continue;
            }
            let cell = &probs[(i * n + j) * c..(i * n + j + 1) * c];
            let k = argmax(cell);
            if k == target {
                let key = (i - inst.context_offset, j - inst.context_offset);
                let s = best.entry(key).or_insert(cell[k]);
                *s = s.max(cell[k]);
            } else if k != 0 {
                other_type_cells += 1;
            }
        }
    }
    Ok(Decoded {
        entities: best
            .into_iter()
            .map(|((start, end), score)| PredictedEntity {
                start,
                end,
                entity_type: inst.entity_type,
                score,
            })
            .collect(),
        other_type_cells,
    })
}

/// Anything that produces a probability grid for an instance.
pub trait GridScorer {
    fn probs(&self, inst: &MrcInstance) -> Result<Vec<Float>>;
}

impl GridScorer for Model {
    fn probs(&self, inst: &MrcInstance) -> Result<Vec<Float>> {
        Ok(self.score(inst)?.probs)
    }
}

/// Scores every instance with its own gold labels as one-hot
/// probabilities. Used to test the decoding and evaluation path.
#[derive(Clone, Copy, Debug, Default)]
pub struct GoldOracle;

impl GridScorer for GoldOracle {
    fn probs(&self, inst: &MrcInstance) -> Result<Vec<Float>> {
        Ok(one_hot(inst))
    }
}

pub fn one_hot(inst: &MrcInstance) -> Vec<Float> {
    let c = inst.n_classes();
    let mut out = vec![0.0; inst.label_grid.len() * c];
    for (cell, &label) in inst.label_grid.iter().enumerate() {
        out[cell * c + label] = 1.0;
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Prediction {
    pub entities: Vec<PredictedEntity>,
    pub truncation: TruncationReport,
    pub other_type_cells: usize,
}

/// Runs one query per entity type and unions the decoded spans, sorted by
/// (start, end, type).
pub fn predict<S: GridScorer + ?Sized>(
    record: &SentenceRecord,
    scorer: &S,
    vocab: &Vocab,
    opts: &InstanceOptions,
) -> Result<Prediction> {
    let mut out = Prediction::default();
    for t in EntityType::ALL {
        let inst = build_instance(record, t, vocab, opts)?;
        let probs = scorer.probs(&inst)?;
        let d = decode_grid(&probs, &inst)?;
        out.entities.extend(d.entities);
        out.other_type_cells += d.other_type_cells;
        out.truncation.add(&inst);
    }
    out.entities.sort_by_key(PredictedEntity::key);
    Ok(out)
}
