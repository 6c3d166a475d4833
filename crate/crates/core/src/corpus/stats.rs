//! Entity distribution and nesting statistics.
//!
//! An entity is *nested* when some other entity strictly contains it: the
//! container covers it and is strictly longer. Two annotations over the same
//! span with different types therefore do not make either one nested.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::types::{EntityType, SentenceRecord, NUM_TYPES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub count: usize,
    pub percent: f64,
    pub avg_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestingSummary {
    pub flat: usize,
    pub nested: usize,
    pub nested_percent: f64,
    /// `sym` entities that contain at least one other entity.
    pub nested_in_sym: usize,
    /// `nested_in_sym` as a share of all `sym` entities.
    pub nested_in_sym_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsideSymRow {
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    pub count: usize,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub per_type: Vec<TypeRow>,
    pub total: usize,
    pub total_avg_len: f64,
    pub nesting: NestingSummary,
    /// Non-`sym` entities lying strictly inside some `sym` entity.
    pub inside_sym: Vec<InsideSymRow>,
    pub inside_sym_total: usize,
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

pub fn compute_stats(records: &[SentenceRecord]) -> DatasetStats {
    let mut counts = [0usize; NUM_TYPES];
    let mut len_sums = [0usize; NUM_TYPES];
    let mut nested = 0;
    let mut sym_total = 0;
    let mut sym_containers = 0;
    let mut inside_sym = [0usize; NUM_TYPES];

    for r in records {
        for e in &r.entities {
            let t = e.entity_type.id();
            counts[t] += 1;
            len_sums[t] += e.len();
            if r.entities.iter().any(|c| e.strictly_inside(c)) {
                nested += 1;
            }
            if e.entity_type == EntityType::Sym {
                sym_total += 1;
                if r.entities.iter().any(|inner| inner.strictly_inside(e)) {
                    sym_containers += 1;
                }
            } else if r
                .entities
                .iter()
                .any(|c| c.entity_type == EntityType::Sym && e.strictly_inside(c))
            {
                inside_sym[t] += 1;
            }
        }
    }

    let total: usize = counts.iter().sum();
    let total_len: usize = len_sums.iter().sum();
    let inside_sym_total: usize = inside_sym.iter().sum();
    let avg = |s: usize, n: usize| if n == 0 { 0.0 } else { s as f64 / n as f64 };

    DatasetStats {
        records: records.len(),
        per_type: EntityType::ALL
            .iter()
            .map(|&t| TypeRow {
                entity_type: t,
                count: counts[t.id()],
                percent: pct(counts[t.id()], total),
                avg_len: avg(len_sums[t.id()], counts[t.id()]),
            })
            .collect(),
        total,
        total_avg_len: avg(total_len, total),
        nesting: NestingSummary {
            flat: total - nested,
            nested,
            nested_percent: pct(nested, total),
            nested_in_sym: sym_containers,
            nested_in_sym_percent: pct(sym_containers, sym_total),
        },
        inside_sym: EntityType::ALL
            .iter()
            .filter(|&&t| t != EntityType::Sym)
            .map(|&t| InsideSymRow {
                entity_type: t,
                count: inside_sym[t.id()],
                percent: pct(inside_sym[t.id()], inside_sym_total),
            })
            .collect(),
        inside_sym_total,
    }
}

impl DatasetStats {
    pub fn row(&self, t: EntityType) -> &TypeRow {
        &self.per_type[t.id()]
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## Entities ({} records)\n", self.records);
        let _ = writeln!(s, "| Entity | #Entity | Per/% | Avg.len |");
        let _ = writeln!(s, "|---|---:|---:|---:|");
        for r in &self.per_type {
            let _ = writeln!(s, "| {} | {} | {:.2} | {:.2} |", r.entity_type, r.count, r.percent, r.avg_len);
        }
        let _ = writeln!(s, "| Total | {} | 100 | {:.2} |\n", self.total, self.total_avg_len);

        let n = &self.nesting;
        let _ = writeln!(s, "## Nesting\n");
        let _ = writeln!(s, "| | Value |");
        let _ = writeln!(s, "|---|---:|");
        let _ = writeln!(s, "| #Flat | {} |", n.flat);
        let _ = writeln!(s, "| #Nested | {} |", n.nested);
        let _ = writeln!(s, "| Nested/% | {:.2} |", n.nested_percent);
        let _ = writeln!(s, "| #Nested in sym | {} |", n.nested_in_sym);
        let _ = writeln!(s, "| Nested in sym/% | {:.2} |\n", n.nested_in_sym_percent);

        let _ = writeln!(s, "## Entities inside sym\n");
        let _ = writeln!(s, "| Entity | #Nested | Per/% |");
        let _ = writeln!(s, "|---|---:|---:|");
        for r in &self.inside_sym {
            let _ = writeln!(s, "| {} | {} | {:.2} |", r.entity_type, r.count, r.percent);
        }
        let _ = writeln!(s, "| Total | {} | 100 |", self.inside_sym_total);
        s
    }
}

/// Published CMeEE V1 figures used to check a user-supplied copy.
pub mod reference_v1 {
    pub const BOD_COUNT: usize = 23580;
    pub const BOD_AVG_LEN: f64 = 3.38;
    pub const TOTAL: usize = 82096;
    pub const TOTAL_AVG_LEN: f64 = 4.89;
    pub const NESTED: usize = 8760;
    pub const NESTED_PERCENT: f64 = 10.67;
    pub const AVG_LEN_TOL: f64 = 0.01;
    pub const PERCENT_TOL: f64 = 0.05;
}

/// Whether `stats` agrees with the V1 reference figures within tolerance.
pub fn matches_reference_v1(stats: &DatasetStats) -> bool {
    use reference_v1::*;
    let bod = stats.row(EntityType::Bod);
    bod.count == BOD_COUNT
        && (bod.avg_len - BOD_AVG_LEN).abs() <= AVG_LEN_TOL
        && stats.total == TOTAL
        && (stats.total_avg_len - TOTAL_AVG_LEN).abs() <= AVG_LEN_TOL
        && stats.nesting.nested == NESTED
        && (stats.nesting.nested_percent - NESTED_PERCENT).abs() <= PERCENT_TOL
}

/// Statistics for each candidate split combination and the first one (if
/// any) that reproduces the reference figures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitMatch {
    pub combinations: Vec<(String, DatasetStats)>,
    pub matched: Option<String>,
}

pub fn match_split_combinations(combos: Vec<(String, Vec<SentenceRecord>)>) -> SplitMatch {
    let combinations: Vec<(String, DatasetStats)> =
        combos.into_iter().map(|(name, recs)| (name, compute_stats(&recs))).collect();
    let matched = combinations
        .iter()
        .find(|(_, s)| matches_reference_v1(s))
        .map(|(n, _)| n.clone());
    SplitMatch { combinations, matched }
}
