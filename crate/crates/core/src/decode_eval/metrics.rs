//! Exact-match span metrics. Every function takes per-record span lists for
//! predictions and golds; duplicates within a record count once.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityType, Span, NUM_TYPES};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

fn check_aligned(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<()> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} prediction lists for {} gold lists",
            preds.len(),
            golds.len()
        )));
    }
    Ok(())
}

fn counts(preds: &[Vec<Span>], golds: &[Vec<Span>], filter: impl Fn(&Span) -> bool) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<&Span> = p.iter().filter(|s| filter(s)).collect();
        let g: BTreeSet<&Span> = g.iter().filter(|s| filter(s)).collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    (tp, fp, fn_)
}

pub fn micro_metrics(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<Prf> {
    check_aligned(preds, golds)?;
    let (tp, fp, fn_) = counts(preds, golds, |_| true);
    Ok(Prf::from_counts(tp, fp, fn_))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeRow {
    #[serde(rename = "type")]
    pub entity_type: EntityType,
    #[serde(flatten)]
    pub prf: Prf,
    /// The type occurs in neither predictions nor golds; it still enters
    /// the macro average with zeros.
    pub absent: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroAvg {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTypeReport {
    pub rows: Vec<TypeRow>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAvg,
}

pub fn per_type_report(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<PerTypeReport> {
    check_aligned(preds, golds)?;
    let rows: Vec<TypeRow> = EntityType::ALL
        .iter()
        .map(|&t| {
            let (tp, fp, fn_) = counts(preds, golds, |s| s.entity_type == t);
            TypeRow {
                entity_type: t,
                prf: Prf::from_counts(tp, fp, fn_),
                absent: tp + fp + fn_ == 0,
            }
        })
        .collect();
    let mean = |f: fn(&Prf) -> f64| rows.iter().map(|r| f(&r.prf)).sum::<f64>() / NUM_TYPES as f64;
    let macro_avg = MacroAvg {
        precision: mean(|p| p.precision),
        recall: mean(|p| p.recall),
        f1: mean(|p| p.f1),
    };
    Ok(PerTypeReport { rows, macro_avg })
}

/// Type confusions between spans with identical boundaries. `matrix[p][g]`
/// counts predictions of type `p` matched to a gold span of type `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<usize>>,
    /// Predictions with no gold span of the same boundaries left to match.
    pub boundary_errors: usize,
    /// Gold spans no prediction was matched to.
    pub unmatched_golds: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.matrix.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..NUM_TYPES).map(|k| self.matrix[k][k]).sum()
    }
}

/// Exact triples are matched first and land on the diagonal; remaining
/// predictions then take the lowest-typed unmatched gold with the same
/// boundaries.
pub fn confusion_matrix(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<Confusion> {
    check_aligned(preds, golds)?;
    let mut matrix = vec![vec![0; NUM_TYPES]; NUM_TYPES];
    let (mut boundary_errors, mut unmatched_golds) = (0, 0);
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<Span> = p.iter().copied().collect();
        let mut g: BTreeSet<Span> = g.iter().copied().collect();
        let mut rest = Vec::new();
        for s in p {
            if g.remove(&s) {
                matrix[s.entity_type.id()][s.entity_type.id()] += 1;
            } else {
                rest.push(s);
            }
        }
        for s in rest {
            let hit = g.iter().find(|x| x.start == s.start && x.end == s.end).copied();
            match hit {
                Some(x) => {
                    g.remove(&x);
                    matrix[s.entity_type.id()][x.entity_type.id()] += 1;
                }
                None => boundary_errors += 1,
            }
        }
        unmatched_golds += g.len();
    }
    Ok(Confusion {
        matrix,
        boundary_errors,
        unmatched_golds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecall {
    pub recognized: usize,
    pub total: usize,
    pub recall: f64,
}

/// Exact-match recall on subsets of the gold entities. A subset with no
/// members is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestedFlatReport {
    pub all: Option<SubsetRecall>,
    pub flat: Option<SubsetRecall>,
    pub nested: Option<SubsetRecall>,
    pub inner: Option<SubsetRecall>,
    pub outer: Option<SubsetRecall>,
}

fn strictly_inside(a: &Span, b: &Span) -> bool {
    b.start <= a.start && a.end <= b.end && (b.end - b.start) > (a.end - a.start)
}

pub fn nested_flat_report(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<NestedFlatReport> {
    check_aligned(preds, golds)?;
    // [all, flat, nested, inner, outer] as (recognized, total)
    let mut acc = [(0usize, 0usize); 5];
    for (p, g) in preds.iter().zip(golds) {
        let p: BTreeSet<&Span> = p.iter().collect();
        let g: BTreeSet<&Span> = g.iter().collect();
        for &s in &g {
            let inner = g.iter().any(|o| strictly_inside(s, o));
            let outer = g.iter().any(|o| strictly_inside(o, s));
            let hit = p.contains(s) as usize;
            let member = [true, !inner && !outer, inner || outer, inner, outer];
            for (a, m) in acc.iter_mut().zip(member) {
                if m {
                    a.0 += hit;
                    a.1 += 1;
                }
            }
        }
    }
    let row = |(rec, total): (usize, usize)| {
        (total > 0).then(|| SubsetRecall {
            recognized: rec,
            total,
            recall: rec as f64 / total as f64,
        })
    };
    Ok(NestedFlatReport {
        all: row(acc[0]),
        flat: row(acc[1]),
        nested: row(acc[2]),
        inner: row(acc[3]),
        outer: row(acc[4]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(start: usize, end: usize, t: EntityType) -> Span {
        Span {
            start,
            end,
            entity_type: t,
        }
    }

    use EntityType::*;

    #[test]
    fn micro_examples() {
        let g = vec![vec![s(0, 1, Bod), s(2, 3, Dis), s(4, 5, Sym)]];
        let m = micro_metrics(&g, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let p = vec![vec![s(0, 1, Bod), s(2, 3, Dis), s(6, 7, Pro)]];
        let m = micro_metrics(&p, &g).unwrap();
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 1, 1));
        let m = micro_metrics(&[vec![]], &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(micro_metrics(&[], &g).is_err());
    }

    #[test]
    fn per_type_hand_fixture() {
        // bod 2/1/0, dis 1/0/1
        let g = vec![vec![s(0, 0, Bod), s(1, 1, Bod), s(2, 2, Dis), s(3, 3, Dis)]];
        let p = vec![vec![s(0, 0, Bod), s(1, 1, Bod), s(5, 5, Bod), s(2, 2, Dis)]];
        let r = per_type_report(&p, &g).unwrap();
        let bod = &r.rows[Bod.id()].prf;
        let dis = &r.rows[Dis.id()].prf;
        assert!((bod.precision - 2.0 / 3.0).abs() < 1e-12 && bod.recall == 1.0);
        assert!(dis.precision == 1.0 && dis.recall == 0.5);
        // macro over the nine types, seven of them absent
        assert!((r.macro_avg.precision - (2.0 / 3.0 + 1.0) / 9.0).abs() < 1e-12);
        let two_type_mean = (bod.precision + dis.precision) / 2.0;
        assert!((two_type_mean - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.rows.iter().filter(|r| r.absent).count(), 7);
        let tp: usize = r.rows.iter().map(|r| r.prf.tp).sum();
        assert_eq!(tp, micro_metrics(&p, &g).unwrap().tp);
    }

    #[test]
    fn confusion_examples() {
        let g = vec![vec![s(0, 3, Sym), s(5, 6, Bod)]];
        let c = confusion_matrix(&g, &g).unwrap();
        assert_eq!(c.diagonal(), 2);
        assert_eq!(c.total(), 2);

        let p = vec![vec![s(0, 3, Dis), s(5, 6, Bod)]];
        let c = confusion_matrix(&p, &g).unwrap();
        assert_eq!(c.matrix[Dis.id()][Sym.id()], 1);
        assert_eq!(c.boundary_errors, 0);

        let p = vec![vec![s(0, 2, Sym), s(5, 6, Bod)]];
        let c = confusion_matrix(&p, &g).unwrap();
        assert_eq!(c.total(), 1);
        assert_eq!(c.boundary_errors, 1);
        assert_eq!(c.unmatched_golds, 1);
    }

    #[test]
    fn nested_flat_examples() {
        let g = vec![vec![s(0, 5, Sym), s(1, 2, Bod)]];
        let r = nested_flat_report(&[vec![s(1, 2, Bod)]], &g).unwrap();
        assert_eq!(r.inner.unwrap().recall, 1.0);
        assert_eq!(r.outer.unwrap().recall, 0.0);
        assert_eq!(r.nested.unwrap().recall, 0.5);
        assert!(r.flat.is_none());

        // middle of a three-level nest is both inner and outer
        let g = vec![vec![s(0, 9, Sym), s(1, 5, Dis), s(2, 3, Bod), s(12, 13, Dru)]];
        let r = nested_flat_report(&g, &g).unwrap();
        assert_eq!(r.inner.unwrap().total, 2);
        assert_eq!(r.outer.unwrap().total, 2);
        assert_eq!(r.nested.unwrap().total, 3);
        assert_eq!(r.flat.unwrap().total, 1);
        assert_eq!(r.all.unwrap().recall, 1.0);
    }
}
