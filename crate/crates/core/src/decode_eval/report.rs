use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::decode::{predict, GridScorer, PredictedEntity};
use super::metrics::{
    confusion_matrix, micro_metrics, nested_flat_report, per_type_report, Confusion, MacroAvg, NestedFlatReport, Prf,
    SubsetRecall, TypeRow,
};
use crate::corpus::{EntityType, InstanceOptions, SentenceRecord, Span, TruncationReport, Vocab};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAvg,
    pub per_type: Vec<TypeRow>,
    pub confusion: Confusion,
    pub nested_flat: NestedFlatReport,
    pub boundary_errors: usize,
    pub truncation: TruncationReport,
    /// Cells that voted for a type other than the one queried.
    pub other_type_cells: usize,
    /// Echo of the run configuration, if any.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

impl MetricsReport {
    pub fn from_spans(preds: &[Vec<Span>], golds: &[Vec<Span>]) -> Result<Self> {
        let micro = micro_metrics(preds, golds)?;
        let per_type = per_type_report(preds, golds)?;
        let confusion = confusion_matrix(preds, golds)?;
        Ok(MetricsReport {
            micro,
            macro_avg: per_type.macro_avg,
            per_type: per_type.rows,
            boundary_errors: confusion.boundary_errors,
            confusion,
            nested_flat: nested_flat_report(preds, golds)?,
            truncation: TruncationReport::default(),
            other_type_cells: 0,
            config: serde_json::Value::Null,
        })
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                let mut s = serde_json::to_string_pretty(self).expect("report serializes");
                s.push('\n');
                s
            }
            ReportFormat::Markdown => self.to_markdown(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## Overall\n");
        let _ = writeln!(s, "| | P/% | R/% | F1/% |\n|---|---|---|---|");
        let m = &self.micro;
        let _ = writeln!(s, "| Micro | {} | {} | {} |", pct(m.precision), pct(m.recall), pct(m.f1));
        let a = &self.macro_avg;
        let _ = writeln!(s, "| Mac-Avg | {} | {} | {} |", pct(a.precision), pct(a.recall), pct(a.f1));
        let _ = writeln!(s, "\nTP {} / FP {} / FN {}\n", m.tp, m.fp, m.fn_);

        let _ = writeln!(s, "## Per type\n");
        let _ = writeln!(s, "| Type | P/% | R/% | F1/% | TP | FP | FN |\n|---|---|---|---|---|---|---|");
        for r in &self.per_type {
            let mark = if r.absent { "*" } else { "" };
            let p = &r.prf;
            let _ = writeln!(
                s,
                "| {}{mark} | {} | {} | {} | {} | {} | {} |",
                r.entity_type.name(),
                pct(p.precision),
                pct(p.recall),
                pct(p.f1),
                p.tp,
                p.fp,
                p.fn_
            );
        }
        if self.per_type.iter().any(|r| r.absent) {
            let _ = writeln!(s, "\n\\* absent from predictions and gold; counted as 0 in Mac-Avg.");
        }

        let _ = writeln!(s, "\n## Nested / flat recall\n");
        let _ = writeln!(s, "| Subset | Recognized | Total | Recall/% |\n|---|---|---|---|");
        let nf = &self.nested_flat;
        for (name, row) in [
            ("All", nf.all),
            ("Flat", nf.flat),
            ("Nested", nf.nested),
            ("Inner", nf.inner),
            ("Outer", nf.outer),
        ] {
            let _ = match row {
                Some(SubsetRecall { recognized, total, recall }) => {
                    writeln!(s, "| {name} | {recognized} | {total} | {} |", pct(recall))
                }
                None => writeln!(s, "| {name} | 0 | 0 | - |"),
            };
        }

        let _ = writeln!(s, "\n## Confusion (rows predicted, columns gold)\n");
        let names: Vec<&str> = EntityType::ALL.iter().map(|t| t.name()).collect();
        let _ = writeln!(s, "| | {} |", names.join(" | "));
        let _ = writeln!(s, "|---|{}", "---|".repeat(names.len()));
        for (name, row) in names.iter().zip(&self.confusion.matrix) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(s, "| {name} | {} |", cells.join(" | "));
        }
        let _ = writeln!(
            s,
            "\nBoundary errors: {}. Unmatched gold: {}. Truncated instances: {}, dropped entities: {}. Other-type cells: {}.",
            self.boundary_errors,
            self.confusion.unmatched_golds,
            self.truncation.truncated_instances,
            self.truncation.dropped_entities,
            self.other_type_cells
        );
        s
    }
}

/// Fraction as a percentage with two decimals.
pub fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    report.render(format)
}

/// Predicts every record and scores the result against its gold entities.
pub fn evaluate_corpus<S: GridScorer + ?Sized>(
    scorer: &S,
    records: &[SentenceRecord],
    vocab: &Vocab,
    opts: &InstanceOptions,
) -> Result<(MetricsReport, Vec<Vec<PredictedEntity>>)> {
    let mut preds = Vec::with_capacity(records.len());
    let mut truncation = TruncationReport::default();
    let mut other = 0;
    for r in records {
        let p = predict(r, scorer, vocab, opts)?;
        truncation.truncated_instances += p.truncation.truncated_instances;
        truncation.dropped_entities += p.truncation.dropped_entities;
        other += p.other_type_cells;
        preds.push(p.entities);
    }
    let pred_spans: Vec<Vec<Span>> = preds.iter().map(|p| p.iter().map(PredictedEntity::key).collect()).collect();
    let golds: Vec<Vec<Span>> = records.iter().map(SentenceRecord::spans).collect();
    let mut report = MetricsReport::from_spans(&pred_spans, &golds)?;
    report.truncation = truncation;
    report.other_type_cells = other;
    Ok((report, preds))
}
