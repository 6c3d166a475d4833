//! Turning probability grids into entities, and scoring them.

pub mod decode;
pub mod metrics;
pub mod report;

pub use decode::{decode_grid, one_hot, predict, Decoded, GoldOracle, GridScorer, PredictedEntity, Prediction};
pub use metrics::{
    confusion_matrix, micro_metrics, nested_flat_report, per_type_report, Confusion, MacroAvg, NestedFlatReport,
    PerTypeReport, Prf, SubsetRecall, TypeRow,
};
pub use report::{evaluate_corpus, pct, render_report, MetricsReport, ReportFormat};
