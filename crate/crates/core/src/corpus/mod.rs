//! Corpus loading, validation, vocabulary, MRC instance construction and
//! dataset statistics.

pub mod instance;
pub mod load;
pub mod mlm;
pub mod query;
pub mod stats;
pub mod synthetic;
pub mod types;
pub mod vocab;

pub use instance::{build_all_instances, build_instance, InstanceOptions, LabelScheme, MrcInstance, TruncationReport};
pub use load::{load_corpus, parse_corpus, save_corpus, validate, RawRecord, Violation};
pub use mlm::mlm_corpus;
pub use query::{all_queries, query_for, query_for_name};
pub use stats::{compute_stats, DatasetStats};
pub use synthetic::{random_record, synthetic_corpus, SyntheticOptions};
pub use types::{EntityAnnotation, EntityType, SentenceRecord, Span, NUM_TYPES};
pub use vocab::{build_vocab, Vocab};

/// Vocabulary over record texts plus every query string, so query
/// characters never collapse to `<unk>`.
pub fn build_pipeline_vocab(records: &[SentenceRecord], min_freq: usize) -> crate::Result<Vocab> {
    let queries: Vec<&str> = all_queries().collect();
    Vocab::build(records.iter().map(|r| r.text.as_str()).chain(queries), min_freq)
}
