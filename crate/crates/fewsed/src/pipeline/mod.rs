//! Corpus ingestion, episode construction, synthetic data generation,
//! configuration and end-to-end orchestration.

pub mod config;
pub mod corpus;
pub mod episode;
pub mod run;
pub mod synth;

pub use config::{RunConfig, TiMode};
pub use corpus::{AnnotationRow, AnnotationTable, CorpusManifest, ManifestEntry, Split};
pub use episode::{build_episode, flatten_segment, frame_probabilities, segment_starts};
pub use run::{
    adapt_detection, load_mel, run_detection, train_base_from_manifest, AdaptRecord, AdaptReport,
    BaseTrainOutput, FileReport, RunReport,
};
pub use synth::{synth_corpus, SynthSpec};
