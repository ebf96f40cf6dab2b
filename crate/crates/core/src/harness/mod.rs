//! Training, evaluation, checkpointing, gradient verification, and corpus
//! validation: the library surface behind the command-line harness.

pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod train;
pub mod validate;

pub use checkpoint::Checkpoint;
pub use config::{OptimizerKind, RunConfig, DATA_ROOT_ENV};
pub use evaluate::{evaluate, DetectionRecord, EvalReport};
pub use gradcheck::{gradcheck, GradcheckReport};
pub use train::{metrics_to_ndjson, train, MetricsRecord, TrainOutput};
pub use validate::{validate_corpus_file, CorpusValidation};
