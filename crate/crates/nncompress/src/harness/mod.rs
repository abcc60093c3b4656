//! Experiment harness: dataset ingestion, model serialization, compression
//! accounting, the pass-composition pipeline runner, and report emission.

pub mod config;
pub mod data;
pub mod model_io;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use data::{load_cifar_binary, load_idx, synthetic_blobs, BlobSpec, Dataset, Split};
pub use model_io::{load_model, save_model};
pub use pipeline::{run_pipeline, Pass, PipelineOptions, PipelineSpec};
pub use report::{
    compression_rate, count_nonzero_weights, emit_report, measure_inference, CompressionReport,
};
