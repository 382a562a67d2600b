//! Experiment harness for the watermarking attack on face matching.
//!
//! Generates data, trains the codec and the embedder, runs attack campaigns
//! over a perturbation grid and writes the accuracy table, a per-pair JSON
//! log, a long-format similarity table and image dumps. Every command writes
//! a `run.json` naming the resolved configuration and the SHA-256 of each
//! file it produced.

pub mod artifacts;
pub mod campaign;
pub mod cli;
pub mod config;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use artifacts::{delta_image, diff_image, export_diff_images, png_bytes, read_png, ArtifactLog, DiffPair};
pub use campaign::{
    aggregate, epsilon_255, load_codec, load_embedder, export_similarity_distributions, pair_seed, parse_records_jsonl, records_jsonl,
    report_csv, report_markdown, run_attack_experiment, similarity_csv, Campaign, LoadedModels, PairOutcome,
    PairRecord, ReportRow, REFERENCE_BLOCK_LABEL, FULL_SCALE_REFERENCE, RECORD_SCHEMA, REPORT_CSV_HEADER, SIMILARITY_CSV_HEADER,
};
pub use config::{default_epsilon_grid, DatasetSpec, ExperimentConfig};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("train first: no {what} checkpoint at {} (run `{command}`)", path.display())]
    TrainFirst {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("image: {0}")]
    Image(String),
    #[error("constraint violated at epsilon {epsilon}, pair {pair}: {report:?}")]
    Constraint {
        epsilon: f64,
        pair: usize,
        report: adv_attack::ConstraintReport,
    },
    #[error(transparent)]
    Attack(#[from] adv_attack::AttackError),
    #[error(transparent)]
    Codec(#[from] watermark_codec::CodecError),
    #[error(transparent)]
    Embedder(#[from] face_embedder::EmbedderError),
    #[error(transparent)]
    Transform(#[from] image_transforms::TransformError),
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
}

impl BenchError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        BenchError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
    }
}
