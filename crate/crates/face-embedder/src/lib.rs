//! Desk-scale face recognition: a procedural identity dataset, a small CNN
//! embedder trained with a normalised-softmax head, and thresholded cosine
//! matching.

mod dataset;
mod embedder;
mod matcher;

use thiserror::Error;

pub use dataset::{
    generate_toy_dataset, generate_toy_dataset_with, image_from_rgb8, image_to_rgb8, load_image_folder,
    toy_sample, IdentityDataset, ToyGeneratorConfig, ToyIdentityDataset, FACE_SIZE,
};
pub use embedder::{embedding_tensor, train_embedder, Embedder, EmbedderConfig, EmbedderTrainConfig, Optimizer};
pub use matcher::{is_match, match_embeddings, pair_stats, similarity, MatcherConfig, PairStats, DEFAULT_TAU};

#[derive(Debug, Error)]
pub enum EmbedderError {
    #[error("{0}")]
    Invalid(String),
    #[error("embedder expects 1 x 3 x {expected} x {expected} style input, got {got:?}")]
    WrongSize { expected: usize, got: Vec<usize> },
    #[error("non-finite training loss {loss} in epoch {epoch}")]
    NonFinite { epoch: usize, loss: f64 },
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
}
