//! Non-adversarial image transforms applied after watermarking, and a sweep
//! that measures how much of the hidden message survives each of them.
//!
//! Cropped and resized images are decoded at their reduced size; the decoder
//! pools globally and accepts any input of at least 8 x 8 pixels.

mod sweep;
mod transform;

use thiserror::Error;

pub use sweep::{robustness_sweep, sweep_to_csv, standard_grid, SweepRow, SWEEP_CSV_HEADER};
pub use transform::{apply_transform, jpeg_round_trip, TransformKind, TransformSpec};

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("invalid {kind} parameter {value}: {expected}")]
    InvalidParameter {
        kind: TransformKind,
        value: f64,
        expected: &'static str,
    },
    #[error("{kind} with parameter {value} leaves an empty {height}x{width} image")]
    Empty {
        kind: TransformKind,
        value: f64,
        height: usize,
        width: usize,
    },
    #[error("jpeg needs a 3-channel image, got {0} channels")]
    Channels(usize),
    #[error("jpeg codec failed: {0}")]
    Jpeg(String),
    #[error("sweep needs at least one image and one transform")]
    EmptySweep,
    #[error(transparent)]
    Codec(#[from] watermark_codec::CodecError),
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
}
