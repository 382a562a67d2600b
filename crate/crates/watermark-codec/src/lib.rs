//! Residual neural watermarking: an encoder that hides an L-bit message in an
//! image as `clamp(I + s tanh(net(I, m)), 0, 1)` and a decoder that recovers
//! the bits.
//!
//! The message enters the encoder as one extra image channel, a tiled sum of
//! signed 8 x 8 DCT carriers. Both networks look at a high-passed copy of the
//! image so the smooth image content does not swamp the faint message signal.

mod codec;
mod message;
mod train;

use thiserror::Error;

pub use codec::{dct_carriers, Codec, CodecConfig, TILE};
pub use message::{bit_accuracy, random_message, random_message_from, Message, RelaxedMessage};
pub use train::{
    composite_loss, evaluate_codec, train_codec, CodecEval, CodecTrainConfig, CodecTrainLog, CompositeLoss,
};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("{0}")]
    Invalid(String),
    #[error("decoder needs at least 8x8 pixels, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("non-finite training loss {loss} in epoch {epoch}")]
    NonFinite { epoch: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
}
