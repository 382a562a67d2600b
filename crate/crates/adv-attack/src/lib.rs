//! Joint attack on watermarked face matching.
//!
//! Finds an l-infinity bounded perturbation `delta` and a watermark message
//! `m` minimising `-s(h(I_p'), z_r) + s(h(f(I_p', m)), z_r)` with
//! `I_p' = clamp(I_p + delta, 0, 1)`: the probe should still match before
//! watermarking and stop matching after. `delta` takes signed-gradient PGD
//! steps; `m` is relaxed to `[0, 1]^L`, takes projected gradient steps and is
//! rounded once at the end.

mod attack;
mod constraints;

use thiserror::Error;

pub use attack::{
    adversarial_watermark_attack, attack_loss, attack_loss_var, attack_with_reference, brute_force_message_oracle,
    message_round, perturbed_probe, pgd_delta_round, post_similarity, round_message, AttackConfig,
    AttackResult, MessageInit, Models,
};
pub use constraints::{project_delta, ConstraintReport};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("{0}")]
    Invalid(String),
    #[error("non-finite objective during {stage} after {} recorded steps", trace.len())]
    NonFinite { stage: &'static str, trace: Vec<f64> },
    #[error(transparent)]
    Tensor(#[from] tensor_core::TensorError),
    #[error(transparent)]
    Codec(#[from] watermark_codec::CodecError),
    #[error(transparent)]
    Embedder(#[from] face_embedder::EmbedderError),
}
