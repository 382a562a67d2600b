use serde::{Deserialize, Serialize};
use tensor_core::{Tape, Tensor};

use crate::dataset::IdentityDataset;
use crate::embedder::Embedder;
use crate::EmbedderError;

/// Default matching threshold.
pub const DEFAULT_TAU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub tau: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig { tau: DEFAULT_TAU }
    }
}

impl MatcherConfig {
    pub fn new(tau: f64) -> Result<Self, EmbedderError> {
        if !(tau > -1.0 && tau < 1.0) {
            return Err(EmbedderError::Invalid(format!("tau {tau} must lie in (-1, 1)")));
        }
        Ok(MatcherConfig { tau })
    }
}

/// Cosine similarity of two embeddings.
pub fn similarity(zp: &[f64], zr: &[f64]) -> Result<f64, EmbedderError> {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(zp.to_vec()));
    let b = tape.constant(Tensor::vector(zr.to_vec()));
    let c = tape.cosine_similarity(a, b)?;
    Ok(tape.value(c).item()?)
}

/// Match decision for a similarity score; the threshold itself matches.
pub fn is_match(similarity: f64, config: &MatcherConfig) -> bool {
    similarity >= config.tau
}

pub fn match_embeddings(zp: &[f64], zr: &[f64], config: &MatcherConfig) -> Result<bool, EmbedderError> {
    Ok(is_match(similarity(zp, zr)?, config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub genuine: Vec<f64>,
    pub impostor_mean: f64,
}

impl PairStats {
    pub fn genuine_mean(&self) -> f64 {
        self.genuine.iter().sum::<f64>() / self.genuine.len().max(1) as f64
    }

    /// Fraction of genuine pairs matched at `tau`.
    pub fn accuracy(&self, config: &MatcherConfig) -> f64 {
        let hits = self.genuine.iter().filter(|&&s| is_match(s, config)).count();
        hits as f64 / self.genuine.len().max(1) as f64
    }
}

/// Genuine similarity of every probe/reference pair and the mean similarity
/// of all cross-identity probe/reference combinations.
pub fn pair_stats(embedder: &Embedder, data: &IdentityDataset) -> Result<PairStats, EmbedderError> {
    let pairs = data.pairs();
    let mut probes = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    for &(p, r) in &pairs {
        probes.push(embedder.embed_face(&data.images[p])?);
        refs.push(embedder.embed_face(&data.images[r])?);
    }
    let genuine = probes
        .iter()
        .zip(&refs)
        .map(|(p, r)| similarity(p, r))
        .collect::<Result<Vec<_>, _>>()?;
    let (mut imp, mut n) = (0.0, 0usize);
    for (i, p) in probes.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            if i != j {
                imp += similarity(p, r)?;
                n += 1;
            }
        }
    }
    Ok(PairStats {
        genuine,
        impostor_mean: if n == 0 { 0.0 } else { imp / n as f64 },
    })
}
