//! Experiment configuration, loaded from JSON with defaults for every field.

use std::path::{Path, PathBuf};

use adv_attack::AttackConfig;
use face_embedder::{
    generate_toy_dataset_with, load_image_folder, EmbedderConfig, EmbedderTrainConfig, IdentityDataset,
    ToyGeneratorConfig,
};
use serde::{Deserialize, Serialize};
use watermark_codec::{CodecConfig, CodecTrainConfig};

use crate::BenchError;

/// Where a set of labelled face images comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Toy {
        identities: usize,
        per_identity: usize,
        seed: u64,
        #[serde(default)]
        generator: ToyGeneratorConfig,
    },
    /// `<path>/<identity>/<image>.png`, resized to `size x size`.
    Folder { path: PathBuf, size: usize },
}

impl DatasetSpec {
    pub fn toy(identities: usize, per_identity: usize, seed: u64) -> Self {
        DatasetSpec::Toy {
            identities,
            per_identity,
            seed,
            generator: ToyGeneratorConfig::default(),
        }
    }

    pub fn load(&self) -> Result<IdentityDataset, BenchError> {
        Ok(match self {
            DatasetSpec::Toy {
                identities,
                per_identity,
                seed,
                generator,
            } => generate_toy_dataset_with(generator, *identities, *per_identity, *seed)?,
            DatasetSpec::Folder { path, size } => load_image_folder(path, *size)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run seed. Copied into the training and attack seeds by [`ExperimentConfig::resolved`].
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Training images for both the codec and the embedder.
    pub train_data: DatasetSpec,
    /// Held-out images for codec evaluation and the robustness sweep.
    pub holdout_data: DatasetSpec,
    /// Identities whose first two samples form the probe/reference pairs.
    pub eval_data: DatasetSpec,
    pub codec: CodecConfig,
    pub codec_train: CodecTrainConfig,
    pub embedder: EmbedderConfig,
    pub embedder_train: EmbedderTrainConfig,
    pub attack: AttackConfig,
    /// Perturbation budgets in unit pixel scale, ascending.
    pub epsilon_grid: Vec<f64>,
    pub tau: f64,
    /// Attack at most this many pairs.
    pub max_pairs: Option<usize>,
    /// Campaign worker threads.
    pub workers: usize,
    /// Pairs whose image and difference dumps are written at the largest budget.
    pub diff_pairs: usize,
    /// Also store every perturbation as a tensor checkpoint.
    pub save_deltas: bool,
    /// Checkpoint directories; default to `<out_dir>/models/{codec,embedder}`.
    pub codec_dir: Option<PathBuf>,
    pub embedder_dir: Option<PathBuf>,
}

/// `{0, 0.5, ..., 4} / 255`.
pub fn default_epsilon_grid() -> Vec<f64> {
    (0..=8).map(|k| k as f64 * 0.5 / 255.0).collect()
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            train_data: DatasetSpec::toy(100, 2, 0),
            holdout_data: DatasetSpec::toy(100, 2, 1),
            eval_data: DatasetSpec::toy(100, 2, 7),
            codec: CodecConfig::default(),
            codec_train: CodecTrainConfig::default(),
            embedder: EmbedderConfig::default(),
            embedder_train: EmbedderTrainConfig::default(),
            attack: AttackConfig::default(),
            epsilon_grid: default_epsilon_grid(),
            tau: face_embedder::DEFAULT_TAU,
            max_pairs: None,
            workers: 1,
            diff_pairs: 3,
            save_deltas: false,
            codec_dir: None,
            embedder_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
    }

    /// Copy with the run seed pushed into every nested seed field.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.codec_train.seed = c.seed;
        c.embedder_train.seed = c.seed;
        c.attack.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.epsilon_grid.is_empty() {
            return bad("epsilon_grid is empty".into());
        }
        if self.epsilon_grid.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return bad(format!("epsilon_grid values must be finite and >= 0: {:?}", self.epsilon_grid));
        }
        if self.epsilon_grid.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("epsilon_grid must be strictly ascending: {:?}", self.epsilon_grid));
        }
        if !(self.tau > -1.0 && self.tau < 1.0) {
            return bad(format!("tau {} must lie in (-1, 1)", self.tau));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        self.codec.validate()?;
        self.attack.validate()?;
        Ok(())
    }

    pub fn codec_path(&self) -> PathBuf {
        self.codec_dir.clone().unwrap_or_else(|| self.out_dir.join("models").join("codec"))
    }

    pub fn embedder_path(&self) -> PathBuf {
        self.embedder_dir.clone().unwrap_or_else(|| self.out_dir.join("models").join("embedder"))
    }

    pub fn matcher(&self) -> Result<face_embedder::MatcherConfig, BenchError> {
        Ok(face_embedder::MatcherConfig::new(self.tau)?)
    }
}
