use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor_core::{uniform_fan_in, Adam, BoundParams, Image, ModelParams, Sgd, Tape, Tensor, Var};

use crate::dataset::{IdentityDataset, FACE_SIZE};
use crate::EmbedderError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub embedding_dim: usize,
    /// Output channels of the stride-2 conv blocks.
    pub widths: Vec<usize>,
    pub input_size: usize,
    /// Inputs are mapped to `(x - 0.5) * input_gain` before the first conv.
    pub input_gain: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            embedding_dim: 64,
            widths: vec![16, 32, 64, 64],
            input_size: FACE_SIZE,
            input_gain: 2.0,
        }
    }
}

/// CNN h mapping an image to a D-dimensional embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    config: EmbedderConfig,
    params: ModelParams,
}

fn conv_name(i: usize) -> String {
    format!("conv{i}")
}

impl Embedder {
    pub fn init(config: EmbedderConfig, seed: u64) -> Result<Self, EmbedderError> {
        if config.embedding_dim < 8 {
            return Err(EmbedderError::Invalid("embedding_dim must be at least 8".into()));
        }
        if config.widths.is_empty() || config.widths.contains(&0) {
            return Err(EmbedderError::Invalid("widths must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut cin = 3;
        for (i, &w) in config.widths.iter().enumerate() {
            p.insert(&format!("{}.weight", conv_name(i)), uniform_fan_in(&mut rng, &[w, cin, 3, 3], cin * 9))?;
            p.insert(&format!("{}.bias", conv_name(i)), uniform_fan_in(&mut rng, &[w], cin * 9))?;
            cin = w;
        }
        let d = config.embedding_dim;
        p.insert("fc.weight", uniform_fan_in(&mut rng, &[d, cin], cin))?;
        p.insert("fc.bias", uniform_fan_in(&mut rng, &[d], cin))?;
        Ok(Embedder { config, params: p })
    }

    pub fn from_params(config: EmbedderConfig, params: ModelParams) -> Result<Self, EmbedderError> {
        let expected = Embedder::init(config.clone(), 0)?;
        if expected.params.len() != params.len() {
            return Err(EmbedderError::Invalid("parameter set does not match the config".into()));
        }
        for (name, t) in expected.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(EmbedderError::Invalid(format!("tensor {name} has the wrong shape")));
            }
        }
        if !params.is_finite() {
            return Err(EmbedderError::Invalid("non-finite parameters".into()));
        }
        Ok(Embedder { config, params })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        self.params.bind(tape, requires_grad)
    }

    /// Forward pass on the tape: N x 3 x S x S to N x D.
    pub fn embed_var(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, EmbedderError> {
        let s = tape.value(x).shape().to_vec();
        let sz = self.config.input_size;
        if s.len() != 4 || s[1] != 3 || s[2] != sz || s[3] != sz {
            return Err(EmbedderError::WrongSize {
                expected: sz,
                got: s,
            });
        }
        let h = tape.add_scalar(x, -0.5);
        let mut h = tape.scale(h, self.config.input_gain);
        for i in 0..self.config.widths.len() {
            let w = p.var(&format!("{}.weight", conv_name(i)))?;
            let b = p.var(&format!("{}.bias", conv_name(i)))?;
            h = tape.conv2d(h, w, Some(b), 2, 1)?;
            h = tape.relu(h);
        }
        let h = tape.global_avg_pool(h)?;
        Ok(tape.linear(h, p.var("fc.weight")?, Some(p.var("fc.bias")?))?)
    }

    /// Embedding of one image.
    pub fn embed_face(&self, image: &Image) -> Result<Vec<f64>, EmbedderError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.to_tensor());
        let z = self.embed_var(&mut tape, &p, x)?;
        Ok(tape.value(z).data().to_vec())
    }

    pub fn save(&self, dir: &Path) -> Result<(), EmbedderError> {
        let echo = serde_json::json!({ "model": "face-embedder", "embedder": self.config });
        Ok(self.params.save(dir, &echo)?)
    }

    pub fn load(dir: &Path) -> Result<Self, EmbedderError> {
        let (params, echo) = ModelParams::load(dir)?;
        if echo.get("model").and_then(|v| v.as_str()) != Some("face-embedder") {
            return Err(EmbedderError::Invalid(format!("{} is not an embedder checkpoint", dir.display())));
        }
        let config: EmbedderConfig = serde_json::from_value(echo["embedder"].clone())
            .map_err(|e| EmbedderError::Invalid(format!("bad embedder config: {e}")))?;
        Embedder::from_params(config, params)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Adam,
    Sgd { momentum: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Multiplier on the cosine logits of the normalised-softmax head.
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            optimizer: Optimizer::Adam,
            head_scale: 4.0,
            seed: 0,
        }
    }
}

enum Opt {
    Adam(Adam),
    Sgd(Sgd),
}

/// Trains the embedder with a normalised-softmax classification head
/// (`scale * cos(z, w_k)` logits, cross-entropy). The head is discarded.
/// Returns the embedder and the per-epoch mean loss.
pub fn train_embedder(
    data: &IdentityDataset,
    config: EmbedderConfig,
    train: &EmbedderTrainConfig,
) -> Result<(Embedder, Vec<f64>), EmbedderError> {
    if data.is_empty() || data.images.len() != data.labels.len() {
        return Err(EmbedderError::Invalid("training set is empty or mislabelled".into()));
    }
    if train.batch == 0 {
        return Err(EmbedderError::Invalid("batch must be positive".into()));
    }
    let classes = data.labels.iter().max().map_or(0, |m| m + 1);
    let mut model = Embedder::init(config, train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x6865_6164);
    let d = model.config.embedding_dim;
    let mut params = model.params.clone();
    params.insert("head.weight", uniform_fan_in(&mut rng, &[classes, d], d))?;
    let mut opt = match train.optimizer {
        Optimizer::Adam => Opt::Adam(Adam::new(train.lr)),
        Optimizer::Sgd { momentum } => Opt::Sgd(Sgd::new(train.lr, momentum)),
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true);
            let x = tape.constant(Image::batch(&imgs)?);
            let z = model.embed_var(&mut tape, &p, x)?;
            let zn = tape.normalize_rows(z)?;
            let wn = tape.normalize_rows(p.var("head.weight")?)?;
            let cos = tape.linear(zn, wn, None)?;
            let logits = tape.scale(cos, train.head_scale);
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(EmbedderError::NonFinite { epoch, loss: lv });
            }
            total += lv * chunk.len() as f64;
            let grads = p.grads(&tape.backward(loss)?);
            match &mut opt {
                Opt::Adam(a) => a.step(&mut params, &grads)?,
                Opt::Sgd(s) => s.step(&mut params, &grads)?,
            }
        }
        log.push(total / data.len() as f64);
    }
    let mut trained = ModelParams::new();
    for (name, t) in params.iter().filter(|(n, _)| !n.starts_with("head.")) {
        trained.insert(name, t.clone())?;
    }
    model = Embedder::from_params(model.config.clone(), trained)?;
    Ok((model, log))
}

/// Embedding tensor helper for callers building their own graphs.
pub fn embedding_tensor(z: &[f64]) -> Tensor {
    Tensor::new(vec![1, z.len()], z.to_vec()).expect("embedding shape")
}
