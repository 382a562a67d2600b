use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor_core::{psnr_from_mse, BoundParams, Image, Sgd, Tape, Tensor, Var};

use crate::codec::{Codec, CodecConfig, TILE};
use crate::message::{bit_accuracy, random_message_from, Message, RelaxedMessage};
use crate::CodecError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Side of the square training crops; crops start on the carrier grid.
    pub crop: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            epochs: 30,
            batch: 8,
            lr: 0.05,
            momentum: 0.9,
            crop: 32,
            seed: 0,
        }
    }
}

/// Per-epoch means over training samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainLog {
    pub loss: Vec<f64>,
    pub mse: Vec<f64>,
    pub bce: Vec<f64>,
    pub bit_accuracy: Vec<f64>,
}

/// Tape handles of the training objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct CompositeLoss {
    pub loss: Var,
    pub mse: Var,
    pub bce: Var,
    pub logits: Var,
}

/// `mse(f(x, m), x) + lambda * bce(g(f(x, m)), m)` for a batch `x` and binary
/// targets `m` of shape N x L.
pub fn composite_loss(
    codec: &Codec,
    tape: &mut Tape,
    p: &BoundParams,
    x: Var,
    targets: &Tensor,
) -> Result<CompositeLoss, CodecError> {
    let m = tape.constant(targets.clone());
    let xw = codec.embed_var(tape, p, x, m)?;
    let mse = tape.mse_loss(xw, x)?;
    let logits = codec.extract_var(tape, p, xw)?;
    let bce = tape.bce_with_logits(logits, targets)?;
    let weighted = tape.scale(bce, codec.config().lambda);
    let loss = tape.add(mse, weighted)?;
    Ok(CompositeLoss { loss, mse, bce, logits })
}

/// Minimises `mse(I_w, I) + lambda * bce(g(I_w), m)` with SGD and momentum,
/// drawing a fresh random message for every sample at every step.
pub fn train_codec(
    images: &[Image],
    config: CodecConfig,
    train: &CodecTrainConfig,
) -> Result<(Codec, CodecTrainLog), CodecError> {
    let first = images
        .first()
        .ok_or_else(|| CodecError::Invalid("training set is empty".into()))?;
    let (h, w) = (first.height(), first.width());
    if images.iter().any(|im| im.height() != h || im.width() != w || im.channels() != 3) {
        return Err(CodecError::Invalid("training images must share one size and have 3 channels".into()));
    }
    if train.crop < TILE || train.crop % TILE != 0 || train.crop > h.min(w) {
        return Err(CodecError::Invalid(format!(
            "crop {} must be a multiple of {TILE} no larger than {h}x{w}",
            train.crop
        )));
    }
    if train.batch == 0 {
        return Err(CodecError::Invalid("batch must be positive".into()));
    }
    let mut codec = Codec::init(config, train.seed)?;
    let l = codec.message_bits();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7261_696e);
    let mut opt = Sgd::new(train.lr, train.momentum);
    let mut log = CodecTrainLog::default();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let (gy, gx) = ((h - train.crop) / TILE, (w - train.crop) / TILE);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut tot, mut tot_mse, mut tot_bce, mut tot_acc) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(train.batch) {
            let oy = TILE * rng.random_range(0..=gy);
            let ox = TILE * rng.random_range(0..=gx);
            let crops = chunk
                .iter()
                .map(|&i| images[i].crop(oy, ox, train.crop, train.crop))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&Image> = crops.iter().collect();
            let msgs = chunk
                .iter()
                .map(|_| random_message_from(l, &mut rng))
                .collect::<Result<Vec<Message>, _>>()?;
            let mdata: Vec<f64> = msgs.iter().flat_map(|m| m.to_f64()).collect();
            let targets = Tensor::new(vec![chunk.len(), l], mdata)?;

            let mut tape = Tape::new();
            let p = codec.bind(&mut tape, true);
            let x = tape.constant(Image::batch(&refs)?);
            let CompositeLoss { loss, mse, bce, logits } = composite_loss(&codec, &mut tape, &p, x, &targets)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(CodecError::NonFinite { epoch, loss: lv });
            }
            let n = chunk.len() as f64;
            tot += lv * n;
            tot_mse += tape.value(mse).item()? * n;
            tot_bce += tape.value(bce).item()? * n;
            let correct = tape
                .value(logits)
                .data()
                .iter()
                .zip(targets.data())
                .filter(|(lg, t)| f64::from(u8::from(**lg >= 0.0)) == **t)
                .count();
            tot_acc += correct as f64 / l as f64;
            let grads = tape.backward(loss)?;
            opt.step(codec.params_mut(), &p.grads(&grads))?;
        }
        let n = images.len() as f64;
        log.loss.push(tot / n);
        log.mse.push(tot_mse / n);
        log.bce.push(tot_bce / n);
        log.bit_accuracy.push(tot_acc / n);
    }
    Ok((codec, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecEval {
    pub bit_accuracy: f64,
    /// PSNR of the pooled mean squared error over all evaluated images.
    pub psnr_db: f64,
    pub n_images: usize,
}

/// Embeds a fresh random message in every image and decodes it back.
pub fn evaluate_codec(codec: &Codec, images: &[Image], seed: u64) -> Result<CodecEval, CodecError> {
    if images.is_empty() {
        return Err(CodecError::Invalid("evaluation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut acc, mut mse) = (0.0, 0.0);
    for im in images {
        let m = random_message_from(codec.message_bits(), &mut rng)?;
        let wm = codec.embed(im, &RelaxedMessage::from(&m))?;
        acc += bit_accuracy(&codec.extract_bits(&wm)?, &m)?;
        mse += wm.mse(im)?;
    }
    let n = images.len() as f64;
    Ok(CodecEval {
        bit_accuracy: acc / n,
        psnr_db: psnr_from_mse(mse / n),
        n_images: images.len(),
    })
}
