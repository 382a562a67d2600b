use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tensor_core::{uniform_fan_in, BoundParams, Image, ModelParams, Tape, Tensor, Var};

use crate::message::{Message, RelaxedMessage};
use crate::CodecError;

/// Carrier tile side. Messages are written as a sum of 8 x 8 DCT basis
/// patterns repeated over the image.
pub const TILE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    /// Message length L.
    pub message_bits: usize,
    /// Channels of each hidden encoder convolution.
    pub width: usize,
    /// Number of hidden 3 x 3 conv + relu encoder blocks.
    pub encoder_blocks: usize,
    /// Residual scale s in `clamp(I + s tanh(net), 0, 1)`.
    pub strength: f64,
    /// Gain on the high-passed image fed to the encoder; 0 feeds the raw image.
    pub encoder_highpass_gain: f64,
    /// Gain on the high-passed image seen by the decoder.
    pub decoder_highpass_gain: f64,
    /// Channels of the decoder's tile-wise projection.
    pub decoder_width: usize,
    /// Number of lowest-frequency AC carriers skipped before the L used ones.
    pub carrier_offset: usize,
    /// Weight of the decoding loss.
    pub lambda: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            message_bits: 48,
            width: 16,
            encoder_blocks: 1,
            strength: 0.035,
            encoder_highpass_gain: 100.0,
            decoder_highpass_gain: 100.0,
            decoder_width: 64,
            carrier_offset: 9,
            lambda: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        let bad = |m: &str| Err(CodecError::Invalid(m.to_string()));
        if self.message_bits == 0 {
            return bad("message_bits must be at least 1");
        }
        if self.carrier_offset + self.message_bits > TILE * TILE - 1 {
            return bad("carrier_offset + message_bits exceeds the 63 AC carriers of an 8x8 tile");
        }
        if self.width == 0 || self.encoder_blocks == 0 || self.decoder_width == 0 {
            return bad("widths and block counts must be positive");
        }
        if !(self.strength > 0.0) || !self.strength.is_finite() {
            return bad("strength must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.encoder_highpass_gain < 0.0 || self.decoder_highpass_gain <= 0.0 {
            return bad("high-pass gains must be non-negative (decoder positive)");
        }
        Ok(())
    }
}

/// Orthonormal 8 x 8 DCT-II basis patterns, AC only, ordered by `(u + v, u)`
/// and scaled by 8 so each has unit RMS amplitude.
pub fn dct_carriers(offset: usize, count: usize) -> Vec<[f64; TILE * TILE]> {
    let mut keys: Vec<(usize, usize)> = (0..TILE)
        .flat_map(|u| (0..TILE).map(move |v| (u, v)))
        .filter(|&k| k != (0, 0))
        .collect();
    keys.sort_by_key(|&(u, v)| (u + v, u));
    let n = TILE as f64;
    let coef = |k: usize| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
    keys.into_iter()
        .skip(offset)
        .take(count)
        .map(|(u, v)| {
            let mut p = [0.0; TILE * TILE];
            for y in 0..TILE {
                for x in 0..TILE {
                    let cy = ((2 * y + 1) as f64 * u as f64 * std::f64::consts::PI / (2.0 * n)).cos();
                    let cx = ((2 * x + 1) as f64 * v as f64 * std::f64::consts::PI / (2.0 * n)).cos();
                    p[y * TILE + x] = 8.0 * coef(u) * coef(v) * cy * cx;
                }
            }
            p
        })
        .collect()
}

/// Fixed depthwise `x - mean3x3(x)` filter for three channels, zero padded.
fn highpass_weight() -> Tensor {
    let mut w = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        for k in 0..9 {
            w[(c * 3 + c) * 9 + k] = if k == 4 { 1.0 - 1.0 / 9.0 } else { -1.0 / 9.0 };
        }
    }
    Tensor::new(vec![3, 3, 3, 3], w).expect("highpass shape")
}

/// Encoder f and decoder g with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    config: CodecConfig,
    params: ModelParams,
    carriers: Tensor,
    highpass: Tensor,
}

const CHANNELS: usize = 3;

/// Names of the encoder's hidden convolutions.
fn enc_conv(i: usize) -> String {
    format!("enc.conv{i}")
}

impl Codec {
    /// Randomly initialised codec.
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self, CodecError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let mut cin = CHANNELS + 1;
        for i in 0..config.encoder_blocks {
            let fan = cin * 9;
            p.insert(&format!("{}.weight", enc_conv(i)), uniform_fan_in(&mut rng, &[config.width, cin, 3, 3], fan))?;
            p.insert(&format!("{}.bias", enc_conv(i)), uniform_fan_in(&mut rng, &[config.width], fan))?;
            cin = config.width;
        }
        let fan = cin * 9;
        p.insert("enc.out.weight", uniform_fan_in(&mut rng, &[CHANNELS, cin, 3, 3], fan))?;
        p.insert("enc.out.bias", uniform_fan_in(&mut rng, &[CHANNELS], fan))?;
        let fan = CHANNELS * TILE * TILE;
        let dw = config.decoder_width;
        p.insert("dec.patch.weight", uniform_fan_in(&mut rng, &[dw, CHANNELS, TILE, TILE], fan))?;
        p.insert("dec.patch.bias", uniform_fan_in(&mut rng, &[dw], fan))?;
        p.insert("dec.fc.weight", uniform_fan_in(&mut rng, &[config.message_bits, dw], dw))?;
        p.insert("dec.fc.bias", uniform_fan_in(&mut rng, &[config.message_bits], dw))?;
        Self::from_params(config, p)
    }

    pub fn from_params(config: CodecConfig, params: ModelParams) -> Result<Self, CodecError> {
        config.validate()?;
        let pats = dct_carriers(config.carrier_offset, config.message_bits);
        // Row r of the carrier matrix holds tile position r across all carriers.
        let l = config.message_bits;
        let mut data = vec![0.0; TILE * TILE * l];
        for (j, pat) in pats.iter().enumerate() {
            for (r, v) in pat.iter().enumerate() {
                data[r * l + j] = *v;
            }
        }
        let carriers = Tensor::new(vec![TILE * TILE, l], data)?;
        let codec = Codec {
            config,
            params,
            carriers,
            highpass: highpass_weight(),
        };
        codec.check_params()?;
        Ok(codec)
    }

    fn check_params(&self) -> Result<(), CodecError> {
        let mut names = vec![];
        for i in 0..self.config.encoder_blocks {
            names.push(format!("{}.weight", enc_conv(i)));
            names.push(format!("{}.bias", enc_conv(i)));
        }
        for n in ["enc.out.weight", "enc.out.bias", "dec.patch.weight", "dec.patch.bias", "dec.fc.weight", "dec.fc.bias"] {
            names.push(n.to_string());
        }
        if names.len() != self.params.len() {
            return Err(CodecError::Invalid(format!(
                "expected {} parameter tensors, found {}",
                names.len(),
                self.params.len()
            )));
        }
        for n in &names {
            self.params.get(n)?;
        }
        let fc = self.params.get("dec.fc.weight")?.shape();
        if fc != [self.config.message_bits, self.config.decoder_width] {
            return Err(CodecError::Invalid(format!("dec.fc.weight has shape {fc:?}")));
        }
        if !self.params.is_finite() {
            return Err(CodecError::Invalid("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn message_bits(&self) -> usize {
        self.config.message_bits
    }

    /// Zeroes the encoder's final layer, which makes `embed` the identity map.
    pub fn zero_final_layer(&mut self) {
        for n in ["enc.out.weight", "enc.out.bias"] {
            let t = self.params.get_mut(n).expect("encoder output layer");
            t.data_mut().fill(0.0);
        }
    }

    /// Binds all parameters to a tape.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        self.params.bind(tape, requires_grad)
    }

    fn highpass(&self, tape: &mut Tape, x: Var, gain: f64) -> Result<Var, CodecError> {
        let w = tape.constant(self.highpass.clone());
        let h = tape.conv2d(x, w, None, 1, 1)?;
        Ok(tape.scale(h, gain))
    }

    /// Message plane `tile(sum_l (2 m_l - 1) T_l)` for an N x L message.
    fn message_plane(&self, tape: &mut Tape, m: Var, h: usize, w: usize) -> Result<Var, CodecError> {
        let signed = tape.scale(m, 2.0);
        let signed = tape.add_scalar(signed, -1.0);
        let c = tape.constant(self.carriers.clone());
        let tile = tape.linear(signed, c, None)?;
        Ok(tape.tile_pattern(tile, TILE, TILE, h, w)?)
    }

    /// Encoder on the tape: `x` is N x 3 x H x W in `[0, 1]`, `m` is N x L in `[0, 1]`.
    pub fn embed_var(&self, tape: &mut Tape, p: &BoundParams, x: Var, m: Var) -> Result<Var, CodecError> {
        let xs = tape.value(x).shape().to_vec();
        let ms = tape.value(m).shape().to_vec();
        if xs.len() != 4 || xs[1] != CHANNELS {
            return Err(CodecError::Invalid(format!("encoder input must be N x 3 x H x W, got {xs:?}")));
        }
        if ms != [xs[0], self.config.message_bits] {
            return Err(CodecError::Invalid(format!(
                "message shape {ms:?} does not match batch {} and L = {}",
                xs[0], self.config.message_bits
            )));
        }
        let plane = self.message_plane(tape, m, xs[2], xs[3])?;
        let xin = if self.config.encoder_highpass_gain > 0.0 {
            self.highpass(tape, x, self.config.encoder_highpass_gain)?
        } else {
            x
        };
        let mut h = tape.concat(&[xin, plane], 1)?;
        for i in 0..self.config.encoder_blocks {
            let w = p.var(&format!("{}.weight", enc_conv(i)))?;
            let b = p.var(&format!("{}.bias", enc_conv(i)))?;
            h = tape.conv2d(h, w, Some(b), 1, 1)?;
            h = tape.relu(h);
        }
        let (w, b) = (p.var("enc.out.weight")?, p.var("enc.out.bias")?);
        let r = tape.conv2d(h, w, Some(b), 1, 1)?;
        let r = tape.tanh(r);
        let r = tape.scale(r, self.config.strength);
        let y = tape.add(x, r)?;
        Ok(tape.clamp(y, 0.0, 1.0)?)
    }

    /// Decoder logits on the tape, N x L, for an N x 3 x H x W input with H, W >= 8.
    pub fn extract_var(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, CodecError> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != CHANNELS {
            return Err(CodecError::Invalid(format!("decoder input must be N x 3 x H x W, got {xs:?}")));
        }
        if xs[2] < TILE || xs[3] < TILE {
            return Err(CodecError::TooSmall {
                height: xs[2],
                width: xs[3],
            });
        }
        let h = self.highpass(tape, x, self.config.decoder_highpass_gain)?;
        let (w, b) = (p.var("dec.patch.weight")?, p.var("dec.patch.bias")?);
        let h = tape.conv2d(h, w, Some(b), TILE, 0)?;
        let h = tape.relu(h);
        let h = tape.global_avg_pool(h)?;
        let (w, b) = (p.var("dec.fc.weight")?, p.var("dec.fc.bias")?);
        Ok(tape.linear(h, w, Some(b))?)
    }

    /// Watermarks one image with a binary or relaxed message.
    pub fn embed(&self, image: &Image, message: &RelaxedMessage) -> Result<Image, CodecError> {
        if message.len() != self.config.message_bits {
            return Err(CodecError::Invalid(format!(
                "message has {} bits, codec expects {}",
                message.len(),
                self.config.message_bits
            )));
        }
        image.check_unit_range("embed")?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.to_tensor());
        let m = tape.constant(Tensor::new(vec![1, message.len()], message.values().to_vec())?);
        let y = self.embed_var(&mut tape, &p, x, m)?;
        Ok(Image::from_tensor(tape.value(y))?)
    }

    pub fn embed_bits(&self, image: &Image, message: &Message) -> Result<Image, CodecError> {
        self.embed(image, &RelaxedMessage::from(message))
    }

    /// Decoder logits for one image.
    pub fn extract(&self, image: &Image) -> Result<Vec<f64>, CodecError> {
        image.check_unit_range("extract")?;
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(image.to_tensor());
        let y = self.extract_var(&mut tape, &p, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Thresholded decoder output: bit is 1 when sigmoid(logit) >= 0.5.
    pub fn extract_bits(&self, image: &Image) -> Result<Message, CodecError> {
        let logits = self.extract(image)?;
        Message::new(logits.iter().map(|&l| u8::from(l >= 0.0)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<(), CodecError> {
        let echo = serde_json::json!({ "model": "watermark-codec", "codec": self.config });
        Ok(self.params.save(dir, &echo)?)
    }

    pub fn load(dir: &Path) -> Result<Self, CodecError> {
        let (params, echo) = ModelParams::load(dir)?;
        if echo.get("model").and_then(|v| v.as_str()) != Some("watermark-codec") {
            return Err(CodecError::Invalid(format!("{} is not a codec checkpoint", dir.display())));
        }
        let config: CodecConfig = serde_json::from_value(echo["codec"].clone())
            .map_err(|e| CodecError::Invalid(format!("bad codec config: {e}")))?;
        Codec::from_params(config, params)
    }
}
