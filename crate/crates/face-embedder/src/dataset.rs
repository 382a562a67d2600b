//! Procedural identity dataset.
//!
//! Each identity is a soft elliptical "face" of a tinted base colour carrying
//! a few Gabor-like sinusoid patches, drawn on a tinted background. Samples
//! of one identity differ by a small translation, a brightness factor and
//! pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tensor_core::Image;

use crate::EmbedderError;

pub const FACE_SIZE: usize = 112;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyGeneratorConfig {
    pub size: usize,
    pub components: usize,
    pub amplitude: (f64, f64),
    /// Spatial frequency range in cycles per pixel.
    pub frequency: (f64, f64),
    pub tint: f64,
    pub max_shift: f64,
    pub brightness_jitter: f64,
    pub noise_sigma: f64,
}

impl Default for ToyGeneratorConfig {
    fn default() -> Self {
        ToyGeneratorConfig {
            size: FACE_SIZE,
            components: 4,
            amplitude: (0.04, 0.10),
            frequency: (0.05, 0.25),
            tint: 0.04,
            max_shift: 4.0,
            brightness_jitter: 0.10,
            noise_sigma: 0.02,
        }
    }
}

/// Labelled images; `labels[i]` is the identity of `images[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
}

pub type ToyIdentityDataset = IdentityDataset;

impl IdentityDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_identities(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    /// Probe/reference index pairs: the first two samples of every identity,
    /// in order of first appearance.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut seen: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, &lab) in self.labels.iter().enumerate() {
            match seen.iter_mut().find(|(l, _)| *l == lab) {
                Some((_, v)) => v.push(i),
                None => seen.push((lab, vec![i])),
            }
        }
        seen.into_iter()
            .filter(|(_, v)| v.len() >= 2)
            .map(|(_, v)| (v[0], v[1]))
            .collect()
    }
}

struct Component {
    freq: f64,
    cos_t: f64,
    sin_t: f64,
    phase: f64,
    cx: f64,
    cy: f64,
    sigma: f64,
    color: [f64; 3],
}

struct Identity {
    bg: [f64; 3],
    base: [f64; 3],
    ellipse: (f64, f64, f64, f64, f64),
    comps: Vec<Component>,
}

/// Independent random stream for a `(seed, identity, slot)` triple.
fn stream(seed: u64, identity: u64, slot: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&identity.to_le_bytes());
    key[16..24].copy_from_slice(&slot.to_le_bytes());
    key[24..].copy_from_slice(b"toyfaces");
    ChaCha8Rng::from_seed(key)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn identity_params(cfg: &ToyGeneratorConfig, seed: u64, id: usize) -> Identity {
    let mut rng = stream(seed, id as u64, 0);
    let t = cfg.tint;
    let tinted = |c: [f64; 3], rng: &mut ChaCha8Rng| c.map(|v| v + uniform(rng, (-t, t)));
    let bg = tinted([0.35, 0.35, 0.38], &mut rng);
    let base = tinted([0.60, 0.50, 0.45], &mut rng);
    let ellipse = (
        uniform(&mut rng, (-3.0, 3.0)),
        uniform(&mut rng, (-3.0, 3.0)),
        uniform(&mut rng, (34.0, 42.0)),
        uniform(&mut rng, (42.0, 50.0)),
        uniform(&mut rng, (-0.2, 0.2)),
    );
    let comps = (0..cfg.components)
        .map(|_| {
            let mut dir: [f64; 3] = [0.0; 3];
            for d in dir.iter_mut() {
                *d = rng.sample(StandardNormal);
            }
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let freq = uniform(&mut rng, cfg.frequency);
            let theta = uniform(&mut rng, (0.0, std::f64::consts::PI));
            let phase = uniform(&mut rng, (0.0, 2.0 * std::f64::consts::PI));
            let cx = uniform(&mut rng, (-22.0, 22.0));
            let cy = uniform(&mut rng, (-22.0, 22.0));
            let sigma = uniform(&mut rng, (10.0, 22.0));
            let amp = uniform(&mut rng, cfg.amplitude);
            Component {
                freq,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                phase,
                cx,
                cy,
                sigma,
                color: dir.map(|v| v / n * amp),
            }
        })
        .collect();
    Identity {
        bg,
        base,
        ellipse,
        comps,
    }
}

fn render(cfg: &ToyGeneratorConfig, p: &Identity, tx: f64, ty: f64) -> Vec<f64> {
    let s = cfg.size;
    let half = s as f64 / 2.0;
    let (ex, ey, a, b, rot) = p.ellipse;
    let (cr, sr) = (rot.cos(), rot.sin());
    let mut out = vec![0.0; s * s * 3];
    for yy in 0..s {
        for xx in 0..s {
            let x = xx as f64 - half + 0.5 - tx;
            let y = yy as f64 - half + 0.5 - ty;
            let xr = (x - ex) * cr + (y - ey) * sr;
            let yr = -(x - ex) * sr + (y - ey) * cr;
            let d = (xr / a).powi(2) + (yr / b).powi(2);
            let mask = 1.0 / (1.0 + ((d - 1.0) * 12.0).exp());
            let mut face = p.base;
            for c in &p.comps {
                let (dx, dy) = (x - c.cx, y - c.cy);
                let u = dx * c.cos_t + dy * c.sin_t;
                let env = (-(dx * dx + dy * dy) / (2.0 * c.sigma * c.sigma)).exp();
                let v = (2.0 * std::f64::consts::PI * c.freq * u + c.phase).sin() * env;
                for (f, col) in face.iter_mut().zip(c.color) {
                    *f += v * col;
                }
            }
            for ch in 0..3 {
                out[(yy * s + xx) * 3 + ch] = mask * face[ch] + (1.0 - mask) * p.bg[ch];
            }
        }
    }
    out
}

/// Sample `index` of identity `id`.
pub fn toy_sample(cfg: &ToyGeneratorConfig, seed: u64, id: usize, index: usize) -> Image {
    let p = identity_params(cfg, seed, id);
    let mut rng = stream(seed, id as u64, index as u64 + 1);
    let tx = uniform(&mut rng, (-cfg.max_shift, cfg.max_shift));
    let ty = uniform(&mut rng, (-cfg.max_shift, cfg.max_shift));
    let gain = uniform(&mut rng, (1.0 - cfg.brightness_jitter, 1.0 + cfg.brightness_jitter));
    let data = render(cfg, &p, tx, ty)
        .into_iter()
        .map(|v| {
            let noise: f64 = rng.sample(StandardNormal);
            (v * gain + cfg.noise_sigma * noise).clamp(0.0, 1.0)
        })
        .collect();
    Image::new(cfg.size, cfg.size, 3, data).expect("toy image shape")
}

/// `num_identities` identities with `per_identity` samples each, identity-major.
pub fn generate_toy_dataset(
    num_identities: usize,
    per_identity: usize,
    seed: u64,
) -> Result<IdentityDataset, EmbedderError> {
    generate_toy_dataset_with(&ToyGeneratorConfig::default(), num_identities, per_identity, seed)
}

pub fn generate_toy_dataset_with(
    cfg: &ToyGeneratorConfig,
    num_identities: usize,
    per_identity: usize,
    seed: u64,
) -> Result<IdentityDataset, EmbedderError> {
    if num_identities < 2 || per_identity < 2 {
        return Err(EmbedderError::Invalid(format!(
            "need at least 2 identities with 2 samples each, got {num_identities} x {per_identity}"
        )));
    }
    if cfg.size < 8 {
        return Err(EmbedderError::Invalid("image size must be at least 8".into()));
    }
    let mut images = Vec::with_capacity(num_identities * per_identity);
    let mut labels = Vec::with_capacity(num_identities * per_identity);
    for id in 0..num_identities {
        for k in 0..per_identity {
            images.push(toy_sample(cfg, seed, id, k));
            labels.push(id);
        }
    }
    Ok(IdentityDataset { images, labels })
}

/// Converts an 8-bit RGB image into a unit-range image.
pub fn image_from_rgb8(img: &image::RgbImage) -> Image {
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Image::new(img.height() as usize, img.width() as usize, 3, data).expect("rgb buffer shape")
}

/// Quantises a unit-range image to 8-bit RGB, rounding to nearest.
pub fn image_to_rgb8(img: &Image) -> Result<image::RgbImage, EmbedderError> {
    if img.channels() != 3 {
        return Err(EmbedderError::Invalid("expected a 3-channel image".into()));
    }
    let buf = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::RgbImage::from_raw(img.width() as u32, img.height() as u32, buf)
        .ok_or_else(|| EmbedderError::Invalid("image buffer size mismatch".into()))
}

/// Loads `<identity>/<name>.png` files below `dir`, resizing each to
/// `size x size` with bilinear interpolation. Identities are numbered in
/// sorted directory order; files within an identity are sorted by name.
pub fn load_image_folder(dir: &Path, size: usize) -> Result<IdentityDataset, EmbedderError> {
    let io = |p: &Path, e: std::io::Error| EmbedderError::Io(format!("{}: {e}", p.display()));
    let mut idents: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    idents.sort();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (label, idir) in idents.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(idir)
            .map_err(|e| io(idir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        for f in files {
            let img = image::open(&f)
                .map_err(|e| EmbedderError::Io(format!("{}: {e}", f.display())))?
                .to_rgb8();
            let resized = image::imageops::resize(
                &img,
                size as u32,
                size as u32,
                image::imageops::FilterType::Triangle,
            );
            images.push(image_from_rgb8(&resized));
            labels.push(label);
        }
    }
    if images.is_empty() {
        return Err(EmbedderError::Invalid(format!("no PNG images found under {}", dir.display())));
    }
    Ok(IdentityDataset { images, labels })
}
