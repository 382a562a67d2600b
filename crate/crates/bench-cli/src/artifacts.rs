//! File outputs: PNG dumps, difference images, hashed run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use adv_attack::{perturbed_probe, Models};
use face_embedder::{image_from_rgb8, image_to_rgb8, similarity};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tensor_core::Image;
use watermark_codec::Message;

use crate::BenchError;

pub const RUN_SCHEMA: u32 = 1;

/// Collects written files so the run manifest can list their hashes.
#[derive(Default)]
pub struct ArtifactLog {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl ArtifactLog {
    pub fn new(root: &Path) -> Self {
        ArtifactLog {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `bytes` to `root/rel`, creating parent directories.
    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf, BenchError> {
        let path = self.root.join(rel.as_ref());
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| BenchError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| BenchError::io(&path, e))?;
        self.files.push(path.clone());
        Ok(path)
    }

    /// Records a file written by someone else, such as a checkpoint.
    pub fn record(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    pub fn write_json<T: Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf, BenchError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| BenchError::Config(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn write_png(&mut self, rel: impl AsRef<Path>, image: &Image) -> Result<PathBuf, BenchError> {
        let bytes = png_bytes(image)?;
        self.write(rel, &bytes)
    }

    /// Writes `run.json` with the command, the resolved config and the
    /// SHA-256 of every recorded file, keyed by path relative to the root.
    pub fn finish<C: Serialize>(mut self, command: &str, config: &C) -> Result<PathBuf, BenchError> {
        let mut hashes = BTreeMap::new();
        self.files.sort();
        self.files.dedup();
        for f in &self.files {
            for file in files_below(f)? {
                let bytes = std::fs::read(&file).map_err(|e| BenchError::io(&file, e))?;
                let rel = file.strip_prefix(&self.root).unwrap_or(&file);
                hashes.insert(rel.to_string_lossy().replace('\\', "/"), hex::encode(Sha256::digest(&bytes)));
            }
        }
        let run = serde_json::json!({
            "schema": RUN_SCHEMA,
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "config": config,
            "artifacts": hashes,
        });
        let mut text = serde_json::to_string_pretty(&run).map_err(|e| BenchError::Config(e.to_string()))?;
        text.push('\n');
        let path = self.root.join("run.json");
        std::fs::create_dir_all(&self.root).map_err(|e| BenchError::io(&self.root, e))?;
        std::fs::write(&path, text).map_err(|e| BenchError::io(&path, e))?;
        Ok(path)
    }
}

/// The file itself, or every file below a directory in sorted order.
fn files_below(path: &Path) -> Result<Vec<PathBuf>, BenchError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| BenchError::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut out = Vec::new();
    for e in entries {
        out.extend(files_below(&e)?);
    }
    Ok(out)
}

pub fn png_bytes(image: &Image) -> Result<Vec<u8>, BenchError> {
    let rgb = image_to_rgb8(image)?;
    let mut buf = std::io::Cursor::new(Vec::new());
    rgb.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| BenchError::Image(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn read_png(path: &Path) -> Result<Image, BenchError> {
    let img = image::open(path).map_err(|e| BenchError::Image(format!("{}: {e}", path.display())))?;
    Ok(image_from_rgb8(&img.to_rgb8()))
}

/// `1 - min(1, 10 |a - b|)` per element: differences scaled by 10, clamped
/// and inverted so that identical pixels are white.
pub fn diff_image(a: &Image, b: &Image) -> Result<Image, BenchError> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(BenchError::Config("difference of differently sized images".into()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| 1.0 - (10.0 * (x - y).abs()).min(1.0))
        .collect();
    Ok(Image::new(a.height(), a.width(), a.channels(), data)?)
}

/// Perturbation mapped to `[0, 1]` with zero at mid grey and `+-eps` at the ends.
pub fn delta_image(delta: &Image, eps: f64) -> Result<Image, BenchError> {
    let data = delta
        .data()
        .iter()
        .map(|d| if eps > 0.0 { (0.5 + d / (2.0 * eps)).clamp(0.0, 1.0) } else { 0.5 })
        .collect();
    Ok(Image::new(delta.height(), delta.width(), delta.channels(), data)?)
}

/// Inputs of one image dump.
pub struct DiffPair<'a> {
    pub probe: &'a Image,
    pub reference: &'a Image,
    pub delta: &'a Image,
    pub epsilon: f64,
    pub message: &'a Message,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image: &'a str,
    similarity_to_reference: f64,
}

/// Writes the reference, probe, watermarked probe, perturbed probe,
/// perturbation and watermarked perturbed probe, plus the two difference
/// images, into `rel_dir`. Probe-side images get a JSON sidecar with their
/// similarity to the reference.
pub fn export_diff_images(
    pair: &DiffPair,
    models: Models,
    log: &mut ArtifactLog,
    rel_dir: &Path,
) -> Result<(), BenchError> {
    let i_w = models.codec.embed_bits(pair.probe, pair.message)?;
    let i_p_adv = perturbed_probe(pair.probe, pair.delta)?;
    let i_w_adv = models.codec.embed_bits(&i_p_adv, pair.message)?;
    let zr = models.embedder.embed_face(pair.reference)?;
    let probe_side: [(&str, &Image); 4] =
        [("i_p", pair.probe), ("i_w", &i_w), ("i_p_adv", &i_p_adv), ("i_w_adv", &i_w_adv)];
    log.write_png(rel_dir.join("i_r.png"), pair.reference)?;
    for (name, img) in probe_side {
        let file = format!("{name}.png");
        log.write_png(rel_dir.join(&file), img)?;
        let s = similarity(&models.embedder.embed_face(img)?, &zr)?;
        log.write_json(
            rel_dir.join(format!("{name}.json")),
            &Sidecar {
                image: &file,
                similarity_to_reference: s,
            },
        )?;
    }
    log.write_png(rel_dir.join("diff_i_w_i_p.png"), &diff_image(&i_w, pair.probe)?)?;
    log.write_png(rel_dir.join("delta.png"), &delta_image(pair.delta, pair.epsilon)?)?;
    log.write_png(rel_dir.join("diff_i_w_adv_i_p.png"), &diff_image(&i_w_adv, pair.probe)?)?;
    Ok(())
}
