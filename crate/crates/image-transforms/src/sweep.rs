//! Bit accuracy under each transform of a grid, averaged over images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor_core::Image;
use watermark_codec::{bit_accuracy, random_message_from, Codec};

use crate::transform::{apply_transform, TransformKind, TransformSpec};
use crate::TransformError;

pub const SWEEP_CSV_HEADER: &str = "transform,parameter,mean_bit_accuracy,n_images";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub transform: TransformKind,
    pub parameter: f64,
    pub mean_bit_accuracy: f64,
    pub n_images: usize,
}

/// The five transform families at six strengths each, mildest first.
pub fn standard_grid() -> Vec<TransformSpec> {
    let ratios = [1.0, 0.95, 0.9, 0.85, 0.8, 0.75];
    let factors = [1.0, 1.5, 2.0, 2.5, 3.0, 3.5];
    let qualities = [100u8, 95, 90, 85, 80, 75];
    let mut grid = Vec::new();
    for &r in &ratios {
        grid.push(TransformSpec::crop(r).expect("valid ratio"));
    }
    for &r in &ratios {
        grid.push(TransformSpec::resize(r).expect("valid ratio"));
    }
    for &f in &factors {
        grid.push(TransformSpec::brightness(f).expect("valid factor"));
    }
    for &f in &factors {
        grid.push(TransformSpec::contrast(f).expect("valid factor"));
    }
    for &q in &qualities {
        grid.push(TransformSpec::jpeg(q).expect("valid quality"));
    }
    grid
}

/// Watermarks every image with a fresh random message drawn from `seed`,
/// applies each transform of the grid and decodes. Returns one row per grid
/// cell in grid order.
pub fn robustness_sweep(
    codec: &Codec,
    images: &[Image],
    grid: &[TransformSpec],
    seed: u64,
) -> Result<Vec<SweepRow>, TransformError> {
    if images.is_empty() || grid.is_empty() {
        return Err(TransformError::EmptySweep);
    }
    for spec in grid {
        spec.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0; grid.len()];
    for image in images {
        let message = random_message_from(codec.message_bits(), &mut rng)?;
        let marked = codec.embed_bits(image, &message)?;
        for (sum, spec) in sums.iter_mut().zip(grid) {
            let shown = apply_transform(&marked, spec)?;
            *sum += bit_accuracy(&codec.extract_bits(&shown)?, &message)?;
        }
    }
    let n = images.len();
    Ok(grid
        .iter()
        .zip(sums)
        .map(|(spec, sum)| SweepRow {
            transform: spec.kind,
            parameter: spec.parameter,
            mean_bit_accuracy: sum / n as f64,
            n_images: n,
        })
        .collect())
}

/// Renders sweep rows as CSV with a header line.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.transform, r.parameter, r.mean_bit_accuracy, r.n_images
        ));
    }
    out
}
