//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::{KinkTrace, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many randomly chosen coordinates per leaf.
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            max_coords_per_leaf: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GradCheck {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over checked coordinates.
    Checked { max_rel_error: f64, coords: usize },
    /// The point sits on, or a probe crossed, a relu or clamp kink.
    Unreliable,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        matches!(self, GradCheck::Checked { max_rel_error, .. } if *max_rel_error < tolerance)
    }

    pub fn is_reliable(&self) -> bool {
        matches!(self, GradCheck::Checked { .. })
    }
}

fn evaluate<F>(builder: &F, point: &[Tensor], track_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::with_kink_tracking();
    let leaves: Vec<Var> = point
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad(track_grad)))
        .collect();
    let out = builder(&mut tape, &leaves)?;
    let shape = tape.value(out).shape().to_vec();
    if tape.value(out).numel() != 1 {
        return Err(TensorError::NonScalarLoss(shape));
    }
    Ok((tape, leaves, out))
}

fn trace(tape: &Tape) -> KinkTrace {
    tape.kink_trace().cloned().unwrap_or_default()
}

/// Compares the tape gradient of `builder` at `point` against central
/// differences for every leaf tensor in `point`.
pub fn grad_check<F>(builder: F, point: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, leaves, out) = evaluate(&builder, point, true)?;
    let base = trace(&tape);
    if base.exact_hits() > 0 {
        return Ok(GradCheck::Unreliable);
    }
    let grads = tape.backward(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient");
        let n = point[li].numel();
        let picks: Vec<usize> = match cfg.max_coords_per_leaf {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in picks {
            let mut probe = point.to_vec();
            let x0 = point[li].data()[j];
            probe[li].data_mut()[j] = x0 + cfg.step;
            let (tp, _, op) = evaluate(&builder, &probe, false)?;
            probe[li].data_mut()[j] = x0 - cfg.step;
            let (tm, _, om) = evaluate(&builder, &probe, false)?;
            if trace(&tp) != base || trace(&tm) != base {
                return Ok(GradCheck::Unreliable);
            }
            let fp = tp.value(op).data()[0];
            let fm = tm.value(om).data()[0];
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            coords += 1;
        }
    }
    Ok(GradCheck::Checked {
        max_rel_error: worst,
        coords,
    })
}
