//! Feasible-set projections and in-loop constraint accounting.

use serde::{Deserialize, Serialize};
use tensor_core::Tensor;
use watermark_codec::Message;

/// Projects one perturbation coordinate onto `[-eps, eps]` and onto the
/// pixel box, so that `pixel + delta` lies in `[0, 1]` in floating point.
pub fn project_delta(delta: f64, pixel: f64, eps: f64) -> f64 {
    let mut d = delta.clamp(-eps, eps).max(-pixel).min(1.0 - pixel);
    // 1 - pixel can round up; step down until the sum really fits.
    while pixel + d > 1.0 {
        d = d.next_down();
    }
    d
}

/// Counts of checks performed and violations found during an attack.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub delta_checks: u64,
    pub message_checks: u64,
    pub delta_ball_violations: u64,
    pub delta_box_violations: u64,
    pub relaxed_message_violations: u64,
    pub final_message_violations: u64,
}

impl ConstraintReport {
    pub fn check_delta(&mut self, delta: &Tensor, probe: &Tensor, eps: f64) {
        self.delta_checks += 1;
        if delta.data().iter().any(|d| d.abs() > eps) {
            self.delta_ball_violations += 1;
        }
        if delta
            .data()
            .iter()
            .zip(probe.data())
            .any(|(d, p)| !(0.0..=1.0).contains(&(p + d)))
        {
            self.delta_box_violations += 1;
        }
    }

    pub fn check_relaxed(&mut self, m: &[f64]) {
        self.message_checks += 1;
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            self.relaxed_message_violations += 1;
        }
    }

    pub fn check_final(&mut self, m: &Message) {
        if m.bits().iter().any(|&b| b > 1) {
            self.final_message_violations += 1;
        }
    }

    pub fn violations(&self) -> u64 {
        self.delta_ball_violations
            + self.delta_box_violations
            + self.relaxed_message_violations
            + self.final_message_violations
    }

    pub fn merge(&mut self, other: &ConstraintReport) {
        self.delta_checks += other.delta_checks;
        self.message_checks += other.message_checks;
        self.delta_ball_violations += other.delta_ball_violations;
        self.delta_box_violations += other.delta_box_violations;
        self.relaxed_message_violations += other.relaxed_message_violations;
        self.final_message_violations += other.final_message_violations;
    }
}
