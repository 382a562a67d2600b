//! First-order optimizers over [`ModelParams`].

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::ModelParams;
use crate::tensor::Tensor;

/// Uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn check(params: &ModelParams, name: &str, g: &Tensor) -> Result<()> {
    let p = params.get(name)?;
    if p.shape() != g.shape() {
        return Err(TensorError::mismatch("optimizer step", p.shape(), g.shape()));
    }
    if !g.is_finite() {
        return Err(TensorError::invalid("optimizer step", format!("non-finite gradient for {name}")));
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v = mu v + g`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            check(params, name, g)?;
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            let p = params.get_mut(name)?.data_mut();
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, g) in grads {
            check(params, name, g)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            let p = params.get_mut(name)?.data_mut();
            for (((pi, mi), vi), gi) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *pi -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
