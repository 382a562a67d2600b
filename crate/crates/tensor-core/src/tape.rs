//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. A node requires a
//! gradient when any of its inputs does; `backward` walks the nodes once in
//! reverse order and only visits nodes on a differentiable path.

use crate::conv::{conv2d_backward, conv2d_forward, gemm, ConvGeom};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Mean(Var),
    Sum(Var),
    GlobalAvgPool(Var),
    L2Norm(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    Mse(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Reshape(Var),
    TilePattern { x: Var, ph: usize, pw: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records which side of every non-smooth point (relu at 0, clamp bounds) each
/// element fell on, so finite differences can detect kink crossings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KinkTrace {
    signature: u64,
    exact_hits: usize,
}

impl KinkTrace {
    fn push(&mut self, state: u8) {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        self.signature = (self.signature ^ u64::from(state)).wrapping_mul(PRIME);
    }

    /// Number of elements sitting exactly on a kink.
    pub fn exact_hits(&self) -> usize {
        self.exact_hits
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinks: Option<KinkTrace>,
}

/// Gradients of a scalar loss with respect to every leaf on the tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; zero-filled when the leaf is not on the loss path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.leaves.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::mismatch(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also records kink crossings, used by gradient checking.
    pub fn with_kink_tracking() -> Self {
        Tape {
            nodes: Vec::new(),
            kinks: Some(KinkTrace::default()),
        }
    }

    pub fn kink_trace(&self) -> Option<&KinkTrace> {
        self.kinks.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Places a tensor on the tape. Its `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, requires_grad, Op::Leaf)
    }

    /// Places a tensor on the tape as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("unary keeps shape");
        let rg = self.rg(&[x]);
        self.push(t, rg, op)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, op))
    }

    /// 2-D convolution. `x` is N x C x H x W, `w` is O x C x k x k, `b` has O entries.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(TensorError::mismatch("conv2d", xs, ws));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be positive"));
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(TensorError::mismatch("conv2d", xs, ws));
        }
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [ws[0]] {
                return Err(TensorError::mismatch("conv2d bias", ws, bs));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![geom.n, geom.o, geom.ho, geom.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// `x W^T + b` with `x` N x I, `w` O x I and `b` of length O.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::mismatch("linear", xs, ws));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(TensorError::mismatch("linear bias", ws, bs));
            }
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, self.value(x).data(), i, 1, self.value(w).data(), 1, i, 0.0, &mut out, o);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += bb);
            }
        }
        let t = Tensor::new(vec![n, o], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, rg, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(k) = self.kinks.as_mut() {
            for &v in self.nodes[x.0].value.data() {
                k.push(u8::from(v > 0.0));
                if v == 0.0 {
                    k.exact_hits += 1;
                }
            }
        }
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// Elementwise clamp to `[lo, hi]`. The gradient is one strictly inside
    /// the interval and zero elsewhere, including exactly at the bounds.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::invalid("clamp", format!("bad bounds [{lo}, {hi}]")));
        }
        if let Some(k) = self.kinks.as_mut() {
            for &v in self.nodes[x.0].value.data() {
                k.push(if v < lo { 0 } else if v > hi { 2 } else { 1 });
                if v == lo || v == hi {
                    k.exact_hits += 1;
                }
            }
        }
        Ok(self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi }))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let s0 = self.value(*first).shape().to_vec();
        if axis >= s0.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::mismatch("concat", &s0, s));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            t,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let m = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(x)))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    /// N x C x H x W to N x C by averaging over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(TensorError::invalid("global_avg_pool", format!("need N x C x H x W, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let data = xv
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::GlobalAvgPool(x)))
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = norm(self.value(x).data());
        if n == 0.0 {
            return Err(TensorError::ZeroNorm { op: "l2_norm" });
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(n), rg, Op::L2Norm(x)))
    }

    /// Scales each row of an N x D matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[1] == 0 {
            return Err(TensorError::invalid("normalize_rows", format!("need N x D, got {s:?}")));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(s[1]) {
            let n = norm(row);
            if n == 0.0 {
                return Err(TensorError::ZeroNorm { op: "normalize_rows" });
            }
            data.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(s.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::NormalizeRows(x)))
    }

    /// Cosine similarity of two same-shaped tensors, treated as flat vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("cosine_similarity", av, bv)?;
        let (na, nb) = (norm(av.data()), norm(bv.data()));
        if na == 0.0 || nb == 0.0 {
            return Err(TensorError::ZeroNorm {
                op: "cosine_similarity",
            });
        }
        let c = dot(av.data(), bv.data()) / (na * nb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), rg, Op::Cosine(a, b)))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        same_shape("mse_loss", xv, yv)?;
        if xv.numel() == 0 {
            return Err(TensorError::invalid("mse_loss", "empty tensor"));
        }
        let s: f64 = xv.data().iter().zip(yv.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let m = s / xv.numel() as f64;
        let rg = self.rg(&[x, y]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mse(x, y)))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets,
    /// evaluated as `max(l, 0) - l t + ln(1 + exp(-|l|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        same_shape("bce_with_logits", lv, targets)?;
        if lv.numel() == 0 {
            return Err(TensorError::invalid("bce_with_logits", "empty tensor"));
        }
        if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::invalid("bce_with_logits", format!("target {t} is not 0 or 1")));
        }
        let s: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let m = s / lv.numel() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(m),
            rg,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of N x K logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let s = lv.shape();
        if s.len() != 2 || s[0] != labels.len() || s[1] == 0 {
            return Err(TensorError::mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::invalid("softmax_cross_entropy", format!("label {bad} out of range {k}")));
        }
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = 0.0;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            total += z.ln() + mx - row[y];
            probs.extend(row.iter().map(|v| (v - mx).exp() / z));
        }
        let m = total / labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(m),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Repeats a per-row `ph x pw` pattern (row length `ph * pw`) over an
    /// `h x w` plane, producing N x 1 x h x w.
    pub fn tile_pattern(&mut self, x: Var, ph: usize, pw: usize, h: usize, w: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 2 || s[1] != ph * pw || ph == 0 || pw == 0 {
            return Err(TensorError::mismatch("tile_pattern", s, &[ph, pw]));
        }
        let n = s[0];
        let mut data = Vec::with_capacity(n * h * w);
        for row in xv.data().chunks(ph * pw) {
            for y in 0..h {
                let pr = &row[(y % ph) * pw..(y % ph + 1) * pw];
                data.extend((0..w).map(|x| pr[x % pw]));
            }
        }
        let t = Tensor::new(vec![n, 1, h, w], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::TilePattern { x, ph, pw }))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].take() else { continue };
            self.backprop(&node.op, &node.value, &g, lower);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Leaf => {
                    let data = grads
                        .get_mut(i)
                        .and_then(|g| g.take())
                        .unwrap_or_else(|| vec![0.0; n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("leaf grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    /// Adds an owned gradient, moving it into the slot when it is empty.
    fn accumulate_owned(&self, grads: &mut [Option<Vec<f64>>], v: Var, data: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => add_into(buf, &data),
            slot => *slot = Some(data),
        }
    }

    /// Adds the elementwise gradient `f(i)` without zero-filling a fresh slot.
    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().enumerate().for_each(|(i, b)| *b += f(i)),
            slot => *slot = Some((0..n).map(f).collect()),
        }
    }

    fn backprop(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.wants(*x), self.wants(*w), b.is_some_and(|b| self.wants(b)));
                let cg = conv2d_backward(val(*x), val(*w), g, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate_owned(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate_owned(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate_owned(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, i) = (xs[0], xs[1]);
                let o = self.nodes[w.0].value.shape()[0];
                if self.wants(*x) {
                    let wd = val(*w);
                    self.accumulate(grads, *x, |buf| gemm(n, o, i, g, o, 1, wd, i, 1, 1.0, buf, i));
                }
                if self.wants(*w) {
                    let xd = val(*x);
                    self.accumulate(grads, *w, |buf| gemm(o, n, i, g, 1, o, xd, i, 1, 1.0, buf, i));
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, |buf| {
                        for row in g.chunks(o) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xd = val(*x);
                self.accumulate_with(grads, *x, |i| if xd[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.accumulate_with(grads, *x, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Tanh(x) => {
                let y = out.data();
                self.accumulate_with(grads, *x, |i| g[i] * (1.0 - y[i] * y[i]));
            }
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, |i| g[i]);
                self.accumulate_with(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, |i| g[i]);
                self.accumulate_with(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                self.accumulate(grads, *a, |buf| {
                    for ((x, gi), y) in buf.iter_mut().zip(g).zip(bd) {
                        *x += gi * y;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((x, gi), y) in buf.iter_mut().zip(g).zip(ad) {
                        *x += gi * y;
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate_with(grads, *x, |i| c * g[i]),
            Op::AddScalar(x) | Op::Reshape(x) => self.accumulate_with(grads, *x, |i| g[i]),
            Op::Clamp { x, lo, hi } => {
                let xd = val(*x);
                self.accumulate_with(grads, *x, |i| if xd[i] > *lo && xd[i] < *hi { g[i] } else { 0.0 });
            }
            Op::Concat { inputs, axis } => {
                let s0 = self.nodes[inputs[0].0].value.shape();
                let outer: usize = s0[..*axis].iter().product();
                let inner: usize = s0[axis + 1..].iter().product();
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    self.accumulate(grads, *v, |buf| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut buf[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel() as f64;
                self.accumulate(grads, *x, |buf| buf.iter_mut().for_each(|b| *b += g[0] / n));
            }
            Op::Sum(x) => self.accumulate_with(grads, *x, |_| g[0]),
            Op::GlobalAvgPool(x) => {
                let s = self.nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                self.accumulate(grads, *x, |buf| {
                    for (chunk, &gi) in buf.chunks_mut(hw).zip(g) {
                        chunk.iter_mut().for_each(|b| *b += gi / hw as f64);
                    }
                });
            }
            Op::L2Norm(x) => {
                let xd = val(*x);
                let n = out.data()[0];
                self.accumulate(grads, *x, |buf| {
                    buf.iter_mut().zip(xd).for_each(|(b, xi)| *b += g[0] * xi / n)
                });
            }
            Op::NormalizeRows(x) => {
                let xd = val(*x);
                let d = out.shape()[1];
                self.accumulate(grads, *x, |buf| {
                    for ((bb, xr), (yr, gr)) in buf
                        .chunks_mut(d)
                        .zip(xd.chunks(d))
                        .zip(out.data().chunks(d).zip(g.chunks(d)))
                    {
                        let n = norm(xr);
                        let gy = dot(gr, yr);
                        for ((b, gi), yi) in bb.iter_mut().zip(gr).zip(yr) {
                            *b += (gi - yi * gy) / n;
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let (na, nb) = (norm(ad), norm(bd));
                let c = out.data()[0];
                let gi = g[0];
                self.accumulate(grads, *a, |buf| {
                    for ((x, ai), bi) in buf.iter_mut().zip(ad).zip(bd) {
                        *x += gi * (bi / (na * nb) - c * ai / (na * na));
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for ((x, ai), bi) in buf.iter_mut().zip(ad).zip(bd) {
                        *x += gi * (ai / (na * nb) - c * bi / (nb * nb));
                    }
                });
            }
            Op::Mse(x, y) => {
                let (xd, yd) = (val(*x), val(*y));
                let k = 2.0 * g[0] / xd.len() as f64;
                self.accumulate(grads, *x, |buf| {
                    for ((b, xi), yi) in buf.iter_mut().zip(xd).zip(yd) {
                        *b += k * (xi - yi);
                    }
                });
                self.accumulate(grads, *y, |buf| {
                    for ((b, xi), yi) in buf.iter_mut().zip(xd).zip(yd) {
                        *b -= k * (xi - yi);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let ld = val(*logits);
                let k = g[0] / ld.len() as f64;
                self.accumulate(grads, *logits, |buf| {
                    for ((b, &l), t) in buf.iter_mut().zip(ld).zip(targets) {
                        *b += k * (sigmoid(l) - t);
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |buf| {
                    for (r, (br, pr)) in buf.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (b, p)) in br.iter_mut().zip(pr).enumerate() {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            *b += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::TilePattern { x, ph, pw } => {
                let s = out.shape();
                let (h, w) = (s[2], s[3]);
                self.accumulate(grads, *x, |buf| {
                    for (row, plane) in buf.chunks_mut(ph * pw).zip(g.chunks(h * w)) {
                        for y in 0..h {
                            let base = (y % ph) * pw;
                            for xx in 0..w {
                                row[base + xx % pw] += plane[y * w + xx];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
