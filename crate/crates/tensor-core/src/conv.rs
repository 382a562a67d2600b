//! Convolution and matrix-product kernels used by the tape.
//!
//! Convolution lowers each image to a column matrix and calls a blocked GEMM.
//! All loops run in a fixed order so results are bitwise reproducible.

/// Row-major `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n`,
/// both addressed through explicit row and column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n, "gemm output buffer too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs too small");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs too small");
    }
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// `y += a * x`, dispatched to fused multiply-add when the CPU has it.
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { axpy_fma(y, a, x) };
        return;
    }
    for (d, s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Dot product with four interleaved partial sums in a fixed order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        return unsafe { dot_fma(a, b) };
    }
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(target_arch = "x86_64")]
fn has_fma() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn axpy_fma(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d = s.mul_add(a, *d);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn dot_fma(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] = x[l].mul_add(y[l], acc[l]);
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Output rows handled per block, sized so the column buffer stays in cache.
fn block_rows(g: &ConvGeom) -> usize {
    (BLOCK_COLS / g.wo.max(1)).clamp(1, g.ho.max(1))
}

const BLOCK_COLS: usize = 2048;

/// Lowers output rows `oy0..oy1` of one image to a `rows x (span * wo)` matrix.
fn im2col(x: &[f64], g: &ConvGeom, oy0: usize, oy1: usize, col: &mut [f64]) {
    let p = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let at = row + (oy - oy0) * g.wo;
                    let dst = &mut col[at..at + g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, oy0: usize, oy1: usize, dx: &mut [f64]) {
    let p = (oy1 - oy0) * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * p;
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let src = &col[row + (oy - oy0) * g.wo..row + (oy - oy0 + 1) * g.wo];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions with few output channels are memory bound under
/// im2col, so they use shifted-row accumulation instead.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && g.o < 8
}

/// Valid output-column range for kernel column `kj` at stride 1.
fn ox_range(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo);
    (lo, hi.max(lo))
}

fn iy_of(g: &ConvGeom, oy: usize, ki: usize) -> Option<usize> {
    let iy = (oy + ki) as isize - g.pad as isize;
    (iy >= 0 && iy < g.h as isize).then_some(iy as usize)
}

fn direct_forward(x: &[f64], w: &[f64], g: &ConvGeom, y: &mut [f64]) {
    let p = g.cols();
    for o in 0..g.o {
        let yo = &mut y[o * p..(o + 1) * p];
        for c in 0..g.c {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ki) * g.k + kj];
                    let (lo, hi) = ox_range(g, kj);
                    for oy in 0..g.ho {
                        let Some(iy) = iy_of(g, oy, ki) else { continue };
                        let src = &xc[iy * g.w + lo + kj - g.pad..iy * g.w + hi + kj - g.pad];
                        axpy(&mut yo[oy * g.wo + lo..oy * g.wo + hi], wv, src);
                    }
                }
            }
        }
    }
}

fn direct_backward_input(w: &[f64], gy: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.cols();
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for o in 0..g.o {
            let go = &gy[o * p..(o + 1) * p];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let wv = w[((o * g.c + c) * g.k + ki) * g.k + kj];
                    let (lo, hi) = ox_range(g, kj);
                    for oy in 0..g.ho {
                        let Some(iy) = iy_of(g, oy, ki) else { continue };
                        let dst = &mut dxc[iy * g.w + lo + kj - g.pad..iy * g.w + hi + kj - g.pad];
                        axpy(dst, wv, &go[oy * g.wo + lo..oy * g.wo + hi]);
                    }
                }
            }
        }
    }
}

fn direct_backward_weight(x: &[f64], gy: &[f64], g: &ConvGeom, dw: &mut [f64]) {
    let p = g.cols();
    for o in 0..g.o {
        let go = &gy[o * p..(o + 1) * p];
        for c in 0..g.c {
            let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let (lo, hi) = ox_range(g, kj);
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let Some(iy) = iy_of(g, oy, ki) else { continue };
                        let src = &xc[iy * g.w + lo + kj - g.pad..iy * g.w + hi + kj - g.pad];
                        let gr = &go[oy * g.wo + lo..oy * g.wo + hi];
                        acc += dot(src, gr);
                    }
                    dw[((o * g.c + c) * g.k + ki) * g.k + kj] += acc;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (r, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    if use_direct(g) {
        let mut out = vec![0.0; g.n * g.o * p];
        for n in 0..g.n {
            let y = &mut out[n * g.o * p..(n + 1) * g.o * p];
            direct_forward(&x[n * in_stride..(n + 1) * in_stride], w, g, y);
            if let Some(b) = b {
                for (o, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        }
        return out;
    }
    let mut out = vec![0.0; g.n * g.o * p];
    let br = block_rows(g);
    let mut col = vec![0.0; r * br * g.wo];
    for n in 0..g.n {
        let x_n = &x[n * in_stride..(n + 1) * in_stride];
        let y = &mut out[n * g.o * p..(n + 1) * g.o * p];
        for oy0 in (0..g.ho).step_by(br) {
            let oy1 = (oy0 + br).min(g.ho);
            let span = (oy1 - oy0) * g.wo;
            im2col(x_n, g, oy0, oy1, &mut col);
            gemm(g.o, r, span, w, r, 1, &col, span, 1, 0.0, &mut y[oy0 * g.wo..], p);
        }
        if let Some(b) = b {
            for (o, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (r, p) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut db = need.2.then(|| vec![0.0; g.o]);
    let direct = use_direct(g);
    let br = block_rows(g);
    let mut col = if direct { Vec::new() } else { vec![0.0; r * br * g.wo] };
    for n in 0..g.n {
        let gy_n = &gy[n * g.o * p..(n + 1) * g.o * p];
        let x_n = &x[n * in_stride..(n + 1) * in_stride];
        if direct {
            if let Some(dw) = dw.as_mut() {
                direct_backward_weight(x_n, gy_n, g, dw);
            }
            if let Some(dx) = dx.as_mut() {
                direct_backward_input(w, gy_n, g, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
            if let Some(db) = db.as_mut() {
                for (o, row) in gy_n.chunks(p).enumerate() {
                    db[o] += row.iter().sum::<f64>();
                }
            }
            continue;
        }
        if let Some(db) = db.as_mut() {
            for (o, row) in gy_n.chunks(p).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        for oy0 in (0..g.ho).step_by(br) {
            let oy1 = (oy0 + br).min(g.ho);
            let span = (oy1 - oy0) * g.wo;
            let gy_b = &gy_n[oy0 * g.wo..];
            if let Some(dw) = dw.as_mut() {
                im2col(x_n, g, oy0, oy1, &mut col);
                gemm(g.o, span, r, gy_b, p, 1, &col, 1, span, 1.0, dw, r);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(r, g.o, span, w, 1, r, gy_b, p, 1, 0.0, &mut col, span);
                col2im(&col, g, oy0, oy1, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
