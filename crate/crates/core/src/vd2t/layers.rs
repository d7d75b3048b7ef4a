//! Batch-major layers with exact backward passes.
//!
//! Activations are flat `f64` buffers holding `batch` consecutive samples of
//! `in_size()` (or `out_size()`) values each, channel-major within a sample.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c`, all row-major; `a` is `m x k` after `op`,
/// `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m x k, k x n and m x n
    // elements of the three slices, whose lengths are checked by the caller.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Linear { inputs: usize, outputs: usize },
    /// Cross-correlation over `[channels, height, width]` with zero padding.
    Conv {
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        ph: usize,
        pw: usize,
    },
    /// Normalizes each channel over the batch and its `spatial` positions.
    BatchNorm { channels: usize, spatial: usize },
    Relu { size: usize },
    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    Dropout { p: f64, size: usize },
    GlobalAvgPool { channels: usize, spatial: usize },
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl Op {
    fn conv_out(self) -> (usize, usize) {
        match self {
            Op::Conv { h, w, kh, kw, stride, ph, pw, .. } => {
                ((h + 2 * ph - kh) / stride + 1, (w + 2 * pw - kw) / stride + 1)
            }
            _ => unreachable!("not a convolution"),
        }
    }

    pub fn in_size(self) -> usize {
        match self {
            Op::Linear { inputs, .. } => inputs,
            Op::Conv { cin, h, w, .. } => cin * h * w,
            Op::BatchNorm { channels, spatial } | Op::GlobalAvgPool { channels, spatial } => channels * spatial,
            Op::Relu { size } | Op::Dropout { size, .. } => size,
        }
    }

    pub fn out_size(self) -> usize {
        match self {
            Op::Linear { outputs, .. } => outputs,
            Op::Conv { cout, .. } => {
                let (ho, wo) = self.conv_out();
                cout * ho * wo
            }
            Op::GlobalAvgPool { channels, .. } => channels,
            _ => self.in_size(),
        }
    }

    pub fn param_len(self) -> usize {
        match self {
            Op::Linear { inputs, outputs } => inputs * outputs + outputs,
            Op::Conv { cin, cout, kh, kw, .. } => cout * cin * kh * kw + cout,
            Op::BatchNorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }

    /// Running statistics carried outside the trainable parameters.
    pub fn state_len(self) -> usize {
        match self {
            Op::BatchNorm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }

    /// Fan-in of the weights, for initialization.
    pub fn fan_in(self) -> usize {
        match self {
            Op::Linear { inputs, .. } => inputs,
            Op::Conv { cin, kh, kw, .. } => cin * kh * kw,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    /// Weights then biases, or batch-norm scale then shift.
    pub params: Vec<f64>,
    pub grads: Vec<f64>,
    /// Batch-norm running mean then running variance.
    pub state: Vec<f64>,
    cache: Vec<f64>,
    aux: Vec<f64>,
    batch: usize,
}

impl Layer {
    pub fn new(name: impl Into<String>, op: Op, rng: &mut ChaCha8Rng) -> Self {
        let mut params = vec![0.0; op.param_len()];
        let mut state = vec![0.0; op.state_len()];
        match op {
            Op::Linear { .. } | Op::Conv { .. } => {
                let bound = (6.0 / op.fan_in() as f64).sqrt();
                let nw = params.len() - op.out_size() / out_positions(op);
                for w in &mut params[..nw] {
                    *w = rng.random_range(-bound..bound);
                }
            }
            Op::BatchNorm { channels, .. } => {
                params[..channels].fill(1.0);
                state[channels..].fill(1.0);
            }
            _ => {}
        }
        Layer { name: name.into(), grads: vec![0.0; params.len()], op, params, state, cache: Vec::new(), aux: Vec::new(), batch: 0 }
    }

    pub fn zero_grad(&mut self) {
        self.grads.fill(0.0);
    }

    /// Forward pass. In training mode the layer keeps what its backward
    /// pass needs; batch norm uses batch statistics and updates its running
    /// averages, and dropout draws a fresh mask from `rng`.
    pub fn forward(&mut self, x: &[f64], batch: usize, training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        debug_assert_eq!(x.len(), batch * self.op.in_size());
        self.batch = batch;
        let y = match self.op {
            Op::Linear { inputs, outputs } => {
                let (w, b) = self.params.split_at(inputs * outputs);
                let mut y: Vec<f64> = (0..batch).flat_map(|_| b.iter().copied()).collect();
                gemm(batch, inputs, outputs, x, false, w, true, &mut y, 1.0);
                if training {
                    self.cache = x.to_vec();
                }
                y
            }
            Op::Conv { cout, .. } => {
                let (ho, wo) = self.op.conv_out();
                let p = ho * wo;
                let ckk = self.op.fan_in();
                let (w, b) = self.params.split_at(cout * ckk);
                let mut y = vec![0.0; batch * cout * p];
                let mut cols = if training { vec![0.0; batch * ckk * p] } else { Vec::new() };
                let mut col = vec![0.0; ckk * p];
                for s in 0..batch {
                    im2col(self.op, &x[s * self.op.in_size()..(s + 1) * self.op.in_size()], &mut col);
                    let ys = &mut y[s * cout * p..(s + 1) * cout * p];
                    for (o, row) in ys.chunks_mut(p).enumerate() {
                        row.fill(b[o]);
                    }
                    gemm(cout, ckk, p, w, false, &col, false, ys, 1.0);
                    if training {
                        cols[s * ckk * p..(s + 1) * ckk * p].copy_from_slice(&col);
                    }
                }
                if training {
                    self.cache = cols;
                }
                y
            }
            Op::BatchNorm { channels, spatial } => {
                let (gamma, beta) = self.params.split_at(channels);
                let mut y = vec![0.0; x.len()];
                let n = (batch * spatial) as f64;
                if training {
                    let mut xhat = vec![0.0; x.len()];
                    let mut inv = vec![0.0; channels];
                    for c in 0..channels {
                        let idx = |s: usize, k: usize| s * channels * spatial + c * spatial + k;
                        let mut mean = 0.0;
                        for s in 0..batch {
                            for k in 0..spatial {
                                mean += x[idx(s, k)];
                            }
                        }
                        mean /= n;
                        let mut var = 0.0;
                        for s in 0..batch {
                            for k in 0..spatial {
                                var += (x[idx(s, k)] - mean).powi(2);
                            }
                        }
                        var /= n;
                        inv[c] = 1.0 / (var + BN_EPS).sqrt();
                        for s in 0..batch {
                            for k in 0..spatial {
                                let i = idx(s, k);
                                xhat[i] = (x[i] - mean) * inv[c];
                                y[i] = gamma[c] * xhat[i] + beta[c];
                            }
                        }
                        let unbiased = if n > 1.0 { var * n / (n - 1.0) } else { var };
                        self.state[c] = (1.0 - BN_MOMENTUM) * self.state[c] + BN_MOMENTUM * mean;
                        self.state[channels + c] = (1.0 - BN_MOMENTUM) * self.state[channels + c] + BN_MOMENTUM * unbiased;
                    }
                    self.cache = xhat;
                    self.aux = inv;
                } else {
                    for (i, (yi, xi)) in y.iter_mut().zip(x).enumerate() {
                        let c = (i / spatial) % channels;
                        let inv = 1.0 / (self.state[channels + c] + BN_EPS).sqrt();
                        *yi = gamma[c] * (xi - self.state[c]) * inv + beta[c];
                    }
                }
                y
            }
            Op::Relu { .. } => {
                if training {
                    self.cache = x.to_vec();
                }
                x.iter().map(|v| v.max(0.0)).collect()
            }
            Op::Dropout { p, .. } => {
                if !training || p == 0.0 {
                    self.aux = vec![1.0; if training { x.len() } else { 0 }];
                    x.to_vec()
                } else {
                    let keep = 1.0 / (1.0 - p);
                    self.aux = (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                    x.iter().zip(&self.aux).map(|(a, m)| a * m).collect()
                }
            }
            Op::GlobalAvgPool { spatial, .. } => x.chunks(spatial).map(|c| c.iter().sum::<f64>() / spatial as f64).collect(),
        };
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: self.name.clone() });
        }
        Ok(y)
    }

    /// Accumulates parameter gradients from `dy` and returns the input
    /// gradient when `need_input` is set (an empty vector otherwise).
    pub fn backward(&mut self, dy: &[f64], need_input: bool) -> Vec<f64> {
        let batch = self.batch;
        match self.op {
            Op::Linear { inputs, outputs } => {
                let (gw, gb) = self.grads.split_at_mut(inputs * outputs);
                gemm(outputs, batch, inputs, dy, true, &self.cache, false, gw, 1.0);
                for row in dy.chunks(outputs) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
                if !need_input {
                    return Vec::new();
                }
                let mut dx = vec![0.0; batch * inputs];
                gemm(batch, outputs, inputs, dy, false, &self.params[..inputs * outputs], false, &mut dx, 0.0);
                dx
            }
            Op::Conv { cout, .. } => {
                let (ho, wo) = self.op.conv_out();
                let p = ho * wo;
                let ckk = self.op.fan_in();
                let (gw, gb) = self.grads.split_at_mut(cout * ckk);
                let mut dx = if need_input { vec![0.0; batch * self.op.in_size()] } else { Vec::new() };
                let mut dcol = vec![0.0; ckk * p];
                for s in 0..batch {
                    let dys = &dy[s * cout * p..(s + 1) * cout * p];
                    let col = &self.cache[s * ckk * p..(s + 1) * ckk * p];
                    gemm(cout, p, ckk, dys, false, col, true, gw, 1.0);
                    for (o, row) in dys.chunks(p).enumerate() {
                        gb[o] += row.iter().sum::<f64>();
                    }
                    if need_input {
                        gemm(ckk, cout, p, &self.params[..cout * ckk], true, dys, false, &mut dcol, 0.0);
                        let n = self.op.in_size();
                        col2im(self.op, &dcol, &mut dx[s * n..(s + 1) * n]);
                    }
                }
                dx
            }
            Op::BatchNorm { channels, spatial } => {
                let n = (batch * spatial) as f64;
                let (gg, gbeta) = self.grads.split_at_mut(channels);
                let mut dx = vec![0.0; dy.len()];
                for c in 0..channels {
                    let idx = |s: usize, k: usize| s * channels * spatial + c * spatial + k;
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
                    for s in 0..batch {
                        for k in 0..spatial {
                            let i = idx(s, k);
                            sum_dy += dy[i];
                            sum_dy_xhat += dy[i] * self.cache[i];
                        }
                    }
                    gg[c] += sum_dy_xhat;
                    gbeta[c] += sum_dy;
                    let scale = self.params[c] * self.aux[c] / n;
                    for s in 0..batch {
                        for k in 0..spatial {
                            let i = idx(s, k);
                            dx[i] = scale * (n * dy[i] - sum_dy - self.cache[i] * sum_dy_xhat);
                        }
                    }
                }
                dx
            }
            Op::Relu { .. } => dy.iter().zip(&self.cache).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect(),
            Op::Dropout { .. } => dy.iter().zip(&self.aux).map(|(d, m)| d * m).collect(),
            Op::GlobalAvgPool { spatial, .. } => dy.iter().flat_map(|&d| std::iter::repeat_n(d / spatial as f64, spatial)).collect(),
        }
    }
}

/// Output positions per channel; 1 for dense layers.
fn out_positions(op: Op) -> usize {
    match op {
        Op::Conv { .. } => {
            let (ho, wo) = op.conv_out();
            ho * wo
        }
        _ => 1,
    }
}

/// Unfolds one sample into `[cin * kh * kw, ho * wo]`.
fn im2col(op: Op, x: &[f64], col: &mut [f64]) {
    let Op::Conv { cin, h, w, kh, kw, stride, ph, pw, .. } = op else { unreachable!() };
    let (ho, wo) = op.conv_out();
    let p = ho * wo;
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - ph as isize;
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pw as isize;
                        row[oy * wo + ox] = if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                            x[(c * h + y as usize) * w + xx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dx`.
fn col2im(op: Op, col: &[f64], dx: &mut [f64]) {
    let Op::Conv { cin, h, w, kh, kw, stride, ph, pw, .. } = op else { unreachable!() };
    let (ho, wo) = op.conv_out();
    let p = ho * wo;
    for c in 0..cin {
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * p..][..p];
                for oy in 0..ho {
                    let y = (oy * stride + i) as isize - ph as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let xx = (ox * stride + j) as isize - pw as isize;
                        if xx >= 0 && (xx as usize) < w {
                            dx[(c * h + y as usize) * w + xx as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Direct convolution sum, no unfolding.
    fn direct_conv(op: Op, weights: &[f64], x: &[f64]) -> Vec<f64> {
        let Op::Conv { cin, cout, h, w, kh, kw, stride, ph, pw } = op else { unreachable!() };
        let (ho, wo) = op.conv_out();
        let mut y = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = weights[cout * cin * kh * kw + o];
                    for c in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let yy = (oy * stride + i) as isize - ph as isize;
                                let xx = (ox * stride + j) as isize - pw as isize;
                                if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                                    s += weights[((o * cin + c) * kh + i) * kw + j] * x[(c * h + yy as usize) * w + xx as usize];
                                }
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for op in [
            Op::Conv { cin: 2, cout: 3, h: 7, w: 9, kh: 3, kw: 3, stride: 2, ph: 0, pw: 0 },
            Op::Conv { cin: 3, cout: 2, h: 1, w: 11, kh: 1, kw: 5, stride: 1, ph: 0, pw: 2 },
        ] {
            let mut layer = Layer::new("c", op, &mut rng);
            for b in layer.params.iter_mut().rev().take(op.out_size()) {
                *b = 0.1;
            }
            let x: Vec<f64> = (0..2 * op.in_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = layer.forward(&x, 2, false, &mut rng).unwrap();
            for s in 0..2 {
                let expect = direct_conv(op, &layer.params, &x[s * op.in_size()..(s + 1) * op.in_size()]);
                for (a, e) in y[s * op.out_size()..].iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_the_adjoint() {
        let op = Op::Conv { cin: 2, cout: 1, h: 5, w: 6, kh: 3, kw: 3, stride: 2, ph: 1, pw: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ho, wo) = op.conv_out();
        let n = op.fan_in() * ho * wo;
        let x: Vec<f64> = (0..op.in_size()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut col = vec![0.0; n];
        im2col(op, &x, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(op, &c, &mut back);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1, 2], [3, 4]], b = [[5, 6], [7, 8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, true, &mut c, 0.0);
        assert_eq!(c, [23.0, 31.0, 34.0, 46.0]);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Layer::new("d", Op::Dropout { p: 0.2, size: 1 }, &mut rng);
        // linear probe: the mean over masks of the training output equals the eval output
        let x = [1.7];
        let eval = layer.forward(&x, 1, false, &mut rng).unwrap()[0];
        let n = 10_000;
        let mean = (0..n).map(|_| layer.forward(&x, 1, true, &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        assert!((mean - eval).abs() / eval < 1e-2, "{mean} vs {eval}");
    }
}
