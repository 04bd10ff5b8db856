//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are `[batch][channel][time]`, row-major. Per-sample work runs
//! through [`map_range`]; every cross-sample reduction is summed in sample
//! order, so serial and parallel execution give identical bits.

use crate::exec::{map_range, Execution};

use super::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, l: usize) -> Self {
        Tensor {
            n,
            c,
            l,
            data: vec![T::zero(); n * c * l],
        }
    }

    pub fn from_data(n: usize, c: usize, l: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * l, "tensor data length");
        Tensor { n, c, l, data }
    }

    fn stride(&self) -> usize {
        self.c * self.l
    }

    pub fn sample(&self, i: usize) -> &[T] {
        &self.data[i * self.stride()..(i + 1) * self.stride()]
    }

    fn from_samples(c: usize, l: usize, parts: Vec<Vec<T>>) -> Self {
        let n = parts.len();
        let mut data = Vec::with_capacity(n * c * l);
        for p in parts {
            data.extend_from_slice(&p);
        }
        Tensor::from_data(n, c, l, data)
    }
}

/// Sums equally sized buffers in order.
fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// 1-D convolution without bias (every convolution feeds a batch norm).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout][cin * kernel]`.
    pub weight: Vec<T>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv1d {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: vec![T::zero(); cout * cin * kernel],
        }
    }

    pub fn out_len(&self, l: usize) -> usize {
        (l + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel
    }

    pub fn fan_out(&self) -> usize {
        self.cout * self.kernel
    }

    /// Output positions `o` whose tap `j` lands inside `0..l`.
    fn valid_range(&self, j: usize, l: usize, lout: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride);
        let hi = if l + self.pad > j { ((l + self.pad - j - 1) / self.stride + 1).min(lout) } else { 0 };
        lo..hi.max(lo)
    }

    fn im2col(&self, x: &[T], l: usize, lout: usize) -> Vec<T> {
        let k = self.kernel;
        let mut cols = vec![T::zero(); self.cin * k * lout];
        for c in 0..self.cin {
            let xc = &x[c * l..(c + 1) * l];
            for j in 0..k {
                let row = &mut cols[(c * k + j) * lout..(c * k + j + 1) * lout];
                let r = self.valid_range(j, l, lout);
                if r.is_empty() {
                    continue;
                }
                let first = r.start * self.stride + j - self.pad;
                for (dst, src) in row[r].iter_mut().zip(xc[first..].iter().step_by(self.stride)) {
                    *dst = *src;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], l: usize, lout: usize) -> Vec<T> {
        let k = self.kernel;
        let mut x = vec![T::zero(); self.cin * l];
        for c in 0..self.cin {
            let xc = &mut x[c * l..(c + 1) * l];
            for j in 0..k {
                let row = &cols[(c * k + j) * lout..(c * k + j + 1) * lout];
                let r = self.valid_range(j, l, lout);
                if r.is_empty() {
                    continue;
                }
                let first = r.start * self.stride + j - self.pad;
                for (src, dst) in row[r].iter().zip(xc[first..].iter_mut().step_by(self.stride)) {
                    *dst += *src;
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Tensor<T>, exec: Execution) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let lout = self.out_len(x.l);
        let ck = self.fan_in();
        let parts = map_range(exec, x.n, |s| {
            let cols = self.im2col(x.sample(s), x.l, lout);
            let mut y = vec![T::zero(); self.cout * lout];
            T::gemm(
                self.cout, ck, lout, T::one(), &self.weight, ck as isize, 1, &cols, lout as isize, 1, T::zero(), &mut y,
                lout as isize, 1,
            );
            y
        });
        Tensor::from_samples(self.cout, lout, parts)
    }

    /// Weight gradient, and the input gradient when `need_dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool, exec: Execution) -> (Vec<T>, Option<Tensor<T>>) {
        let lout = dy.l;
        let ck = self.fan_in();
        let parts = map_range(exec, x.n, |s| {
            let cols = self.im2col(x.sample(s), x.l, lout);
            let g = dy.sample(s);
            let mut dw = vec![T::zero(); self.cout * ck];
            T::gemm(
                self.cout, lout, ck, T::one(), g, lout as isize, 1, &cols, 1, lout as isize, T::zero(), &mut dw, ck as isize,
                1,
            );
            let dx = need_dx.then(|| {
                let mut dcols = vec![T::zero(); ck * lout];
                T::gemm(
                    ck, self.cout, lout, T::one(), &self.weight, 1, ck as isize, g, lout as isize, 1, T::zero(), &mut dcols,
                    lout as isize, 1,
                );
                self.col2im(&dcols, x.l, lout)
            });
            (dw, dx)
        });
        let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        let dw = sum_in_order(dws, self.weight.len());
        let dx = need_dx.then(|| Tensor::from_samples(self.cin, x.l, dxs.into_iter().map(Option::unwrap).collect()));
        (dw, dx)
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over batch and time.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn rows<'a>(x: &'a [T], shape: (usize, usize, usize), c: usize) -> impl Iterator<Item = &'a [T]> + 'a {
        let (n, ch, l) = shape;
        (0..n).map(move |s| &x[(s * ch + c) * l..(s * ch + c + 1) * l])
    }

    /// Normalizes with batch statistics and updates the running averages.
    pub fn forward_train(&mut self, x: &Tensor<T>, exec: Execution) -> (Tensor<T>, BnCache<T>) {
        assert_eq!(x.c, self.channels(), "batch norm channels");
        let shape = (x.n, x.c, x.l);
        let m = (x.n * x.l) as f64;
        let stats = map_range(exec, x.c, |c| {
            let mut sum = 0.0;
            for row in Self::rows(&x.data, shape, c) {
                sum += row.iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for row in Self::rows(&x.data, shape, c) {
                sq += row.iter().map(|v| (v.to_f64().unwrap() - mean).powi(2)).sum::<f64>();
            }
            (mean, sq / m)
        });
        let mut y = vec![T::zero(); x.data.len()];
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = Vec::with_capacity(x.c);
        for (c, &(mean, var)) in stats.iter().enumerate() {
            let istd = 1.0 / (var + BN_EPSILON).sqrt();
            inv_std.push(istd);
            let (mu, is) = (T::of(mean), T::of(istd));
            let (g, b) = (self.gamma[c], self.beta[c]);
            for s in 0..x.n {
                let r = (s * x.c + c) * x.l..(s * x.c + c + 1) * x.l;
                for ((h, out), v) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x.data[r]) {
                    *h = (*v - mu) * is;
                    *out = g * *h + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let rm = self.running_mean[c].to_f64().unwrap();
            let rv = self.running_var[c].to_f64().unwrap();
            self.running_mean[c] = T::of((1.0 - BN_MOMENTUM) * rm + BN_MOMENTUM * mean);
            self.running_var[c] = T::of((1.0 - BN_MOMENTUM) * rv + BN_MOMENTUM * unbiased);
        }
        (Tensor::from_data(x.n, x.c, x.l, y), BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.channels(), "batch norm channels");
        let mut y = x.clone();
        for (row, values) in y.data.chunks_mut(x.l).enumerate() {
            let c = row % x.c;
            let inv_std = 1.0 / (self.running_var[c].to_f64().unwrap() + BN_EPSILON).sqrt();
            let a = self.gamma[c].to_f64().unwrap() * inv_std;
            let b = self.beta[c].to_f64().unwrap() - self.running_mean[c].to_f64().unwrap() * a;
            let (a, b) = (T::of(a), T::of(b));
            for v in values {
                *v = a * *v + b;
            }
        }
        y
    }

    /// Returns `(d_gamma, d_beta, d_x)`.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>, exec: Execution) -> (Vec<T>, Vec<T>, Tensor<T>) {
        let shape = (dy.n, dy.c, dy.l);
        let m = (dy.n * dy.l) as f64;
        let sums = map_range(exec, dy.c, |c| {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for (g, h) in Self::rows(&dy.data, shape, c).zip(Self::rows(&cache.xhat, shape, c)) {
                for (g, h) in g.iter().zip(h) {
                    let g = g.to_f64().unwrap();
                    sum_dy += g;
                    sum_dy_xhat += g * h.to_f64().unwrap();
                }
            }
            (sum_dy, sum_dy_xhat)
        });
        let mut dx = vec![T::zero(); dy.data.len()];
        for (c, &(sum_dy, sum_dy_xhat)) in sums.iter().enumerate() {
            let k = self.gamma[c].to_f64().unwrap() * cache.inv_std[c] / m;
            let (a, b, off) = (T::of(k * m), T::of(-k * sum_dy_xhat), T::of(-k * sum_dy));
            for s in 0..dy.n {
                let r = (s * dy.c + c) * dy.l..(s * dy.c + c + 1) * dy.l;
                for ((out, g), h) in dx[r.clone()].iter_mut().zip(&dy.data[r.clone()]).zip(&cache.xhat[r]) {
                    *out = a * *g + b * *h + off;
                }
            }
        }
        let dgamma = sums.iter().map(|s| T::of(s.1)).collect();
        let dbeta = sums.iter().map(|s| T::of(s.0)).collect();
        (dgamma, dbeta, Tensor::from_data(dy.n, dy.c, dy.l, dx))
    }
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    for v in &mut x.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, y) in dy.data.iter_mut().zip(&out.data) {
        if *y <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Non-overlapping max pooling; the first maximum wins on ties.
pub fn max_pool<T: Real>(x: &Tensor<T>, size: usize) -> (Tensor<T>, Vec<usize>) {
    let lout = x.l / size;
    let mut y = Tensor::zeros(x.n, x.c, lout);
    let mut idx = vec![0; x.n * x.c * lout];
    for row in 0..x.n * x.c {
        let src = &x.data[row * x.l..(row + 1) * x.l];
        for o in 0..lout {
            let mut best = o * size;
            for p in o * size + 1..(o + 1) * size {
                if src[p] > src[best] {
                    best = p;
                }
            }
            y.data[row * lout + o] = src[best];
            idx[row * lout + o] = best;
        }
    }
    (y, idx)
}

pub fn max_pool_backward<T: Real>(dy: &Tensor<T>, idx: &[usize], in_len: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.n, dy.c, in_len);
    for row in 0..dy.n * dy.c {
        for o in 0..dy.l {
            dx.data[row * in_len + idx[row * dy.l + o]] += dy.data[row * dy.l + o];
        }
    }
    dx
}

/// Mean over time: `[n][c][l]` to `[n][c]`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let inv = T::one() / T::of(x.l as f64);
    x.data.chunks(x.l).map(|row| row.iter().copied().sum::<T>() * inv).collect()
}

pub fn global_avg_pool_backward<T: Real>(dy: &[T], n: usize, c: usize, l: usize) -> Tensor<T> {
    let inv = T::one() / T::of(l as f64);
    let data = dy.iter().flat_map(|g| std::iter::repeat(*g * inv).take(l)).collect();
    Tensor::from_data(n, c, l, data)
}

/// Fully connected layer, `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs][inputs]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    /// `x` is `[n][inputs]`; returns `[n][outputs]`.
    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let (i, o) = (self.inputs, self.outputs);
        let mut y: Vec<T> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        T::gemm(n, i, o, T::one(), x, i as isize, 1, &self.weight, 1, i as isize, T::one(), &mut y, o as isize, 1);
        y
    }

    /// Returns `(d_weight, d_bias, d_x)`.
    pub fn backward(&self, x: &[T], dy: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (i, o) = (self.inputs, self.outputs);
        let mut dw = vec![T::zero(); o * i];
        T::gemm(o, n, i, T::one(), dy, 1, o as isize, x, i as isize, 1, T::zero(), &mut dw, i as isize, 1);
        let mut db = vec![T::zero(); o];
        for row in dy.chunks(o) {
            for (b, g) in db.iter_mut().zip(row) {
                *b += *g;
            }
        }
        let mut dx = vec![T::zero(); n * i];
        T::gemm(n, o, i, T::one(), dy, o as isize, 1, &self.weight, i as isize, 1, T::zero(), &mut dx, i as isize, 1);
        (dw, db, dx)
    }
}

/// Row-wise softmax in f64.
pub fn softmax(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        p.extend(exps.iter().map(|e| e / total));
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], labels: &[usize], classes: usize) -> (f64, Vec<T>) {
    let n = labels.len();
    let z: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let p = softmax(&z, classes);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (s, &label) in labels.iter().enumerate() {
        let row = &p[s * classes..(s + 1) * classes];
        loss -= row[label].max(f64::MIN_POSITIVE).ln();
        for (k, pk) in row.iter().enumerate() {
            let target = if k == label { 1.0 } else { 0.0 };
            grad.push(T::of((pk - target) / n as f64));
        }
    }
    (loss / n as f64, grad)
}
