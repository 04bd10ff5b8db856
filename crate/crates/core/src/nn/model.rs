//! The residual 1-D CNN: architecture descriptor, parameters, inference and
//! backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::labeler::argmin;
use crate::signal::{min_max_normalize_slice, Signal};

use super::layers::{
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu, relu_backward, softmax,
    softmax_cross_entropy, BatchNorm, BnCache, Conv1d, Linear, Tensor,
};
use super::real::Real;

/// Shape of a network: a wide strided stem followed by residual blocks of
/// 3-tap convolutions with max pooling in between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_len: usize,
    pub classes: usize,
    pub stem_kernel: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// Max-pool size after the stem; 1 disables it.
    pub stem_pool: usize,
    pub block_widths: Vec<usize>,
    /// Max-pool size between consecutive blocks.
    pub pool: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            input_len: 16_000,
            classes: 15,
            stem_kernel: 63,
            stem_channels: 32,
            stem_stride: 4,
            stem_pool: 4,
            block_widths: vec![32, 64, 192],
            pool: 4,
        }
    }
}

impl ArchDescriptor {
    /// 64-sample input, one block of four channels.
    pub fn tiny() -> Self {
        ArchDescriptor {
            input_len: 64,
            classes: 15,
            stem_kernel: 7,
            stem_channels: 4,
            stem_stride: 2,
            stem_pool: 2,
            block_widths: vec![4],
            pool: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_len,
            self.classes,
            self.stem_kernel,
            self.stem_channels,
            self.stem_stride,
            self.stem_pool,
            self.pool,
        ];
        if positive.contains(&0) || self.block_widths.is_empty() || self.block_widths.contains(&0) {
            return Err(Error::param("architecture sizes must be positive with at least one block"));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::param("stem kernel must be odd"));
        }
        let mut l = (self.input_len + 2 * (self.stem_kernel / 2)).saturating_sub(self.stem_kernel) / self.stem_stride + 1;
        l /= self.stem_pool;
        for _ in 1..self.block_widths.len() {
            l /= self.pool;
        }
        if l == 0 {
            return Err(Error::param("input too short for this architecture"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock<T> {
    pub conv1: Conv1d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv1d<T>,
    pub bn2: BatchNorm<T>,
    /// 1x1 projection when the width changes.
    pub shortcut: Option<(Conv1d<T>, BatchNorm<T>)>,
}

impl<T: Real> ResBlock<T> {
    fn new(cin: usize, cout: usize) -> Self {
        ResBlock {
            conv1: Conv1d::new(cin, cout, 3, 1, 1),
            bn1: BatchNorm::new(cout),
            conv2: Conv1d::new(cout, cout, 3, 1, 1),
            bn2: BatchNorm::new(cout),
            shortcut: (cin != cout).then(|| (Conv1d::new(cin, cout, 1, 1, 0), BatchNorm::new(cout))),
        }
    }
}

/// Role of a stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Convolution or fully connected weights; L2-penalized.
    Weight,
    /// Batch-norm scale/shift and biases.
    Affine,
    /// Batch-norm running statistics; not trained.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel<T> {
    pub arch: ArchDescriptor,
    pub stem: Conv1d<T>,
    pub stem_bn: BatchNorm<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub fc: Linear<T>,
}

fn glorot<T: Real>(conv: &mut Conv1d<T>, rng: &mut ChaCha8Rng) {
    let (fan_in, fan_out) = (conv.fan_in(), conv.fan_out());
    glorot_values(&mut conv.weight, fan_in, fan_out, rng);
}

fn glorot_values<T: Real>(values: &mut [T], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in values {
        *v = T::of(rng.gen_range(-limit..=limit));
    }
}

pub fn build_default_model(seed: u64) -> CnnModel<f32> {
    CnnModel::build(ArchDescriptor::default(), seed).expect("default architecture is valid")
}

impl<T: Real> CnnModel<T> {
    /// Glorot-uniform weights, unit BN scale, zero shifts and biases.
    pub fn build(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stem = Conv1d::new(1, arch.stem_channels, arch.stem_kernel, arch.stem_stride, arch.stem_kernel / 2);
        glorot(&mut stem, &mut rng);
        let mut blocks = Vec::new();
        let mut width = arch.stem_channels;
        for &w in &arch.block_widths {
            let mut b = ResBlock::new(width, w);
            glorot(&mut b.conv1, &mut rng);
            glorot(&mut b.conv2, &mut rng);
            if let Some((conv, _)) = &mut b.shortcut {
                glorot(conv, &mut rng);
            }
            blocks.push(b);
            width = w;
        }
        let mut fc = Linear::new(width, arch.classes);
        glorot_values(&mut fc.weight, width, arch.classes, &mut rng);
        Ok(CnnModel {
            stem_bn: BatchNorm::new(arch.stem_channels),
            arch,
            stem,
            blocks,
            fc,
        })
    }

    /// Every stored tensor in declaration order.
    pub fn tensors(&self) -> Vec<(TensorKind, &Vec<T>)> {
        use TensorKind::*;
        let mut out = vec![(Weight, &self.stem.weight)];
        push_bn(&mut out, &self.stem_bn);
        for b in &self.blocks {
            out.push((Weight, &b.conv1.weight));
            push_bn(&mut out, &b.bn1);
            out.push((Weight, &b.conv2.weight));
            push_bn(&mut out, &b.bn2);
            if let Some((conv, bn)) = &b.shortcut {
                out.push((Weight, &conv.weight));
                push_bn(&mut out, bn);
            }
        }
        out.push((Weight, &self.fc.weight));
        out.push((Affine, &self.fc.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(TensorKind, &mut Vec<T>)> {
        use TensorKind::*;
        let mut out = vec![(Weight, &mut self.stem.weight)];
        push_bn_mut(&mut out, &mut self.stem_bn);
        for b in &mut self.blocks {
            out.push((Weight, &mut b.conv1.weight));
            push_bn_mut(&mut out, &mut b.bn1);
            out.push((Weight, &mut b.conv2.weight));
            push_bn_mut(&mut out, &mut b.bn2);
            if let Some((conv, bn)) = &mut b.shortcut {
                out.push((Weight, &mut conv.weight));
                push_bn_mut(&mut out, bn);
            }
        }
        out.push((Weight, &mut self.fc.weight));
        out.push((Affine, &mut self.fc.bias));
        out
    }

    /// Trainable tensors, aligned with [`Gradients`].
    pub fn params(&self) -> Vec<(TensorKind, &Vec<T>)> {
        self.tensors().into_iter().filter(|(k, _)| *k != TensorKind::Buffer).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(TensorKind, &mut Vec<T>)> {
        self.tensors_mut().into_iter().filter(|(k, _)| *k != TensorKind::Buffer).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Real>(&self) -> CnnModel<U> {
        let mut out = CnnModel::<U>::build(self.arch.clone(), 0).expect("architecture already validated");
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.iter().map(|v| U::of(v.to_f64().unwrap())).collect();
        }
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.c != 1 || x.l != self.arch.input_len {
            return Err(Error::param(format!(
                "network expects 1 x {} inputs, got {} x {}",
                self.arch.input_len, x.c, x.l
            )));
        }
        Ok(())
    }

    /// Logits with batch norm in inference mode; `[n][classes]`.
    pub fn logits(&self, x: &Tensor<T>, exec: Execution) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut h = self.stem_bn.forward_eval(&self.stem.forward(x, exec));
        relu(&mut h);
        if self.arch.stem_pool > 1 {
            h = max_pool(&h, self.arch.stem_pool).0;
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = max_pool(&h, self.arch.pool).0;
            }
            let mut a = b.bn1.forward_eval(&b.conv1.forward(&h, exec));
            relu(&mut a);
            let mut out = b.bn2.forward_eval(&b.conv2.forward(&a, exec));
            match &b.shortcut {
                Some((conv, bn)) => add_into(&mut out, &bn.forward_eval(&conv.forward(&h, exec))),
                None => add_into(&mut out, &h),
            }
            relu(&mut out);
            h = out;
        }
        Ok(self.fc.forward(&global_avg_pool(&h), x.n))
    }

    /// Posterior rows for a batch of already normalized inputs.
    pub fn probabilities(&self, x: &Tensor<T>, exec: Execution) -> Result<Vec<Vec<f64>>> {
        let z: Vec<f64> = self.logits(x, exec)?.iter().map(|v| v.to_f64().unwrap()).collect();
        Ok(softmax(&z, self.arch.classes).chunks(self.arch.classes).map(<[f64]>::to_vec).collect())
    }

    /// Training-mode forward and backward pass. Updates the batch-norm
    /// running statistics. The loss is the mean cross-entropy plus
    /// `l2 * sum(w^2)` over convolution and fully connected weights.
    pub fn loss_and_gradients(&mut self, x: &Tensor<T>, labels: &[usize], l2: f64, exec: Execution) -> Result<(f64, Gradients<T>)> {
        self.check_input(x)?;
        if x.n == 0 || labels.len() != x.n {
            return Err(Error::param("batch must be non-empty with one label per input"));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= self.arch.classes) {
            return Err(Error::param(format!("label {bad} out of range")));
        }
        let arch = self.arch.clone();

        // forward
        let stem_out = self.stem.forward(x, exec);
        let (mut stem_act, stem_cache) = self.stem_bn.forward_train(&stem_out, exec);
        relu(&mut stem_act);
        let (mut h, stem_pool) = if arch.stem_pool > 1 {
            let (p, idx) = max_pool(&stem_act, arch.stem_pool);
            (p, Some(idx))
        } else {
            (stem_act.clone(), None)
        };
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let mut pool = None;
            if i > 0 {
                let (p, idx) = max_pool(&h, arch.pool);
                pool = Some((idx, h.l));
                h = p;
            }
            let z1 = b.conv1.forward(&h, exec);
            let (mut a1, c1) = b.bn1.forward_train(&z1, exec);
            relu(&mut a1);
            let z2 = b.conv2.forward(&a1, exec);
            let (mut out, c2) = b.bn2.forward_train(&z2, exec);
            let sc = match &mut b.shortcut {
                Some((conv, bn)) => {
                    let (s, cs) = bn.forward_train(&conv.forward(&h, exec), exec);
                    add_into(&mut out, &s);
                    Some(cs)
                }
                None => {
                    add_into(&mut out, &h);
                    None
                }
            };
            relu(&mut out);
            let input = std::mem::replace(&mut h, out.clone());
            caches.push(BlockCache {
                pool,
                input,
                c1,
                a1,
                c2,
                sc,
                out,
            });
        }
        let features = global_avg_pool(&h);
        let logits = self.fc.forward(&features, x.n);
        let (ce, dlogits) = softmax_cross_entropy(&logits, labels, arch.classes);

        // backward
        let mut grads: Vec<Vec<T>> = Vec::new();
        let (dfw, dfb, dfeat) = self.fc.backward(&features, &dlogits, x.n);
        let mut dh = global_avg_pool_backward(&dfeat, x.n, h.c, h.l);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, cache) in self.blocks.iter().zip(caches.iter()).rev() {
            relu_backward(&cache.out, &mut dh);
            let mut g = Vec::new();
            let (dg2, db2, dz2) = b.bn2.backward(&cache.c2, &dh, exec);
            let (dw2, da1) = b.conv2.backward(&cache.a1, &dz2, true, exec);
            let mut da1 = da1.expect("requested");
            relu_backward(&cache.a1, &mut da1);
            let (dg1, db1, dz1) = b.bn1.backward(&cache.c1, &da1, exec);
            let (dw1, dinput) = b.conv1.backward(&cache.input, &dz1, true, exec);
            let mut dinput = dinput.expect("requested");
            g.extend([dw1, dg1, db1, dw2, dg2, db2]);
            match (&b.shortcut, &cache.sc) {
                (Some((conv, bn)), Some(cs)) => {
                    let (dgs, dbs, dzs) = bn.backward(cs, &dh, exec);
                    let (dws, dxs) = conv.backward(&cache.input, &dzs, true, exec);
                    add_into(&mut dinput, &dxs.expect("requested"));
                    g.extend([dws, dgs, dbs]);
                }
                _ => add_into(&mut dinput, &dh),
            }
            dh = match &cache.pool {
                Some((idx, len)) => max_pool_backward(&dinput, idx, *len),
                None => dinput,
            };
            block_grads.push(g);
        }
        if let Some(idx) = &stem_pool {
            dh = max_pool_backward(&dh, idx, stem_act.l);
        }
        relu_backward(&stem_act, &mut dh);
        let (dsg, dsb, dstem) = self.stem_bn.backward(&stem_cache, &dh, exec);
        let (dsw, _) = self.stem.backward(x, &dstem, false, exec);
        grads.extend([dsw, dsg, dsb]);
        for g in block_grads.into_iter().rev() {
            grads.extend(g);
        }
        grads.extend([dfw, dfb]);

        let mut penalty = 0.0;
        if l2 != 0.0 {
            for ((kind, w), g) in self.params().into_iter().zip(grads.iter_mut()) {
                if kind == TensorKind::Weight {
                    for (gi, wi) in g.iter_mut().zip(w) {
                        let wv = wi.to_f64().unwrap();
                        penalty += wv * wv;
                        *gi += T::of(2.0 * l2 * wv);
                    }
                }
            }
        }
        Ok((ce + l2 * penalty, Gradients(grads)))
    }
}

impl CnnModel<f32> {
    /// Posterior for one normalized track.
    pub fn forward(&self, normalized: &[f64]) -> Result<Vec<f64>> {
        let x = Tensor::from_data(1, 1, normalized.len(), normalized.iter().map(|v| *v as f32).collect());
        Ok(self.probabilities(&x, Execution::Serial)?.remove(0))
    }

    /// Index of the most probable filter for a raw track; lowest index on
    /// ties.
    pub fn predict_index(&self, track: &Signal) -> Result<usize> {
        let p = self.forward(&min_max_normalize_slice(track.samples()))?;
        Ok(argmax(&p))
    }
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    argmin(&negated)
}

/// Gradients aligned with [`CnnModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<Vec<T>>);

struct BlockCache<T> {
    pool: Option<(Vec<usize>, usize)>,
    input: Tensor<T>,
    c1: BnCache<T>,
    a1: Tensor<T>,
    c2: BnCache<T>,
    sc: Option<BnCache<T>>,
    out: Tensor<T>,
}

fn add_into<T: Real>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += *b;
    }
}

fn push_bn<'a, T>(out: &mut Vec<(TensorKind, &'a Vec<T>)>, bn: &'a BatchNorm<T>) {
    out.push((TensorKind::Affine, &bn.gamma));
    out.push((TensorKind::Affine, &bn.beta));
    out.push((TensorKind::Buffer, &bn.running_mean));
    out.push((TensorKind::Buffer, &bn.running_var));
}

fn push_bn_mut<'a, T>(out: &mut Vec<(TensorKind, &'a mut Vec<T>)>, bn: &'a mut BatchNorm<T>) {
    out.push((TensorKind::Affine, &mut bn.gamma));
    out.push((TensorKind::Affine, &mut bn.beta));
    out.push((TensorKind::Buffer, &mut bn.running_mean));
    out.push((TensorKind::Buffer, &mut bn.running_var));
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_batch(n: usize, len: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_data(n, 1, len, (0..n * len).map(|_| rng.gen_range(0.0..1.0)).collect())
    }

    /// Max per-tensor relative error between analytic and central-difference
    /// gradients of the training loss.
    pub(crate) fn gradient_check(arch: ArchDescriptor, seed: u64, l2: f64) -> f64 {
        const H: f64 = 1e-4;
        let mut model = CnnModel::<f64>::build(arch.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        // non-trivial affine parameters
        for (kind, t) in model.params_mut() {
            if kind == TensorKind::Affine {
                t.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
            }
        }
        let x = random_batch(3, arch.input_len, seed);
        let labels = [1, 7, 14];
        let (_, grads) = model.loss_and_gradients(&x, &labels, l2, Execution::Serial).unwrap();
        let mut worst: f64 = 0.0;
        for (ti, analytic) in grads.0.iter().enumerate() {
            let numeric: Vec<f64> = (0..analytic.len())
                .map(|j| {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.params_mut()[ti].1[j] += delta;
                        m.loss_and_gradients(&x, &labels, l2, Execution::Serial).unwrap().0
                    };
                    (eval(H) - eval(-H)) / (2.0 * H)
                })
                .collect();
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            worst = worst.max(diff / norm.max(1e-12));
        }
        worst
    }

    #[test]
    fn tiny_model_gradients_match_finite_differences() {
        let err = gradient_check(ArchDescriptor::tiny(), 11, 1e-4);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn projection_shortcut_gradients_match_finite_differences() {
        let arch = ArchDescriptor {
            block_widths: vec![4, 6],
            ..ArchDescriptor::tiny()
        };
        let err = gradient_check(arch, 12, 0.0);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn default_parameter_count_in_budget() {
        let n = build_default_model(0).parameter_count();
        assert!((170_000..=250_000).contains(&n), "{n}");
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(build_default_model(5), build_default_model(5));
        assert_ne!(build_default_model(5), build_default_model(6));
    }

    #[test]
    fn glorot_bounds() {
        let m = build_default_model(1);
        let limit = (6.0f64 / (63.0 + 32.0 * 63.0)).sqrt() as f32;
        assert!(m.stem.weight.iter().all(|w| w.abs() <= limit));
        assert!(m.stem_bn.gamma.iter().all(|g| *g == 1.0));
        assert!(m.fc.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn posteriors_are_distributions() {
        let m = build_default_model(2);
        let p = m.forward(&vec![0.0; 16_000]).unwrap();
        assert_eq!(p.len(), 15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..16_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let p = m.forward(&x).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(m.forward(&x[..100]).is_err());
    }

    #[test]
    fn untrained_model_is_not_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0.0;
        for i in 0..100 {
            let m = CnnModel::<f32>::build(ArchDescriptor::tiny(), i).unwrap();
            let x: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            total += m.forward(&x).unwrap().into_iter().fold(0.0, f64::max);
        }
        assert!(total / 100.0 < 0.5);
    }

    #[test]
    fn prediction_is_scale_invariant() {
        let m = CnnModel::<f32>::build(ArchDescriptor::tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let x = Signal::from_samples((0..64).map(|_| rng.gen_range(-1.0..1.0)).collect());
            assert_eq!(m.predict_index(&x).unwrap(), m.predict_index(&x.scaled(7.5)).unwrap());
        }
        assert!(m.predict_index(&Signal::zeros(64)).unwrap() < 15);
    }

    #[test]
    fn inference_is_batch_independent() {
        let m = build_default_model(7);
        let x = random_batch(3, 16_000, 8);
        let xf = Tensor::from_data(3, 1, 16_000, x.data.iter().map(|v| *v as f32).collect());
        let batch = m.probabilities(&xf, Execution::default()).unwrap();
        for s in 0..3 {
            let single = m.forward(&x.data[s * 16_000..(s + 1) * 16_000]).unwrap();
            for (a, b) in single.iter().zip(&batch[s]) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.1, 0.9, 0.0]), 1);
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let mut m = CnnModel::<f64>::build(ArchDescriptor::tiny(), 9).unwrap();
        m.fc.weight.iter_mut().for_each(|w| *w = 0.0);
        m.fc.bias[3] = 50.0;
        let x = random_batch(2, 64, 1);
        let (loss, _) = m.loss_and_gradients(&x, &[3, 3], 0.0, Execution::Serial).unwrap();
        assert!(loss < 1e-12);
        m.fc.bias[3] = 0.0;
        let (loss, _) = m.loss_and_gradients(&x, &[3, 3], 0.0, Execution::Serial).unwrap();
        assert!((loss - 15f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cast_round_trips() {
        let m = build_default_model(3);
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
