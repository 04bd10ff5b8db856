//! Mini-batch training, evaluation and the four training schemes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::hash::derive_seed;
use crate::noise::NoiseTrack;
use crate::signal::min_max_normalize_slice;

use super::layers::Tensor;
use super::model::{argmax, ArchDescriptor, CnnModel};
use super::optim::{adam_step, AdamConfig, AdamState};

/// A normalized input with its filter index.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub label: usize,
}

impl Sample {
    pub fn new(raw: &[f64], label: usize) -> Self {
        Sample {
            input: min_max_normalize_slice(raw).iter().map(|v| *v as f32).collect(),
            label,
        }
    }

    /// Fails on unlabeled tracks.
    pub fn from_track(track: &NoiseTrack) -> Result<Self> {
        let label = track
            .label
            .ok_or_else(|| Error::param(format!("track {} has no label", track.id)))?;
        Ok(Sample::new(track.signal.samples(), label))
    }
}

pub fn samples_from_tracks(tracks: &[NoiseTrack]) -> Result<Vec<Sample>> {
    tracks.iter().map(Sample::from_track).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub l2_coefficient: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            l2_coefficient: 1e-4,
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::param("epochs and batch size must be at least 1"));
        }
        let positive = [self.l2_coefficient, self.learning_rate, self.epsilon];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::param("L2 coefficient, learning rate and epsilon must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::param("Adam betas must lie in (0, 1)"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation accuracy (earliest on ties).
    pub model: CnnModel<f32>,
    pub metrics: Vec<EpochMetrics>,
    pub best_epoch: usize,
}

fn batch_tensor(data: &[Sample], idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
    let len = data[idx[0]].input.len();
    let mut values = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        values.extend_from_slice(&data[i].input);
    }
    (
        Tensor::from_data(idx.len(), 1, len, values),
        idx.iter().map(|&i| data[i].label).collect(),
    )
}

const EVAL_BATCH: usize = 32;

/// Predicted indices, batch norm in inference mode.
pub fn predict_samples(model: &CnnModel<f32>, data: &[Sample], exec: Execution) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = batch_tensor(data, chunk);
        out.extend(model.probabilities(&x, exec)?.iter().map(|p| argmax(p)));
    }
    Ok(out)
}

/// Fraction of correctly predicted samples.
pub fn evaluate(model: &CnnModel<f32>, data: &[Sample], exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let predicted = predict_samples(model, data, exec)?;
    let correct = predicted.iter().zip(data).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / data.len() as f64)
}

const SPLIT_SALT: u64 = 0x5b17;
const SHUFFLE_SALT: u64 = 0x5f1e;

/// Seeded 90/10 train/validation split. With fewer than ten samples the
/// validation set is the training set.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_SALT)));
    let val = n / 10;
    if val == 0 {
        return (idx.clone(), idx);
    }
    let train = idx.split_off(val);
    (train, idx)
}

pub fn train(model: CnnModel<f32>, data: &[Sample], config: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    train_observed(model, data, config, exec, |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_observed(
    mut model: CnnModel<f32>,
    data: &[Sample],
    config: &TrainConfig,
    exec: Execution,
    mut observer: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = data.iter().find(|s| s.input.len() != model.arch.input_len || s.label >= model.arch.classes) {
        return Err(Error::param(format!(
            "sample of length {} with label {} does not fit the network",
            s.input.len(),
            s.label
        )));
    }
    let (train_idx, val_idx) = split_indices(data.len(), config.seed);
    let validation: Vec<Sample> = val_idx.iter().map(|&i| data[i].clone()).collect();
    let adam = config.adam();
    let mut state = AdamState::for_model(&model);
    let mut order = train_idx;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, CnnModel<f32>)> = None;

    for epoch in 1..=config.epochs {
        let shuffle_seed = derive_seed(derive_seed(config.seed, SHUFFLE_SALT), epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let (x, labels) = batch_tensor(data, batch);
            let (loss, grads) = model.loss_and_gradients(&x, &labels, config.l2_coefficient, exec)?;
            if !loss.is_finite() {
                return Err(Error::Invariant(format!("training loss became {loss} in epoch {epoch}")));
            }
            adam_step(&mut model, &grads, &mut state, &adam)?;
            loss_sum += loss * batch.len() as f64;
        }
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_accuracy: evaluate(&model, &validation, exec)?,
        };
        observer(&m);
        if best.as_ref().map_or(true, |(acc, _, _)| m.val_accuracy > *acc) {
            best = Some((m.val_accuracy, epoch, model.clone()));
        }
        metrics.push(m);
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        metrics,
        best_epoch,
    })
}

pub fn write_metrics_csv(mut w: impl Write, metrics: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_accuracy")?;
    for m in metrics {
        writeln!(w, "{},{:.6},{:.6}", m.epoch, m.train_loss, m.val_accuracy)?;
    }
    Ok(())
}

/// Which data the classifier sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// Domain A only.
    SyntheticOnly,
    /// Domain B only.
    RealOnly,
    /// Domain A, then domain B with a fresh optimizer at a tenth of the
    /// learning rate.
    FineTune,
    /// Domain A and B shuffled together.
    Mixed,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::SyntheticOnly, Scheme::RealOnly, Scheme::FineTune, Scheme::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SyntheticOnly => "synthetic-only",
            Scheme::RealOnly => "real-only",
            Scheme::FineTune => "fine-tune",
            Scheme::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::param(format!("unknown scheme {s:?}")))
    }
}

pub const FINE_TUNE_LR_FACTOR: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SchemeOutcome {
    pub scheme: Scheme,
    pub accuracy: f64,
    pub model: CnnModel<f32>,
}

/// Trains a fresh network (initialized from `config.seed`) under `scheme`
/// and reports accuracy on `test`.
pub fn run_scheme(
    scheme: Scheme,
    arch: &ArchDescriptor,
    synthetic: &[Sample],
    real: &[Sample],
    test: &[Sample],
    config: &TrainConfig,
    exec: Execution,
) -> Result<SchemeOutcome> {
    let model = CnnModel::build(arch.clone(), config.seed)?;
    let model = match scheme {
        Scheme::SyntheticOnly => train(model, synthetic, config, exec)?.model,
        Scheme::RealOnly => train(model, real, config, exec)?.model,
        Scheme::FineTune => {
            let pre = train(model, synthetic, config, exec)?.model;
            let tune = TrainConfig {
                learning_rate: config.learning_rate * FINE_TUNE_LR_FACTOR,
                ..config.clone()
            };
            train(pre, real, &tune, exec)?.model
        }
        Scheme::Mixed => {
            let both: Vec<Sample> = synthetic.iter().chain(real).cloned().collect();
            train(model, &both, config, exec)?.model
        }
    };
    Ok(SchemeOutcome {
        scheme,
        accuracy: evaluate(&model, test, exec)?,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn arch() -> ArchDescriptor {
        ArchDescriptor {
            input_len: 256,
            classes: 3,
            stem_kernel: 9,
            stem_channels: 4,
            stem_stride: 2,
            stem_pool: 2,
            block_widths: vec![4, 8],
            pool: 2,
        }
    }

    // Three tone classes at clearly different periods.
    fn tones(per_class: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for _ in 0..per_class {
            for (label, period) in [64.0, 16.0, 4.0].into_iter().enumerate() {
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let x: Vec<f64> = (0..256)
                    .map(|n| (std::f64::consts::TAU * n as f64 / period + phase).sin() + 0.05 * rng.gen_range(-1.0..1.0))
                    .collect();
                out.push(Sample::new(&x, label));
            }
        }
        out
    }

    fn config() -> TrainConfig {
        TrainConfig {
            epochs: 15,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learns_separable_tones() {
        let data = tones(40, 1);
        let model = CnnModel::build(arch(), 2).unwrap();
        let out = train(model, &data, &config(), Execution::default()).unwrap();
        assert_eq!(out.metrics.len(), 15);
        assert!(out.metrics.last().unwrap().train_loss < out.metrics[0].train_loss);
        assert!(evaluate(&out.model, &tones(10, 9), Execution::default()).unwrap() >= 0.95);
        let best = out.metrics.iter().map(|m| m.val_accuracy).fold(0.0, f64::max);
        assert_eq!(out.metrics[out.best_epoch - 1].val_accuracy, best);
    }

    #[test]
    fn training_is_deterministic_across_execution_modes() {
        let data = tones(4, 3);
        let cfg = TrainConfig { epochs: 2, ..config() };
        let a = train(CnnModel::build(arch(), 2).unwrap(), &data, &cfg, Execution::Serial).unwrap();
        let b = train(CnnModel::build(arch(), 2).unwrap(), &data, &cfg, Execution::Parallel).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = CnnModel::build(arch(), 0).unwrap();
        let zero = TrainConfig { epochs: 0, ..config() };
        assert!(matches!(train(model.clone(), &tones(2, 0), &zero, Execution::Serial), Err(Error::Parameter(_))));
        assert!(matches!(train(model.clone(), &[], &config(), Execution::Serial), Err(Error::EmptyDataset)));
        let wrong = vec![Sample::new(&[0.0; 10], 0)];
        assert!(matches!(train(model, &wrong, &config(), Execution::Serial), Err(Error::Parameter(_))));
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(100, 5);
        assert_eq!((t.len(), v.len()), (90, 10));
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(100, 5), (t, v));
        let (t, v) = split_indices(5, 0);
        assert_eq!(t, v);
    }

    #[test]
    fn scheme_names_round_trip() {
        assert_eq!(Scheme::ALL.len(), 4);
        for s in Scheme::ALL {
            assert_eq!(s.name().parse::<Scheme>().unwrap(), s);
        }
        assert!("other".parse::<Scheme>().is_err());
    }

    #[test]
    fn metrics_csv_layout() {
        let mut buf = Vec::new();
        let m = [EpochMetrics {
            epoch: 1,
            train_loss: 2.5,
            val_accuracy: 0.25,
        }];
        write_metrics_csv(&mut buf, &m).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,train_loss,val_accuracy\n1,2.500000,0.250000\n");
    }
}
