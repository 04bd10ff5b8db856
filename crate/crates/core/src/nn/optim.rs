//! Adam with bias correction.

use crate::error::{Error, Result};

use super::model::{CnnModel, Gradients};
use super::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn for_model<T: Real>(model: &CnnModel<T>) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        AdamState {
            m: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            v: shapes.iter().map(|n| vec![0.0; *n]).collect(),
            step: 0,
        }
    }
}

/// One update of every trainable tensor.
pub fn adam_step<T: Real>(
    model: &mut CnnModel<T>,
    grads: &Gradients<T>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    let mut params = model.params_mut();
    let shapes_match = params.len() == grads.0.len()
        && params.len() == state.m.len()
        && params
            .iter()
            .zip(&grads.0)
            .zip(&state.m)
            .all(|(((_, p), g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::ShapeMismatch("gradients or optimizer state do not match the model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        for (j, w) in p.iter_mut().enumerate() {
            let g = grads.0[i][j].to_f64().unwrap();
            let m = &mut state.m[i][j];
            let v = &mut state.v[i][j];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let update = config.learning_rate * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
            *w = T::of(w.to_f64().unwrap() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ArchDescriptor;

    fn tiny() -> CnnModel<f64> {
        CnnModel::build(ArchDescriptor::tiny(), 1).unwrap()
    }

    fn zero_grads(model: &CnnModel<f64>) -> Gradients<f64> {
        Gradients(model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect())
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut model = tiny();
        let before = model.clone();
        let mut state = AdamState::for_model(&model);
        let g = zero_grads(&model);
        for _ in 0..3 {
            adam_step(&mut model, &g, &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(model, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut model = tiny();
        let before = model.fc.bias[0];
        let mut state = AdamState::for_model(&model);
        let mut g = zero_grads(&model);
        let last = g.0.len() - 1;
        g.0[last][0] = 1.0;
        adam_step(&mut model, &g, &mut state, &AdamConfig::default()).unwrap();
        let expected = 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((before - model.fc.bias[0] - expected).abs() < 1e-15);
        assert_eq!(model.fc.bias[1], 0.0);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut model = tiny();
        let mut state = AdamState::for_model(&model);
        let mut g = zero_grads(&model);
        g.0.pop();
        assert!(matches!(
            adam_step(&mut model, &g, &mut state, &AdamConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
