//! Single-channel feedforward ANC simulation.
//!
//! The reference `x(n)` is the primary noise. The disturbance at the error
//! microphone is `d = P * x`; the control filter output `y = w * x` reaches
//! the microphone through the secondary path, `e = d - S * y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::signal::{self, convolve, design_bandpass, dot, zero_padded, FirFilter, Signal, SAMPLE_RATE};

pub const DEFAULT_STEP_SIZE: f64 = 1e-4;
pub const DEFAULT_CONTROL_LENGTH: usize = 1024;
/// Taps of the default primary and secondary path band-pass filters.
pub const DEFAULT_PATH_TAPS: usize = 1025;
pub const PATH_LOW_HZ: f64 = 20.0;
pub const PATH_HIGH_HZ: f64 = 7980.0;

/// FxNLMS regularizer added to the filtered-reference energy.
pub const NLMS_DELTA: f64 = 1e-6;
/// Error magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Everything needed to run one ANC simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AncScenario {
    pub primary_path: FirFilter,
    pub secondary_path: FirFilter,
    pub secondary_path_estimate: FirFilter,
    pub step_size: f64,
    pub control_length: usize,
}

impl Default for AncScenario {
    /// Band-pass 20-7980 Hz primary and secondary paths, perfect secondary
    /// path estimate, step size 1e-4 and 1024 control taps.
    fn default() -> Self {
        let path = design_bandpass(PATH_LOW_HZ, PATH_HIGH_HZ, DEFAULT_PATH_TAPS, SAMPLE_RATE)
            .expect("default path design is valid");
        AncScenario {
            primary_path: path.clone(),
            secondary_path: path.clone(),
            secondary_path_estimate: path,
            step_size: DEFAULT_STEP_SIZE,
            control_length: DEFAULT_CONTROL_LENGTH,
        }
    }
}

impl AncScenario {
    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.control_length == 0 {
            return Err(Error::param("control length must be at least 1"));
        }
        if !self.step_size.is_finite() || self.step_size < 0.0 {
            return Err(Error::param(format!("step size must be finite and >= 0, got {}", self.step_size)));
        }
        Ok(())
    }

    /// FNV-1a over the canonical little-endian serialization of every
    /// scenario parameter.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update(b"sfanc-scenario-v1");
        h.update_f64s(self.primary_path.coefficients());
        h.update_f64s(self.secondary_path.coefficients());
        h.update_f64s(self.secondary_path_estimate.coefficients());
        h.update(&self.step_size.to_le_bytes());
        h.update_u64(self.control_length as u64);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncRunResult {
    pub error_signal: Signal,
    pub final_weights: FirFilter,
    pub disturbance: Signal,
}

pub fn simulate_disturbance(x: &Signal, scenario: &AncScenario) -> Signal {
    convolve(x, &scenario.primary_path)
}

/// Fixed-filter control: `e = d - S * (w * x)`.
pub fn run_fixed(x: &Signal, w: &FirFilter, scenario: &AncScenario) -> AncRunResult {
    let d = simulate_disturbance(x, scenario);
    let y = convolve(x, w);
    let a = convolve(&y, &scenario.secondary_path);
    let e: Vec<f64> = d.samples().iter().zip(a.samples()).map(|(d, a)| d - a).collect();
    AncRunResult {
        error_signal: Signal::new(e, x.sample_rate()).expect("rate already validated"),
        final_weights: w.clone(),
        disturbance: d,
    }
}

#[derive(Debug, Clone, Copy)]
enum Update {
    Lms,
    Nlms,
}

/// Filtered-x LMS: `w(n+1) = w(n) + mu e(n) x'(n)` with `x' = S_hat * x`.
pub fn run_fxlms(x: &Signal, scenario: &AncScenario, w0: &FirFilter) -> Result<AncRunResult> {
    run_adaptive(x, scenario, w0, Update::Lms)
}

/// Filtered-x normalized LMS: the FxLMS step divided by `x'^T x' + delta`.
pub fn run_fxnlms(x: &Signal, scenario: &AncScenario, w0: &FirFilter) -> Result<AncRunResult> {
    run_adaptive(x, scenario, w0, Update::Nlms)
}

fn run_adaptive(x: &Signal, scenario: &AncScenario, w0: &FirFilter, rule: Update) -> Result<AncRunResult> {
    scenario.validate()?;
    let taps = scenario.control_length;
    if w0.taps() != taps {
        return Err(Error::param(format!(
            "initial weights have {} taps, scenario expects {taps}",
            w0.taps()
        )));
    }
    let n = x.len();
    let mu = scenario.step_size;
    let d = simulate_disturbance(x, scenario);
    let filtered = convolve(x, &scenario.secondary_path_estimate);

    let x_pad = zero_padded(x.samples(), taps);
    let xf_pad = zero_padded(filtered.samples(), taps);
    let s_rev = scenario.secondary_path.reversed();
    let s_taps = s_rev.len();
    let mut y_pad = vec![0.0; s_taps - 1 + n];
    // w reversed, so that y(n) = dot(w_rev, x_pad[n..n + taps]).
    let mut w_rev = w0.reversed();
    let mut e = vec![0.0; n];

    for i in 0..n {
        let y = dot(&w_rev, &x_pad[i..i + taps]);
        y_pad[s_taps - 1 + i] = y;
        let err = d.samples()[i] - dot(&s_rev, &y_pad[i..i + s_taps]);
        if !err.is_finite() || err.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { sample: i });
        }
        e[i] = err;
        if mu == 0.0 {
            continue;
        }
        let window = &xf_pad[i..i + taps];
        let gain = match rule {
            Update::Lms => mu * err,
            Update::Nlms => mu * err / (dot(window, window) + NLMS_DELTA),
        };
        if !gain.is_finite() {
            return Err(Error::Divergence { sample: i });
        }
        for (w, xv) in w_rev.iter_mut().zip(window) {
            *w += gain * xv;
        }
    }

    w_rev.reverse();
    if w_rev.iter().any(|w| !w.is_finite()) {
        return Err(Error::Divergence { sample: n.saturating_sub(1) });
    }
    Ok(AncRunResult {
        error_signal: Signal::new(e, x.sample_rate())?,
        final_weights: FirFilter::new(w_rev)?,
        disturbance: d,
    })
}

/// Noise reduction of the last `window` samples of a run.
pub fn tail_reduction_db(run: &AncRunResult, window: usize) -> Result<f64> {
    let n = run.disturbance.len();
    let start = n.saturating_sub(window);
    signal::nr_db_slices(&run.disturbance.samples()[start..], &run.error_signal.samples()[start..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{noise_reduction_db, power};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn short_scenario() -> AncScenario {
        let path = design_bandpass(200.0, 6000.0, 63, SAMPLE_RATE).unwrap();
        AncScenario {
            primary_path: path.clone(),
            secondary_path: path.clone(),
            secondary_path_estimate: path,
            step_size: 1e-3,
            control_length: 64,
        }
    }

    fn noise(n: usize, seed: u64) -> Signal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Signal::from_samples((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_primary_path_passes_reference() {
        let mut sc = short_scenario();
        sc.primary_path = FirFilter::identity();
        let x = noise(500, 1);
        assert_eq!(simulate_disturbance(&x, &sc), x);
        assert!(simulate_disturbance(&Signal::zeros(100), &sc).samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_filter_leaves_disturbance() {
        let sc = short_scenario();
        let x = noise(800, 2);
        let run = run_fixed(&x, &FirFilter::zeros(64), &sc);
        assert_eq!(run.error_signal, run.disturbance);
        let run = run_fixed(&Signal::zeros(300), &FirFilter::zeros(64), &sc);
        assert!(run.error_signal.samples().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_step_matches_fixed_bit_for_bit() {
        let sc = short_scenario().with_step_size(0.0);
        let x = noise(2000, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = FirFilter::new((0..64).map(|_| rng.gen_range(-0.1..0.1)).collect()).unwrap();
        let fixed = run_fixed(&x, &w0, &sc);
        let lms = run_fxlms(&x, &sc, &w0).unwrap();
        let nlms = run_fxnlms(&x, &sc, &w0).unwrap();
        assert_eq!(lms, fixed);
        assert_eq!(nlms, fixed);
    }

    #[test]
    fn zero_reference_gives_zero_error() {
        let sc = short_scenario();
        let w0 = FirFilter::zeros(64);
        for run in [
            run_fxlms(&Signal::zeros(500), &sc, &w0).unwrap(),
            run_fxnlms(&Signal::zeros(500), &sc, &w0).unwrap(),
        ] {
            assert!(run.error_signal.samples().iter().all(|v| *v == 0.0));
            assert_eq!(run.final_weights, w0);
        }
    }

    #[test]
    fn short_scenario_converges() {
        let sc = short_scenario();
        let x = noise(40_000, 5);
        let w0 = FirFilter::zeros(64);
        let lms = run_fxlms(&x, &sc, &w0).unwrap();
        assert!(tail_reduction_db(&lms, 8000).unwrap() > 20.0);
        let nlms = run_fxnlms(&x, &sc.clone().with_step_size(0.05), &w0).unwrap();
        assert!(tail_reduction_db(&nlms, 8000).unwrap() > 20.0);
    }

    #[test]
    fn large_step_reports_divergence() {
        let sc = short_scenario().with_step_size(5.0);
        let x = noise(20_000, 6);
        let err = run_fxlms(&x, &sc, &FirFilter::zeros(64)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn wrong_initial_length_is_rejected() {
        let sc = short_scenario();
        assert!(matches!(
            run_fxlms(&noise(10, 0), &sc, &FirFilter::zeros(3)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = AncScenario::default();
        let b = a.clone().with_step_size(2e-4);
        assert_eq!(a.fingerprint(), AncScenario::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn fixed_run_reduction_is_consistent() {
        let sc = short_scenario();
        let x = noise(3000, 7);
        let run = run_fixed(&x, &FirFilter::zeros(64), &sc);
        assert!(power(&run.disturbance) > 0.0);
        assert_eq!(noise_reduction_db(&run.disturbance, &run.error_signal).unwrap(), 0.0);
    }
}
