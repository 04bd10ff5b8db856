//! Waveform container, FIR design and filtering, power metrics and the
//! min-max input normalizer.

use std::f64::consts::PI;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pipeline sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;

/// Noise reduction reported when the error signal is exactly zero.
pub const NR_CAP_DB: f64 = 120.0;

/// A sampled real waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::param("sample rate must be positive"));
        }
        Ok(Signal {
            samples,
            sample_rate,
        })
    }

    /// Signal at the pipeline rate.
    pub fn from_samples(samples: Vec<f64>) -> Self {
        Signal {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_samples(vec![0.0; len])
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f64] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Samples `start..end` as a new signal at the same rate.
    pub fn slice(&self, start: usize, end: usize) -> Signal {
        Signal {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> Signal {
        Signal {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

/// FIR filter taps. `coefficients[k]` multiplies `x[n - k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    coefficients: Vec<f64>,
}

impl FirFilter {
    pub fn new(coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::param("FIR filter needs at least one tap"));
        }
        if let Some(k) = coefficients.iter().position(|c| !c.is_finite()) {
            return Err(Error::param(format!("FIR coefficient {k} is not finite")));
        }
        Ok(FirFilter { coefficients })
    }

    pub fn zeros(taps: usize) -> Self {
        FirFilter {
            coefficients: vec![0.0; taps.max(1)],
        }
    }

    /// Unit impulse: passes its input through unchanged.
    pub fn identity() -> Self {
        FirFilter {
            coefficients: vec![1.0],
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> Vec<f64> {
        self.coefficients
    }

    pub fn taps(&self) -> usize {
        self.coefficients.len()
    }

    /// Coefficients in reverse order, the layout `dot` expects against a
    /// zero-padded input window.
    pub(crate) fn reversed(&self) -> Vec<f64> {
        self.coefficients.iter().rev().copied().collect()
    }
}

/// Inner product with a fixed 8-lane accumulation order. Every FIR output in
/// the crate goes through this function so that fixed and adaptive filtering
/// paths produce identical bits.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `x` preceded by `taps - 1` zeros, so that output `n` of a causal FIR is
/// `dot(reversed, &padded[n..n + taps])`.
pub(crate) fn zero_padded(x: &[f64], taps: usize) -> Vec<f64> {
    let mut padded = vec![0.0; taps - 1 + x.len()];
    padded[taps - 1..].copy_from_slice(x);
    padded
}

/// Windowed-sinc band-pass design: the difference of two unit-DC-gain
/// Hamming low-pass prototypes.
///
/// The transition width is `4 * sample_rate / taps`. The upper cutoff is
/// held at least half a transition width below Nyquist so that the Nyquist
/// response stays in the stop band.
pub fn design_bandpass(low_hz: f64, high_hz: f64, taps: usize, sample_rate: u32) -> Result<FirFilter> {
    let fs = sample_rate as f64;
    let nyquist = fs / 2.0;
    if !(low_hz.is_finite() && high_hz.is_finite()) || low_hz <= 0.0 || high_hz <= low_hz || high_hz >= nyquist {
        return Err(Error::param(format!(
            "band edges must satisfy 0 < low < high < {nyquist} Hz, got {low_hz}..{high_hz}"
        )));
    }
    if taps < 31 || taps % 2 == 0 {
        return Err(Error::param(format!("band-pass taps must be odd and >= 31, got {taps}")));
    }
    let transition = transition_width(taps, sample_rate);
    let upper = high_hz.min(nyquist - transition / 2.0);
    if upper <= low_hz {
        return Err(Error::param(format!(
            "band {low_hz}..{high_hz} Hz is too close to Nyquist for {taps} taps"
        )));
    }
    let hi = windowed_lowpass(upper / fs, taps);
    let lo = windowed_lowpass(low_hz / fs, taps);
    FirFilter::new(hi.iter().zip(&lo).map(|(a, b)| a - b).collect())
}

/// Transition width in Hz of a `taps`-long Hamming design.
pub fn transition_width(taps: usize, sample_rate: u32) -> f64 {
    4.0 * sample_rate as f64 / taps as f64
}

/// Smallest odd tap count whose transition width is at most `width_hz`.
pub fn taps_for_transition(width_hz: f64, sample_rate: u32) -> usize {
    let taps = (4.0 * sample_rate as f64 / width_hz).ceil() as usize;
    (taps | 1).max(31)
}

// Symmetric by construction: only the half m >= 0 is evaluated.
fn windowed_lowpass(cutoff: f64, taps: usize) -> Vec<f64> {
    let half = (taps - 1) / 2;
    let omega = 2.0 * PI * cutoff;
    let side: Vec<f64> = (0..=half)
        .map(|m| {
            let sinc = if m == 0 {
                omega / PI
            } else {
                (omega * m as f64).sin() / (PI * m as f64)
            };
            let window = 0.54 + 0.46 * (PI * m as f64 / half as f64).cos();
            sinc * window
        })
        .collect();
    let sum = side[0] + 2.0 * side[1..].iter().sum::<f64>();
    let mut h = Vec::with_capacity(taps);
    h.extend(side.iter().rev().map(|v| v / sum));
    h.extend(side[1..].iter().map(|v| v / sum));
    h
}

/// Causal FIR filtering with zero initial state; the output has the same
/// length as the input.
pub fn convolve(x: &Signal, h: &FirFilter) -> Signal {
    Signal {
        samples: convolve_slice(&x.samples, h),
        sample_rate: x.sample_rate,
    }
}

pub(crate) fn convolve_slice(x: &[f64], h: &FirFilter) -> Vec<f64> {
    let taps = h.taps();
    let rev = h.reversed();
    let padded = zero_padded(x, taps);
    (0..x.len()).map(|n| dot(&rev, &padded[n..n + taps])).collect()
}

/// FFT-based equivalent of [`convolve`] for long filters. Agrees with the
/// direct form up to rounding.
pub fn fft_convolve(x: &Signal, h: &FirFilter) -> Signal {
    Signal {
        samples: fft_convolve_slice(&x.samples, h.coefficients()),
        sample_rate: x.sample_rate,
    }
}

pub(crate) fn fft_convolve_slice(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let size = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut xs = to_complex(x, size);
    let mut hs = to_complex(h, size);
    fwd.process(&mut xs);
    fwd.process(&mut hs);
    for (a, b) in xs.iter_mut().zip(&hs) {
        *a *= b;
    }
    inv.process(&mut xs);
    let scale = 1.0 / size as f64;
    xs[..x.len()].iter().map(|c| c.re * scale).collect()
}

pub(crate) fn to_complex(x: &[f64], size: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); size];
    for (o, v) in out.iter_mut().zip(x) {
        o.re = *v;
    }
    out
}

/// Mean of squared samples; zero for an empty signal.
pub fn power(x: &Signal) -> f64 {
    power_slice(&x.samples)
}

pub(crate) fn power_slice(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_d / P_e)`, capped at [`NR_CAP_DB`].
pub fn noise_reduction_db(d: &Signal, e: &Signal) -> Result<f64> {
    nr_db_slices(&d.samples, &e.samples)
}

pub(crate) fn nr_db_slices(d: &[f64], e: &[f64]) -> Result<f64> {
    if d.len() != e.len() {
        return Err(Error::param(format!(
            "disturbance and error lengths differ ({} vs {})",
            d.len(),
            e.len()
        )));
    }
    nr_db_from_powers(power_slice(d), power_slice(e))
}

pub(crate) fn nr_db_from_powers(pd: f64, pe: f64) -> Result<f64> {
    if pd <= 0.0 {
        return Err(Error::UndefinedMetric);
    }
    if pe <= 0.0 {
        return Ok(NR_CAP_DB);
    }
    Ok((10.0 * (pd / pe).log10()).min(NR_CAP_DB))
}

/// Divides every sample by the signal's range `max - min`. A constant
/// signal maps to zeros.
pub fn min_max_normalize(x: &Signal) -> Signal {
    Signal {
        samples: min_max_normalize_slice(&x.samples),
        sample_rate: x.sample_rate,
    }
}

pub(crate) fn min_max_normalize_slice(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| v / range).collect()
}
