//! Frame-wise SFANC controller and the benchmark against FxLMS/FxNLMS.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anc::{run_fxlms, run_fxnlms, simulate_disturbance, AncRunResult, AncScenario};
use crate::bank::{BandPartition, FilterBank, BAND_CEIL_HZ};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::hash::derive_seed;
use crate::labeler::Labeler;
use crate::nn::CnnModel;
use crate::noise::reference_noise;
use crate::signal::{convolve_slice, dot, nr_db_slices, zero_padded, FirFilter, Signal, SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfancConfig {
    pub frame_len: usize,
    /// 0: a frame's own selection controls it. 1: the previous frame's.
    pub selection_latency_frames: usize,
    pub initial_filter_index: usize,
}

impl Default for SfancConfig {
    fn default() -> Self {
        SfancConfig {
            frame_len: SAMPLE_RATE as usize,
            selection_latency_frames: 0,
            initial_filter_index: 0,
        }
    }
}

impl SfancConfig {
    pub fn validate(&self, bank_size: usize) -> Result<()> {
        if self.frame_len == 0 {
            return Err(Error::param("frame length must be at least 1"));
        }
        if self.selection_latency_frames > 1 {
            return Err(Error::param("selection latency is 0 or 1 frames"));
        }
        if self.initial_filter_index >= bank_size {
            return Err(Error::param(format!(
                "initial filter index {} outside the bank",
                self.initial_filter_index
            )));
        }
        Ok(())
    }
}

/// Picks a bank index for one frame of primary noise.
pub trait Selector: Sync {
    fn select(&self, frame: &[f64]) -> Result<usize>;
}

/// Always the same filter.
pub struct ConstantSelector(pub usize);

impl Selector for ConstantSelector {
    fn select(&self, _: &[f64]) -> Result<usize> {
        Ok(self.0)
    }
}

/// Exhaustive best-filter search on the frame itself.
pub struct OracleSelector {
    labeler: Labeler,
}

impl OracleSelector {
    pub fn new(bank: &FilterBank, scenario: &AncScenario, frame_len: usize) -> Result<Self> {
        Ok(OracleSelector {
            labeler: Labeler::new(bank, scenario, frame_len)?,
        })
    }
}

impl Selector for OracleSelector {
    fn select(&self, frame: &[f64]) -> Result<usize> {
        Ok(self.labeler.label_samples(frame)?.label)
    }
}

/// The trained classifier.
pub struct CnnSelector<'a>(pub &'a CnnModel<f32>);

impl Selector for CnnSelector<'_> {
    fn select(&self, frame: &[f64]) -> Result<usize> {
        self.0.predict_index(&Signal::from_samples(frame.to_vec()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfancRun {
    pub run: AncRunResult,
    /// Filter applied in each frame, including a trailing partial frame.
    pub filters: Vec<usize>,
}

/// Runs the bank filters frame by frame. Selection looks at whole frames; a
/// trailing partial frame keeps the last applied filter. The control filter
/// reads the full reference history, so switching causes no restart.
pub fn run_sfanc(
    noise: &Signal,
    bank: &FilterBank,
    selector: &dyn Selector,
    scenario: &AncScenario,
    config: &SfancConfig,
    exec: Execution,
) -> Result<SfancRun> {
    config.validate(bank.len())?;
    bank.check_scenario(scenario)?;
    let frame = config.frame_len;
    let full = noise.len() / frame;
    if full == 0 {
        return Err(Error::param(format!(
            "noise of {} samples is shorter than one {frame}-sample frame",
            noise.len()
        )));
    }
    let x = noise.samples();
    let picks = map_range(exec, full, |k| selector.select(&x[k * frame..(k + 1) * frame]));
    let picks: Vec<usize> = picks.into_iter().collect::<Result<_>>()?;
    if let Some(bad) = picks.iter().find(|i| **i >= bank.len()) {
        return Err(Error::param(format!("selector returned index {bad} outside the bank")));
    }
    let frames = noise.len().div_ceil(frame);
    let filters: Vec<usize> = (0..frames)
        .map(|k| match config.selection_latency_frames {
            0 => picks[k.min(full - 1)],
            _ if k == 0 => config.initial_filter_index,
            _ => picks[(k - 1).min(full - 1)],
        })
        .collect();

    let taps = bank.taps();
    let padded = zero_padded(x, taps);
    let reversed: Vec<Vec<f64>> = bank.filters.iter().map(FirFilter::reversed).collect();
    let y: Vec<f64> = (0..x.len())
        .map(|n| dot(&reversed[filters[n / frame]], &padded[n..n + taps]))
        .collect();
    let d = simulate_disturbance(noise, scenario);
    let a = convolve_slice(&y, &scenario.secondary_path);
    let e = d.samples().iter().zip(&a).map(|(d, a)| d - a).collect();
    let last = *filters.last().expect("at least one frame");
    Ok(SfancRun {
        run: AncRunResult {
            error_signal: Signal::new(e, noise.sample_rate())?,
            final_weights: bank.filters[last].clone(),
            disturbance: d,
        },
        filters,
    })
}

pub const ALGORITHMS: [&str; 3] = ["sfanc", "fxlms", "fxnlms"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub disturbance: Signal,
    /// Error signals in [`ALGORITHMS`] order.
    pub errors: [Signal; 3],
    /// Noise reduction per whole second, in [`ALGORITHMS`] order. NaN marks
    /// a silent second.
    pub per_second_nr: Vec<[f64; 3]>,
    pub filters: Vec<usize>,
}

/// Noise reduction over consecutive `window`-sample windows; a trailing
/// partial window is dropped.
pub fn windowed_nr(d: &Signal, e: &Signal, window: usize) -> Vec<f64> {
    (0..d.len() / window)
        .map(|k| {
            let r = k * window..(k + 1) * window;
            nr_db_slices(&d.samples()[r.clone()], &e.samples()[r]).unwrap_or(f64::NAN)
        })
        .collect()
}

/// SFANC, FxLMS and FxNLMS on the same noise and paths. The adaptive runs
/// start from zero weights with the scenario's step size and length.
pub fn run_comparison(
    noise: &Signal,
    bank: &FilterBank,
    selector: &dyn Selector,
    scenario: &AncScenario,
    config: &SfancConfig,
    exec: Execution,
) -> Result<BenchReport> {
    let w0 = FirFilter::zeros(scenario.control_length);
    let mut runs = map_range(exec, 3, |i| match i {
        0 => run_sfanc(noise, bank, selector, scenario, config, exec).map(|r| (r.run, r.filters)),
        1 => run_fxlms(noise, scenario, &w0).map(|r| (r, Vec::new())),
        _ => run_fxnlms(noise, scenario, &w0).map(|r| (r, Vec::new())),
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let (fxnlms, _) = runs.pop().expect("three runs");
    let (fxlms, _) = runs.pop().expect("three runs");
    let (sfanc, filters) = runs.pop().expect("three runs");
    let d = sfanc.disturbance.clone();
    let second = SAMPLE_RATE as usize;
    let cols: Vec<Vec<f64>> = [&sfanc, &fxlms, &fxnlms]
        .iter()
        .map(|r| windowed_nr(&d, &r.error_signal, second))
        .collect();
    let per_second_nr = (0..cols[0].len()).map(|k| [cols[0][k], cols[1][k], cols[2][k]]).collect();
    Ok(BenchReport {
        disturbance: d,
        errors: [sfanc.error_signal, fxlms.error_signal, fxnlms.error_signal],
        per_second_nr,
        filters,
    })
}

impl BenchReport {
    pub fn write_traces_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "sample,d,e_sfanc,e_fxlms,e_fxnlms")?;
        let [s, l, n] = &self.errors;
        for i in 0..self.disturbance.len() {
            writeln!(
                w,
                "{i},{},{},{},{}",
                self.disturbance.samples()[i],
                s.samples()[i],
                l.samples()[i],
                n.samples()[i]
            )?;
        }
        Ok(())
    }

    pub fn write_nr_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "second,nr_sfanc_db,nr_fxlms_db,nr_fxnlms_db")?;
        for (k, row) in self.per_second_nr.iter().enumerate() {
            writeln!(w, "{k},{:.4},{:.4},{:.4}", row[0], row[1], row[2])?;
        }
        Ok(())
    }

    pub fn write_filters_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "frame,filter")?;
        for (k, f) in self.filters.iter().enumerate() {
            writeln!(w, "{k},{f}")?;
        }
        Ok(())
    }
}

/// Stationary band noise that jumps to another bank band every
/// `segment_seconds`. Returns the signal and the band of each segment.
pub fn make_band_switching_noise(
    partition: &BandPartition,
    duration_s: usize,
    segment_seconds: usize,
    seed: u64,
) -> Result<(Signal, Vec<usize>)> {
    if duration_s == 0 || segment_seconds == 0 {
        return Err(Error::param("duration and segment length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = duration_s.div_ceil(segment_seconds);
    let mut bands: Vec<usize> = Vec::with_capacity(segments);
    while bands.len() < segments {
        let b = rng.gen_range(0..partition.len());
        if bands.last() != Some(&b) {
            bands.push(b);
        }
    }
    let total = duration_s * SAMPLE_RATE as usize;
    let seg_len = segment_seconds * SAMPLE_RATE as usize;
    let mut x = Vec::with_capacity(total);
    for (k, &b) in bands.iter().enumerate() {
        let len = seg_len.min(total - x.len());
        let (lo, hi) = partition.band(b);
        x.extend(reference_noise(lo, hi, len, derive_seed(seed, k as u64))?.into_samples());
    }
    Ok((Signal::from_samples(x), bands))
}

const AIRCRAFT_LOW_HZ: f64 = 50.0;
/// Emphasis bands, low to high.
const AIRCRAFT_BANDS: [(f64, f64); 4] = [(50.0, 250.0), (250.0, 800.0), (800.0, 2500.0), (2500.0, BAND_CEIL_HZ)];

/// Synthetic stand-in for a passing aircraft: broadband 50-7980 Hz noise
/// whose emphasis drifts from the high bands to the low ones, under a
/// rise-and-fall amplitude envelope.
pub fn make_aircraft_like_noise(duration_s: usize, seed: u64) -> Result<Signal> {
    if duration_s < 3 {
        return Err(Error::param("aircraft-like noise needs at least 3 s"));
    }
    let n = duration_s * SAMPLE_RATE as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wobble: Vec<f64> = (0..AIRCRAFT_BANDS.len()).map(|_| rng.gen_range(0.5..2.0)).collect();
    let floor = reference_noise(AIRCRAFT_LOW_HZ, BAND_CEIL_HZ, n, derive_seed(seed, 100))?;
    let mut x: Vec<f64> = floor.samples().iter().map(|v| 0.3 * v).collect();
    for (k, &(lo, hi)) in AIRCRAFT_BANDS.iter().enumerate() {
        let band = reference_noise(lo, hi, n, derive_seed(seed, k as u64))?;
        // position of this band from the top: 0 for the highest
        let rank = (AIRCRAFT_BANDS.len() - 1 - k) as f64 / (AIRCRAFT_BANDS.len() - 1) as f64;
        for (i, (acc, v)) in x.iter_mut().zip(band.samples()).enumerate() {
            let t = i as f64 / n as f64;
            // centre of emphasis moves from the top band (rank 0) to the bottom
            let gain = (-((rank - t) * 3.0).powi(2)).exp();
            let flutter = 1.0 + 0.2 * (std::f64::consts::TAU * wobble[k] * t * duration_s as f64).sin();
            *acc += gain * flutter * v;
        }
    }
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / n as f64;
        *v *= 0.4 + 0.6 * (std::f64::consts::PI * t).sin();
    }
    Signal::new(x, SAMPLE_RATE)
}
