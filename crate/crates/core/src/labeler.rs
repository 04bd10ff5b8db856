//! Ground-truth labels: the index of the bank filter that leaves the least
//! residual error power on a track.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::anc::AncScenario;
use crate::bank::FilterBank;
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::noise::NoiseTrack;
use crate::signal::{nr_db_from_powers, to_complex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: usize,
    /// Mean-square error left by each filter.
    pub residual_powers: Vec<f64>,
    pub nr_db: Vec<f64>,
}

/// Index of the minimum, lowest index on ties.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Smallest 2^a 3^b that is at least `n`.
fn smooth_len(n: usize) -> usize {
    let mut best = n.next_power_of_two();
    let mut p3 = 1;
    while p3 < best {
        let mut v = p3;
        while v < n {
            v *= 2;
        }
        best = best.min(v);
        p3 *= 3;
    }
    best
}

/// Evaluates every bank filter on signals of one fixed length.
///
/// Fixed-filter runs are linear, so the residual of filter `i` is
/// `e_i = P*x - W_i*(S*x)`; all 15 residuals share one forward transform.
pub struct Labeler {
    len: usize,
    fft_len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    primary: Vec<Complex64>,
    secondary: Vec<Complex64>,
    filters: Vec<Vec<Complex64>>,
}

impl Labeler {
    pub fn new(bank: &FilterBank, scenario: &AncScenario, len: usize) -> Result<Self> {
        bank.check_scenario(scenario)?;
        let p = scenario.primary_path.coefficients();
        let s = scenario.secondary_path.coefficients();
        let span = p.len().max(s.len() + bank.taps() - 1);
        let fft_len = smooth_len(len + span - 1);
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(fft_len);
        let inverse = planner.plan_fft_inverse(fft_len);
        let spectrum = |h: &[f64]| {
            let mut buf = to_complex(h, fft_len);
            forward.process(&mut buf);
            buf
        };
        Ok(Labeler {
            len,
            fft_len,
            primary: spectrum(p),
            secondary: spectrum(s),
            filters: bank.filters.iter().map(|w| spectrum(w.coefficients())).collect(),
            forward,
            inverse,
        })
    }

    pub fn label_samples(&self, x: &[f64]) -> Result<LabelReport> {
        if x.len() != self.len {
            return Err(Error::param(format!(
                "labeler expects {} samples, got {}",
                self.len,
                x.len()
            )));
        }
        let mut spec = to_complex(x, self.fft_len);
        self.forward.process(&mut spec);
        let d_spec: Vec<Complex64> = spec.iter().zip(&self.primary).map(|(a, b)| a * b).collect();
        let xf_spec: Vec<Complex64> = spec.iter().zip(&self.secondary).map(|(a, b)| a * b).collect();

        let scale = 1.0 / self.fft_len as f64;
        let truncated_power = |mut buf: Vec<Complex64>| {
            self.inverse.process(&mut buf);
            buf[..self.len].iter().map(|c| (c.re * scale).powi(2)).sum::<f64>() / self.len as f64
        };
        let pd = truncated_power(d_spec.clone());
        let residual_powers: Vec<f64> = self
            .filters
            .iter()
            .map(|w| {
                let e: Vec<Complex64> = d_spec
                    .iter()
                    .zip(&xf_spec)
                    .zip(w)
                    .map(|((d, xf), w)| d - xf * w)
                    .collect();
                truncated_power(e)
            })
            .collect();
        let nr_db = residual_powers
            .iter()
            .map(|pe| nr_db_from_powers(pd, *pe).unwrap_or(0.0))
            .collect();
        Ok(LabelReport {
            label: argmin(&residual_powers),
            residual_powers,
            nr_db,
        })
    }
}

pub fn label_track(track: &NoiseTrack, bank: &FilterBank, scenario: &AncScenario) -> Result<LabelReport> {
    Labeler::new(bank, scenario, track.signal.len())?.label_samples(track.signal.samples())
}

#[derive(Debug)]
pub struct LabeledDataset {
    /// Tracks that were labeled, in input order.
    pub tracks: Vec<NoiseTrack>,
    pub reports: Vec<LabelReport>,
    /// Count per filter index.
    pub histogram: Vec<usize>,
    /// Tracks that could not be labeled.
    pub failures: Vec<(String, Error)>,
}

pub fn label_dataset(tracks: Vec<NoiseTrack>, bank: &FilterBank, scenario: &AncScenario) -> Result<LabeledDataset> {
    label_dataset_with(tracks, bank, scenario, Execution::default())
}

pub fn label_dataset_with(
    tracks: Vec<NoiseTrack>,
    bank: &FilterBank,
    scenario: &AncScenario,
    exec: Execution,
) -> Result<LabeledDataset> {
    let mut out = LabeledDataset {
        tracks: Vec::with_capacity(tracks.len()),
        reports: Vec::with_capacity(tracks.len()),
        histogram: if tracks.is_empty() { Vec::new() } else { vec![0; bank.len()] },
        failures: Vec::new(),
    };
    if tracks.is_empty() {
        return Ok(out);
    }
    let labeler = Labeler::new(bank, scenario, tracks[0].signal.len())?;
    let results = map_slice(exec, &tracks, |_, t| labeler.label_samples(t.signal.samples()));
    for (mut track, result) in tracks.into_iter().zip(results) {
        match result {
            Ok(report) => {
                track.label = Some(report.label);
                out.histogram[report.label] += 1;
                out.tracks.push(track);
                out.reports.push(report);
            }
            Err(e) => out.failures.push((track.id.clone(), e)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anc::run_fixed;
    use crate::bank::{default_partition, BANK_SIZE};
    use crate::noise::{Origin, TRACK_LEN};
    use crate::signal::{design_bandpass, power, FirFilter, Signal, SAMPLE_RATE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // A cheap scenario and bank of band-pass "control filters".
    fn fixture() -> (FilterBank, AncScenario) {
        let path = design_bandpass(40.0, 7000.0, 63, SAMPLE_RATE).unwrap();
        let scenario = AncScenario {
            primary_path: path.clone(),
            secondary_path: path.clone(),
            secondary_path_estimate: path,
            step_size: 1e-3,
            control_length: 65,
        };
        let partition = default_partition();
        let filters = (0..BANK_SIZE)
            .map(|i| {
                let lo = 300.0 + 400.0 * i as f64;
                design_bandpass(lo, lo + 500.0, 65, SAMPLE_RATE).unwrap()
            })
            .collect();
        let bank = FilterBank::new(filters, partition, SAMPLE_RATE, scenario.fingerprint()).unwrap();
        (bank, scenario)
    }

    fn random_track(seed: u64) -> NoiseTrack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = (0..TRACK_LEN).map(|_| rng.gen_range(-1.0..1.0)).collect();
        NoiseTrack::new(format!("r{seed}"), Origin::SyntheticA, Signal::from_samples(x)).unwrap()
    }

    #[test]
    fn argmin_breaks_ties_low() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
        assert_eq!(argmin(&[0.0; 15]), 0);
    }

    #[test]
    fn smooth_lengths() {
        assert_eq!(smooth_len(18047), 18432);
        assert_eq!(smooth_len(1024), 1024);
        assert_eq!(smooth_len(7), 8);
    }

    #[test]
    fn zero_track_gets_label_zero() {
        let (bank, sc) = fixture();
        let t = NoiseTrack::new("z", Origin::SyntheticA, Signal::zeros(TRACK_LEN)).unwrap();
        let r = label_track(&t, &bank, &sc).unwrap();
        assert_eq!(r.label, 0);
        assert!(r.residual_powers.iter().all(|p| *p == 0.0));
    }

    #[test]
    fn residuals_match_fixed_runs() {
        let (bank, sc) = fixture();
        let t = random_track(3);
        let r = label_track(&t, &bank, &sc).unwrap();
        for (i, w) in bank.filters.iter().enumerate() {
            let run = run_fixed(&t.signal, w, &sc);
            let p = power(&run.error_signal);
            assert!((r.residual_powers[i] - p).abs() <= 1e-9 * p.max(1e-12), "filter {i}");
        }
        for j in 0..BANK_SIZE {
            assert!(r.nr_db[r.label] >= r.nr_db[j]);
        }
    }

    #[test]
    fn fingerprint_mismatch_is_configuration_error() {
        let (bank, sc) = fixture();
        let other = sc.with_step_size(0.5);
        assert!(matches!(label_track(&random_track(1), &bank, &other), Err(Error::Configuration(_))));
    }

    #[test]
    fn labels_are_scale_invariant() {
        let (bank, sc) = fixture();
        for seed in 0..5 {
            let t = random_track(seed);
            let mut scaled = t.clone();
            scaled.signal = t.signal.scaled(3.7);
            assert_eq!(label_track(&t, &bank, &sc).unwrap().label, label_track(&scaled, &bank, &sc).unwrap().label);
        }
    }

    #[test]
    fn dataset_labeling() {
        let (bank, sc) = fixture();
        let empty = label_dataset(vec![], &bank, &sc).unwrap();
        assert!(empty.tracks.is_empty() && empty.histogram.is_empty());

        let tracks: Vec<_> = (0..20).map(random_track).collect();
        let serial = label_dataset_with(tracks.clone(), &bank, &sc, Execution::Serial).unwrap();
        let parallel = label_dataset_with(tracks.clone(), &bank, &sc, Execution::Parallel).unwrap();
        assert_eq!(serial.reports, parallel.reports);
        assert_eq!(serial.histogram.iter().sum::<usize>(), 20);
        let again = label_dataset(tracks, &bank, &sc).unwrap();
        assert_eq!(serial.reports, again.reports);
    }

    #[test]
    fn bad_track_does_not_abort_batch() {
        let (bank, sc) = fixture();
        let mut tracks: Vec<_> = (0..3).map(random_track).collect();
        tracks[1].signal = Signal::zeros(100);
        let out = label_dataset(tracks, &bank, &sc).unwrap();
        assert_eq!(out.tracks.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, "r1");
    }

    #[test]
    fn cancelling_filter_is_selected() {
        // with P = S the unit impulse cancels the disturbance exactly
        let (mut bank, sc) = fixture();
        let mut delta = vec![0.0; 65];
        delta[0] = 1.0;
        bank.filters[4] = FirFilter::new(delta).unwrap();
        let r = label_track(&random_track(8), &bank, &sc).unwrap();
        assert_eq!(r.label, 4);
        assert!(r.nr_db[4] > 100.0);
    }
}
