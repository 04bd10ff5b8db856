//! One-second noise tracks: synthetic generators for two domains and
//! framing of long recordings.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bank::{default_partition, BandPartition, BAND_CEIL_HZ, BAND_FLOOR_HZ};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::hash::derive_seed;
use crate::signal::{
    design_bandpass, fft_convolve_slice, power_slice, taps_for_transition, transition_width, Signal, SAMPLE_RATE,
};

/// Samples per track: one second at the pipeline rate.
pub const TRACK_LEN: usize = SAMPLE_RATE as usize;

/// Standard deviation of the white noise behind [`reference_noise`]. With the
/// default step size this converges FxLMS well inside the stability margin
/// set by the 512-sample secondary path delay.
pub const REFERENCE_NOISE_LEVEL: f64 = 2.0;

const MIN_SYNTH_TAPS: usize = 1025;
const MAX_SYNTH_TAPS: usize = 32_767;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    /// Single-band synthetic noise.
    #[serde(rename = "synthetic-A")]
    SyntheticA,
    /// Multi-band synthetic noise standing in for recorded noise.
    #[serde(rename = "synthetic-B")]
    SyntheticB,
    #[serde(rename = "recorded")]
    Recorded,
}

impl Origin {
    pub fn short(self) -> &'static str {
        match self {
            Origin::SyntheticA => "A",
            Origin::SyntheticB => "B",
            Origin::Recorded => "R",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Origin::SyntheticA => 0x41,
            Origin::SyntheticB => 0x42,
            Origin::Recorded => 0x52,
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::SyntheticA => "synthetic-A",
            Origin::SyntheticB => "synthetic-B",
            Origin::Recorded => "recorded",
        })
    }
}

/// Where a track's samples came from; enough to regenerate or re-read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrackSource {
    Synthetic(SynthSpec),
    Recorded { path: String, frame: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrack {
    pub id: String,
    pub origin: Origin,
    pub signal: Signal,
    pub label: Option<usize>,
    pub source: Option<TrackSource>,
}

impl NoiseTrack {
    pub fn new(id: impl Into<String>, origin: Origin, signal: Signal) -> Result<Self> {
        if signal.len() != TRACK_LEN || signal.sample_rate() != SAMPLE_RATE {
            return Err(Error::param(format!(
                "a track is {TRACK_LEN} samples at {SAMPLE_RATE} Hz, got {} at {}",
                signal.len(),
                signal.sample_rate()
            )));
        }
        Ok(NoiseTrack {
            id: id.into(),
            origin,
            signal,
            label: None,
            source: None,
        })
    }
}

/// An additional band superimposed on the main one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandComponent {
    pub low: f64,
    pub high: f64,
    /// RMS relative to the unit-RMS main band.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub band_low: f64,
    pub band_high: f64,
    /// Peak amplitude of the band-limited part.
    pub amplitude: f64,
    pub background_snr_db: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_bands: Vec<BandComponent>,
}

impl SynthSpec {
    /// Random spec whose main band lies inside `class`'s partition band.
    /// Domain B adds one or two weaker bands from other classes.
    pub fn draw(domain: Origin, class: usize, partition: &BandPartition, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (band_low, band_high) = sub_band(partition.band(class), &mut rng);
        let amplitude = rng.gen_range(0.1..=1.0);
        let background_snr_db = rng.gen_range(5.0..=30.0);
        let mut extra_bands = Vec::new();
        if domain == Origin::SyntheticB {
            let count = rng.gen_range(1..=2);
            let mut used = vec![class];
            while extra_bands.len() < count {
                let other = rng.gen_range(0..partition.len());
                if used.contains(&other) {
                    continue;
                }
                used.push(other);
                let (low, high) = sub_band(partition.band(other), &mut rng);
                extra_bands.push(BandComponent {
                    low,
                    high,
                    level: rng.gen_range(0.15..=0.6),
                });
            }
        }
        SynthSpec {
            band_low,
            band_high,
            amplitude,
            background_snr_db,
            seed: rng.gen(),
            extra_bands,
        }
    }

    fn validate(&self) -> Result<()> {
        let bands = std::iter::once((self.band_low, self.band_high))
            .chain(self.extra_bands.iter().map(|b| (b.low, b.high)));
        for (lo, hi) in bands {
            if !(lo >= BAND_FLOOR_HZ && lo < hi && hi <= BAND_CEIL_HZ) {
                return Err(Error::param(format!("invalid synthesis band {lo}..{hi} Hz")));
            }
        }
        if !(self.amplitude > 0.0) || !self.background_snr_db.is_finite() {
            return Err(Error::param("amplitude must be positive and SNR finite"));
        }
        Ok(())
    }
}

// Log-domain sub-interval covering 50-90% of the band's log width.
fn sub_band((lo, hi): (f64, f64), rng: &mut ChaCha8Rng) -> (f64, f64) {
    let span = (hi / lo).ln();
    let width = span * rng.gen_range(0.5..0.9);
    let start = lo.ln() + rng.gen_range(0.0..(span - width));
    (start.exp(), (start + width).exp())
}

/// Taps used to band-limit synthetic noise: transition at most a quarter of
/// the bandwidth.
fn synth_taps(low: f64, high: f64) -> usize {
    let width = ((high - low) / 4.0).min(transition_width(MIN_SYNTH_TAPS, SAMPLE_RATE));
    taps_for_transition(width, SAMPLE_RATE).clamp(MIN_SYNTH_TAPS, MAX_SYNTH_TAPS)
}

/// Unit-variance white Gaussian noise through a band-pass filter, in steady
/// state. The in-band spectral density matches the white input.
pub fn band_noise(low_hz: f64, high_hz: f64, len: usize, seed: u64) -> Result<Signal> {
    let taps = synth_taps(low_hz, high_hz);
    let h = design_bandpass(low_hz, high_hz, taps, SAMPLE_RATE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..len + taps - 1).map(|_| rng.sample(StandardNormal)).collect();
    let y = fft_convolve_slice(&white, h.coefficients());
    Ok(Signal::from_samples(y[taps - 1..].to_vec()))
}

/// Stationary in-band noise at [`REFERENCE_NOISE_LEVEL`], used to drive the
/// adaptive filters.
pub fn reference_noise(low_hz: f64, high_hz: f64, len: usize, seed: u64) -> Result<Signal> {
    Ok(band_noise(low_hz, high_hz, len, seed)?.scaled(REFERENCE_NOISE_LEVEL))
}

fn unit_rms(mut x: Vec<f64>) -> Vec<f64> {
    let rms = power_slice(&x).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v /= rms);
    }
    x
}

/// Band-limited noise (plus any extra bands), scaled to the spec's peak
/// amplitude, plus uniform white background at the spec's SNR.
pub fn synth_signal(spec: &SynthSpec) -> Result<Signal> {
    spec.validate()?;
    let mut x = unit_rms(band_noise(spec.band_low, spec.band_high, TRACK_LEN, derive_seed(spec.seed, 0))?.into_samples());
    for (k, b) in spec.extra_bands.iter().enumerate() {
        let extra = unit_rms(band_noise(b.low, b.high, TRACK_LEN, derive_seed(spec.seed, k as u64 + 1))?.into_samples());
        for (v, e) in x.iter_mut().zip(extra) {
            *v += b.level * e;
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let gain = spec.amplitude / peak;
        x.iter_mut().for_each(|v| *v *= gain);
    }
    let noise_power = power_slice(&x) * 10f64.powf(-spec.background_snr_db / 10.0);
    let half_width = (3.0 * noise_power).sqrt();
    if half_width > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1000));
        for v in x.iter_mut() {
            *v += rng.gen_range(-half_width..=half_width);
        }
    }
    Ok(Signal::from_samples(x))
}

pub fn synth_track(spec: &SynthSpec, origin: Origin, id: impl Into<String>) -> Result<NoiseTrack> {
    let mut track = NoiseTrack::new(id, origin, synth_signal(spec)?)?;
    track.source = Some(TrackSource::Synthetic(spec.clone()));
    Ok(track)
}

/// Specs for an `n`-track dataset; track `i` targets class `i mod 15`.
pub fn dataset_specs(n: usize, domain: Origin, seed: u64, partition: &BandPartition) -> Vec<SynthSpec> {
    let base = derive_seed(seed, domain.salt());
    (0..n)
        .map(|i| SynthSpec::draw(domain, i % partition.len(), partition, derive_seed(base, i as u64)))
        .collect()
}

pub fn synth_dataset(n: usize, domain: Origin, seed: u64) -> Result<Vec<NoiseTrack>> {
    synth_dataset_with(n, domain, seed, &default_partition(), Execution::default())
}

pub fn synth_dataset_with(
    n: usize,
    domain: Origin,
    seed: u64,
    partition: &BandPartition,
    exec: Execution,
) -> Result<Vec<NoiseTrack>> {
    if domain == Origin::Recorded {
        return Err(Error::param("recorded tracks cannot be synthesized"));
    }
    let specs = dataset_specs(n, domain, seed, partition);
    map_range(exec, n, |i| synth_track(&specs[i], domain, track_id(domain, i)))
        .into_iter()
        .collect()
}

pub fn track_id(origin: Origin, index: usize) -> String {
    format!("{}-{index:06}", origin.short())
}

/// Consecutive non-overlapping frames; a partial tail is dropped.
pub fn frame_split(x: &Signal, frame_len: usize) -> Vec<Signal> {
    if frame_len == 0 {
        return Vec::new();
    }
    x.samples()
        .chunks_exact(frame_len)
        .map(|c| Signal::new(c.to_vec(), x.sample_rate()).expect("rate already validated"))
        .collect()
}
