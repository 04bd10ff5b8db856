//! The bank of pre-trained fixed control filters, one per frequency band.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::anc::{run_fixed, run_fxlms, AncScenario};
use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::hash::{derive_seed, Fnv1a};
use crate::noise::reference_noise;
use crate::signal::{noise_reduction_db, FirFilter, Signal, SAMPLE_RATE};

/// Number of control filters in a bank.
pub const BANK_SIZE: usize = 15;
pub const BAND_FLOOR_HZ: f64 = 20.0;
pub const BAND_CEIL_HZ: f64 = 7980.0;
/// Length of the per-band pre-training noise.
pub const PRETRAIN_SECONDS: usize = 10;

pub const BANK_FORMAT: &str = "sfanc-filter-bank";
pub const BANK_VERSION: u32 = 1;

/// Ordered frequency bands, one per control filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPartition {
    bands: Vec<(f64, f64)>,
}

impl BandPartition {
    pub fn new(bands: Vec<(f64, f64)>) -> Result<Self> {
        if bands.len() != BANK_SIZE {
            return Err(Error::Invariant(format!(
                "a partition has {BANK_SIZE} bands, got {}",
                bands.len()
            )));
        }
        for (i, &(lo, hi)) in bands.iter().enumerate() {
            if !(BAND_FLOOR_HZ..=BAND_CEIL_HZ).contains(&lo) || !(lo < hi && hi <= BAND_CEIL_HZ) {
                return Err(Error::Invariant(format!("band {i} ({lo}..{hi} Hz) outside 20..7980 Hz")));
            }
            if i > 0 && bands[i - 1].0 > lo {
                return Err(Error::Invariant(format!("band {i} is out of order")));
            }
        }
        Ok(BandPartition { bands })
    }

    pub fn bands(&self) -> &[(f64, f64)] {
        &self.bands
    }

    pub fn band(&self, i: usize) -> (f64, f64) {
        self.bands[i]
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

impl Default for BandPartition {
    fn default() -> Self {
        default_partition()
    }
}

/// 15 contiguous bands with log-spaced edges `20 * 399^(k/15)`, rounded to
/// the nearest hertz.
pub fn default_partition() -> BandPartition {
    let ratio = BAND_CEIL_HZ / BAND_FLOOR_HZ;
    let edges: Vec<f64> = (0..=BANK_SIZE)
        .map(|k| (BAND_FLOOR_HZ * ratio.powf(k as f64 / BANK_SIZE as f64)).round())
        .collect();
    BandPartition {
        bands: edges.windows(2).map(|w| (w[0], w[1])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub filters: Vec<FirFilter>,
    pub partition: BandPartition,
    pub sample_rate: u32,
    pub scenario_fingerprint: u64,
}

impl FilterBank {
    pub fn new(
        filters: Vec<FirFilter>,
        partition: BandPartition,
        sample_rate: u32,
        scenario_fingerprint: u64,
    ) -> Result<Self> {
        if filters.len() != BANK_SIZE || partition.len() != BANK_SIZE {
            return Err(Error::Invariant(format!(
                "a bank holds {BANK_SIZE} filters, got {} filters for {} bands",
                filters.len(),
                partition.len()
            )));
        }
        let taps = filters[0].taps();
        if filters.iter().any(|f| f.taps() != taps) {
            return Err(Error::Invariant("bank filters differ in length".into()));
        }
        Ok(FilterBank {
            filters,
            partition,
            sample_rate,
            scenario_fingerprint,
        })
    }

    pub fn taps(&self) -> usize {
        self.filters[0].taps()
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    /// Configuration error unless the bank was trained under `scenario`.
    pub fn check_scenario(&self, scenario: &AncScenario) -> Result<()> {
        let fp = scenario.fingerprint();
        if fp != self.scenario_fingerprint {
            return Err(Error::Configuration(format!(
                "bank fingerprint {:016x} does not match scenario {fp:016x}",
                self.scenario_fingerprint
            )));
        }
        Ok(())
    }
}

/// Stationary noise used to pre-train the filter for `band`.
pub fn pretraining_noise(partition: &BandPartition, band: usize, seconds: usize, seed: u64) -> Result<Signal> {
    let (lo, hi) = partition.band(band);
    reference_noise(lo, hi, seconds * SAMPLE_RATE as usize, derive_seed(seed, band as u64))
}

pub fn pretrain_bank(partition: &BandPartition, scenario: &AncScenario, seed: u64) -> Result<FilterBank> {
    pretrain_bank_with(partition, scenario, seed, Execution::default())
}

/// Runs FxLMS from zero weights on 10 s of in-band noise for every band and
/// keeps the final weights.
pub fn pretrain_bank_with(
    partition: &BandPartition,
    scenario: &AncScenario,
    seed: u64,
    exec: Execution,
) -> Result<FilterBank> {
    scenario.validate()?;
    let zeros = FirFilter::zeros(scenario.control_length);
    let runs = map_range(exec, partition.len(), |band| {
        let x = pretraining_noise(partition, band, PRETRAIN_SECONDS, seed)?;
        run_fxlms(&x, scenario, &zeros).map(|r| r.final_weights)
    });
    let filters = runs
        .into_iter()
        .enumerate()
        .map(|(band, r)| r.map_err(|e| Error::BandFailure { band, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(filters, partition.clone(), SAMPLE_RATE, scenario.fingerprint())
}

/// `m[i][j]`: noise reduction of filter `j` on `noises[i]`.
pub fn cross_reduction_matrix(
    bank: &FilterBank,
    scenario: &AncScenario,
    noises: &[Signal],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let rows = map_range(exec, noises.len() * bank.len(), |k| {
        let (i, j) = (k / bank.len(), k % bank.len());
        let run = run_fixed(&noises[i], &bank.filters[j], scenario);
        noise_reduction_db(&run.disturbance, &run.error_signal)
    });
    let flat = rows.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(flat.chunks(bank.len()).map(|c| c.to_vec()).collect())
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    sample_rate: u32,
    taps: usize,
    count: usize,
    bands: Vec<(f64, f64)>,
    fingerprint: String,
    checksum: String,
    coefficients: String,
}

fn payload_bytes(bank: &FilterBank) -> Vec<u8> {
    let mut out = Vec::with_capacity(bank.len() * bank.taps() * 8);
    for f in &bank.filters {
        for c in f.coefficients() {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.update(bytes);
    h.finish()
}

pub fn encode_bank(bank: &FilterBank) -> String {
    let payload = payload_bytes(bank);
    let file = BankFile {
        format: BANK_FORMAT.into(),
        version: BANK_VERSION,
        sample_rate: bank.sample_rate,
        taps: bank.taps(),
        count: bank.len(),
        bands: bank.partition.bands().to_vec(),
        fingerprint: format!("{:016x}", bank.scenario_fingerprint),
        checksum: format!("{:016x}", checksum(&payload)),
        coefficients: B64.encode(&payload),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("bank serializes");
    text.push('\n');
    text
}

pub fn decode_bank(text: &str) -> Result<FilterBank> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Malformed(format!("bank file: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    match version {
        Some(v) if v == BANK_VERSION as u64 => {}
        Some(v) => return Err(Error::VersionMismatch { found: v as u32, expected: BANK_VERSION }),
        None => return Err(Error::Malformed("bank file has no version".into())),
    }
    let file: BankFile =
        serde_json::from_value(value).map_err(|e| Error::Malformed(format!("bank file: {e}")))?;
    if file.format != BANK_FORMAT {
        return Err(Error::Malformed(format!("unexpected format tag {:?}", file.format)));
    }
    if file.count != BANK_SIZE {
        return Err(Error::Invariant(format!("bank count is {}, expected {BANK_SIZE}", file.count)));
    }
    if file.taps == 0 {
        return Err(Error::Invariant("bank taps must be positive".into()));
    }
    let partition = BandPartition::new(file.bands)?;
    let fingerprint = parse_hex(&file.fingerprint, "fingerprint")?;
    let stored = parse_hex(&file.checksum, "checksum")?;
    let payload = B64
        .decode(file.coefficients.as_bytes())
        .map_err(|e| Error::Malformed(format!("coefficient payload: {e}")))?;
    if payload.len() != file.count * file.taps * 8 {
        return Err(Error::Malformed(format!(
            "payload holds {} bytes, header implies {}",
            payload.len(),
            file.count * file.taps * 8
        )));
    }
    let computed = checksum(&payload);
    if computed != stored {
        return Err(Error::Checksum { stored, computed });
    }
    let filters = payload
        .chunks_exact(file.taps * 8)
        .map(|chunk| {
            let coeffs = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            FirFilter::new(coeffs).map_err(|e| Error::Malformed(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(filters, partition, file.sample_rate, fingerprint)
}

fn parse_hex(s: &str, what: &str) -> Result<u64> {
    u64::from_str_radix(s, 16).map_err(|_| Error::Malformed(format!("{what} {s:?} is not a hex u64")))
}

pub fn save_bank(bank: &FilterBank, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_bank(bank)).map_err(|e| Error::io(path, e))
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<FilterBank> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_bank(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_bank() -> FilterBank {
        let filters = (0..BANK_SIZE)
            .map(|i| FirFilter::new((0..8).map(|k| (i * 8 + k) as f64 * 0.1 - 3.3).collect()).unwrap())
            .collect();
        FilterBank::new(filters, default_partition(), SAMPLE_RATE, 0xdead_beef_1234_5678).unwrap()
    }

    #[test]
    fn default_partition_edges() {
        let p = default_partition();
        assert_eq!(p.len(), 15);
        assert_eq!(p.band(0).0, 20.0);
        assert_eq!(p.band(14).1, 7980.0);
        // 20 * 399^(8/15) = 487.77
        assert_eq!(p.band(8).0, 488.0);
        for w in p.bands().windows(2) {
            assert_eq!(w[0].1, w[1].0);
            assert!(w[0].0 < w[0].1);
        }
        assert!(BandPartition::new(p.bands().to_vec()).is_ok());
    }

    #[test]
    fn partition_validation() {
        let mut bands = default_partition().bands().to_vec();
        bands.pop();
        assert!(matches!(BandPartition::new(bands), Err(Error::Invariant(_))));
        let mut bands = default_partition().bands().to_vec();
        bands[3] = (10.0, 40.0);
        assert!(BandPartition::new(bands).is_err());
    }

    #[test]
    fn round_trip_is_exact() {
        let bank = toy_bank();
        let back = decode_bank(&encode_bank(&bank)).unwrap();
        assert_eq!(back, bank);
    }

    #[test]
    fn truncated_file_is_malformed() {
        let text = encode_bank(&toy_bank());
        let cut = &text[..text.len() / 2];
        assert!(matches!(decode_bank(cut), Err(Error::Malformed(_))));
    }

    #[test]
    fn count_fourteen_violates_invariant() {
        let text = encode_bank(&toy_bank()).replace("\"count\": 15", "\"count\": 14");
        assert!(matches!(decode_bank(&text), Err(Error::Invariant(_))));
    }

    #[test]
    fn other_version_is_rejected() {
        let text = encode_bank(&toy_bank()).replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(decode_bank(&text), Err(Error::VersionMismatch { found: 7, .. })));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let bank = toy_bank();
        let text = encode_bank(&bank);
        let payload = B64.encode(payload_bytes(&bank));
        let mut bytes = payload.into_bytes();
        bytes[10] = if bytes[10] == b'A' { b'B' } else { b'A' };
        let tampered = text.replace(&B64.encode(payload_bytes(&bank)), std::str::from_utf8(&bytes).unwrap());
        assert!(matches!(decode_bank(&tampered), Err(Error::Checksum { .. })));
    }

    #[test]
    fn scenario_check() {
        let mut bank = toy_bank();
        let sc = AncScenario::default();
        assert!(matches!(bank.check_scenario(&sc), Err(Error::Configuration(_))));
        bank.scenario_fingerprint = sc.fingerprint();
        assert!(bank.check_scenario(&sc).is_ok());
    }
}
