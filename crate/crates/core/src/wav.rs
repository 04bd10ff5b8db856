//! PCM16 mono WAV ingestion and export.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};
use crate::noise::{frame_split, NoiseTrack, Origin, TrackSource, TRACK_LEN};
use crate::signal::{Signal, SAMPLE_RATE};

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Malformed(format!("{}: {other}", path.display())),
    }
}

/// Reads a 16 kHz mono 16-bit PCM file, scaled to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Signal> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat {
            property: "sample rate",
            found: spec.sample_rate.to_string(),
            expected: SAMPLE_RATE.to_string(),
        });
    }
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat {
            property: "channel count",
            found: spec.channels.to_string(),
            expected: "1".into(),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::UnsupportedFormat {
            property: "sample format",
            found: format!("{}-bit {:?}", spec.bits_per_sample, spec.sample_format),
            expected: "16-bit Int".into(),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Signal::new(samples, SAMPLE_RATE)
}

/// Splits a recording into one-second tracks; a partial tail is dropped.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Vec<NoiseTrack>> {
    let path = path.as_ref();
    let signal = read_wav(path)?;
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    frame_split(&signal, TRACK_LEN)
        .into_iter()
        .enumerate()
        .map(|(frame, s)| {
            let mut t = NoiseTrack::new(format!("{stem}:{frame}"), Origin::Recorded, s)?;
            t.source = Some(TrackSource::Recorded {
                path: path.to_string_lossy().into_owned(),
                frame,
            });
            Ok(t)
        })
        .collect()
}

/// Writes a signal as 16-bit PCM mono, clipping to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, signal: &Signal) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for s in signal.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}
