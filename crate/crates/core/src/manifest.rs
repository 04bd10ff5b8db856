//! JSON-lines track manifests: one record per track, enough to regenerate
//! its samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{synth_signal, NoiseTrack, Origin, SynthSpec, TrackSource, TRACK_LEN};
use crate::wav::read_wav;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Noise reduction of the selected filter, dB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<SynthSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<usize>,
}

impl ManifestRecord {
    pub fn from_track(track: &NoiseTrack, nr_db: Option<f64>) -> Result<Self> {
        let mut rec = ManifestRecord {
            id: track.id.clone(),
            origin: track.origin,
            label: track.label,
            nr_db,
            spec: None,
            path: None,
            frame: None,
        };
        match &track.source {
            Some(TrackSource::Synthetic(spec)) => rec.spec = Some(spec.clone()),
            Some(TrackSource::Recorded { path, frame }) => {
                rec.path = Some(path.clone());
                rec.frame = Some(*frame);
            }
            None => return Err(Error::param(format!("track {} has no recorded source", track.id))),
        }
        Ok(rec)
    }

    /// Regenerates the track's samples.
    pub fn load_track(&self) -> Result<NoiseTrack> {
        let (signal, source) = match (&self.spec, &self.path, self.frame) {
            (Some(spec), None, None) => (synth_signal(spec)?, TrackSource::Synthetic(spec.clone())),
            (None, Some(path), Some(frame)) => {
                let full = read_wav(path)?;
                let start = frame * TRACK_LEN;
                if start + TRACK_LEN > full.len() {
                    return Err(Error::Malformed(format!("{path} has no frame {frame}")));
                }
                (
                    full.slice(start, start + TRACK_LEN),
                    TrackSource::Recorded {
                        path: path.clone(),
                        frame,
                    },
                )
            }
            _ => {
                return Err(Error::Malformed(format!(
                    "record {} needs either a spec or a path and frame",
                    self.id
                )))
            }
        };
        let mut track = NoiseTrack::new(self.id.clone(), self.origin, signal)?;
        track.label = self.label;
        track.source = Some(source);
        Ok(track)
    }
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Reads a manifest and regenerates all of its tracks.
pub fn load_tracks(path: impl AsRef<Path>) -> Result<Vec<NoiseTrack>> {
    read_manifest(path)?.iter().map(ManifestRecord::load_track).collect()
}
