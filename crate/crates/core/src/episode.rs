//! Demonstration episodes and their on-disk format.
//!
//! ```text
//! magic     4 bytes "TGEP"
//! version   u8
//! meta_len  u32, metadata as UTF-8 JSON
//! vis_dim   u32
//! tac_dim   u32
//! steps     u64
//! steps x record (f64 little-endian):
//!   timestamp, visual[vis_dim], tactile[tac_dim],
//!   pose[12], gripper, command[12]
//! ```
//! Poses are stored as rotation rows then translation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::Se3Pose;

pub const MAGIC: &[u8; 4] = b"TGEP";
pub const VERSION: u8 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("not an episode file (bad magic header)")]
    BadMagic,
    #[error("unsupported episode format version {0} (this build reads {VERSION})")]
    UnsupportedVersion(u8),
    #[error("truncated episode file: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("timestamps not strictly increasing at step {0}")]
    NonMonotonicTimestamps(usize),
    #[error("invalid pose at step {0}")]
    InvalidPose(usize),
    #[error("feature width mismatch at step {0}")]
    RaggedStep(usize),
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeMeta {
    pub task: String,
    pub seed: u64,
    pub source: String,
    pub rate_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub timestamp: f64,
    pub visual: Vec<f64>,
    pub tactile: Vec<f64>,
    /// Absolute end-effector pose (robot state).
    pub pose: Se3Pose,
    pub gripper: f64,
    /// Pose commanded at this step; actions are built from these.
    pub command: Se3Pose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.visual.len())
    }

    pub fn tactile_dim(&self) -> usize {
        self.steps.first().map_or(0, |s| s.tactile.len())
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let (v, t) = (self.visual_dim(), self.tactile_dim());
        for (i, s) in self.steps.iter().enumerate() {
            if s.visual.len() != v || s.tactile.len() != t {
                return Err(FormatError::RaggedStep(i));
            }
            if i > 0 && !(s.timestamp > self.steps[i - 1].timestamp) {
                return Err(FormatError::NonMonotonicTimestamps(i));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.steps.len() * 8 * (26 + self.visual_dim() + self.tactile_dim()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.visual_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.tactile_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.steps.len() as u64).to_le_bytes());
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for s in &self.steps {
            put(s.timestamp);
            s.visual.iter().for_each(|&v| put(v));
            s.tactile.iter().for_each(|&v| put(v));
            s.pose.to_array().iter().for_each(|&v| put(v));
            put(s.gripper);
            s.command.to_array().iter().for_each(|&v| put(v));
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(FormatError::BadMagic);
        }
        r.pos = 4;
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let meta_len = r.u32()? as usize;
        let meta: EpisodeMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| FormatError::Metadata(e.to_string()))?;
        let vis = r.u32()? as usize;
        let tac = r.u32()? as usize;
        let n = r.u64()? as usize;
        let stride = 26 + vis + tac;
        let needed = n
            .checked_mul(stride * 8)
            .ok_or(FormatError::Truncated { offset: r.pos, needed: usize::MAX })?;
        if buf.len() - r.pos < needed {
            return Err(FormatError::Truncated { offset: r.pos, needed });
        }
        let mut steps = Vec::with_capacity(n);
        for i in 0..n {
            let rec = r.floats(stride)?;
            let pose_at = |off: usize| -> Result<Se3Pose, FormatError> {
                let a: [f64; 12] = rec[off..off + 12].try_into().expect("12 floats");
                Se3Pose::from_array(&a).map_err(|_| FormatError::InvalidPose(i))
            };
            let o = 1 + vis + tac;
            steps.push(EpisodeStep {
                timestamp: rec[0],
                visual: rec[1..1 + vis].to_vec(),
                tactile: rec[1 + vis..o].to_vec(),
                pose: pose_at(o)?,
                gripper: rec[o + 12],
                command: pose_at(o + 13)?,
            });
        }
        if r.pos != buf.len() {
            return Err(FormatError::TrailingBytes(buf.len() - r.pos));
        }
        let ep = Episode { meta, steps };
        ep.validate()?;
        Ok(ep)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::decode(&buf)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub steps: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u8,
    pub task: String,
    pub seed: u64,
    pub count: usize,
    pub episodes: Vec<ManifestEntry>,
}

impl Manifest {
    /// Digest over the entries, stable across runs with equal content.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.episodes {
            h.update(e.file.as_bytes());
            h.update(e.sha256.as_bytes());
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes one file per episode plus a manifest into `dir`.
pub fn save_dataset(dir: impl AsRef<Path>, task: &str, seed: u64, episodes: &[Episode]) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let file = format!("episode_{i:04}.tgep");
        let bytes = ep.encode()?;
        let path = dir.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            file,
            seed: ep.meta.seed,
            steps: ep.len(),
            sha256: hex(&Sha256::digest(&bytes)),
        });
    }
    let manifest = Manifest {
        format_version: VERSION,
        task: task.to_string(),
        seed,
        count: entries.len(),
        episodes: entries,
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads and checks every episode listed in `dir/manifest.json`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<Episode>)> {
    let dir = dir.as_ref();
    let path: PathBuf = dir.join(MANIFEST);
    let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.count != manifest.episodes.len() {
        return Err(Error::invalid(format!(
            "manifest count {} disagrees with {} entries",
            manifest.count,
            manifest.episodes.len()
        )));
    }
    let mut episodes = Vec::with_capacity(manifest.count);
    for e in &manifest.episodes {
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if hex(&Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::invalid(format!("{}: checksum mismatch", e.file)));
        }
        let ep = Episode::decode(&bytes)?;
        if ep.len() != e.steps {
            return Err(Error::invalid(format!("{}: step count disagrees with manifest", e.file)));
        }
        episodes.push(ep);
    }
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode() -> Episode {
        Episode {
            meta: EpisodeMeta {
                task: "t".into(),
                seed: 3,
                source: "test".into(),
                rate_hz: 10.0,
            },
            steps: (0..3)
                .map(|i| EpisodeStep {
                    timestamp: i as f64 * 0.1,
                    visual: vec![i as f64, 0.5],
                    tactile: vec![-1.0],
                    pose: Se3Pose::planar(0.1 * i as f64, 0.0, 0.2),
                    gripper: 1.0,
                    command: Se3Pose::planar(0.0, 0.1, -0.3),
                })
                .collect(),
        }
    }

    #[test]
    fn round_trip_and_errors() {
        let ep = episode();
        let bytes = ep.encode().unwrap();
        assert_eq!(Episode::decode(&bytes).unwrap(), ep);
        assert_eq!(Episode::decode(&bytes[..bytes.len() - 1]).unwrap_err(), FormatError::Truncated {
            offset: bytes.len() - 3 * 8 * 29,
            needed: 3 * 8 * 29,
        });
        let mut v = bytes.clone();
        v[4] = 7;
        assert_eq!(Episode::decode(&v).unwrap_err(), FormatError::UnsupportedVersion(7));
        let mut bad = ep.clone();
        bad.steps[2].timestamp = 0.1;
        assert!(matches!(
            bad.encode(),
            Err(Error::Format(FormatError::NonMonotonicTimestamps(2)))
        ));
    }
}
