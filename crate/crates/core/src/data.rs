//! Training samples cut from demonstration episodes.
//!
//! Each sample pairs the observation at step `t` with the chunk of the next
//! `H` commanded poses, expressed relative to the gripper pose at `t` (the
//! last observed state before the chunk). Chunks running past the end of an
//! episode repeat the final command.

use minitensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::pose::{relative_pose, ActionParam, Se3Pose};

#[derive(Debug, Clone)]
pub struct ChunkSample {
    pub episode: usize,
    pub step: usize,
    pub visual: Vec<f64>,
    pub tactile: Vec<f64>,
    /// Absolute planar state `(x, y, yaw)`.
    pub state: [f64; 3],
    /// `H * D` values, row-major by step.
    pub actions: Vec<f64>,
}

impl ChunkSample {
    /// Visual features followed by the absolute pose state.
    pub fn condition(&self) -> Vec<f64> {
        condition_vector(&self.visual, self.state)
    }
}

pub fn condition_vector(visual: &[f64], state: [f64; 3]) -> Vec<f64> {
    let mut c = visual.to_vec();
    c.extend_from_slice(&state);
    c
}

pub fn planar_state(pose: &Se3Pose) -> [f64; 3] {
    [pose.translation().x, pose.translation().y, pose.yaw()]
}

/// Relative action chunk for `episode` starting at `t`.
pub fn action_chunk(episode: &Episode, t: usize, horizon: usize, param: ActionParam) -> Result<Vec<f64>> {
    let steps = &episode.steps;
    if t >= steps.len() {
        return Err(Error::invalid(format!("step {t} outside episode of {}", steps.len())));
    }
    let mut seq = Vec::with_capacity(horizon + 1);
    seq.push(steps[t].pose);
    for i in 0..horizon {
        seq.push(steps[(t + i).min(steps.len() - 1)].command);
    }
    let rel = relative_pose(&seq, 0)?;
    Ok(rel[1..].iter().flat_map(|p| param.encode(p)).collect())
}

pub fn chunk_samples(episodes: &[Episode], horizon: usize, param: ActionParam) -> Result<Vec<ChunkSample>> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for (t, step) in ep.steps.iter().enumerate() {
            out.push(ChunkSample {
                episode: e,
                step: t,
                visual: step.visual.clone(),
                tactile: step.tactile.clone(),
                state: planar_state(&step.pose),
                actions: action_chunk(ep, t, horizon, param)?,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("no training samples: dataset is empty"));
    }
    Ok(out)
}

/// Affine per-feature map `(x - shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    /// Maps each feature's `[min, max]` onto `[-1, 1]`; `width` values per row
    /// share statistics with the same column modulo `width`.
    pub fn fit_range(rows: &[&[f64]], width: usize) -> Self {
        let mut lo = vec![f64::INFINITY; width];
        let mut hi = vec![f64::NEG_INFINITY; width];
        for r in rows {
            for (i, v) in r.iter().enumerate() {
                lo[i % width] = lo[i % width].min(*v);
                hi[i % width] = hi[i % width].max(*v);
            }
        }
        let shift = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
        let scale = lo.iter().zip(&hi).map(|(a, b)| (0.5 * (b - a)).max(1e-6)).collect();
        Self { shift, scale }
    }

    /// Zero mean, unit variance per feature.
    pub fn fit_standard(rows: &[&[f64]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; width];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; width];
        for r in rows {
            for (i, v) in r.iter().enumerate() {
                var[i] += (v - mean[i]).powi(2) / n;
            }
        }
        Self {
            shift: mean,
            scale: var.iter().map(|v| v.sqrt().max(1e-6)).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.shift.len()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let w = self.width();
        row.iter()
            .enumerate()
            .map(|(i, v)| (v - self.shift[i % w]) / self.scale[i % w])
            .collect()
    }

    pub fn invert(&self, row: &[f64]) -> Vec<f64> {
        let w = self.width();
        row.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[i % w] + self.shift[i % w])
            .collect()
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.shift"), Tensor::from_slice(&self.shift)),
            (format!("{prefix}.scale"), Tensor::from_slice(&self.scale)),
        ]
    }

    pub fn from_records(records: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let get = |name: String| {
            records
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.data().to_vec())
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks `{name}`")))
        };
        Ok(Self {
            shift: get(format!("{prefix}.shift"))?,
            scale: get(format!("{prefix}.scale"))?,
        })
    }
}

/// Stacks equal-length rows into a `[rows, ...shape]` tensor.
pub fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>, row_shape: &[usize]) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    let mut shape = vec![n];
    shape.extend_from_slice(row_shape);
    Ok(Tensor::new(&shape, data)?)
}
