//! Chunking and the two feature representations.
//!
//! A trace chunk is one user's `chunk_seconds` window of a unified trace.
//! Each chunk is described by a 15-dim behavior vector ([`ChunkFeatures`]);
//! each video chunk (all users of one video in one window) by the fraction
//! of its users falling in each behavior cluster ([`VideoChunkFeatures`]).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    axis_rates, sphere_coverage, unwrap_yaw, wrap_angle, CoverageGrid, GeometryError, ViewportSpec,
};
use crate::stats::{mean, quantile};
use crate::trace_io::{HeadSample, ViewportTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("video {video_id} chunk {chunk_id} has no users")]
    EmptyVideoChunk { video_id: u32, chunk_id: u32 },
    #[error("cluster label {label} outside [0, {clusters})")]
    LabelOutOfRange { label: usize, clusters: usize },
    #[error("{keys} keys but {labels} labels")]
    LengthMismatch { keys: usize, labels: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Identifies a trace chunk: video `i`, window `k`, user `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChunkKey {
    pub video_id: u32,
    pub chunk_id: u32,
    pub user_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceChunk {
    pub key: ChunkKey,
    pub rate_hz: f64,
    pub samples: Vec<HeadSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkingConfig {
    pub chunk_seconds: f64,
    /// Windows past this count are ignored.
    pub max_chunks: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            chunk_seconds: 2.0,
            max_chunks: 14,
        }
    }
}

/// Cuts unified traces into consecutive, non-overlapping windows
/// `[k * chunk_seconds, (k + 1) * chunk_seconds)` of video time.
///
/// Window `k` is emitted only when the trace spans all of it; partial
/// windows are dropped. Traces must be on their uniform `n / rate_hz` grid.
pub fn chunk_traces(traces: &[ViewportTrace], cfg: &ChunkingConfig) -> Vec<TraceChunk> {
    let mut out = Vec::new();
    for trace in traces {
        let (Some(first), Some(last)) = (trace.samples.first(), trace.samples.last()) else {
            continue;
        };
        let rate = trace.rate_hz;
        let len = (cfg.chunk_seconds * rate).round() as i64;
        let n0 = (first.t * rate).round() as i64;
        let n_last = (last.t * rate).round() as i64;
        if len < 2 {
            continue;
        }
        if n_last - n0 + 1 != trace.samples.len() as i64 {
            log::warn!(
                "trace v{} u{} is not on a uniform {rate} Hz grid; skipped",
                trace.video_id,
                trace.user_id
            );
            continue;
        }
        let eps = 1e-6;
        for k in 0..cfg.max_chunks as i64 {
            let start = k as f64 * cfg.chunk_seconds;
            let end = start + cfg.chunk_seconds;
            if last.t + eps < end {
                break;
            }
            if first.t > start + eps {
                continue;
            }
            let from = (k * len - n0) as usize;
            out.push(TraceChunk {
                key: ChunkKey {
                    video_id: trace.video_id,
                    chunk_id: k as u32,
                    user_id: trace.user_id,
                },
                rate_hz: rate,
                samples: trace.samples[from..from + len as usize].to_vec(),
            });
        }
    }
    out
}

/// Names of the 15 behavior features, in vector order.
pub const FEATURE_NAMES: [&str; 15] = [
    "pos_yaw_mean",
    "pos_yaw_p25",
    "pos_yaw_p75",
    "pos_pitch_mean",
    "pos_pitch_p25",
    "pos_pitch_p75",
    "speed_yaw_mean",
    "speed_yaw_p25",
    "speed_yaw_p75",
    "speed_pitch_mean",
    "speed_pitch_p25",
    "speed_pitch_p75",
    "max_angle_yaw",
    "max_angle_pitch",
    "area_explored",
];

/// Behavior vector of one trace chunk.
///
/// Positions in rad, speeds in rad/s (signed, per axis), maximum angles in
/// rad and the explored area in percent of the sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkFeatures {
    pub pos_yaw_mean: f64,
    pub pos_yaw_p25: f64,
    pub pos_yaw_p75: f64,
    pub pos_pitch_mean: f64,
    pub pos_pitch_p25: f64,
    pub pos_pitch_p75: f64,
    pub speed_yaw_mean: f64,
    pub speed_yaw_p25: f64,
    pub speed_yaw_p75: f64,
    pub speed_pitch_mean: f64,
    pub speed_pitch_p25: f64,
    pub speed_pitch_p75: f64,
    pub max_angle_yaw: f64,
    pub max_angle_pitch: f64,
    pub area_explored: f64,
}

impl ChunkFeatures {
    pub const DIM: usize = 15;

    pub fn to_array(&self) -> [f64; 15] {
        [
            self.pos_yaw_mean,
            self.pos_yaw_p25,
            self.pos_yaw_p75,
            self.pos_pitch_mean,
            self.pos_pitch_p25,
            self.pos_pitch_p75,
            self.speed_yaw_mean,
            self.speed_yaw_p25,
            self.speed_yaw_p75,
            self.speed_pitch_mean,
            self.speed_pitch_p25,
            self.speed_pitch_p75,
            self.max_angle_yaw,
            self.max_angle_pitch,
            self.area_explored,
        ]
    }

    pub fn from_array(v: [f64; 15]) -> Self {
        Self {
            pos_yaw_mean: v[0],
            pos_yaw_p25: v[1],
            pos_yaw_p75: v[2],
            pos_pitch_mean: v[3],
            pos_pitch_p25: v[4],
            pos_pitch_p75: v[5],
            speed_yaw_mean: v[6],
            speed_yaw_p25: v[7],
            speed_yaw_p75: v[8],
            speed_pitch_mean: v[9],
            speed_pitch_p25: v[10],
            speed_pitch_p75: v[11],
            max_angle_yaw: v[12],
            max_angle_pitch: v[13],
            area_explored: v[14],
        }
    }
}

fn triple(values: &[f64]) -> (f64, f64, f64) {
    (mean(values), quantile(values, 0.25), quantile(values, 0.75))
}

/// Computes the behavior vector of a chunk.
///
/// Yaw is unwrapped from the first sample before any statistic is taken, so
/// chunks crossing the +-pi seam behave like any other chunk; only the yaw
/// mean is wrapped back into `[-pi, pi)`. Percentiles use linear
/// interpolation. The maximum angle is the largest displacement from the
/// first sample on each axis.
pub fn extract_f1(
    chunk: &TraceChunk,
    vp: &ViewportSpec,
    grid: CoverageGrid,
) -> Result<ChunkFeatures, FeatureError> {
    let s = &chunk.samples;
    let yaw = unwrap_yaw(s.iter().map(|x| x.yaw));
    let pitch: Vec<f64> = s.iter().map(|x| x.pitch).collect();
    let (yaw_rate, pitch_rate) = axis_rates(s, chunk.rate_hz)?;

    let (pym, py25, py75) = triple(&yaw);
    let (ppm, pp25, pp75) = triple(&pitch);
    let (sym, sy25, sy75) = triple(&yaw_rate);
    let (spm, sp25, sp75) = triple(&pitch_rate);
    let max_from = |v: &[f64]| v.iter().map(|x| (x - v[0]).abs()).fold(0.0, f64::max);

    Ok(ChunkFeatures {
        pos_yaw_mean: wrap_angle(pym),
        pos_yaw_p25: py25,
        pos_yaw_p75: py75,
        pos_pitch_mean: ppm,
        pos_pitch_p25: pp25,
        pos_pitch_p75: pp75,
        speed_yaw_mean: sym,
        speed_yaw_p25: sy25,
        speed_yaw_p75: sy75,
        speed_pitch_mean: spm,
        speed_pitch_p25: sp25,
        speed_pitch_p75: sp75,
        max_angle_yaw: max_from(&yaw),
        max_angle_pitch: max_from(&pitch),
        area_explored: sphere_coverage(s, vp, grid)?,
    })
}

/// [`extract_f1`] over many chunks, in parallel, preserving order.
pub fn extract_all(
    chunks: &[TraceChunk],
    vp: &ViewportSpec,
    grid: CoverageGrid,
) -> Result<Vec<ChunkFeatures>, FeatureError> {
    chunks.par_iter().map(|c| extract_f1(c, vp, grid)).collect()
}

/// Population vector of one video chunk: `fractions[m]` is the share of
/// the chunk's users whose trace chunk fell in behavior cluster `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoChunkFeatures {
    pub video_id: u32,
    pub chunk_id: u32,
    pub fractions: Vec<f64>,
}

/// Builds the population vector of video chunk `(video_id, chunk_id)` from
/// the cluster labels of its users' trace chunks.
pub fn extract_f2(
    labels: &[usize],
    video_id: u32,
    chunk_id: u32,
    clusters: usize,
) -> Result<VideoChunkFeatures, FeatureError> {
    if labels.is_empty() {
        return Err(FeatureError::EmptyVideoChunk { video_id, chunk_id });
    }
    let mut counts = vec![0usize; clusters];
    for &l in labels {
        *counts.get_mut(l).ok_or(FeatureError::LabelOutOfRange { label: l, clusters })? += 1;
    }
    let n = labels.len() as f64;
    Ok(VideoChunkFeatures {
        video_id,
        chunk_id,
        fractions: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// Groups labelled trace chunks by `(video_id, chunk_id)` and builds one
/// population vector per group, ordered by video then chunk.
pub fn build_f2_table(
    keys: &[ChunkKey],
    labels: &[usize],
    clusters: usize,
) -> Result<Vec<VideoChunkFeatures>, FeatureError> {
    if keys.len() != labels.len() {
        return Err(FeatureError::LengthMismatch {
            keys: keys.len(),
            labels: labels.len(),
        });
    }
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (k, &l) in keys.iter().zip(labels) {
        groups.entry((k.video_id, k.chunk_id)).or_default().push(l);
    }
    groups
        .into_iter()
        .map(|((v, c), ls)| extract_f2(&ls, v, c, clusters))
        .collect()
}

/// Number of behavior clusters holding at least `min_users` of the video
/// chunk's `n_users` users.
pub fn count_behaviors(f2: &VideoChunkFeatures, n_users: usize, min_users: usize) -> usize {
    f2.fractions
        .iter()
        .filter(|&&f| (f * n_users as f64).round() as usize >= min_users)
        .count()
}
