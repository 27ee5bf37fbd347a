//! Trace ingestion and unification.
//!
//! Source datasets ship head orientation either as quaternions or as Euler
//! angles, at rates between a few Hz and 60 Hz. Everything is converted to
//! `(yaw, pitch)` radians (roll is dropped) and resampled onto a uniform
//! grid at `n / rate_hz` seconds.
//!
//! Quaternion conventions (`format_tag`):
//!
//! - `quaternion_csv`: right-handed, z up, x forward. The view direction is
//!   `R(q) * (1, 0, 0)`; yaw is its azimuth about +z, pitch its elevation.
//! - `quaternion_yup_csv`: right-handed, y up, -z forward (OpenGL style).
//!   The view direction is `R(q) * (0, 0, -1)`; yaw grows when turning
//!   towards -x.
//!
//! Euler rows are `t, yaw, pitch[, roll]`, in radians (`euler_csv`) or
//! degrees (`euler_deg_csv`).

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{unwrap_yaw, wrap_angle, SphericalPoint};

/// Largest accepted deviation of a quaternion norm from 1.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

/// Header of a unified store file.
pub const STORE_HEADER: &str = "video_id,user_id,t,yaw,pitch";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: quaternion norm {norm} deviates from 1 by more than {QUATERNION_NORM_TOLERANCE}")]
    NonUnitQuaternion { line: usize, norm: f64 },
    #[error("line {line}: timestamp {t} does not increase")]
    NonMonotonic { line: usize, t: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("no manifest entry could be loaded ({failures} failed)")]
    NoTraces { failures: usize },
}

impl TraceError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TraceError::Io {
            path: path.into(),
            source,
        }
    }
}

/// One timestamped view direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSample {
    pub t: f64,
    pub yaw: f64,
    pub pitch: f64,
}

impl HeadSample {
    /// Wraps yaw into `[-pi, pi)` and clamps pitch to `[-pi/2, pi/2]`.
    pub fn new(t: f64, yaw: f64, pitch: f64) -> Self {
        let p = SphericalPoint::new(yaw, pitch);
        Self {
            t,
            yaw: p.yaw,
            pitch: p.pitch,
        }
    }

    pub fn point(&self) -> SphericalPoint {
        SphericalPoint {
            yaw: self.yaw,
            pitch: self.pitch,
        }
    }
}

/// Orientation stream of one user watching one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewportTrace {
    pub video_id: u32,
    pub user_id: u32,
    pub rate_hz: f64,
    pub samples: Vec<HeadSample>,
}

impl ViewportTrace {
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatTag {
    QuaternionCsv,
    QuaternionYupCsv,
    EulerCsv,
    EulerDegCsv,
}

impl FormatTag {
    pub const ALL: [FormatTag; 4] = [
        FormatTag::QuaternionCsv,
        FormatTag::QuaternionYupCsv,
        FormatTag::EulerCsv,
        FormatTag::EulerDegCsv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FormatTag::QuaternionCsv => "quaternion_csv",
            FormatTag::QuaternionYupCsv => "quaternion_yup_csv",
            FormatTag::EulerCsv => "euler_csv",
            FormatTag::EulerDegCsv => "euler_deg_csv",
        }
    }
}

impl fmt::Display for FormatTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FormatTag {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FormatTag::ALL
            .into_iter()
            .find(|f| f.as_str() == s.trim())
            .ok_or_else(|| TraceError::Manifest(format!("unknown format tag {s:?}")))
    }
}

/// View direction of a unit quaternion `(w, x, y, z)` in the z-up,
/// x-forward convention.
pub fn quaternion_to_yaw_pitch(w: f64, x: f64, y: f64, z: f64) -> (f64, f64) {
    let fx = 1.0 - 2.0 * (y * y + z * z);
    let fy = 2.0 * (x * y + w * z);
    let fz = 2.0 * (x * z - w * y);
    let p = SphericalPoint::from_unit_vector([fx, fy, fz]);
    (p.yaw, p.pitch)
}

/// View direction of a unit quaternion in the y-up, -z-forward convention.
pub fn quaternion_yup_to_yaw_pitch(w: f64, x: f64, y: f64, z: f64) -> (f64, f64) {
    // third column of R(q), negated
    let fx = -2.0 * (x * z + w * y);
    let fy = -2.0 * (y * z - w * x);
    let fz = -(1.0 - 2.0 * (x * x + y * y));
    let p = SphericalPoint::from_unit_vector([-fz, -fx, fy]);
    (p.yaw, p.pitch)
}

/// Quaternion `(w, x, y, z)` of a yaw about +z followed by a pitch that
/// raises the view direction, in the z-up, x-forward convention.
pub fn yaw_pitch_to_quaternion(yaw: f64, pitch: f64) -> [f64; 4] {
    let (sy, cy) = (yaw / 2.0).sin_cos();
    // positive pitch is a negative rotation about the local y axis
    let (sp, cp) = (-pitch / 2.0).sin_cos();
    // q_yaw * q_pitch with q_yaw = (cy, 0, 0, sy), q_pitch = (cp, 0, sp, 0)
    [cy * cp, -sy * sp, cy * sp, sy * cp]
}

fn parse_fields(line: &str, line_no: usize) -> Result<Vec<f64>, TraceError> {
    line.split([',', ';', '\t'])
        .map(str::trim)
        .filter(|f| !f.is_empty())
        .map(|f| {
            f.parse::<f64>().map_err(|_| TraceError::Parse {
                line: line_no,
                message: format!("not a number: {f:?}"),
            })
        })
        .collect()
}

/// Parses one raw trace file into canonical yaw/pitch radians.
///
/// Blank lines and lines starting with `#` are skipped, and a non-numeric
/// first row is treated as a header. Roll is discarded.
pub fn parse_trace<R: Read>(
    raw: R,
    format: FormatTag,
    video_id: u32,
    user_id: u32,
) -> Result<ViewportTrace, TraceError> {
    let reader = BufReader::new(raw);
    let mut samples: Vec<HeadSample> = Vec::new();
    let mut seen_row = false;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = match parse_fields(trimmed, line_no) {
            Ok(f) => f,
            Err(_) if !seen_row => {
                seen_row = true;
                continue;
            }
            Err(e) => return Err(e),
        };
        seen_row = true;
        let sample = match format {
            FormatTag::QuaternionCsv | FormatTag::QuaternionYupCsv => {
                let [t, w, x, y, z] = fields[..] else {
                    return Err(TraceError::Parse {
                        line: line_no,
                        message: format!("expected 5 fields (t,qw,qx,qy,qz), got {}", fields.len()),
                    });
                };
                let norm = (w * w + x * x + y * y + z * z).sqrt();
                if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
                    return Err(TraceError::NonUnitQuaternion { line: line_no, norm });
                }
                let (w, x, y, z) = (w / norm, x / norm, y / norm, z / norm);
                let (yaw, pitch) = if format == FormatTag::QuaternionCsv {
                    quaternion_to_yaw_pitch(w, x, y, z)
                } else {
                    quaternion_yup_to_yaw_pitch(w, x, y, z)
                };
                (t, yaw, pitch)
            }
            FormatTag::EulerCsv | FormatTag::EulerDegCsv => {
                if !(3..=4).contains(&fields.len()) {
                    return Err(TraceError::Parse {
                        line: line_no,
                        message: format!(
                            "expected 3 or 4 fields (t,yaw,pitch[,roll]), got {}",
                            fields.len()
                        ),
                    });
                }
                let scale = if format == FormatTag::EulerDegCsv {
                    std::f64::consts::PI / 180.0
                } else {
                    1.0
                };
                (fields[0], fields[1] * scale, fields[2] * scale)
            }
        };
        let (t, yaw, pitch) = sample;
        if !(t.is_finite() && yaw.is_finite() && pitch.is_finite()) || t < 0.0 {
            return Err(TraceError::Parse {
                line: line_no,
                message: "timestamp must be finite and non-negative".into(),
            });
        }
        if let Some(prev) = samples.last() {
            if t <= prev.t {
                return Err(TraceError::NonMonotonic { line: line_no, t });
            }
        }
        samples.push(HeadSample::new(t, yaw, pitch));
    }
    if samples.len() < 2 {
        return Err(TraceError::InsufficientData(format!(
            "{} sample(s), need at least 2",
            samples.len()
        )));
    }
    let span = samples[samples.len() - 1].t - samples[0].t;
    Ok(ViewportTrace {
        video_id,
        user_id,
        rate_hz: (samples.len() - 1) as f64 / span,
        samples,
    })
}

/// Resamples onto the grid `t = n / target_hz` inside the original time span.
///
/// Yaw is unwrapped, interpolated linearly and wrapped back; pitch is
/// interpolated linearly. Nothing is extrapolated.
pub fn resample(trace: &ViewportTrace, target_hz: f64) -> Result<ViewportTrace, TraceError> {
    let s = &trace.samples;
    if s.len() < 2 {
        return Err(TraceError::InsufficientData(format!(
            "{} sample(s), need at least 2",
            s.len()
        )));
    }
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(TraceError::InsufficientData(format!(
            "invalid target rate {target_hz}"
        )));
    }
    let (t0, t1) = (s[0].t, s[s.len() - 1].t);
    if t1 - t0 + 1e-9 < 1.0 / target_hz {
        return Err(TraceError::InsufficientData(format!(
            "span {:.3} s shorter than one period at {target_hz} Hz",
            t1 - t0
        )));
    }
    let yaw_u = unwrap_yaw(s.iter().map(|x| x.yaw));
    let first = (t0 * target_hz - 1e-9).ceil() as i64;
    let last = (t1 * target_hz + 1e-9).floor() as i64;

    let mut out = Vec::with_capacity((last - first + 1).max(0) as usize);
    let mut seg = 0usize;
    for n in first..=last {
        let t = n as f64 / target_hz;
        let tc = t.clamp(t0, t1);
        while seg + 2 < s.len() && s[seg + 1].t < tc {
            seg += 1;
        }
        let (a, b) = (&s[seg], &s[seg + 1]);
        let w = ((tc - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let yaw = yaw_u[seg] + w * (yaw_u[seg + 1] - yaw_u[seg]);
        let pitch = a.pitch + w * (b.pitch - a.pitch);
        out.push(HeadSample {
            t,
            yaw: wrap_angle(yaw),
            pitch,
        });
    }
    Ok(ViewportTrace {
        video_id: trace.video_id,
        user_id: trace.user_id,
        rate_hz: target_hz,
        samples: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source_path: PathBuf,
    pub video_id: u32,
    pub user_id: u32,
    pub format_tag: FormatTag,
    #[serde(default, deserialize_with = "empty_as_none")]
    pub genre_label: Option<String>,
}

fn empty_as_none<'de, D>(de: D) -> Result<Option<String>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let v: Option<String> = Option::deserialize(de)?;
    Ok(v.map(|s| s.trim().to_string()).filter(|s| !s.is_empty()))
}

/// List of raw trace files with their ids, format and optional genre.
///
/// Stored as CSV with header `source_path,video_id,user_id,format_tag,genre_label`.
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self, TraceError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert((e.video_id, e.user_id)) {
                return Err(TraceError::Manifest(format!(
                    "duplicate (video_id, user_id) = ({}, {})",
                    e.video_id, e.user_id
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_reader<R: Read>(reader: R, base_dir: &Path) -> Result<Self, TraceError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for (idx, rec) in rdr.deserialize::<ManifestEntry>().enumerate() {
            let mut e = rec.map_err(|err| TraceError::Manifest(format!("row {}: {err}", idx + 2)))?;
            if e.source_path.is_relative() {
                e.source_path = base_dir.join(&e.source_path);
            }
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn from_path(path: &Path) -> Result<Self, TraceError> {
        let file = File::open(path).map_err(|e| TraceError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_reader(file, base)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), TraceError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| TraceError::Manifest(e.to_string());
        wtr.write_record(["source_path", "video_id", "user_id", "format_tag", "genre_label"])
            .map_err(to_err)?;
        for e in &self.entries {
            wtr.write_record([
                e.source_path.to_string_lossy().as_ref(),
                &e.video_id.to_string(),
                &e.user_id.to_string(),
                e.format_tag.as_str(),
                e.genre_label.as_deref().unwrap_or(""),
            ])
            .map_err(to_err)?;
        }
        wtr.flush().map_err(|e| TraceError::io("<manifest>", e))
    }
}

/// A manifest entry that could not be loaded.
#[derive(Debug)]
pub struct EntryFailure {
    pub source_path: PathBuf,
    pub video_id: u32,
    pub user_id: u32,
    pub error: TraceError,
}

#[derive(Debug)]
pub struct UnifiedTraces {
    /// Successfully unified traces, sorted by `(video_id, user_id)`.
    pub traces: Vec<ViewportTrace>,
    pub failures: Vec<EntryFailure>,
}

fn load_entry(entry: &ManifestEntry, target_hz: f64) -> Result<ViewportTrace, TraceError> {
    let file = File::open(&entry.source_path).map_err(|e| TraceError::io(&entry.source_path, e))?;
    let raw = parse_trace(file, entry.format_tag, entry.video_id, entry.user_id)?;
    resample(&raw, target_hz)
}

/// Parses and resamples every manifest entry in parallel.
///
/// Entries that fail are collected in `failures` and the run continues;
/// only a manifest with no loadable entry is an error.
pub fn load_unified(manifest: &DatasetManifest, target_hz: f64) -> Result<UnifiedTraces, TraceError> {
    let results: Vec<_> = manifest
        .entries
        .par_iter()
        .map(|e| (e, load_entry(e, target_hz)))
        .collect();
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for (entry, res) in results {
        match res {
            Ok(t) => traces.push(t),
            Err(error) => {
                log::warn!("skipping {}: {error}", entry.source_path.display());
                failures.push(EntryFailure {
                    source_path: entry.source_path.clone(),
                    video_id: entry.video_id,
                    user_id: entry.user_id,
                    error,
                });
            }
        }
    }
    if traces.is_empty() {
        return Err(TraceError::NoTraces {
            failures: failures.len(),
        });
    }
    traces.sort_by_key(|t| (t.video_id, t.user_id));
    let summary = DatasetSummary::of(&traces);
    log::info!(
        "unified {} traces over {} videos ({:.1} traces/video, {} failed)",
        summary.traces,
        summary.videos,
        summary.traces_per_video,
        failures.len()
    );
    Ok(UnifiedTraces { traces, failures })
}

/// Count statistics of a set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub videos: usize,
    pub traces: usize,
    pub traces_per_video: f64,
    pub min_duration_s: f64,
    pub mean_duration_s: f64,
    pub max_duration_s: f64,
}

impl DatasetSummary {
    pub fn of(traces: &[ViewportTrace]) -> Self {
        let videos: HashSet<u32> = traces.iter().map(|t| t.video_id).collect();
        let durations: Vec<f64> = traces.iter().map(ViewportTrace::duration).collect();
        let n = traces.len().max(1) as f64;
        Self {
            videos: videos.len(),
            traces: traces.len(),
            traces_per_video: traces.len() as f64 / videos.len().max(1) as f64,
            min_duration_s: durations.iter().copied().fold(f64::INFINITY, f64::min).min(f64::MAX),
            mean_duration_s: durations.iter().sum::<f64>() / n,
            max_duration_s: durations.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// File name of a trace inside the unified store.
pub fn store_file_name(video_id: u32, user_id: u32) -> String {
    format!("v{video_id:04}_u{user_id:04}.csv")
}

/// Writes a trace as `video_id,user_id,t,yaw,pitch` rows with 6 decimals.
pub fn write_store_trace<W: Write>(trace: &ViewportTrace, mut w: W) -> std::io::Result<()> {
    let mut buf = String::with_capacity(32 * (trace.samples.len() + 1));
    buf.push_str(STORE_HEADER);
    buf.push('\n');
    for s in &trace.samples {
        use std::fmt::Write as _;
        let _ = writeln!(
            buf,
            "{},{},{:.6},{:.6},{:.6}",
            trace.video_id, trace.user_id, s.t, s.yaw, s.pitch
        );
    }
    w.write_all(buf.as_bytes())
}

/// Reads a unified store file back. `rate_hz` is the store's canonical rate.
pub fn read_store_trace<R: Read>(raw: R, rate_hz: f64) -> Result<ViewportTrace, TraceError> {
    let reader = BufReader::new(raw);
    let mut ids: Option<(u32, u32)> = None;
    let mut samples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line_no == 1 {
            if line.trim() != STORE_HEADER {
                return Err(TraceError::Parse {
                    line: 1,
                    message: format!("expected header {STORE_HEADER:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f = parse_fields(&line, line_no)?;
        let [v, u, t, yaw, pitch] = f[..] else {
            return Err(TraceError::Parse {
                line: line_no,
                message: format!("expected 5 fields, got {}", f.len()),
            });
        };
        let row_ids = (v as u32, u as u32);
        match ids {
            None => ids = Some(row_ids),
            Some(existing) if existing != row_ids => {
                return Err(TraceError::Parse {
                    line: line_no,
                    message: "mixed video/user ids in one store file".into(),
                })
            }
            _ => {}
        }
        samples.push(HeadSample::new(t, yaw, pitch));
    }
    let (video_id, user_id) =
        ids.ok_or_else(|| TraceError::InsufficientData("empty store file".into()))?;
    Ok(ViewportTrace {
        video_id,
        user_id,
        rate_hz,
        samples,
    })
}

/// Writes every trace into `dir`, returning the written paths in order.
pub fn write_store(dir: &Path, traces: &[ViewportTrace]) -> Result<Vec<PathBuf>, TraceError> {
    std::fs::create_dir_all(dir).map_err(|e| TraceError::io(dir, e))?;
    traces
        .iter()
        .map(|t| {
            let path = dir.join(store_file_name(t.video_id, t.user_id));
            let file = File::create(&path).map_err(|e| TraceError::io(&path, e))?;
            let mut w = std::io::BufWriter::new(file);
            write_store_trace(t, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| TraceError::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

/// Store files in `dir`, sorted by name.
pub fn store_files(dir: &Path) -> Result<Vec<PathBuf>, TraceError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| TraceError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with('v') && n.ends_with(".csv") && n.contains("_u"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every trace of a unified store directory, sorted by ids.
pub fn load_store(dir: &Path, rate_hz: f64) -> Result<Vec<ViewportTrace>, TraceError> {
    let files = store_files(dir)?;
    let mut traces = files
        .par_iter()
        .map(|p| {
            let f = File::open(p).map_err(|e| TraceError::io(p, e))?;
            read_store_trace(f, rate_hz)
        })
        .collect::<Result<Vec<_>, _>>()?;
    traces.sort_by_key(|t| (t.video_id, t.user_id));
    Ok(traces)
}
