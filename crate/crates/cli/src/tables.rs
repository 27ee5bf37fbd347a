//! Delimited-text tables exchanged between stages.
//!
//! Floats are written in shortest round-trip form, so reading a table back
//! yields the exact values that were written.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use vpcat_core::features::FEATURE_NAMES;
use vpcat_core::{ChunkFeatures, ChunkKey, ClusterModel, DbSweepResult, VideoChunkFeatures};

/// One row of the behavior feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub key: ChunkKey,
    pub features: ChunkFeatures,
}

pub fn features_csv(rows: &[FeatureRow]) -> String {
    let mut out = String::from("video_id,chunk_id,user_id");
    for name in FEATURE_NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.key.video_id, r.key.chunk_id, r.key.user_id);
        for v in r.features.to_array() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureRow>> {
    let mut rdr = reader(path)?;
    let expected = 3 + FEATURE_NAMES.len();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        if rec.len() != expected {
            bail!("{} row {}: expected {expected} fields, got {}", path.display(), i + 2, rec.len());
        }
        let int = |j: usize| -> Result<u32> {
            rec[j].parse().with_context(|| format!("{} row {}", path.display(), i + 2))
        };
        let key = ChunkKey {
            video_id: int(0)?,
            chunk_id: int(1)?,
            user_id: int(2)?,
        };
        let mut values = [0.0; 15];
        for (slot, field) in values.iter_mut().zip(rec.iter().skip(3)) {
            *slot = field
                .parse()
                .with_context(|| format!("{} row {}: bad number {field:?}", path.display(), i + 2))?;
        }
        rows.push(FeatureRow {
            key,
            features: ChunkFeatures::from_array(values),
        });
    }
    Ok(rows)
}

/// Population vectors with the number of users behind each.
pub fn f2_csv(table: &[VideoChunkFeatures], users: &[usize]) -> String {
    let m = table.first().map_or(0, |r| r.fractions.len());
    let mut out = String::from("video_id,chunk_id,users");
    for i in 0..m {
        let _ = write!(out, ",m{i}");
    }
    out.push('\n');
    for (r, n) in table.iter().zip(users) {
        let _ = write!(out, "{},{},{}", r.video_id, r.chunk_id, n);
        for v in &r.fractions {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn read_f2(path: &Path) -> Result<(Vec<VideoChunkFeatures>, Vec<usize>)> {
    let mut rdr = reader(path)?;
    let mut table = Vec::new();
    let mut users = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        let ctx = || format!("{} row {}", path.display(), i + 2);
        if rec.len() < 4 {
            bail!("{}: too few fields", ctx());
        }
        table.push(VideoChunkFeatures {
            video_id: rec[0].parse().with_context(ctx)?,
            chunk_id: rec[1].parse().with_context(ctx)?,
            fractions: rec
                .iter()
                .skip(3)
                .map(|f| f.parse::<f64>())
                .collect::<Result<_, _>>()
                .with_context(ctx)?,
        });
        users.push(rec[2].parse().with_context(ctx)?);
    }
    Ok((table, users))
}

pub fn sweep_csv(sweep: &DbSweepResult) -> String {
    let mut out = String::from("k,davies_bouldin,outlier_pct,chosen\n");
    for ((k, db), pct) in sweep.candidates.iter().zip(&sweep.db_scores).zip(&sweep.outlier_pct) {
        let _ = writeln!(out, "{k},{db},{pct},{}", u8::from(*k == sweep.chosen));
    }
    out
}

/// Per-point labels of a fitted model; video-chunk models leave `user_id`
/// empty.
pub fn assignments_csv(model: &ClusterModel) -> String {
    let mut out = String::from("video_id,chunk_id,user_id,label,outlier\n");
    for (i, &label) in model.labels.iter().enumerate() {
        let outlier = u8::from(model.outlier_flags.get(i).copied().unwrap_or(false));
        match model.keys.get(i) {
            Some(k) => {
                let user = k.user_id.map(|u| u.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{},{user},{label},{outlier}", k.video_id, k.chunk_id);
            }
            None => {
                let _ = writeln!(out, ",,,{label},{outlier}");
            }
        }
    }
    out
}

pub fn genres_csv<'a>(genres: impl IntoIterator<Item = (&'a u32, &'a String)>) -> String {
    let mut out = String::from("video_id,genre\n");
    for (v, g) in genres {
        let _ = writeln!(out, "{v},{g}");
    }
    out
}

pub fn read_genres(path: &Path) -> Result<std::collections::BTreeMap<u32, String>> {
    let mut rdr = reader(path)?;
    let mut out = std::collections::BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        out.insert(rec[0].parse()?, rec[1].to_string());
    }
    Ok(out)
}

/// Renders an optional float, empty when absent.
pub fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}
