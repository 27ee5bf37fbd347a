//! Content-hash bookkeeping for stage outputs.
//!
//! `artifacts.json` in the output directory records, per stage, a
//! fingerprint of its parameters and input file contents plus the hash of
//! every file it wrote. A stage is fresh when its fingerprint still matches
//! and all its outputs are on disk unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ARTIFACTS_FILE: &str = "artifacts.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    pub seed: u64,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output path (relative to the output directory) to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hash_bytes(&bytes))
}

/// Seed of one stage, drawn from the run generator on its own stream so
/// stages never share random numbers.
pub fn stage_seed(run_seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(stream);
    rng.next_u64()
}

impl RunArtifacts {
    pub fn load(out_dir: &Path, seed: u64) -> Result<Self> {
        let path = out_dir.join(ARTIFACTS_FILE);
        if !path.exists() {
            return Ok(Self {
                seed,
                ..Self::default()
            });
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let mut a: Self = match serde_json::from_str(&text) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("ignoring unreadable {}: {e}", path.display());
                Self::default()
            }
        };
        if a.seed != seed {
            a.stages.clear();
        }
        a.seed = seed;
        Ok(a)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(&out_dir.join(ARTIFACTS_FILE), text.as_bytes())
    }

    /// Whether `stage` ran with `fingerprint` and its outputs are intact.
    pub fn is_fresh(&self, out_dir: &Path, stage: &str, fingerprint: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else {
            return false;
        };
        rec.fingerprint == fingerprint
            && rec.outputs.iter().all(|(rel, h)| {
                hash_file(&out_dir.join(rel)).is_ok_and(|cur| &cur == h)
            })
    }
}

/// Hashes of the given input files, keyed by display path.
pub fn input_hashes(out_dir: &Path, inputs: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    inputs
        .iter()
        .map(|p| Ok((display_key(out_dir, p), hash_file(p)?)))
        .collect()
}

/// Path relative to the output directory when inside it.
pub fn display_key(out_dir: &Path, p: &Path) -> String {
    p.strip_prefix(out_dir)
        .unwrap_or(p)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn fingerprint<P: Serialize>(
    stage: &str,
    params: &P,
    inputs: &BTreeMap<String, String>,
) -> Result<String> {
    let doc = serde_json::to_string(&(stage, params, inputs))?;
    Ok(hash_bytes(doc.as_bytes()))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
