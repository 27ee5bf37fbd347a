#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vpcat_core::synth::{euler_csv, mixture_dataset, MixtureConfig, MixtureDataset};
use vpcat_core::{DatasetManifest, FormatTag, ManifestEntry};

/// Writes every trace of a mixture dataset as an Euler CSV plus a manifest
/// next to them; returns the manifest path.
pub fn write_dataset(dir: &Path, cfg: &MixtureConfig) -> (PathBuf, MixtureDataset) {
    let data = mixture_dataset(cfg);
    let traces = dir.join("traces");
    std::fs::create_dir_all(&traces).unwrap();
    let mut entries = Vec::new();
    for t in &data.traces {
        let name = format!("v{}_u{}.csv", t.video_id, t.user_id);
        std::fs::write(traces.join(&name), euler_csv(t)).unwrap();
        entries.push(ManifestEntry {
            source_path: PathBuf::from("traces").join(name),
            video_id: t.video_id,
            user_id: t.user_id,
            format_tag: FormatTag::EulerCsv,
            genre_label: data.genres.get(&t.video_id).cloned(),
        });
    }
    let manifest = dir.join("manifest.csv");
    let file = std::fs::File::create(&manifest).unwrap();
    DatasetManifest::new(entries).unwrap().write(file).unwrap();
    (manifest, data)
}

pub fn small_mixture(seed: u64) -> MixtureConfig {
    MixtureConfig {
        videos: 4,
        users_min: 6,
        users_max: 8,
        chunks: 6,
        seed,
        ..MixtureConfig::default()
    }
}

pub fn vpcat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpcat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("vpcat runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root`, relative, sorted.
pub fn tree(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
