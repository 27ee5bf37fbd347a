//! Pipeline configuration: a flat TOML file whose keys all have defaults.
//!
//! ```toml
//! seed = 7
//! manifest = "data/manifest.csv"
//! out_dir = "run"
//! m_min = 2
//! m_max = 20
//! fixed_q = 6
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vpcat_core::clustering::KMeansOptions;
use vpcat_core::evaluation::{BaselineParams, ReportOptions};
use vpcat_core::{ChunkingConfig, CoverageGrid, ViewportSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Dataset manifest for `unify`; relative paths resolve against the
    /// config file's directory.
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub rate_hz: f64,
    pub chunk_seconds: f64,
    pub max_chunks: usize,
    pub viewport_yaw_deg: f64,
    pub viewport_pitch_deg: f64,
    /// Latitude row height of the coverage estimate.
    pub coverage_cell_deg: f64,

    pub m_min: usize,
    pub m_max: usize,
    pub fixed_m: Option<usize>,
    pub q_min: usize,
    pub q_max: usize,
    pub fixed_q: Option<usize>,

    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub kmeans_n_init: usize,
    pub outlier_z: f64,

    /// Pairs evaluated per report before subsampling kicks in.
    pub sample_cap: usize,
    /// A behavior counts in a video chunk when at least this many users show it.
    pub min_users: usize,

    pub spherical_theta: f64,
    pub spectral_sigma: f64,
    pub spectral_k_max: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,

    pub heatmap_cell_deg: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let baselines = BaselineParams::default();
        let kmeans = KMeansOptions::default();
        Self {
            seed: 0,
            manifest: None,
            out_dir: PathBuf::from("vpcat-out"),
            rate_hz: 10.0,
            chunk_seconds: 2.0,
            max_chunks: 14,
            viewport_yaw_deg: 100.0,
            viewport_pitch_deg: 100.0,
            coverage_cell_deg: 1.0,
            m_min: 2,
            m_max: 20,
            fixed_m: None,
            q_min: 2,
            q_max: 12,
            fixed_q: None,
            kmeans_max_iter: kmeans.max_iter,
            kmeans_tol: kmeans.tol,
            kmeans_n_init: kmeans.n_init,
            outlier_z: 3.0,
            sample_cap: 1_000_000,
            min_users: 1,
            spherical_theta: baselines.spherical_theta,
            spectral_sigma: baselines.spectral_sigma,
            spectral_k_max: baselines.spectral_k_max,
            dbscan_eps: baselines.dbscan_eps,
            dbscan_min_pts: baselines.dbscan_min_pts,
            heatmap_cell_deg: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `manifest` is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            bail!("rate_hz must be positive, got {}", self.rate_hz);
        }
        if !(self.chunk_seconds.is_finite() && self.chunk_seconds > 0.0) || self.max_chunks == 0 {
            bail!("chunk_seconds and max_chunks must be positive");
        }
        self.viewport()?;
        if self.m_min < 2 || self.m_min > self.m_max {
            bail!("m range {}..={} is empty or below 2", self.m_min, self.m_max);
        }
        if self.q_min < 2 || self.q_min > self.q_max {
            bail!("q range {}..={} is empty or below 2", self.q_min, self.q_max);
        }
        if self.fixed_m.is_some_and(|m| m < 2) || self.fixed_q.is_some_and(|q| q < 2) {
            bail!("fixed cluster counts must be at least 2");
        }
        for (name, v) in [("coverage_cell_deg", self.coverage_cell_deg), ("heatmap_cell_deg", self.heatmap_cell_deg)] {
            if !(v > 0.0 && v <= 90.0) {
                bail!("{name} must be in (0, 90], got {v}");
            }
        }
        if self.kmeans_n_init == 0 || self.kmeans_max_iter == 0 || self.sample_cap == 0 {
            bail!("kmeans_n_init, kmeans_max_iter and sample_cap must be positive");
        }
        Ok(())
    }

    pub fn viewport(&self) -> Result<ViewportSpec> {
        ViewportSpec::from_degrees(self.viewport_yaw_deg, self.viewport_pitch_deg)
            .context("invalid viewport extents")
    }

    pub fn coverage_grid(&self) -> CoverageGrid {
        CoverageGrid::with_cell_deg(self.coverage_cell_deg)
    }

    pub fn chunking(&self) -> ChunkingConfig {
        ChunkingConfig {
            chunk_seconds: self.chunk_seconds,
            max_chunks: self.max_chunks,
        }
    }

    pub fn kmeans(&self, standardize: bool) -> KMeansOptions {
        KMeansOptions {
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            n_init: self.kmeans_n_init,
            standardize,
        }
    }

    pub fn baselines(&self) -> BaselineParams {
        BaselineParams {
            spherical_theta: self.spherical_theta,
            spectral_sigma: self.spectral_sigma,
            spectral_k_max: self.spectral_k_max,
            dbscan_eps: self.dbscan_eps,
            dbscan_min_pts: self.dbscan_min_pts,
        }
    }

    pub fn report(&self, seed: u64, exclude_outliers: bool) -> ReportOptions {
        ReportOptions {
            sample_cap: self.sample_cap,
            seed,
            exclude_outliers,
        }
    }
}
