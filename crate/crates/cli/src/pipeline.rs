//! Stage orchestration with cached, content-addressed outputs.
//!
//! Layout of the output directory:
//!
//! | path | stage |
//! |------|-------|
//! | `store/vNNNN_uNNNN.csv`, `store/genres.csv`, `store/summary.json` | unify |
//! | `features.csv` | features |
//! | `stage1_model.json`, `stage1_sweep.csv`, `stage1_assignments.csv` | cluster-viewports |
//! | `f2.csv`, `stage2_model.json`, `stage2_sweep.csv`, `categories.csv` | categorize |
//! | `reports/*` | evaluate |
//! | `heatmaps/*.grid.csv`, `heatmaps/*.png` | heatmap |
//! | `artifacts.json` | all |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use vpcat_core::clustering::{db_sweep, PointKey};
use vpcat_core::evaluation::{
    ccdf, compare_baselines, AlgorithmScore, CategoryReport, ClusterReport,
};
use vpcat_core::features::{build_f2_table, extract_all};
use vpcat_core::trace_io::{
    load_store, store_file_name, store_files, write_store_trace, DatasetSummary,
};
use vpcat_core::{
    category_report, chunk_traces, cluster_similarity_report, clusters_per_video,
    count_behaviors, flag_outliers, kmeans_fit, load_unified, static_vs_dynamic, ClusterModel,
    DatasetManifest, DbSweepResult, Stage, TraceChunk, VideoChunkFeatures, ViewportTrace,
};

use crate::artifacts::{
    display_key, fingerprint, hash_bytes, input_hashes, stage_seed, write_atomic, RunArtifacts,
    StageRecord,
};
use crate::config::PipelineConfig;
use crate::heatmap::Heatmap;
use crate::tables::{self, FeatureRow};

pub const STORE_DIR: &str = "store";
pub const GENRES_FILE: &str = "store/genres.csv";
pub const SUMMARY_FILE: &str = "store/summary.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const STAGE1_MODEL: &str = "stage1_model.json";
pub const STAGE1_SWEEP: &str = "stage1_sweep.csv";
pub const STAGE1_ASSIGNMENTS: &str = "stage1_assignments.csv";
pub const F2_FILE: &str = "f2.csv";
pub const STAGE2_MODEL: &str = "stage2_model.json";
pub const STAGE2_SWEEP: &str = "stage2_sweep.csv";
pub const CATEGORIES_FILE: &str = "categories.csv";

/// Streams of the run generator, one per stochastic stage.
const STREAM_STAGE1: u64 = 1;
const STREAM_STAGE2: u64 = 2;
const STREAM_REPORTS: u64 = 3;
const STREAM_BASELINES: u64 = 4;

/// Reports produced by `evaluate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Report {
    Stage1,
    Stage2,
    Baselines,
    StaticDynamic,
    Behaviors,
}

impl Report {
    pub const ALL: [Report; 5] = [
        Report::Stage1,
        Report::Stage2,
        Report::Baselines,
        Report::StaticDynamic,
        Report::Behaviors,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Report::Stage1 => "stage1",
            Report::Stage2 => "stage2",
            Report::Baselines => "baselines",
            Report::StaticDynamic => "static_dynamic",
            Report::Behaviors => "behaviors",
        }
    }
}

/// Which samples a heatmap aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    /// Every trace chunk of the video chunks in a category.
    Category(usize),
    /// Every trace chunk in a behavior cluster.
    Cluster(usize),
}

impl Selector {
    fn stem(self) -> String {
        match self {
            Selector::Category(q) => format!("category_{q}"),
            Selector::Cluster(m) => format!("cluster_{m}"),
        }
    }
}

/// Outcome of running one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Cached,
}

type Outputs = Vec<(String, Vec<u8>)>;

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out_dir: PathBuf,
    artifacts: RunArtifacts,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn read_model(path: &Path) -> Result<ClusterModel> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out_dir = cfg.out_dir.clone();
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("creating output directory {}", out_dir.display()))?;
        let artifacts = RunArtifacts::load(&out_dir, cfg.seed)?;
        Ok(Self {
            cfg,
            out_dir,
            artifacts,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    pub fn artifacts(&self) -> &RunArtifacts {
        &self.artifacts
    }

    /// Runs `body` unless the stage is fresh for these parameters and
    /// inputs, then records what it wrote. Outputs left over from an
    /// earlier run of the same stage are removed.
    fn run_stage<P, F>(&mut self, stage: &str, params: &P, inputs: &[PathBuf], seed: u64, body: F) -> Result<Outcome>
    where
        P: Serialize,
        F: FnOnce(&Self) -> Result<Outputs>,
    {
        let hashes = input_hashes(&self.out_dir, inputs)?;
        let fp = fingerprint(stage, &(params, seed), &hashes)?;
        if self.artifacts.is_fresh(&self.out_dir, stage, &fp) {
            log::info!("{stage}: up to date");
            return Ok(Outcome::Cached);
        }
        log::info!("{stage}: running");
        let outputs = body(self)?;
        if let Some(old) = self.artifacts.stages.get(stage) {
            for rel in old.outputs.keys() {
                if !outputs.iter().any(|(r, _)| r == rel) {
                    let _ = std::fs::remove_file(self.out_dir.join(rel));
                }
            }
        }
        let mut record = StageRecord {
            fingerprint: fp,
            seed,
            inputs: hashes,
            outputs: BTreeMap::new(),
        };
        for (rel, bytes) in &outputs {
            write_atomic(&self.out_dir.join(rel), bytes)?;
            record.outputs.insert(rel.clone(), hash_bytes(bytes));
        }
        self.artifacts.stages.insert(stage.to_string(), record);
        self.artifacts.save(&self.out_dir)?;
        Ok(Outcome::Ran)
    }

    fn store_inputs(&self) -> Result<Vec<PathBuf>> {
        let dir = self.path(STORE_DIR);
        let files = store_files(&dir).with_context(|| {
            format!(
                "no unified store at {}; run `vpcat unify` with a manifest first",
                dir.display()
            )
        })?;
        if files.is_empty() {
            bail!("unified store {} is empty; run `vpcat unify` first", dir.display());
        }
        let mut inputs = files;
        let genres = self.path(GENRES_FILE);
        if genres.exists() {
            inputs.push(genres);
        }
        Ok(inputs)
    }

    fn load_traces(&self) -> Result<Vec<ViewportTrace>> {
        Ok(load_store(&self.path(STORE_DIR), self.cfg.rate_hz)?)
    }

    fn chunks(&self) -> Result<Vec<TraceChunk>> {
        Ok(chunk_traces(&self.load_traces()?, &self.cfg.chunking()))
    }

    /// Parses and resamples the manifest into the unified store.
    pub fn unify(&mut self) -> Result<Outcome> {
        let manifest_path = self
            .cfg
            .manifest
            .clone()
            .ok_or_else(|| anyhow!("no manifest configured; set `manifest` in the config or pass --manifest"))?;
        let manifest = DatasetManifest::from_path(&manifest_path)?;
        if manifest.entries.is_empty() {
            bail!("manifest {} lists no traces", manifest_path.display());
        }
        let mut inputs = vec![manifest_path.clone()];
        inputs.extend(manifest.entries.iter().map(|e| e.source_path.clone()).filter(|p| p.exists()));
        let rate = self.cfg.rate_hz;
        self.run_stage("unify", &rate, &inputs, 0, |p| {
            let unified = load_unified(&manifest, rate)?;
            for f in &unified.failures {
                log::warn!("skipped {}: {}", f.source_path.display(), f.error);
            }
            let mut genres: BTreeMap<u32, String> = BTreeMap::new();
            for e in &manifest.entries {
                if let Some(g) = &e.genre_label {
                    genres.entry(e.video_id).or_insert_with(|| g.clone());
                }
            }
            let summary = DatasetSummary::of(&unified.traces);
            #[derive(Serialize)]
            struct Summary<'a> {
                #[serde(flatten)]
                summary: &'a DatasetSummary,
                failed: Vec<String>,
            }
            let failed = unified
                .failures
                .iter()
                .map(|f| format!("{}: {}", display_key(&p.out_dir, &f.source_path), f.error))
                .collect();
            let mut outputs: Outputs = Vec::with_capacity(unified.traces.len() + 2);
            for t in &unified.traces {
                let mut bytes = Vec::new();
                write_store_trace(t, &mut bytes)?;
                outputs.push((format!("{STORE_DIR}/{}", store_file_name(t.video_id, t.user_id)), bytes));
            }
            outputs.push((GENRES_FILE.into(), tables::genres_csv(&genres).into_bytes()));
            outputs.push((SUMMARY_FILE.into(), json_bytes(&Summary { summary: &summary, failed })?));
            Ok(outputs)
        })
    }

    /// Refreshes the store when a manifest is configured; otherwise the
    /// store is taken as given.
    fn ensure_store(&mut self) -> Result<()> {
        if self.cfg.manifest.is_some() {
            self.unify()?;
        }
        Ok(())
    }

    /// Builds the behavior feature table from the unified store.
    pub fn features(&mut self) -> Result<Outcome> {
        self.ensure_store()?;
        let inputs = self.store_inputs()?;
        let params = (
            self.cfg.rate_hz,
            self.cfg.chunking(),
            self.cfg.viewport()?,
            self.cfg.coverage_grid(),
        );
        self.run_stage("features", &params, &inputs, 0, |p| {
            let chunks = p.chunks()?;
            if chunks.is_empty() {
                bail!("no trace covers a full {} s chunk", p.cfg.chunk_seconds);
            }
            let feats = extract_all(&chunks, &p.cfg.viewport()?, p.cfg.coverage_grid())?;
            let rows: Vec<FeatureRow> = chunks
                .iter()
                .zip(feats)
                .map(|(c, f)| FeatureRow {
                    key: c.key,
                    features: f,
                })
                .collect();
            log::info!("{} trace chunks", rows.len());
            Ok(vec![(FEATURES_FILE.into(), tables::features_csv(&rows).into_bytes())])
        })
    }

    /// Clusters trace chunks into behaviors, sweeping the cluster count
    /// unless one is fixed.
    pub fn cluster_viewports(&mut self) -> Result<Outcome> {
        self.features()?;
        let inputs = vec![self.path(FEATURES_FILE)];
        let seed = stage_seed(self.cfg.seed, STREAM_STAGE1);
        let params = (
            self.cfg.m_min,
            self.cfg.m_max,
            self.cfg.fixed_m,
            self.cfg.kmeans(true),
            self.cfg.outlier_z,
        );
        self.run_stage("cluster-viewports", &params, &inputs, seed, |p| {
            let rows = tables::read_features(&p.path(FEATURES_FILE))?;
            let points: Vec<Vec<f64>> = rows.iter().map(|r| r.features.to_array().to_vec()).collect();
            let keys: Vec<PointKey> = rows.iter().map(|r| r.key.into()).collect();
            let (model, sweep) = fit_stage(
                &points,
                Stage::Viewport,
                (p.cfg.m_min, p.cfg.m_max),
                p.cfg.fixed_m,
                seed,
                p,
                true,
            )?;
            let model = model.with_keys(keys);
            log::info!(
                "behavior clusters: M = {}, outliers {:.2}%",
                model.k,
                model.outlier_percentage()
            );
            let mut out: Outputs = vec![
                (STAGE1_MODEL.into(), json_bytes(&model)?),
                (STAGE1_ASSIGNMENTS.into(), tables::assignments_csv(&model).into_bytes()),
            ];
            if let Some(s) = sweep {
                out.push((STAGE1_SWEEP.into(), tables::sweep_csv(&s).into_bytes()));
            }
            Ok(out)
        })
    }

    fn require(&self, rel: &str, hint: &str) -> Result<()> {
        if !self.path(rel).exists() {
            bail!("{} not found; run `vpcat {hint}` first", self.path(rel).display());
        }
        Ok(())
    }

    /// Categorizes video chunks by their behavior mixtures.
    pub fn categorize(&mut self) -> Result<Outcome> {
        self.require(STAGE1_MODEL, "cluster-viewports")?;
        self.cluster_viewports()?;
        let inputs = vec![self.path(STAGE1_MODEL)];
        let seed = stage_seed(self.cfg.seed, STREAM_STAGE2);
        let params = (
            self.cfg.q_min,
            self.cfg.q_max,
            self.cfg.fixed_q,
            self.cfg.kmeans(false),
            self.cfg.outlier_z,
        );
        self.run_stage("categorize", &params, &inputs, seed, |p| {
            let stage1 = read_model(&p.path(STAGE1_MODEL))?;
            let (table, users) = f2_from_model(&stage1)?;
            let rows: Vec<Vec<f64>> = table.iter().map(|r| r.fractions.clone()).collect();
            let keys: Vec<PointKey> = table
                .iter()
                .map(|r| PointKey {
                    video_id: r.video_id,
                    chunk_id: r.chunk_id,
                    user_id: None,
                })
                .collect();
            let (model, sweep) = fit_stage(
                &rows,
                Stage::Video,
                (p.cfg.q_min, p.cfg.q_max),
                p.cfg.fixed_q,
                seed,
                p,
                false,
            )?;
            let model = model.with_keys(keys);
            log::info!("{} video chunks in Q = {} categories", table.len(), model.k);
            let mut out: Outputs = vec![
                (F2_FILE.into(), tables::f2_csv(&table, &users).into_bytes()),
                (STAGE2_MODEL.into(), json_bytes(&model)?),
                (CATEGORIES_FILE.into(), tables::assignments_csv(&model).into_bytes()),
            ];
            if let Some(s) = sweep {
                out.push((STAGE2_SWEEP.into(), tables::sweep_csv(&s).into_bytes()));
            }
            Ok(out)
        })
    }

    /// Writes the requested reports.
    pub fn evaluate(&mut self, which: &[Report]) -> Result<Vec<(Report, Outcome)>> {
        let mut done = Vec::new();
        for &r in which {
            let outcome = self
                .evaluate_one(r)
                .with_context(|| format!("{} report", r.name()))?;
            done.push((r, outcome));
        }
        Ok(done)
    }

    fn evaluate_one(&mut self, report: Report) -> Result<Outcome> {
        self.require(STAGE1_MODEL, "cluster-viewports")?;
        let needs_stage2 = matches!(report, Report::Stage2 | Report::StaticDynamic);
        if needs_stage2 {
            self.require(STAGE2_MODEL, "categorize")?;
            self.categorize()?;
        } else {
            self.cluster_viewports()?;
        }
        let mut inputs = vec![self.path(STAGE1_MODEL)];
        if needs_stage2 || report == Report::Behaviors {
            inputs.push(self.path(F2_FILE));
        }
        if needs_stage2 {
            inputs.push(self.path(STAGE2_MODEL));
        }
        if matches!(report, Report::Stage1 | Report::Baselines) {
            inputs.extend(self.store_inputs()?);
        }
        if report == Report::StaticDynamic {
            self.require(GENRES_FILE, "unify")?;
            inputs.push(self.path(GENRES_FILE));
        }
        if report == Report::Behaviors && !self.path(F2_FILE).exists() {
            bail!("{} not found; run `vpcat categorize` first", self.path(F2_FILE).display());
        }
        let seed = stage_seed(self.cfg.seed, STREAM_REPORTS);
        let params = (
            report,
            self.cfg.sample_cap,
            self.cfg.min_users,
            self.cfg.baselines(),
            self.cfg.viewport()?,
            self.cfg.coverage_grid(),
            self.cfg.chunking(),
        );
        let stage = format!("evaluate:{}", report.name());
        self.run_stage(&stage, &params, &inputs, seed, |p| match report {
            Report::Stage1 => p.stage1_report(seed),
            Report::Stage2 => p.stage2_report(seed),
            Report::Baselines => p.baseline_report(),
            Report::StaticDynamic => p.static_dynamic_report(seed),
            Report::Behaviors => p.behavior_report(),
        })
    }

    /// Chunks in the order of the stage-1 model's keys.
    fn chunks_for(&self, model: &ClusterModel) -> Result<Vec<TraceChunk>> {
        let mut by_key: BTreeMap<PointKey, TraceChunk> = self
            .chunks()?
            .into_iter()
            .map(|c| (PointKey::from(c.key), c))
            .collect();
        model
            .keys
            .iter()
            .map(|k| {
                by_key
                    .remove(k)
                    .ok_or_else(|| anyhow!("chunk {k:?} of the model is missing from the store; rerun the pipeline"))
            })
            .collect()
    }

    fn stage1_report(&self, seed: u64) -> Result<Outputs> {
        let model = read_model(&self.path(STAGE1_MODEL))?;
        let chunks = self.chunks_for(&model)?;
        let vp = self.cfg.viewport()?;
        let grid = self.cfg.coverage_grid();
        let excluded = cluster_similarity_report(&model, &chunks, &vp, grid, &self.cfg.report(seed, true))?;
        let included = cluster_similarity_report(&model, &chunks, &vp, grid, &self.cfg.report(seed, false))?;
        let mut csv = String::from(
            "outliers,label,size,within_vpo,cross_vpo,within_speed_diff,cross_speed_diff,within_explore_diff,cross_explore_diff\n",
        );
        for (variant, r) in [("excluded", &excluded), ("included", &included)] {
            write_cluster_rows(&mut csv, variant, r);
        }
        #[derive(Serialize)]
        struct Stage1<'a> {
            clusters: usize,
            outlier_pct: f64,
            outliers_excluded: &'a ClusterReport,
            outliers_included: &'a ClusterReport,
        }
        let summary = Stage1 {
            clusters: model.k,
            outlier_pct: model.outlier_percentage(),
            outliers_excluded: &excluded,
            outliers_included: &included,
        };
        Ok(vec![
            ("reports/stage1_clusters.csv".into(), csv.into_bytes()),
            ("reports/stage1_summary.json".into(), json_bytes(&summary)?),
        ])
    }

    fn stage2_report(&self, seed: u64) -> Result<Outputs> {
        let model = read_model(&self.path(STAGE2_MODEL))?;
        let (table, _) = tables::read_f2(&self.path(F2_FILE))?;
        let excluded = category_report(&model, &table, &self.cfg.report(seed, true))?;
        let included = category_report(&model, &table, &self.cfg.report(seed, false))?;
        let mut csv = String::from("outliers,label,size,within_distance,cross_distance\n");
        for (variant, r) in [("excluded", &excluded), ("included", &included)] {
            write_category_rows(&mut csv, variant, r);
        }
        let per_video = clusters_per_video(&table, &model.labels)?;
        let mut hist = String::from("categories,videos\n");
        for (c, n) in &per_video.histogram {
            let _ = writeln!(hist, "{c},{n}");
        }
        #[derive(Serialize)]
        struct Stage2<'a> {
            categories: usize,
            video_chunks: usize,
            outliers_excluded: &'a CategoryReport,
            outliers_included: &'a CategoryReport,
            categories_per_video: &'a BTreeMap<u32, usize>,
        }
        let summary = Stage2 {
            categories: model.k,
            video_chunks: table.len(),
            outliers_excluded: &excluded,
            outliers_included: &included,
            categories_per_video: &per_video.per_video,
        };
        Ok(vec![
            ("reports/stage2_categories.csv".into(), csv.into_bytes()),
            ("reports/stage2_categories_per_video.csv".into(), hist.into_bytes()),
            ("reports/stage2_summary.json".into(), json_bytes(&summary)?),
        ])
    }

    fn baseline_report(&self) -> Result<Outputs> {
        let chunks = self.chunks()?;
        let mut groups: BTreeMap<(u32, u32), Vec<&TraceChunk>> = BTreeMap::new();
        for c in &chunks {
            groups.entry((c.key.video_id, c.key.chunk_id)).or_default().push(c);
        }
        let vp = self.cfg.viewport()?;
        let grid = self.cfg.coverage_grid();
        let params = self.cfg.baselines();
        let base = stage_seed(self.cfg.seed, STREAM_BASELINES);
        let groups: Vec<((u32, u32), Vec<&TraceChunk>)> = groups.into_iter().collect();
        let results: Vec<((u32, u32), Vec<AlgorithmScore>)> = groups
            .par_iter()
            .enumerate()
            .filter(|(_, (_, g))| g.len() >= 2)
            .map(|(i, (key, g))| {
                compare_baselines(g, &params, &vp, grid, base.wrapping_add(i as u64)).map(|s| (*key, s))
            })
            .collect::<Result<_, _>>()?;
        let mut csv = String::from("video_id,chunk_id,algorithm,clusters,noise,within_pairs,vpo,speed_diff,explore_diff\n");
        let mut sums: BTreeMap<String, [(f64, usize); 3]> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for ((v, c), scores) in &results {
            for s in scores {
                let _ = writeln!(
                    csv,
                    "{v},{c},{},{},{},{},{},{},{}",
                    s.algorithm,
                    s.clusters,
                    s.noise,
                    s.within_pairs,
                    tables::opt(s.vpo),
                    tables::opt(s.speed_diff),
                    tables::opt(s.explore_diff)
                );
                if !order.contains(&s.algorithm) {
                    order.push(s.algorithm.clone());
                }
                let e = sums.entry(s.algorithm.clone()).or_default();
                for (slot, v) in e.iter_mut().zip([s.vpo, s.speed_diff, s.explore_diff]) {
                    if let Some(v) = v {
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
            }
        }
        let mut summary = String::from("algorithm,video_chunks,mean_vpo,mean_speed_diff,mean_explore_diff\n");
        for alg in &order {
            let e = sums[alg];
            let avg = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
            let _ = writeln!(
                summary,
                "{alg},{},{},{},{}",
                e[0].1,
                tables::opt(avg(e[0])),
                tables::opt(avg(e[1])),
                tables::opt(avg(e[2]))
            );
        }
        Ok(vec![
            ("reports/baselines.csv".into(), csv.into_bytes()),
            ("reports/baselines_summary.csv".into(), summary.into_bytes()),
        ])
    }

    fn static_dynamic_report(&self, seed: u64) -> Result<Outputs> {
        let model = read_model(&self.path(STAGE2_MODEL))?;
        let (table, _) = tables::read_f2(&self.path(F2_FILE))?;
        let genres = tables::read_genres(&self.path(GENRES_FILE))?;
        let cmp = static_vs_dynamic(&table, &genres, &model, &self.cfg.report(seed, false))?;
        let mut pairs = String::from("video_a,chunk_a,video_b,chunk_b,distance,same_genre,same_category\n");
        for r in &cmp.pairs {
            let _ = writeln!(
                pairs,
                "{},{},{},{},{},{},{}",
                r.a.0,
                r.a.1,
                r.b.0,
                r.b.1,
                r.distance,
                u8::from(r.same_genre),
                u8::from(r.same_category)
            );
        }
        if let Some(x) = cmp.improvement_pct {
            log::info!("dynamic categories reduce within-group distance by {x:.2}%");
        }
        Ok(vec![
            ("reports/static_dynamic.json".into(), json_bytes(&cmp)?),
            ("reports/static_dynamic_pairs.csv".into(), pairs.into_bytes()),
        ])
    }

    fn behavior_report(&self) -> Result<Outputs> {
        let (table, users) = tables::read_f2(&self.path(F2_FILE))?;
        let counts: Vec<usize> = table
            .iter()
            .zip(&users)
            .map(|(r, &n)| count_behaviors(r, n, self.cfg.min_users))
            .collect();
        let mut csv = String::from("video_id,chunk_id,users,behaviors\n");
        for ((r, n), c) in table.iter().zip(&users).zip(&counts) {
            let _ = writeln!(csv, "{},{},{n},{c}", r.video_id, r.chunk_id);
        }
        let dist = ccdf(&counts);
        let mut ccdf_csv = String::from("behaviors,fraction_at_least\n");
        for (x, f) in &dist {
            let _ = writeln!(ccdf_csv, "{x},{f}");
        }
        let above_four = counts.iter().filter(|&&c| c > 4).count() as f64 / counts.len().max(1) as f64;
        #[derive(Serialize)]
        struct Behaviors {
            video_chunks: usize,
            min_users: usize,
            fraction_more_than_four: f64,
            check: String,
        }
        let check = format!(
            "{:.2}% of video chunks show more than 4 behaviors (reference at full scale: more than 75%): {}",
            100.0 * above_four,
            if above_four > 0.75 { "above" } else { "below" }
        );
        Ok(vec![
            ("reports/behaviors.csv".into(), csv.into_bytes()),
            ("reports/behaviors_ccdf.csv".into(), ccdf_csv.into_bytes()),
            (
                "reports/behaviors.json".into(),
                json_bytes(&Behaviors {
                    video_chunks: table.len(),
                    min_users: self.cfg.min_users,
                    fraction_more_than_four: above_four,
                    check,
                })?,
            ),
        ])
    }

    /// Renders the view density of a category or behavior cluster.
    pub fn heatmap(&mut self, selector: Selector) -> Result<Outcome> {
        self.require(STAGE1_MODEL, "cluster-viewports")?;
        let mut inputs = vec![self.path(STAGE1_MODEL)];
        if let Selector::Category(_) = selector {
            self.require(STAGE2_MODEL, "categorize")?;
            self.categorize()?;
            inputs.push(self.path(STAGE2_MODEL));
        } else {
            self.cluster_viewports()?;
        }
        inputs.extend(self.store_inputs()?);
        let stem = selector.stem();
        let params = (selector, self.cfg.heatmap_cell_deg, self.cfg.chunking());
        self.run_stage(&format!("heatmap:{stem}"), &params, &inputs, 0, |p| {
            let stage1 = read_model(&p.path(STAGE1_MODEL))?;
            let chunks = p.chunks_for(&stage1)?;
            let selected: Vec<&TraceChunk> = match selector {
                Selector::Cluster(m) => {
                    if m >= stage1.k {
                        bail!("cluster {m} does not exist; the model has {} clusters", stage1.k);
                    }
                    chunks.iter().zip(&stage1.labels).filter(|(_, &l)| l == m).map(|(c, _)| c).collect()
                }
                Selector::Category(q) => {
                    let stage2 = read_model(&p.path(STAGE2_MODEL))?;
                    if q >= stage2.k {
                        bail!("category {q} does not exist; the model has {} categories", stage2.k);
                    }
                    let members: std::collections::BTreeSet<(u32, u32)> = stage2
                        .keys
                        .iter()
                        .zip(&stage2.labels)
                        .filter(|(_, &l)| l == q)
                        .map(|(k, _)| (k.video_id, k.chunk_id))
                        .collect();
                    chunks
                        .iter()
                        .filter(|c| members.contains(&(c.key.video_id, c.key.chunk_id)))
                        .collect()
                }
            };
            if selected.is_empty() {
                bail!("{stem} selects no trace chunks");
            }
            let map = Heatmap::from_samples(p.cfg.heatmap_cell_deg, selected.iter().flat_map(|c| &c.samples));
            Ok(vec![
                (format!("heatmaps/{stem}.grid.csv"), map.grid_csv().into_bytes()),
                (format!("heatmaps/{stem}.png"), map.png(2)?),
            ])
        })
    }
}

/// Fits one stage: a fixed count when given, otherwise a Davies-Bouldin
/// sweep over `range` clipped to what the point count allows.
fn fit_stage(
    points: &[Vec<f64>],
    stage: Stage,
    range: (usize, usize),
    fixed: Option<usize>,
    seed: u64,
    p: &Pipeline,
    standardize: bool,
) -> Result<(ClusterModel, Option<DbSweepResult>)> {
    let opts = p.cfg.kmeans(standardize);
    let n = points.len();
    let (k, sweep) = match fixed {
        Some(k) => (k, None),
        None if stage == Stage::Video && n <= range.0 => {
            log::warn!("only {n} video chunks; using a single category");
            return Ok((single_cluster(points, stage, seed), None));
        }
        None => {
            if n < range.0 {
                bail!("{n} points is fewer than the smallest cluster count {}", range.0);
            }
            let s = db_sweep(points, range.0..=range.1, seed, &opts, p.cfg.outlier_z)?;
            (s.chosen, Some(s))
        }
    };
    let mut model = kmeans_fit(points, k, seed, stage, &opts)?;
    flag_outliers(&mut model, points, p.cfg.outlier_z)?;
    Ok((model, sweep))
}

/// Model placing every point in one cluster at the mean.
fn single_cluster(points: &[Vec<f64>], stage: Stage, seed: u64) -> ClusterModel {
    let dim = points.first().map_or(0, Vec::len);
    let n = points.len().max(1) as f64;
    let centroid: Vec<f64> = (0..dim).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    ClusterModel {
        stage,
        k: 1,
        seed,
        feature_means: vec![0.0; dim],
        feature_stds: vec![1.0; dim],
        centroids: vec![centroid],
        labels: vec![0; points.len()],
        outlier_flags: vec![false; points.len()],
        keys: Vec::new(),
        inertia: 0.0,
        iterations: 0,
        inertia_history: Vec::new(),
    }
}

/// Population vectors of every video chunk from a behavior model, with the
/// number of users behind each. Outliers keep their cluster.
pub fn f2_from_model(model: &ClusterModel) -> Result<(Vec<VideoChunkFeatures>, Vec<usize>)> {
    let keys = model
        .keys
        .iter()
        .map(|k| {
            Ok(vpcat_core::ChunkKey {
                video_id: k.video_id,
                chunk_id: k.chunk_id,
                user_id: k.user_id.ok_or_else(|| anyhow!("behavior model keys must carry user ids"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = build_f2_table(&keys, &model.labels, model.k)?;
    let mut users: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for k in &keys {
        *users.entry((k.video_id, k.chunk_id)).or_insert(0) += 1;
    }
    let counts = table.iter().map(|r| users[&(r.video_id, r.chunk_id)]).collect();
    Ok((table, counts))
}

fn write_cluster_rows(out: &mut String, variant: &str, r: &ClusterReport) {
    let o = tables::opt;
    let _ = writeln!(
        out,
        "{variant},all,{},{},{},{},{},{},{}",
        r.points,
        o(r.vpo.within),
        o(r.vpo.cross),
        o(r.speed_diff.within),
        o(r.speed_diff.cross),
        o(r.explore_diff.within),
        o(r.explore_diff.cross)
    );
    for c in &r.clusters {
        let _ = writeln!(
            out,
            "{variant},{},{},{},{},{},{},{},{}",
            c.label,
            c.size,
            o(c.vpo.within),
            o(c.vpo.cross),
            o(c.speed_diff.within),
            o(c.speed_diff.cross),
            o(c.explore_diff.within),
            o(c.explore_diff.cross)
        );
    }
}

fn write_category_rows(out: &mut String, variant: &str, r: &CategoryReport) {
    let o = tables::opt;
    let _ = writeln!(
        out,
        "{variant},all,{},{},{}",
        r.points,
        o(r.distance.within),
        o(r.distance.cross)
    );
    for c in &r.categories {
        let _ = writeln!(
            out,
            "{variant},{},{},{},{}",
            c.label,
            c.size,
            o(c.distance.within),
            o(c.distance.cross)
        );
    }
}
