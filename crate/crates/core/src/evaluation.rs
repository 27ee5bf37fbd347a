//! Similarity metrics between trace chunks and the within/cross reports
//! built on them.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{
    baseline_dbscan, baseline_spherical, baseline_trajectory, kmeans_fit, ClusterError,
    ClusterModel, KMeansOptions, Stage,
};
use crate::features::{extract_f1, FeatureError, TraceChunk, VideoChunkFeatures};
use crate::geometry::{
    angular_speed, sphere_coverage, trace_vpo, CoverageGrid, GeometryError, ViewportSpec,
};
use crate::stats;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{labels} labels for {items} items")]
    LabelCount { labels: usize, items: usize },
    #[error("nothing to evaluate")]
    Empty,
}

/// Similarity of two trace chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseMetrics {
    /// Mean viewport overlap of corresponding samples, in `[0, 1]`.
    pub vpo: f64,
    /// Difference of mean unsigned angular speeds, rad/s.
    pub speed_diff: f64,
    /// Difference of explored sphere percentages.
    pub explore_diff: f64,
}

/// Per-chunk quantities reused across many pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct ChunkSummary {
    speed: f64,
    coverage: f64,
}

fn summarize(
    chunk: &TraceChunk,
    vp: &ViewportSpec,
    grid: CoverageGrid,
) -> Result<ChunkSummary, EvalError> {
    Ok(ChunkSummary {
        speed: mean_angular_speed(chunk)?,
        coverage: sphere_coverage(&chunk.samples, vp, grid)?,
    })
}

/// Mean unsigned angular speed of a chunk in rad/s.
pub fn mean_angular_speed(chunk: &TraceChunk) -> Result<f64, EvalError> {
    Ok(stats::mean(&angular_speed(&chunk.samples, chunk.rate_hz)?))
}

fn metrics_from(
    a: &TraceChunk,
    b: &TraceChunk,
    sa: ChunkSummary,
    sb: ChunkSummary,
    vp: &ViewportSpec,
) -> Result<PairwiseMetrics, EvalError> {
    Ok(PairwiseMetrics {
        vpo: trace_vpo(&a.samples, &b.samples, vp)?,
        speed_diff: (sa.speed - sb.speed).abs(),
        explore_diff: (sa.coverage - sb.coverage).abs(),
    })
}

/// The three similarity metrics of two equal-length chunks.
pub fn pairwise_metrics(
    a: &TraceChunk,
    b: &TraceChunk,
    vp: &ViewportSpec,
    grid: CoverageGrid,
) -> Result<PairwiseMetrics, EvalError> {
    if a.samples.len() != b.samples.len() {
        return Err(GeometryError::LengthMismatch {
            left: a.samples.len(),
            right: b.samples.len(),
        }
        .into());
    }
    metrics_from(a, b, summarize(a, vp, grid)?, summarize(b, vp, grid)?, vp)
}

/// Euclidean distance between two population vectors.
pub fn category_distance(u: &VideoChunkFeatures, v: &VideoChunkFeatures) -> Result<f64, EvalError> {
    if u.fractions.len() != v.fractions.len() {
        return Err(EvalError::DimensionMismatch {
            left: u.fractions.len(),
            right: v.fractions.len(),
        });
    }
    Ok(u.fractions
        .iter()
        .zip(&v.fractions)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Index pairs `(i, j)` with `i < j` over `n` items: all of them when they
/// number at most `cap`, otherwise `cap` pairs drawn uniformly with
/// replacement from a generator seeded with `seed`.
pub fn pair_indices(n: usize, cap: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n * n.saturating_sub(1) / 2;
    if total <= cap {
        let mut pairs = Vec::with_capacity(total);
        for i in 0..n {
            for j in (i + 1)..n {
                pairs.push((i, j));
            }
        }
        return pairs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cap)
        .map(|_| {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            (i.min(j), i.max(j))
        })
        .collect()
}

/// Means over within-group and cross-group pairs. `None` when the pair
/// set is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub within: Option<f64>,
    pub cross: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accumulator {
    within: f64,
    within_n: usize,
    cross: f64,
    cross_n: usize,
}

impl Accumulator {
    fn add(&mut self, same: bool, value: f64) {
        if same {
            self.within += value;
            self.within_n += 1;
        } else {
            self.cross += value;
            self.cross_n += 1;
        }
    }

    fn summary(&self) -> MetricSummary {
        let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        MetricSummary {
            within: avg(self.within, self.within_n),
            cross: avg(self.cross, self.cross_n),
        }
    }
}

/// Within/cross summary of the metrics for one cluster: within pairs have
/// both members in the cluster, cross pairs exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub label: usize,
    pub size: usize,
    pub vpo: MetricSummary,
    pub speed_diff: MetricSummary,
    pub explore_diff: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub outliers_excluded: bool,
    pub points: usize,
    pub within_pairs: usize,
    pub cross_pairs: usize,
    /// Whether pairs were subsampled rather than enumerated.
    pub sampled: bool,
    pub vpo: MetricSummary,
    pub speed_diff: MetricSummary,
    pub explore_diff: MetricSummary,
    pub clusters: Vec<ClusterRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub sample_cap: usize,
    pub seed: u64,
    pub exclude_outliers: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            sample_cap: 1_000_000,
            seed: 0,
            exclude_outliers: true,
        }
    }
}

/// Indices kept for a report, honoring the outlier flags when asked to.
fn kept_indices(model: &ClusterModel, exclude_outliers: bool) -> Vec<usize> {
    (0..model.labels.len())
        .filter(|&i| !(exclude_outliers && model.outlier_flags.get(i).copied().unwrap_or(false)))
        .collect()
}

/// Within/cross means of the pairwise metrics for a behavior clustering.
///
/// `chunks` must be parallel to `model.labels`. Pair metrics are computed
/// in parallel and reduced in pair order, so the result depends only on
/// the inputs and `opts.seed`.
pub fn cluster_similarity_report(
    model: &ClusterModel,
    chunks: &[TraceChunk],
    vp: &ViewportSpec,
    grid: CoverageGrid,
    opts: &ReportOptions,
) -> Result<ClusterReport, EvalError> {
    if chunks.len() != model.labels.len() {
        return Err(EvalError::LabelCount {
            labels: model.labels.len(),
            items: chunks.len(),
        });
    }
    let kept = kept_indices(model, opts.exclude_outliers);
    let summaries = kept
        .par_iter()
        .map(|&i| summarize(&chunks[i], vp, grid))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs = pair_indices(kept.len(), opts.sample_cap, opts.seed);
    let values = pairs
        .par_iter()
        .map(|&(a, b)| {
            let (ia, ib) = (kept[a], kept[b]);
            metrics_from(&chunks[ia], &chunks[ib], summaries[a], summaries[b], vp)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let k = model.k;
    let mut agg = [Accumulator::default(); 3];
    let mut per = vec![[Accumulator::default(); 3]; k];
    for (&(a, b), m) in pairs.iter().zip(&values) {
        let (la, lb) = (model.labels[kept[a]], model.labels[kept[b]]);
        let same = la == lb;
        let vals = [m.vpo, m.speed_diff, m.explore_diff];
        for (acc, v) in agg.iter_mut().zip(vals) {
            acc.add(same, v);
        }
        for (acc, v) in per[la].iter_mut().zip(vals) {
            acc.add(same, v);
        }
        if !same {
            for (acc, v) in per[lb].iter_mut().zip(vals) {
                acc.add(false, v);
            }
        }
    }
    let mut sizes = vec![0; k];
    for &i in &kept {
        sizes[model.labels[i]] += 1;
    }
    let clusters = (0..k)
        .map(|c| ClusterRow {
            label: c,
            size: sizes[c],
            vpo: per[c][0].summary(),
            speed_diff: per[c][1].summary(),
            explore_diff: per[c][2].summary(),
        })
        .collect();
    Ok(ClusterReport {
        outliers_excluded: opts.exclude_outliers,
        points: kept.len(),
        within_pairs: agg[0].within_n,
        cross_pairs: agg[0].cross_n,
        sampled: pairs.len() < kept.len() * kept.len().saturating_sub(1) / 2,
        vpo: agg[0].summary(),
        speed_diff: agg[1].summary(),
        explore_diff: agg[2].summary(),
        clusters,
    })
}

/// Within/cross population-vector distance for one category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub label: usize,
    pub size: usize,
    pub distance: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub points: usize,
    pub within_pairs: usize,
    pub cross_pairs: usize,
    pub distance: MetricSummary,
    pub categories: Vec<CategoryRow>,
}

fn grouping_report(
    table: &[&VideoChunkFeatures],
    labels: &[usize],
    groups: usize,
    pairs: &[(usize, usize)],
    distances: &[f64],
) -> CategoryReport {
    let mut agg = Accumulator::default();
    let mut per = vec![Accumulator::default(); groups];
    for (&(a, b), &d) in pairs.iter().zip(distances) {
        let same = labels[a] == labels[b];
        agg.add(same, d);
        per[labels[a]].add(same, d);
        if !same {
            per[labels[b]].add(false, d);
        }
    }
    let mut sizes = vec![0; groups];
    for &l in labels {
        sizes[l] += 1;
    }
    CategoryReport {
        points: table.len(),
        within_pairs: agg.within_n,
        cross_pairs: agg.cross_n,
        distance: agg.summary(),
        categories: (0..groups)
            .map(|c| CategoryRow {
                label: c,
                size: sizes[c],
                distance: per[c].summary(),
            })
            .collect(),
    }
}

fn pair_distances(
    table: &[&VideoChunkFeatures],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>, EvalError> {
    pairs
        .par_iter()
        .map(|&(a, b)| category_distance(table[a], table[b]))
        .collect()
}

/// Within/cross category distances of a video-chunk categorization.
/// `model.labels` must be parallel to `f2_table`.
pub fn category_report(
    model: &ClusterModel,
    f2_table: &[VideoChunkFeatures],
    opts: &ReportOptions,
) -> Result<CategoryReport, EvalError> {
    if f2_table.len() != model.labels.len() {
        return Err(EvalError::LabelCount {
            labels: model.labels.len(),
            items: f2_table.len(),
        });
    }
    let kept = kept_indices(model, opts.exclude_outliers);
    let table: Vec<&VideoChunkFeatures> = kept.iter().map(|&i| &f2_table[i]).collect();
    let labels: Vec<usize> = kept.iter().map(|&i| model.labels[i]).collect();
    let pairs = pair_indices(table.len(), opts.sample_cap, opts.seed);
    let distances = pair_distances(&table, &pairs)?;
    Ok(grouping_report(&table, &labels, model.k, &pairs, &distances))
}

/// One compared pair of video chunks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub a: (u32, u32),
    pub b: (u32, u32),
    pub distance: f64,
    pub same_genre: bool,
    pub same_category: bool,
}

/// Genre grouping against dynamic categories on the same pair set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticDynamicComparison {
    pub genres: Vec<String>,
    pub static_report: CategoryReport,
    pub dynamic_report: CategoryReport,
    /// Relative reduction of the mean within-group distance, in percent.
    pub improvement_pct: Option<f64>,
    pub excluded_videos: Vec<u32>,
    #[serde(skip)]
    pub pairs: Vec<PairRecord>,
}

/// Compares grouping video chunks by the genre of their video with the
/// dynamic categories of `model` (parallel to `f2_table`).
///
/// Improvement is `(within_static - within_dynamic) / within_static * 100`.
/// Videos without a genre are dropped with a warning.
pub fn static_vs_dynamic(
    f2_table: &[VideoChunkFeatures],
    genres: &BTreeMap<u32, String>,
    model: &ClusterModel,
    opts: &ReportOptions,
) -> Result<StaticDynamicComparison, EvalError> {
    if f2_table.len() != model.labels.len() {
        return Err(EvalError::LabelCount {
            labels: model.labels.len(),
            items: f2_table.len(),
        });
    }
    let mut excluded = BTreeSet::new();
    let mut kept = Vec::new();
    for (i, row) in f2_table.iter().enumerate() {
        if genres.contains_key(&row.video_id) {
            kept.push(i);
        } else {
            excluded.insert(row.video_id);
        }
    }
    for v in &excluded {
        log::warn!("video {v} has no genre label; excluded from the static comparison");
    }
    if kept.is_empty() {
        return Err(EvalError::Empty);
    }
    let genre_names: Vec<String> = kept
        .iter()
        .map(|&i| genres[&f2_table[i].video_id].clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let genre_index: BTreeMap<&str, usize> = genre_names
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();

    let table: Vec<&VideoChunkFeatures> = kept.iter().map(|&i| &f2_table[i]).collect();
    let dynamic: Vec<usize> = kept.iter().map(|&i| model.labels[i]).collect();
    let fixed: Vec<usize> = table
        .iter()
        .map(|r| genre_index[genres[&r.video_id].as_str()])
        .collect();
    let pairs = pair_indices(table.len(), opts.sample_cap, opts.seed);
    let distances = pair_distances(&table, &pairs)?;

    let static_report = grouping_report(&table, &fixed, genre_names.len(), &pairs, &distances);
    let dynamic_report = grouping_report(&table, &dynamic, model.k, &pairs, &distances);
    let improvement_pct = match (static_report.distance.within, dynamic_report.distance.within) {
        (Some(s), Some(d)) if s > 0.0 => Some((s - d) / s * 100.0),
        (Some(s), Some(d)) if s == 0.0 && d == 0.0 => Some(0.0),
        _ => None,
    };
    let records = pairs
        .iter()
        .zip(&distances)
        .map(|(&(a, b), &d)| PairRecord {
            a: (table[a].video_id, table[a].chunk_id),
            b: (table[b].video_id, table[b].chunk_id),
            distance: d,
            same_genre: fixed[a] == fixed[b],
            same_category: dynamic[a] == dynamic[b],
        })
        .collect();
    Ok(StaticDynamicComparison {
        genres: genre_names,
        static_report,
        dynamic_report,
        improvement_pct,
        excluded_videos: excluded.into_iter().collect(),
        pairs: records,
    })
}

/// Number of distinct categories per video and the distribution of that
/// number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersPerVideo {
    pub per_video: BTreeMap<u32, usize>,
    /// Distinct-category count to number of videos.
    pub histogram: BTreeMap<usize, usize>,
}

/// Counts the distinct categories among the chunks of each video.
/// `table` and `labels` are parallel.
pub fn clusters_per_video(
    table: &[VideoChunkFeatures],
    labels: &[usize],
) -> Result<ClustersPerVideo, EvalError> {
    if table.len() != labels.len() {
        return Err(EvalError::LabelCount {
            labels: labels.len(),
            items: table.len(),
        });
    }
    let mut sets: BTreeMap<u32, BTreeSet<usize>> = BTreeMap::new();
    for (row, &l) in table.iter().zip(labels) {
        sets.entry(row.video_id).or_default().insert(l);
    }
    let per_video: BTreeMap<u32, usize> = sets.into_iter().map(|(v, s)| (v, s.len())).collect();
    let mut histogram = BTreeMap::new();
    for &c in per_video.values() {
        *histogram.entry(c).or_insert(0) += 1;
    }
    Ok(ClustersPerVideo {
        per_video,
        histogram,
    })
}

/// Complementary distribution `P(X >= x)` for `x = 0..=max(X)`.
pub fn ccdf(values: &[usize]) -> Vec<(usize, f64)> {
    let max = values.iter().copied().max().unwrap_or(0);
    let n = values.len() as f64;
    (0..=max)
        .map(|x| (x, values.iter().filter(|&&v| v >= x).count() as f64 / n))
        .collect()
}

fn choose2(n: usize) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index of two labelings of the same items. Two trivial
/// partitions that agree score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut rows: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cols: BTreeMap<usize, usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(a.len());
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Parameters of the spatial baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Edge threshold of the clique baseline, radians.
    pub spherical_theta: f64,
    /// Affinity scale of the spectral baseline, radians.
    pub spectral_sigma: f64,
    pub spectral_k_max: usize,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            spherical_theta: 0.35,
            spectral_sigma: 0.2,
            spectral_k_max: 8,
            dbscan_eps: 0.2,
            dbscan_min_pts: 2,
        }
    }
}

/// Within-cluster metric means of one algorithm on one set of chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmScore {
    pub algorithm: String,
    pub clusters: usize,
    pub noise: usize,
    pub within_pairs: usize,
    pub vpo: Option<f64>,
    pub speed_diff: Option<f64>,
    pub explore_diff: Option<f64>,
}

fn score_labels(
    name: &str,
    labels: &[Option<usize>],
    chunks: &[&TraceChunk],
    summaries: &[ChunkSummary],
    vp: &ViewportSpec,
) -> Result<AlgorithmScore, EvalError> {
    let mut acc = [Accumulator::default(); 3];
    for i in 0..chunks.len() {
        for j in (i + 1)..chunks.len() {
            if let (Some(a), Some(b)) = (labels[i], labels[j]) {
                if a == b {
                    let m = metrics_from(chunks[i], chunks[j], summaries[i], summaries[j], vp)?;
                    for (x, v) in acc.iter_mut().zip([m.vpo, m.speed_diff, m.explore_diff]) {
                        x.add(true, v);
                    }
                }
            }
        }
    }
    Ok(AlgorithmScore {
        algorithm: name.to_string(),
        clusters: labels.iter().flatten().collect::<BTreeSet<_>>().len(),
        noise: labels.iter().filter(|l| l.is_none()).count(),
        within_pairs: acc[0].within_n,
        vpo: acc[0].summary().within,
        speed_diff: acc[1].summary().within,
        explore_diff: acc[2].summary().within,
    })
}

/// Runs the proposed clustering and the three spatial baselines on the
/// chunks of one video chunk and scores each by its within-cluster
/// metrics. The proposed method runs K-Means on behavior vectors with the
/// cluster count found by the clique baseline.
pub fn compare_baselines(
    chunks: &[&TraceChunk],
    params: &BaselineParams,
    vp: &ViewportSpec,
    grid: CoverageGrid,
    seed: u64,
) -> Result<Vec<AlgorithmScore>, EvalError> {
    if chunks.is_empty() {
        return Err(EvalError::Empty);
    }
    let summaries = chunks
        .iter()
        .map(|c| summarize(c, vp, grid))
        .collect::<Result<Vec<_>, _>>()?;

    let spherical = baseline_spherical(chunks, params.spherical_theta)?;
    let k = spherical.iter().copied().max().map_or(1, |m| m + 1);
    let proposed: Vec<usize> = if k < 2 || k >= chunks.len() {
        if k < 2 {
            vec![0; chunks.len()]
        } else {
            (0..chunks.len()).collect()
        }
    } else {
        let features = chunks
            .iter()
            .map(|c| extract_f1(c, vp, grid).map(|f| f.to_array().to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        kmeans_fit(&features, k, seed, Stage::Viewport, &KMeansOptions::default())?.labels
    };
    let spectral = baseline_trajectory(chunks, params.spectral_k_max, params.spectral_sigma, seed)?;
    let dbscan: Vec<Option<usize>> = baseline_dbscan(chunks, params.dbscan_eps, params.dbscan_min_pts)?
        .into_iter()
        .map(|l| usize::try_from(l).ok())
        .collect();

    let wrap = |v: &[usize]| v.iter().map(|&l| Some(l)).collect::<Vec<_>>();
    Ok(vec![
        score_labels("proposed", &wrap(&proposed), chunks, &summaries, vp)?,
        score_labels("spherical", &wrap(&spherical), chunks, &summaries, vp)?,
        score_labels("spectral", &wrap(&spectral), chunks, &summaries, vp)?,
        score_labels("dbscan", &dbscan, chunks, &summaries, vp)?,
    ])
}
