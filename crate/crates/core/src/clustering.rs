//! K-Means clustering with Davies-Bouldin model selection, outlier flagging,
//! and the spatial baselines used for comparison.
//!
//! The same [`ClusterModel`] serves both stages: behavior clusters of trace
//! chunks (`Stage::Viewport`) and categories of video chunks
//! (`Stage::Video`). Features are z-scored before clustering unless
//! [`KMeansOptions::standardize`] is off; centroids live in that space.

use std::ops::RangeInclusive;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ChunkKey, TraceChunk};
use crate::geometry::{geodesic, unit_geodesic, unwrap_yaw, wrap_angle, SphericalPoint};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least {k} points for {k} clusters, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("cluster count must be at least {min}, got {k}")]
    InvalidK { k: usize, min: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("chunks {0} and {1} have different sample counts")]
    ChunkLengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Behavior clusters of trace chunks.
    Viewport,
    /// Categories of video chunks.
    Video,
}

/// Key of a clustered point: a trace chunk `(i, k, j)` or a video chunk
/// `(i, k)` when `user_id` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointKey {
    pub video_id: u32,
    pub chunk_id: u32,
    pub user_id: Option<u32>,
}

impl From<ChunkKey> for PointKey {
    fn from(k: ChunkKey) -> Self {
        PointKey {
            video_id: k.video_id,
            chunk_id: k.chunk_id,
            user_id: Some(k.user_id),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansOptions {
    pub max_iter: usize,
    /// Lloyd iterations stop once no centroid moves more than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub n_init: usize,
    pub standardize: bool,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            max_iter: 300,
            tol: 1e-6,
            n_init: 8,
            standardize: true,
        }
    }
}

/// Fitted clustering with everything needed to label new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub stage: Stage,
    pub k: usize,
    pub seed: u64,
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// Centroids in the standardized space.
    pub centroids: Vec<Vec<f64>>,
    /// Label of every training point, in input order.
    pub labels: Vec<usize>,
    pub outlier_flags: Vec<bool>,
    /// Optional keys parallel to `labels`.
    #[serde(default)]
    pub keys: Vec<PointKey>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    #[serde(skip)]
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.feature_means.len()
    }

    pub fn standardize(&self, point: &[f64]) -> Result<Vec<f64>, ClusterError> {
        if point.len() != self.dim() {
            return Err(ClusterError::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(point
            .iter()
            .zip(self.feature_means.iter().zip(&self.feature_stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn with_keys(mut self, keys: Vec<PointKey>) -> Self {
        self.keys = keys;
        self
    }

    pub fn outlier_percentage(&self) -> f64 {
        if self.outlier_flags.is_empty() {
            return 0.0;
        }
        100.0 * self.outlier_flags.iter().filter(|&&f| f).count() as f64
            / self.outlier_flags.len() as f64
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Nearest centroid of a raw (unstandardized) point.
pub fn assign(model: &ClusterModel, point: &[f64]) -> Result<usize, ClusterError> {
    let z = model.standardize(point)?;
    Ok(nearest(&z, &model.centroids).0)
}

fn validate(points: &[Vec<f64>]) -> Result<usize, ClusterError> {
    let first = points.first().ok_or(ClusterError::Empty)?;
    let dim = first.len();
    for (row, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(ClusterError::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if let Some(col) = p.iter().position(|v| !v.is_finite()) {
            return Err(ClusterError::NonFinite { row, col });
        }
    }
    Ok(dim)
}

/// Column means and population standard deviations. Constant columns get
/// a standard deviation of 1.
pub fn standardization(points: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let dim = points.first().map_or(0, Vec::len);
    let mut means = Vec::with_capacity(dim);
    let mut stds = Vec::with_capacity(dim);
    for col in 0..dim {
        let column: Vec<f64> = points.iter().map(|p| p[col]).collect();
        let m = stats::mean(&column);
        let s = stats::std_dev(&column);
        means.push(m);
        if s > 1e-12 * (1.0 + m.abs()) && s.is_finite() {
            stds.push(s);
        } else {
            log::warn!("feature column {col} is constant; using unit scale");
            stds.push(1.0);
        }
    }
    (means, stds)
}

fn apply_standardization(points: &[Vec<f64>], means: &[f64], stds: &[f64]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            p.iter()
                .zip(means.iter().zip(stds))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        })
        .collect()
}

/// Generator for the fit of `k` clusters under `seed`; the sweep and a
/// direct fit of the same `k` draw identical streams.
fn rng_for(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

/// Greedy k-means++ seeding: each new center is the best of
/// `2 + ln k` candidates drawn proportionally to squared distance.
fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..n);
    let mut centers = vec![points[first].clone()];
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centers.len() < k {
        let total: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let r = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut pick = n - 1;
                for (i, d) in closest.iter().enumerate() {
                    acc += d;
                    if acc > r {
                        pick = i;
                        break;
                    }
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let updated: Vec<f64> = points
                .iter()
                .zip(&closest)
                .map(|(p, &d)| d.min(sq_dist(p, &points[cand])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, cand, updated));
            }
        }
        let (_, cand, updated) = best.expect("at least one trial");
        centers.push(points[cand].clone());
        closest = updated;
    }
    centers
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    iterations: usize,
    history: Vec<f64>,
}

fn assign_all(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    points.iter().map(|p| nearest(p, centroids)).unzip()
}

fn lloyd(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, opts: &KMeansOptions) -> LloydRun {
    let dim = points[0].len();
    let mut centroids = kmeans_pp(points, k, rng);
    let mut history = Vec::new();
    let mut iterations = 0;
    let (mut labels, mut dists) = assign_all(points, &centroids);
    history.push(dists.iter().sum());
    while iterations < opts.max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut updated: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centroids)
            .map(|((s, &c), old)| {
                if c == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / c as f64).collect()
                }
            })
            .collect();
        // empty clusters restart at the points farthest from their centroid
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = points
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &l))| (sq_dist(p, &updated[l]), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (slot, &c) in empty.iter().enumerate() {
                let idx = far[slot.min(far.len() - 1)].1;
                updated[c] = points[idx].clone();
            }
        }
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        (labels, dists) = assign_all(points, &centroids);
        history.push(dists.iter().sum());
        if shift < opts.tol {
            break;
        }
    }
    LloydRun {
        centroids,
        labels,
        inertia: dists.iter().sum(),
        iterations,
        history,
    }
}

fn best_of_restarts(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    opts: &KMeansOptions,
) -> LloydRun {
    let mut rng = rng_for(seed, k);
    let mut best: Option<LloydRun> = None;
    for _ in 0..opts.n_init.max(1) {
        let run = lloyd(points, k, &mut rng, opts);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("n_init >= 1")
}

/// Runs K-Means on `points` (one row per point).
///
/// Points are z-scored with stored statistics, seeded with greedy
/// k-means++ from a generator derived from `(seed, k)`, then refined by
/// Lloyd iterations. The result is bit-reproducible for a fixed point
/// order, seed and `k`.
pub fn kmeans_fit(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    stage: Stage,
    opts: &KMeansOptions,
) -> Result<ClusterModel, ClusterError> {
    if k < 2 {
        return Err(ClusterError::InvalidK { k, min: 2 });
    }
    validate(points)?;
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let (means, stds) = scaling(points, opts);
    let z = apply_standardization(points, &means, &stds);
    Ok(fit_standardized(&z, k, seed, stage, opts, means, stds))
}

fn scaling(points: &[Vec<f64>], opts: &KMeansOptions) -> (Vec<f64>, Vec<f64>) {
    if opts.standardize {
        standardization(points)
    } else {
        let dim = points[0].len();
        (vec![0.0; dim], vec![1.0; dim])
    }
}

fn fit_standardized(
    z: &[Vec<f64>],
    k: usize,
    seed: u64,
    stage: Stage,
    opts: &KMeansOptions,
    means: Vec<f64>,
    stds: Vec<f64>,
) -> ClusterModel {
    let run = best_of_restarts(z, k, seed, opts);
    ClusterModel {
        stage,
        k,
        seed,
        feature_means: means,
        feature_stds: stds,
        centroids: run.centroids,
        outlier_flags: vec![false; run.labels.len()],
        labels: run.labels,
        keys: Vec::new(),
        inertia: run.inertia,
        iterations: run.iterations,
        inertia_history: run.history,
    }
}

/// Davies-Bouldin index: the mean over clusters of the worst ratio
/// `(s_i + s_j) / d(c_i, c_j)`, where `s` is the mean distance of members to
/// their centroid. Lower is better. Empty clusters are ignored; coincident
/// centroids contribute 0, as scikit-learn does.
pub fn davies_bouldin(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    let k = centroids.len();
    let mut scatter = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        scatter[l] += sq_dist(p, &centroids[l]).sqrt();
        counts[l] += 1;
    }
    let active: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if active.len() < 2 {
        return f64::NAN;
    }
    for &c in &active {
        scatter[c] /= counts[c] as f64;
    }
    let total: f64 = active
        .iter()
        .map(|&i| {
            active
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let d = sq_dist(&centroids[i], &centroids[j]).sqrt();
                    if d > 0.0 {
                        (scatter[i] + scatter[j]) / d
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max)
        })
        .sum();
    total / active.len() as f64
}

/// Outcome of a Davies-Bouldin sweep over candidate cluster counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbSweepResult {
    pub candidates: Vec<usize>,
    pub db_scores: Vec<f64>,
    pub outlier_pct: Vec<f64>,
    pub chosen: usize,
}

/// Relative band used by the stability rule of [`choose_k`].
pub const DB_STABILITY_TOLERANCE: f64 = 0.10;

/// Picks the cluster count from a Davies-Bouldin curve.
///
/// Candidates are the local minima whose score is within
/// [`DB_STABILITY_TOLERANCE`] of the global minimum. A candidate is stable
/// when its existing neighbors `k - 1` and `k + 1` score within the same
/// band of it. Stable candidates win over unstable ones; inside the chosen
/// group the lowest score wins, then the lowest outlier percentage, then
/// the smaller `k`.
pub fn choose_k(candidates: &[usize], scores: &[f64], outlier_pct: &[f64]) -> Option<usize> {
    let tol = DB_STABILITY_TOLERANCE;
    let finite: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    let global = finite.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
    if !global.is_finite() {
        return None;
    }
    let score_at = |i: usize| scores.get(i).copied().filter(|s| s.is_finite());
    let neighbors = |i: usize| {
        let prev = i.checked_sub(1).and_then(score_at);
        let next = score_at(i + 1);
        [prev, next]
    };
    let near: Vec<usize> = finite
        .iter()
        .copied()
        .filter(|&i| {
            neighbors(i).iter().flatten().all(|&n| scores[i] <= n)
                && scores[i] <= global * (1.0 + tol) + 1e-12
        })
        .collect();
    let stable: Vec<usize> = near
        .iter()
        .copied()
        .filter(|&i| {
            neighbors(i)
                .iter()
                .flatten()
                .all(|&n| n <= scores[i] * (1.0 + tol))
        })
        .collect();
    let pool = if stable.is_empty() { near } else { stable };
    pool.into_iter()
        .min_by(|&a, &b| {
            scores[a]
                .total_cmp(&scores[b])
                .then(outlier_pct[a].total_cmp(&outlier_pct[b]))
                .then(candidates[a].cmp(&candidates[b]))
        })
        .map(|i| candidates[i])
}

/// Fits every `k` in `k_range` and scores it with the Davies-Bouldin index
/// and the outlier percentage of [`flag_outliers`] at `outlier_z`.
///
/// Values of `k` that are not below the point count are dropped.
pub fn db_sweep(
    points: &[Vec<f64>],
    k_range: RangeInclusive<usize>,
    seed: u64,
    opts: &KMeansOptions,
    outlier_z: f64,
) -> Result<DbSweepResult, ClusterError> {
    validate(points)?;
    let n = points.len();
    let candidates: Vec<usize> = k_range.filter(|&k| k >= 2 && k < n).collect();
    if candidates.is_empty() {
        return Err(ClusterError::TooFewPoints { n, k: 2 });
    }
    let (means, stds) = scaling(points, opts);
    let z = apply_standardization(points, &means, &stds);
    let mut db_scores = Vec::with_capacity(candidates.len());
    let mut outlier_pct = Vec::with_capacity(candidates.len());
    for &k in &candidates {
        let mut model = fit_standardized(&z, k, seed, Stage::Viewport, opts, means.clone(), stds.clone());
        db_scores.push(davies_bouldin(&z, &model.labels, &model.centroids));
        flag_standardized(&mut model, &z, outlier_z);
        outlier_pct.push(model.outlier_percentage());
        log::debug!("k={k} db={:.4} outliers={:.2}%", db_scores.last().unwrap(), outlier_pct.last().unwrap());
    }
    let chosen = choose_k(&candidates, &db_scores, &outlier_pct).ok_or(ClusterError::Empty)?;
    Ok(DbSweepResult {
        candidates,
        db_scores,
        outlier_pct,
        chosen,
    })
}

/// Default number of standard deviations for [`flag_outliers`].
pub const DEFAULT_OUTLIER_Z: f64 = 3.0;

/// Marks points whose distance to their centroid exceeds the cluster's
/// mean plus `z` standard deviations of member distances. Returns the
/// outlier percentage.
pub fn flag_outliers(
    model: &mut ClusterModel,
    points: &[Vec<f64>],
    z: f64,
) -> Result<f64, ClusterError> {
    if points.len() != model.labels.len() {
        return Err(ClusterError::DimensionMismatch {
            expected: model.labels.len(),
            got: points.len(),
        });
    }
    let zs = points
        .iter()
        .map(|p| model.standardize(p))
        .collect::<Result<Vec<_>, _>>()?;
    flag_standardized(model, &zs, z);
    Ok(model.outlier_percentage())
}

fn flag_standardized(model: &mut ClusterModel, z_points: &[Vec<f64>], z: f64) {
    let dists: Vec<f64> = z_points
        .iter()
        .zip(&model.labels)
        .map(|(p, &l)| sq_dist(p, &model.centroids[l]).sqrt())
        .collect();
    let mut thresholds = vec![f64::INFINITY; model.k];
    for (c, threshold) in thresholds.iter_mut().enumerate() {
        let member: Vec<f64> = dists
            .iter()
            .zip(&model.labels)
            .filter(|(_, &l)| l == c)
            .map(|(d, _)| *d)
            .collect();
        if member.len() > 1 {
            let m = stats::mean(&member);
            *threshold = m + z * stats::std_dev(&member) + 1e-12 * (1.0 + m);
        }
    }
    model.outlier_flags = dists
        .iter()
        .zip(&model.labels)
        .map(|(d, &l)| *d > thresholds[l])
        .collect();
}

/// Mean great-circle distance between corresponding samples of every pair
/// of chunks.
pub fn mean_geodesic_matrix(chunks: &[&TraceChunk]) -> Result<Vec<Vec<f64>>, ClusterError> {
    let vecs: Vec<Vec<[f64; 3]>> = chunks
        .iter()
        .map(|c| c.samples.iter().map(|s| s.point().to_unit_vector()).collect())
        .collect();
    let n = chunks.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            if vecs[i].len() != vecs[j].len() || vecs[i].is_empty() {
                return Err(ClusterError::ChunkLengthMismatch(i, j));
            }
            let total: f64 = vecs[i]
                .iter()
                .zip(&vecs[j])
                .map(|(a, b)| unit_geodesic(*a, *b))
                .sum();
            let v = total / vecs[i].len() as f64;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}

/// Largest clique of the graph restricted to `alive`, by Bron-Kerbosch
/// with pivoting and a size bound. Among equally large cliques the first
/// found in index order wins.
fn maximum_clique(adj: &[Vec<bool>], alive: &[usize]) -> Vec<usize> {
    fn expand(
        adj: &[Vec<bool>],
        r: &mut Vec<usize>,
        p: Vec<usize>,
        x: Vec<usize>,
        best: &mut Vec<usize>,
    ) {
        if p.is_empty() && x.is_empty() {
            if r.len() > best.len() {
                *best = r.clone();
            }
            return;
        }
        if r.len() + p.len() <= best.len() {
            return;
        }
        let pivot = p
            .iter()
            .chain(&x)
            .copied()
            .max_by_key(|&u| (p.iter().filter(|&&v| adj[u][v]).count(), std::cmp::Reverse(u)))
            .expect("p or x non-empty");
        let branch: Vec<usize> = p.iter().copied().filter(|&v| !adj[pivot][v]).collect();
        let mut p = p;
        let mut x = x;
        for v in branch {
            r.push(v);
            let np = p.iter().copied().filter(|&u| adj[v][u]).collect();
            let nx = x.iter().copied().filter(|&u| adj[v][u]).collect();
            expand(adj, r, np, nx, best);
            r.pop();
            p.retain(|&u| u != v);
            x.push(v);
        }
    }
    let mut best = Vec::new();
    expand(adj, &mut Vec::new(), alive.to_vec(), Vec::new(), &mut best);
    best.sort_unstable();
    best
}

/// Clique-based spatial clustering of the chunks of one video chunk.
///
/// Chunks are nodes; two are linked when their mean corresponding-sample
/// distance is below `theta` radians. The largest clique becomes a cluster
/// and is removed, until no node is left. Isolated nodes end up as
/// singletons. Labels are assigned in extraction order.
pub fn baseline_spherical(chunks: &[&TraceChunk], theta: f64) -> Result<Vec<usize>, ClusterError> {
    if chunks.is_empty() {
        return Err(ClusterError::Empty);
    }
    let d = mean_geodesic_matrix(chunks)?;
    let n = chunks.len();
    let adj: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| i != j && d[i][j] < theta).collect())
        .collect();
    let mut labels = vec![usize::MAX; n];
    let mut alive: Vec<usize> = (0..n).collect();
    let mut next = 0;
    while !alive.is_empty() {
        let clique = maximum_clique(&adj, &alive);
        for &v in &clique {
            labels[v] = next;
        }
        next += 1;
        alive.retain(|v| !clique.contains(v));
    }
    Ok(labels)
}

/// Within-cluster distortion used to pick the spectral cluster count: the
/// mean pairwise distance inside each cluster, summed over clusters. A
/// singleton contributes its distance to the nearest other point.
pub fn distortion(labels: &[usize], dist: &[Vec<f64>]) -> f64 {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let n = labels.len();
    (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            match members.len() {
                0 => 0.0,
                1 => {
                    let i = members[0];
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| dist[i][j])
                        .fold(f64::INFINITY, f64::min)
                        .min(f64::MAX)
                        * if n > 1 { 1.0 } else { 0.0 }
                }
                m => {
                    let mut total = 0.0;
                    for a in 0..m {
                        for b in (a + 1)..m {
                            total += dist[members[a]][members[b]];
                        }
                    }
                    total / (m * (m - 1) / 2) as f64
                }
            }
        })
        .sum()
}

/// Spectral clustering of the chunks of one video chunk.
///
/// Affinity `exp(-d / sigma)` on the mean corresponding-sample distance,
/// symmetric normalization `D^-1/2 W D^-1/2`, row-normalized leading
/// eigenvectors, then K-Means in the embedding. Every `k` in
/// `1..=k_max` is tried and the lowest [`distortion`] wins (ties go to the
/// smaller `k`).
pub fn baseline_trajectory(
    chunks: &[&TraceChunk],
    k_max: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<usize>, ClusterError> {
    if chunks.is_empty() {
        return Err(ClusterError::Empty);
    }
    let n = chunks.len();
    let d = mean_geodesic_matrix(chunks)?;
    if n == 1 {
        return Ok(vec![0]);
    }
    let w = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { (-d[i][j] / sigma).exp() });
    let deg: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = deg
        .iter()
        .map(|&g| if g > 0.0 { 1.0 / g.sqrt() } else { 0.0 })
        .collect();
    let lap = DMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]);
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let opts = KMeansOptions {
        standardize: false,
        ..KMeansOptions::default()
    };
    let mut best: (f64, Vec<usize>) = (distortion(&vec![0; n], &d), vec![0; n]);
    for k in 2..=k_max.min(n) {
        let embedding: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row: Vec<f64> = order[..k].iter().map(|&c| eig.eigenvectors[(i, c)]).collect();
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    row.into_iter().map(|v| v / norm).collect()
                } else {
                    row
                }
            })
            .collect();
        let run = best_of_restarts(&embedding, k, seed, &opts);
        let labels = compact_labels(&run.labels);
        let score = distortion(&labels, &d);
        if score < best.0 - 1e-12 {
            best = (score, labels);
        }
    }
    Ok(best.1)
}

/// Relabels so that labels are `0..k` in order of first appearance.
pub fn compact_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Label given to DBSCAN noise points.
pub const NOISE: i64 = -1;

/// Mean view position of a chunk: yaw averaged after unwrapping, then
/// wrapped back.
pub fn mean_position(chunk: &TraceChunk) -> SphericalPoint {
    let yaw = unwrap_yaw(chunk.samples.iter().map(|s| s.yaw));
    let pitch: Vec<f64> = chunk.samples.iter().map(|s| s.pitch).collect();
    SphericalPoint::new(wrap_angle(stats::mean(&yaw)), stats::mean(&pitch))
}

/// DBSCAN on the mean view positions of the chunks, with great-circle
/// distance. A point is core when at least `min_pts` points (itself
/// included) lie within `eps`. Noise is labelled [`NOISE`].
pub fn baseline_dbscan(chunks: &[&TraceChunk], eps: f64, min_pts: usize) -> Result<Vec<i64>, ClusterError> {
    if chunks.is_empty() {
        return Err(ClusterError::Empty);
    }
    let pos: Vec<SphericalPoint> = chunks.iter().map(|c| mean_position(c)).collect();
    let n = pos.len();
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n).filter(|&j| geodesic(pos[i], pos[j]) <= eps).collect()
    };
    let mut labels: Vec<Option<i64>> = vec![None; n];
    let mut cluster = 0i64;
    for i in 0..n {
        if labels[i].is_some() {
            continue;
        }
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            labels[i] = Some(NOISE);
            continue;
        }
        labels[i] = Some(cluster);
        let mut queue: std::collections::VecDeque<usize> = seeds.into_iter().collect();
        while let Some(q) = queue.pop_front() {
            match labels[q] {
                Some(NOISE) => labels[q] = Some(cluster),
                None => {
                    labels[q] = Some(cluster);
                    let nb = neighbors(q);
                    if nb.len() >= min_pts {
                        queue.extend(nb);
                    }
                }
                Some(_) => {}
            }
        }
        cluster += 1;
    }
    Ok(labels.into_iter().map(|l| l.unwrap_or(NOISE)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::HeadSample;
    use rand_distr::{Distribution, Normal};

    /// Planted blobs: `per` points around each center with unit noise.
    fn blobs(centers: &[Vec<f64>], per: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(center.iter().map(|v| v + noise.sample(&mut rng)).collect());
                truth.push(c);
            }
        }
        (pts, truth)
    }

    /// Pair-counting agreement, written directly from the definition.
    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
    }

    /// `k` random centers in `dim` dimensions, pairwise at least `min_sep` apart.
    fn separated_centers(k: usize, dim: usize, min_sep: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let side = 3.0 * min_sep * (k as f64).powf(1.0 / dim as f64);
        let mut centers: Vec<Vec<f64>> = Vec::new();
        while centers.len() < k {
            let c: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * side).collect();
            if centers.iter().all(|o| sq_dist(o, &c).sqrt() >= min_sep) {
                centers.push(c);
            }
        }
        centers
    }

    fn grid_centers(k: usize, sep: f64) -> Vec<Vec<f64>> {
        (0..k)
            .map(|i| vec![sep * (i % 4) as f64, sep * (i / 4) as f64, 0.0])
            .collect()
    }

    #[test]
    fn two_planted_blobs() {
        let (pts, truth) = blobs(&[vec![0.0, 0.0], vec![10.0, 10.0]], 30, 0.5, 1);
        let m = kmeans_fit(&pts, 2, 7, Stage::Viewport, &KMeansOptions::default()).unwrap();
        assert!(same_partition(&m.labels, &truth));
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn identical_points() {
        let pts = vec![vec![1.0, 2.0]; 6];
        let m = kmeans_fit(&pts, 2, 0, Stage::Viewport, &KMeansOptions::default()).unwrap();
        assert!(m.labels.iter().all(|&l| l == m.labels[0]));
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn k_equals_n() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let m = kmeans_fit(&pts, 5, 3, Stage::Viewport, &KMeansOptions::default()).unwrap();
        assert!(m.inertia.abs() < 1e-20);
        let mut l = m.labels.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 5);
    }

    #[test]
    fn fit_errors() {
        let pts = vec![vec![0.0], vec![1.0]];
        let o = KMeansOptions::default();
        assert_eq!(
            kmeans_fit(&pts, 3, 0, Stage::Viewport, &o).unwrap_err(),
            ClusterError::TooFewPoints { n: 2, k: 3 }
        );
        assert!(matches!(kmeans_fit(&pts, 1, 0, Stage::Viewport, &o), Err(ClusterError::InvalidK { .. })));
        let bad = vec![vec![0.0], vec![f64::NAN], vec![1.0]];
        assert_eq!(
            kmeans_fit(&bad, 2, 0, Stage::Viewport, &o).unwrap_err(),
            ClusterError::NonFinite { row: 1, col: 0 }
        );
    }

    fn hand_model() -> ClusterModel {
        ClusterModel {
            stage: Stage::Viewport,
            k: 2,
            seed: 0,
            feature_means: vec![0.0, 0.0],
            feature_stds: vec![1.0, 1.0],
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0]],
            labels: vec![],
            outlier_flags: vec![],
            keys: vec![],
            inertia: 0.0,
            iterations: 0,
            inertia_history: vec![],
        }
    }

    #[test]
    fn assign_rules() {
        let m = hand_model();
        assert_eq!(assign(&m, &[0.0, 0.0]).unwrap(), 0);
        assert_eq!(assign(&m, &[2.0, 0.0]).unwrap(), 1);
        assert_eq!(assign(&m, &[1.0, 0.0]).unwrap(), 0);
        assert!(matches!(assign(&m, &[1.0]), Err(ClusterError::DimensionMismatch { .. })));

        let (pts, _) = blobs(&grid_centers(3, 8.0), 20, 1.0, 4);
        let fit = kmeans_fit(&pts, 3, 1, Stage::Viewport, &KMeansOptions::default()).unwrap();
        for (p, &l) in pts.iter().zip(&fit.labels) {
            assert_eq!(assign(&fit, p).unwrap(), l);
        }
    }

    #[test]
    fn reproducible_and_shuffle_equivalent() {
        let (pts, _) = blobs(&separated_centers(4, 3, 10.0, 9), 25, 1.0, 9);
        let o = KMeansOptions::default();
        let a = kmeans_fit(&pts, 4, 11, Stage::Viewport, &o).unwrap();
        let b = kmeans_fit(&pts, 4, 11, Stage::Viewport, &o).unwrap();
        assert_eq!(a, b);

        let perm: Vec<usize> = (0..pts.len()).map(|i| (i * 37) % pts.len()).collect();
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
        let c = kmeans_fit(&shuffled, 4, 11, Stage::Viewport, &o).unwrap();
        let back: Vec<usize> = {
            let mut v = vec![0; pts.len()];
            for (pos, &i) in perm.iter().enumerate() {
                v[i] = c.labels[pos];
            }
            v
        };
        assert!(same_partition(&a.labels, &back));
    }

    #[test]
    fn column_scale_does_not_change_assignments() {
        let (pts, _) = blobs(&grid_centers(3, 6.0), 30, 1.0, 2);
        let scaled: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| vec![p[0] * 10.0, p[1], p[2]])
            .collect();
        let o = KMeansOptions::default();
        let a = kmeans_fit(&pts, 3, 5, Stage::Viewport, &o).unwrap();
        let b = kmeans_fit(&scaled, 3, 5, Stage::Viewport, &o).unwrap();
        assert!(same_partition(&a.labels, &b.labels));
    }

    #[test]
    fn constant_feature_gets_unit_scale() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 4.0]).collect();
        let (_, stds) = standardization(&pts);
        assert_eq!(stds[1], 1.0);
        assert!(stds[0] > 0.0);
    }

    #[test]
    fn db_index_hand_example() {
        // two clusters of two points on a line
        let pts = vec![vec![0.0], vec![2.0], vec![10.0], vec![14.0]];
        let labels = vec![0, 0, 1, 1];
        let centroids = vec![vec![1.0], vec![12.0]];
        // s = (1, 2), d = 11, both ratios 3/11
        assert!((davies_bouldin(&pts, &labels, &centroids) - 3.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn sweep_recovers_planted_counts() {
        let o = KMeansOptions::default();
        let (three, _) = blobs(&separated_centers(3, 4, 10.0, 21), 40, 1.0, 21);
        let r = db_sweep(&three, 2..=20, 3, &o, DEFAULT_OUTLIER_Z).unwrap();
        assert_eq!(r.chosen, 3, "{:?}", r.db_scores);
        let best = r
            .db_scores
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(r.candidates[best], 3);

        let (ten, _) = blobs(&separated_centers(10, 4, 10.0, 22), 30, 1.0, 22);
        let r = db_sweep(&ten, 2..=20, 3, &o, DEFAULT_OUTLIER_Z).unwrap();
        assert_eq!(r.chosen, 10, "{:?}", r.db_scores);
    }

    #[test]
    fn sweep_recovers_k_at_eight_sigma_for_twenty_seeds() {
        let o = KMeansOptions::default();
        for seed in 0..20 {
            let k = 3 + (seed as usize % 6);
            let (pts, truth) = blobs(&separated_centers(k, 2, 8.0, seed), 40, 1.0, seed);
            let r = db_sweep(&pts, 2..=12, seed, &o, DEFAULT_OUTLIER_Z).unwrap();
            assert_eq!(r.chosen, k, "seed {seed}: {:?}", r.db_scores);
            let m = kmeans_fit(&pts, k, seed, Stage::Viewport, &o).unwrap();
            let ari = crate::evaluation::adjusted_rand_index(&m.labels, &truth);
            assert!(ari > 0.98, "seed {seed}: ari {ari}");
        }
    }

    #[test]
    fn sweep_on_single_blob_prefers_small_k() {
        let (one, _) = blobs(&[vec![0.0, 0.0, 0.0]], 200, 1.0, 5);
        let r = db_sweep(&one, 2..=12, 1, &KMeansOptions::default(), DEFAULT_OUTLIER_Z).unwrap();
        assert!(r.db_scores.iter().all(|s| s.is_finite()));
        assert_eq!(r.candidates.len(), 11);
        assert_eq!(r.outlier_pct.len(), 11);
    }

    #[test]
    fn stability_rule() {
        // sharp minimum at 3, flat basin at 10 within 10% of it
        let ks: Vec<usize> = (2..=12).collect();
        let db = [0.9, 0.60, 0.9, 0.85, 0.8, 0.75, 0.70, 0.64, 0.62, 0.64, 0.66];
        let out = vec![1.0; ks.len()];
        assert_eq!(choose_k(&ks, &db, &out), Some(10));
        // a lone sharp minimum wins when nothing else is close
        let db = [0.9, 0.30, 0.9, 0.85, 0.8, 0.75, 0.70, 0.64, 0.62, 0.64, 0.66];
        assert_eq!(choose_k(&ks, &db, &out), Some(3));
        // outlier percentage breaks exact ties
        let db = [0.5, 0.5];
        assert_eq!(choose_k(&[2, 3], &db, &[2.0, 1.0]), Some(3));
    }

    #[test]
    fn outliers_flag_far_point() {
        let (mut pts, _) = blobs(&[vec![0.0, 0.0], vec![100.0, 100.0]], 30, 0.1, 3);
        pts.push(vec![0.0, 10.0]);
        let mut m = kmeans_fit(&pts, 2, 0, Stage::Viewport, &KMeansOptions::default()).unwrap();
        let pct = flag_outliers(&mut m, &pts, DEFAULT_OUTLIER_Z).unwrap();
        let flagged: Vec<usize> = (0..pts.len()).filter(|&i| m.outlier_flags[i]).collect();
        assert_eq!(flagged, vec![60]);
        assert!((pct - 100.0 / 61.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_distances_flag_nothing() {
        // square corners around each centroid: identical member distances
        let mut pts = Vec::new();
        for c in [0.0, 50.0] {
            for (dx, dy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                pts.push(vec![c + dx, c + dy]);
            }
        }
        let o = KMeansOptions {
            standardize: false,
            ..KMeansOptions::default()
        };
        let mut m = kmeans_fit(&pts, 2, 0, Stage::Viewport, &o).unwrap();
        assert_eq!(flag_outliers(&mut m, &pts, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn outlier_rate_on_gaussian_blobs_matches_rayleigh_tail() {
        // 2-D isotropic Gaussian: distances are Rayleigh(1), so the flag
        // rate is exp(-t^2 / 2) with t = mean + 3 std of the Rayleigh law.
        let mean = (std::f64::consts::PI / 2.0).sqrt();
        let std = ((4.0 - std::f64::consts::PI) / 2.0).sqrt();
        let t = mean + 3.0 * std;
        let expected = 100.0 * (-t * t / 2.0).exp();
        let (pts, _) = blobs(&[vec![0.0, 0.0], vec![40.0, 0.0]], 10_000, 1.0, 77);
        let o = KMeansOptions {
            standardize: false,
            n_init: 1,
            ..KMeansOptions::default()
        };
        let mut m = kmeans_fit(&pts, 2, 0, Stage::Viewport, &o).unwrap();
        let pct = flag_outliers(&mut m, &pts, 3.0).unwrap();
        assert!((pct - expected).abs() < 0.25, "{pct} vs {expected}");
        assert!(pct > 0.1 && pct < 3.0);
    }

    fn chunk_at(yaw: f64, pitch: f64, wobble: f64, user: u32) -> TraceChunk {
        TraceChunk {
            key: ChunkKey {
                video_id: 0,
                chunk_id: 0,
                user_id: user,
            },
            rate_hz: 10.0,
            samples: (0..20)
                .map(|n| {
                    let t = n as f64 / 10.0;
                    HeadSample::new(t, yaw + wobble * (t * 3.0 + user as f64).sin(), pitch)
                })
                .collect(),
        }
    }

    fn two_groups() -> Vec<TraceChunk> {
        let mut v: Vec<TraceChunk> = (0..6).map(|u| chunk_at(0.0, 0.0, 0.02, u)).collect();
        v.extend((6..11).map(|u| chunk_at(2.0, 0.3, 0.02, u)));
        v
    }

    fn refs(v: &[TraceChunk]) -> Vec<&TraceChunk> {
        v.iter().collect()
    }

    fn planted() -> Vec<usize> {
        let mut t = vec![0; 6];
        t.extend(vec![1; 5]);
        t
    }

    #[test]
    fn spherical_examples() {
        let same: Vec<TraceChunk> = (0..5).map(|u| chunk_at(0.5, 0.1, 0.0, u)).collect();
        assert_eq!(baseline_spherical(&refs(&same), 0.3).unwrap(), vec![0; 5]);

        let groups = two_groups();
        let l = baseline_spherical(&refs(&groups), 0.3).unwrap();
        assert!(same_partition(&l, &planted()));

        let far: Vec<TraceChunk> = (0..4).map(|u| chunk_at(u as f64 * 1.5, 0.0, 0.0, u)).collect();
        assert_eq!(baseline_spherical(&refs(&far), 0.3).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn maximum_clique_on_known_graph() {
        // triangle 0-1-2 plus a 4-clique 3-4-5-6 joined by edge 2-3
        let n = 7;
        let mut adj = vec![vec![false; n]; n];
        let mut link = |a: usize, b: usize| {
            adj[a][b] = true;
            adj[b][a] = true;
        };
        for (a, b) in [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (3, 5), (3, 6), (4, 5), (4, 6), (5, 6)] {
            link(a, b);
        }
        let all: Vec<usize> = (0..n).collect();
        assert_eq!(maximum_clique(&adj, &all), vec![3, 4, 5, 6]);
        assert_eq!(maximum_clique(&adj, &[0, 1, 2, 3]), vec![0, 1, 2]);
    }

    #[test]
    fn trajectory_examples() {
        let same: Vec<TraceChunk> = (0..5).map(|u| chunk_at(0.5, 0.1, 0.0, u)).collect();
        assert_eq!(baseline_trajectory(&refs(&same), 5, 0.2, 0).unwrap(), vec![0; 5]);

        let groups = two_groups();
        let l = baseline_trajectory(&refs(&groups), 6, 0.2, 0).unwrap();
        assert!(same_partition(&l, &planted()), "{l:?}");

        // uniform affinity: every split only adds distortion
        let spread: Vec<TraceChunk> = (0..8)
            .map(|u| chunk_at(u as f64 * 0.7, 0.2 * (u % 3) as f64, 0.05, u))
            .collect();
        let l = baseline_trajectory(&refs(&spread), 6, 1e12, 0).unwrap();
        assert_eq!(l, vec![0; 8]);
    }

    #[test]
    fn dbscan_examples() {
        let blob: Vec<TraceChunk> = (0..6).map(|u| chunk_at(0.1, 0.0, 0.01, u)).collect();
        assert_eq!(baseline_dbscan(&refs(&blob), 0.1, 3).unwrap(), vec![0; 6]);

        let mut with_lone = blob.clone();
        with_lone.push(chunk_at(2.5, 0.5, 0.0, 9));
        let l = baseline_dbscan(&refs(&with_lone), 0.1, 2).unwrap();
        assert_eq!(l[6], NOISE);
        assert!(l[..6].iter().all(|&x| x == 0));

        let groups = two_groups();
        let l = baseline_dbscan(&refs(&groups), 0.2, 2).unwrap();
        let as_usize: Vec<usize> = l.iter().map(|&x| x as usize).collect();
        assert!(l.iter().all(|&x| x >= 0));
        assert!(same_partition(&as_usize, &planted()));
    }

    #[test]
    fn mean_position_across_seam() {
        let c = TraceChunk {
            key: ChunkKey {
                video_id: 0,
                chunk_id: 0,
                user_id: 0,
            },
            rate_hz: 10.0,
            samples: vec![
                HeadSample::new(0.0, 3.1, 0.0),
                HeadSample::new(0.1, -3.1, 0.2),
            ],
        };
        let p = mean_position(&c);
        assert!((p.yaw.abs() - std::f64::consts::PI).abs() < 1e-9);
        assert!((p.pitch - 0.1).abs() < 1e-12);
    }
}
