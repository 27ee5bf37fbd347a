//! Head-orientation trace analysis for 360-degree video.
//!
//! The crate covers the full analysis path:
//!
//! - [`trace_io`]: parse per-dataset head traces, convert to yaw/pitch and
//!   resample onto a uniform grid.
//! - [`geometry`]: great-circle distance, viewport overlap and sphere coverage.
//! - [`features`]: 2 s trace chunks, the 15-dim behavior vector of a chunk and
//!   the population vector of a video chunk.
//! - [`clustering`]: K-Means with Davies-Bouldin model selection and the
//!   spatial baselines (maximal cliques, spectral, DBSCAN).
//! - [`evaluation`]: pairwise similarity metrics and within/cross reports.
//! - [`synth`]: planted-behavior generators for tests, demos and benchmarks.

pub mod clustering;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod stats;
pub mod synth;
pub mod trace_io;

pub use clustering::{
    baseline_dbscan, baseline_spherical, baseline_trajectory, db_sweep, flag_outliers,
    kmeans_fit, ClusterError, ClusterModel, DbSweepResult, KMeansOptions, PointKey, Stage,
};
pub use evaluation::{
    adjusted_rand_index, category_distance, category_report, cluster_similarity_report,
    clusters_per_video, pairwise_metrics, static_vs_dynamic, CategoryReport, ClusterReport,
    EvalError, PairwiseMetrics,
};
pub use features::{
    chunk_traces, count_behaviors, extract_f1, extract_f2, ChunkFeatures, ChunkKey,
    ChunkingConfig, FeatureError, TraceChunk, VideoChunkFeatures,
};
pub use geometry::{
    geodesic, overlap_proxy, sphere_coverage, trace_vpo, CoverageGrid, GeometryError,
    SphericalPoint, ViewportSpec,
};
pub use trace_io::{
    load_unified, parse_trace, resample, DatasetManifest, FormatTag, HeadSample, ManifestEntry,
    TraceError, ViewportTrace,
};
