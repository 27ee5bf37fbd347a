//! Synthetic head traces with planted behaviors.
//!
//! Three archetypes drive everything here: a viewer fixed near the front,
//! a fast horizontal pan, and a slow sweep with a wide vertical swing.
//! Chunks are 20 samples at 10 Hz.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::features::{ChunkKey, TraceChunk};
use crate::trace_io::{HeadSample, ViewportTrace};

pub const RATE_HZ: f64 = 10.0;
pub const CHUNK_SAMPLES: usize = 20;

/// Jitter added to every sample, radians.
const JITTER: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Archetype {
    StaticCenter,
    FastEquatorial,
    WideExplorer,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [
        Archetype::StaticCenter,
        Archetype::FastEquatorial,
        Archetype::WideExplorer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::StaticCenter => "static-center",
            Archetype::FastEquatorial => "fast-equatorial",
            Archetype::WideExplorer => "wide-explorer",
        }
    }

    /// `n` samples starting at video time `t0`.
    pub fn segment<R: Rng>(self, rng: &mut R, t0: f64, n: usize) -> Vec<HeadSample> {
        let g = |m: f64, s: f64, rng: &mut R| Normal::new(m, s).unwrap().sample(rng);
        let jitter = Normal::new(0.0, JITTER).unwrap();
        let (yaw0, pitch0, yaw_rate, amp, phase) = match self {
            Archetype::StaticCenter => (g(0.0, 0.05, rng), g(0.0, 0.05, rng), 0.0, 0.0, 0.0),
            Archetype::FastEquatorial => (g(-1.0, 0.05, rng), g(0.0, 0.05, rng), g(2.0, 0.08, rng), 0.0, 0.0),
            Archetype::WideExplorer => (
                g(1.5, 0.05, rng),
                g(0.3, 0.05, rng),
                g(0.8, 0.05, rng),
                g(0.6, 0.03, rng),
                g(0.0, 0.1, rng),
            ),
        };
        (0..n)
            .map(|s| {
                let tau = s as f64 / RATE_HZ;
                let yaw = yaw0 + yaw_rate * tau + jitter.sample(rng);
                let pitch = pitch0 + amp * (PI * tau + phase).sin() + jitter.sample(rng);
                HeadSample::new(t0 + tau, yaw, pitch)
            })
            .collect()
    }
}

/// `per_archetype` chunks of every archetype, with their planted labels.
pub fn archetype_chunks(per_archetype: usize, seed: u64) -> (Vec<TraceChunk>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    for a in Archetype::ALL {
        for _ in 0..per_archetype {
            let user = chunks.len() as u32;
            chunks.push(TraceChunk {
                key: ChunkKey {
                    video_id: 0,
                    chunk_id: 0,
                    user_id: user,
                },
                rate_hz: RATE_HZ,
                samples: a.segment(&mut rng, 0.0, CHUNK_SAMPLES),
            });
            labels.push(a.index());
        }
    }
    (chunks, labels)
}

/// Settings of [`mixture_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub videos: u32,
    pub users_min: u32,
    pub users_max: u32,
    pub chunks: u32,
    /// Archetype probabilities of each planted category.
    pub profiles: Vec<[f64; 3]>,
    /// Genre labels cycle through this many names, independent of profiles.
    pub genres: u32,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            videos: 12,
            users_min: 14,
            users_max: 20,
            chunks: 14,
            profiles: vec![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]],
            genres: 4,
            seed: 0,
        }
    }
}

/// Full traces whose video chunks follow planted behavior mixtures.
#[derive(Debug, Clone)]
pub struct MixtureDataset {
    pub traces: Vec<ViewportTrace>,
    pub genres: BTreeMap<u32, String>,
    /// Planted category of each `(video, chunk)`.
    pub chunk_profile: BTreeMap<(u32, u32), usize>,
    /// Planted archetype of each trace chunk.
    pub chunk_archetype: BTreeMap<ChunkKey, usize>,
}

pub const GENRE_NAMES: [&str; 10] = [
    "sports", "nature", "documentary", "music", "gaming", "travel", "news", "film", "education",
    "performance",
];

/// Videos whose chunks each draw a behavior mixture from `cfg.profiles`
/// and whose users draw an archetype per chunk from that mixture. Every
/// trace covers `cfg.chunks` full windows on the 10 Hz grid.
pub fn mixture_dataset(cfg: &MixtureConfig) -> MixtureDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut traces = Vec::new();
    let mut genres = BTreeMap::new();
    let mut chunk_profile = BTreeMap::new();
    let mut chunk_archetype = BTreeMap::new();
    let per_chunk = CHUNK_SAMPLES;
    for video in 0..cfg.videos {
        genres.insert(video, GENRE_NAMES[(video % cfg.genres) as usize % GENRE_NAMES.len()].to_string());
        let users = rng.random_range(cfg.users_min..=cfg.users_max);
        let profiles: Vec<usize> = (0..cfg.chunks)
            .map(|k| (video as usize + k as usize + rng.random_range(0..2)) % cfg.profiles.len())
            .collect();
        for (k, &p) in profiles.iter().enumerate() {
            chunk_profile.insert((video, k as u32), p);
        }
        for user in 0..users {
            let mut samples = Vec::with_capacity(per_chunk * cfg.chunks as usize + 1);
            for (k, &p) in profiles.iter().enumerate() {
                let weights = cfg.profiles[p];
                let r: f64 = rng.random();
                let a = if r < weights[0] {
                    Archetype::StaticCenter
                } else if r < weights[0] + weights[1] {
                    Archetype::FastEquatorial
                } else {
                    Archetype::WideExplorer
                };
                chunk_archetype.insert(
                    ChunkKey {
                        video_id: video,
                        chunk_id: k as u32,
                        user_id: user,
                    },
                    a.index(),
                );
                let t0 = k as f64 * per_chunk as f64 / RATE_HZ;
                let extra = usize::from(k + 1 == profiles.len());
                samples.extend(a.segment(&mut rng, t0, per_chunk + extra));
            }
            traces.push(ViewportTrace {
                video_id: video,
                user_id: user,
                rate_hz: RATE_HZ,
                samples,
            });
        }
    }
    MixtureDataset {
        traces,
        genres,
        chunk_profile,
        chunk_archetype,
    }
}

/// Four planted groups at one video chunk: still viewers and horizontal
/// oscillators (amplitude 0.3 rad, 1 Hz, independent phases), at two
/// locations 1.2 rad apart. Labels are `2 * location + motion`.
pub fn planted_groups(per_group: usize, seed: u64) -> (Vec<TraceChunk>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let jitter = Normal::new(0.0, JITTER).unwrap();
    let mut chunks = Vec::new();
    let mut labels = Vec::new();
    for (loc, center) in [(0usize, 0.0f64), (1, 1.2)] {
        for motion in 0..2usize {
            for _ in 0..per_group {
                let (cy, cp) = (center + noise.sample(&mut rng), noise.sample(&mut rng));
                let phase = rng.random::<f64>() * 2.0 * PI;
                let amp = if motion == 1 { 0.3 } else { 0.0 };
                let samples = (0..CHUNK_SAMPLES)
                    .map(|s| {
                        let t = s as f64 / RATE_HZ;
                        HeadSample::new(
                            t,
                            cy + amp * (2.0 * PI * t + phase).sin() + jitter.sample(&mut rng),
                            cp + jitter.sample(&mut rng),
                        )
                    })
                    .collect();
                chunks.push(TraceChunk {
                    key: ChunkKey {
                        video_id: 0,
                        chunk_id: 0,
                        user_id: chunks.len() as u32,
                    },
                    rate_hz: RATE_HZ,
                    samples,
                });
                labels.push(2 * loc + motion);
            }
        }
    }
    (chunks, labels)
}

/// Renders a trace as `t,yaw,pitch` rows in radians.
pub fn euler_csv(trace: &ViewportTrace) -> String {
    let mut out = String::from("t,yaw,pitch\n");
    for s in &trace.samples {
        let _ = writeln!(out, "{:.6},{:.9},{:.9}", s.t, s.yaw, s.pitch);
    }
    out
}
