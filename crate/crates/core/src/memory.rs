//! Reconstituted context memory: temporal plus spatially retrieved chunks,
//! with positional indices reassigned relative to the current chunk.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::world::{CameraPose, DiscreteAction, CHUNK_FRAMES};
use crate::{Error, Result};

pub const FOV_SAMPLES: usize = 64;
pub const FOV_DEPTHS: [f64; 3] = [1.0, 2.0, 4.0];
pub const RELEVANCE_THRESHOLD: f64 = 0.05;

/// `(u, v, depth)` with `u, v ∈ (-1, 1)` in normalized image coordinates.
fn fov_samples() -> &'static [[f64; 3]; FOV_SAMPLES] {
    use std::sync::OnceLock;
    static SAMPLES: OnceLock<[[f64; 3]; FOV_SAMPLES]> = OnceLock::new();
    SAMPLES.get_or_init(|| {
        let golden = 0.5 * (5f64.sqrt() - 1.0);
        let groups = FOV_DEPTHS.len();
        let mut out = [[0.0; 3]; FOV_SAMPLES];
        for (i, s) in out.iter_mut().enumerate() {
            // each depth gets its own stratified u sweep and golden-ratio v
            let g = i % groups;
            let m = i / groups;
            let n = (FOV_SAMPLES - g).div_ceil(groups);
            let u = 2.0 * (m as f64 + 0.5) / n as f64 - 1.0;
            let v = 2.0 * ((m as f64 + 0.5) * golden + g as f64 / groups as f64).fract() - 1.0;
            *s = [u, v, FOV_DEPTHS[g]];
        }
        out
    })
}

/// Camera-frame point of `pose` at normalized image coordinates and depth.
pub fn unproject(pose: &CameraPose, u: f64, v: f64, depth: f64) -> [f64; 3] {
    let intr = &pose.intrinsics;
    let px = intr.cx + u * intr.width as f64 / 2.0;
    let py = intr.cy + v * intr.height as f64 / 2.0;
    [(px - intr.cx) * depth / intr.focal, (py - intr.cy) * depth / intr.focal, depth]
}

/// Whether a world point lands inside `pose`'s image with positive depth.
pub fn visible(pose: &CameraPose, world: [f64; 3]) -> bool {
    let c = pose.to_camera(world);
    if c[2] <= 0.0 {
        return false;
    }
    let intr = &pose.intrinsics;
    let px = intr.focal * c[0] / c[2] + intr.cx;
    let py = intr.focal * c[1] / c[2] + intr.cy;
    (0.0..=intr.width as f64).contains(&px) && (0.0..=intr.height as f64).contains(&py)
}

/// Fraction of a fixed set of points in `a`'s frustum that `b` also sees.
pub fn fov_overlap(a: &CameraPose, b: &CameraPose) -> f64 {
    let samples = fov_samples();
    let hits = samples
        .iter()
        .filter(|&&[u, v, d]| visible(b, a.to_world(unproject(a, u, v, d))))
        .count();
    hits as f64 / samples.len() as f64
}

/// How overlap and distance combine into a relevance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    #[default]
    Multiplicative,
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub temporal: usize,
    pub spatial: usize,
    pub sigma: f64,
    pub mode: RelevanceMode,
}

impl RetrievalConfig {
    pub fn new(temporal: usize, spatial: usize, world_size: usize) -> Self {
        Self { temporal, spatial, sigma: world_size as f64 / 4.0, mode: RelevanceMode::Multiplicative }
    }
}

/// One committed chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub capture_index: u64,
    /// `[tokens_per_chunk × channels]`, frame-major.
    pub latent: Tensor<f32>,
    pub poses: [CameraPose; CHUNK_FRAMES],
    pub keys: DiscreteAction,
}

impl ChunkRecord {
    pub fn center_pose(&self) -> &CameraPose {
        &self.poses[1]
    }
}

pub fn relevance_score(candidate: &CameraPose, current: &CameraPose, sigma: f64, mode: RelevanceMode) -> f64 {
    let overlap = fov_overlap(current, candidate);
    let decay = (-current.distance(candidate) / sigma).exp();
    match mode {
        RelevanceMode::Multiplicative => overlap * decay,
        RelevanceMode::Additive => {
            if overlap == 0.0 {
                0.0
            } else {
                0.5 * (overlap + decay)
            }
        }
    }
}

pub fn relevance(candidate: &ChunkRecord, current: &CameraPose, cfg: &RetrievalConfig) -> f64 {
    relevance_score(candidate.center_pose(), current, cfg.sigma, cfg.mode)
}

/// Append-only chunk history of one session.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    records: Vec<ChunkRecord>,
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ChunkRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.capture_index <= last.capture_index {
                return Err(Error::Config(format!(
                    "capture index {} not after {}",
                    record.capture_index, last.capture_index
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn next_capture_index(&self) -> u64 {
        self.records.last().map_or(0, |r| r.capture_index + 1)
    }

    pub fn get(&self, capture_index: u64) -> Option<&ChunkRecord> {
        self.records
            .binary_search_by_key(&capture_index, |r| r.capture_index)
            .ok()
            .map(|i| &self.records[i])
    }
}

/// Context rebuilt for one chunk.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ContextSet {
    /// Capture indices, ascending.
    pub temporal: Vec<u64>,
    /// Capture indices in retrieval order (best first).
    pub spatial: Vec<u64>,
    pub scores: Vec<f64>,
}

impl ContextSet {
    /// All context capture indices in capture order.
    pub fn ordered(&self) -> Vec<u64> {
        let set: BTreeSet<u64> = self.temporal.iter().chain(&self.spatial).copied().collect();
        set.into_iter().collect()
    }

    pub fn len(&self) -> usize {
        self.temporal.len() + self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stable key for cache validity: contents and their reframed slots.
    pub fn tag(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let ordered = self.ordered();
        ordered.hash(&mut h);
        reframe(self).chunk_positions.hash(&mut h);
        h.finish()
    }
}

/// Temporal: the last `L` chunks. Spatial: the best `K` of the rest by
/// relevance, above threshold, ties toward the more recent chunk.
pub fn reconstitute(bank: &MemoryBank, current: &CameraPose, cfg: &RetrievalConfig) -> ContextSet {
    let records = bank.records();
    let split = records.len().saturating_sub(cfg.temporal);
    let temporal: Vec<u64> = records[split..].iter().map(|r| r.capture_index).collect();
    let mut scored: Vec<(f64, u64)> = records[..split]
        .iter()
        .map(|r| (relevance(r, current, cfg), r.capture_index))
        .filter(|&(s, _)| s > RELEVANCE_THRESHOLD)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    scored.truncate(cfg.spatial);
    ContextSet {
        temporal,
        spatial: scored.iter().map(|s| s.1).collect(),
        scores: scored.iter().map(|s| s.0).collect(),
    }
}

/// Positions of context chunks and the current chunk after reframing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reframed {
    /// `(capture_index, chunk_position)` in capture order.
    pub chunk_positions: Vec<(u64, i64)>,
    pub current: i64,
}

impl Reframed {
    /// Fine (per-frame) positions of one chunk.
    pub fn fine(chunk_position: i64) -> [i64; CHUNK_FRAMES] {
        std::array::from_fn(|f| chunk_position * CHUNK_FRAMES as i64 + f as i64)
    }

    /// Position pattern with capture indices erased.
    pub fn pattern(&self) -> Vec<i64> {
        self.chunk_positions.iter().map(|p| p.1).chain([self.current]).collect()
    }
}

pub fn reframe(ctx: &ContextSet) -> Reframed {
    let ordered = ctx.ordered();
    let n = ordered.len() as i64;
    Reframed { chunk_positions: ordered.into_iter().zip(0..).collect(), current: n }
}

/// One line of the retrieval debug log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub chunk: u64,
    pub temporal: Vec<u64>,
    pub spatial: Vec<u64>,
    pub scores: Vec<f64>,
    pub positions: Vec<i64>,
}

impl RetrievalRecord {
    pub fn new(chunk: u64, ctx: &ContextSet) -> Self {
        Self {
            chunk,
            temporal: ctx.temporal.clone(),
            spatial: ctx.spatial.clone(),
            scores: ctx.scores.clone(),
            positions: reframe(ctx).pattern(),
        }
    }

    pub fn write_line(&self, out: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}
