//! Episodes encoded into chunk latents, plus the ground-truth memory
//! contexts used to train and evaluate memory-conditioned models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::chunk_keys;
use crate::latent::chunk_latent;
use crate::memory::{reconstitute, reframe, ChunkRecord, ContextSet, MemoryBank, RetrievalConfig};
use crate::model::{ChunkSpec, ModelConfig, PositionMode};
use crate::tensor::Tensor;
use crate::world::{make_trajectory, CameraPose, DiscreteAction, Episode, GridWorld, Intrinsics, TrajectoryKind, CHUNK_FRAMES};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub episodes: usize,
    /// Frames per episode, a multiple of 4.
    pub length: usize,
    pub world_size: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub kinds: Vec<TrajectoryKind>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            length: 48,
            world_size: crate::world::DEFAULT_WORLD_SIZE,
            width: 64,
            height: 64,
            seed: 0,
            kinds: vec![TrajectoryKind::RandomWalk, TrajectoryKind::Loop, TrajectoryKind::OutAndBack],
        }
    }
}

impl DataConfig {
    pub fn world_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::hfov90(self.width, self.height)
    }

    /// Episode `i`: its own world, trajectory kind cycling through `kinds`.
    pub fn episode(&self, i: usize) -> Result<Episode> {
        let world = GridWorld::generate_sized(self.world_seed(i), self.world_size);
        let kind = self.kinds[i % self.kinds.len()];
        make_trajectory(&world, kind, self.length, self.world_seed(i) ^ 0x9e37, self.intrinsics())
    }

    pub fn generate(&self) -> Result<Vec<Episode>> {
        (0..self.episodes).into_par_iter().map(|i| self.episode(i)).collect()
    }
}

/// One ground-truth chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkData {
    pub latent: Tensor<f32>,
    pub poses: [CameraPose; CHUNK_FRAMES],
    pub frame_keys: [DiscreteAction; CHUNK_FRAMES],
    pub keys: DiscreteAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLatents {
    pub world_seed: u64,
    pub world_size: usize,
    pub kind: TrajectoryKind,
    pub chunks: Vec<ChunkData>,
}

impl EpisodeLatents {
    pub fn encode(ep: &Episode, patch: usize) -> Result<Self> {
        let chunks = (0..ep.num_chunks())
            .map(|c| {
                let r = c * CHUNK_FRAMES..(c + 1) * CHUNK_FRAMES;
                let frame_keys: [DiscreteAction; CHUNK_FRAMES] = ep.actions[r.clone()].try_into().unwrap();
                Ok(ChunkData {
                    latent: chunk_latent(&ep.frames[r.clone()], patch)?,
                    poses: ep.poses[r].try_into().unwrap(),
                    frame_keys,
                    keys: chunk_keys(&frame_keys),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { world_seed: ep.world_seed, world_size: ep.world_size, kind: ep.kind, chunks })
    }

    pub fn record(&self, i: usize) -> ChunkRecord {
        let c = &self.chunks[i];
        ChunkRecord { capture_index: i as u64, latent: c.latent.clone(), poses: c.poses, keys: c.keys }
    }

    /// Bank of ground-truth chunks `0..upto`.
    pub fn bank(&self, upto: usize) -> MemoryBank {
        let mut bank = MemoryBank::new();
        for i in 0..upto.min(self.chunks.len()) {
            bank.push(self.record(i)).expect("indices increase");
        }
        bank
    }

    /// Context the model would retrieve for chunk `j` from ground truth.
    pub fn context_for(&self, j: usize, retrieval: &RetrievalConfig) -> ContextSet {
        reconstitute(&self.bank(j), &self.chunks[j].poses[1], retrieval)
    }

    pub fn spec(&self, i: usize, noise_level: f64, position: i64) -> ChunkSpec {
        let c = &self.chunks[i];
        ChunkSpec { noise_level, keys: c.keys, poses: c.poses, position }
    }
}

/// Encoded training set.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub episodes: Vec<EpisodeLatents>,
}

impl Dataset {
    pub fn from_episodes(episodes: &[Episode], patch: usize) -> Result<Self> {
        let episodes = episodes.par_iter().map(|e| EpisodeLatents::encode(e, patch)).collect::<Result<Vec<_>>>()?;
        Ok(Self { episodes })
    }

    pub fn generate(data: &DataConfig, model: &ModelConfig) -> Result<Self> {
        Self::from_episodes(&data.generate()?, model.patch)
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }
}

/// Specs and latents for a clean context followed by `targets`, positioned
/// according to `mode`. Context chunks are looked up by capture index in `ep`.
pub fn context_sequence(
    ep: &EpisodeLatents,
    ctx: &ContextSet,
    targets: &[usize],
    mode: PositionMode,
) -> (Vec<ChunkSpec>, Vec<Tensor<f32>>) {
    let r = reframe(ctx);
    let mut specs = Vec::new();
    let mut latents = Vec::new();
    for &(capture, pos) in &r.chunk_positions {
        let i = capture as usize;
        let p = match mode {
            PositionMode::Reframed => pos,
            PositionMode::Absolute => capture as i64,
        };
        specs.push(ep.spec(i, 0.0, p));
        latents.push(ep.chunks[i].latent.clone());
    }
    for (o, &t) in targets.iter().enumerate() {
        let p = match mode {
            PositionMode::Reframed => r.current + o as i64,
            PositionMode::Absolute => t as i64,
        };
        specs.push(ep.spec(t, 1.0, p));
        latents.push(ep.chunks[t].latent.clone());
    }
    (specs, latents)
}
