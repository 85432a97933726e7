//! Streaming chunk generation: memory reconstitution, KV caching, Euler
//! denoising and progressive frame emission.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::mpsc::{sync_channel, Receiver, SyncSender};

use crate::latent::unpatchify;
use crate::memory::{reconstitute, reframe, ChunkRecord, ContextSet, MemoryBank, RetrievalConfig};
use crate::model::{ChunkSpec, KvCache, Layout, Model, PositionMode};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::world::{CameraPose, DiscreteAction, Frame, CHUNK_FRAMES};
use crate::{Error, Result};

pub const FRAME_QUEUE_CAPACITY: usize = 16;

/// Strictly decreasing noise levels in `(0, 1]`; integration ends at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule(Vec<f64>);

impl Schedule {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.is_empty() {
            return Err(Error::EmptySchedule);
        }
        if knots.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::BadSchedule(format!("knots outside (0, 1]: {knots:?}")));
        }
        if knots.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::BadSchedule(format!("knots not strictly decreasing: {knots:?}")));
        }
        Ok(Self(knots))
    }

    /// `{1, 1 − 1/n, …, 1/n}`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| 1.0 - i as f64 / n as f64).collect())
    }

    pub fn knots(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `(k_s, k_{s+1})` pairs with a final 0.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.0.iter().enumerate().map(|(i, &k)| (k, self.0.get(i + 1).copied().unwrap_or(0.0)))
    }

    /// First `s` knots (a partial denoise).
    pub fn truncated(&self, s: usize) -> Self {
        Self(self.0[..s.clamp(1, self.0.len())].to_vec())
    }
}

/// Euler integration from `x` at the first knot down to 0.
pub fn denoise_with(
    mut x: Tensor<f32>,
    schedule: &Schedule,
    mut velocity: impl FnMut(&Tensor<f32>, f64) -> Result<Tensor<f32>>,
) -> Result<Tensor<f32>> {
    for (k, next) in schedule.steps() {
        let v = velocity(&x, k)?;
        x = x.axpy((k - next) as f32, &v)?;
    }
    Ok(x)
}

/// Keys and poses commanded for one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub frame_keys: [DiscreteAction; CHUNK_FRAMES],
    pub poses: [CameraPose; CHUNK_FRAMES],
}

impl ActionChunk {
    pub fn keys(&self) -> DiscreteAction {
        crate::action::chunk_keys(&self.frame_keys)
    }
}

/// Chunk positions for a context and the current chunk.
pub fn context_positions(ctx: &ContextSet, current_capture: u64, mode: PositionMode) -> (Vec<(u64, i64)>, i64) {
    let r = reframe(ctx);
    match mode {
        PositionMode::Reframed => (r.chunk_positions, r.current),
        PositionMode::Absolute => {
            (r.chunk_positions.iter().map(|&(c, _)| (c, c as i64)).collect(), current_capture as i64)
        }
    }
}

/// Context specs and latents, in capture order.
pub fn context_inputs(bank: &MemoryBank, positions: &[(u64, i64)]) -> Result<(Vec<ChunkSpec>, Vec<Tensor<f32>>)> {
    let mut specs = Vec::with_capacity(positions.len());
    let mut latents = Vec::with_capacity(positions.len());
    for &(capture, pos) in positions {
        let r = bank.get(capture).ok_or_else(|| Error::Config(format!("chunk {capture} not in memory")))?;
        specs.push(ChunkSpec { noise_level: 0.0, keys: r.keys, poses: r.poses, position: pos });
        latents.push(r.latent.clone());
    }
    Ok((specs, latents))
}

/// Everything produced for one generated chunk.
#[derive(Debug, Clone)]
pub struct ChunkOutput {
    pub capture_index: u64,
    pub latent: Tensor<f32>,
    pub context: ContextSet,
    pub positions: Vec<i64>,
    pub cache_rebuilt: bool,
}

/// Per-session autoregressive generator.
pub struct Generator<'m> {
    pub model: &'m Model,
    pub bank: MemoryBank,
    pub retrieval: RetrievalConfig,
    pub schedule: Schedule,
    pub use_cache: bool,
    noise_seed: u64,
    cache: Option<KvCache<f32>>,
}

impl<'m> Generator<'m> {
    pub fn new(model: &'m Model, world_size: usize, schedule: Schedule, noise_seed: u64) -> Self {
        let retrieval = RetrievalConfig::new(model.cfg.temporal_memory, model.cfg.spatial_memory, world_size);
        Self { model, bank: MemoryBank::new(), retrieval, schedule, use_cache: true, noise_seed, cache: None }
    }

    /// Commit a chunk that was not generated (the ground-truth first chunk).
    pub fn commit(&mut self, latent: Tensor<f32>, action: &ActionChunk) -> Result<u64> {
        let capture_index = self.bank.next_capture_index();
        self.bank.push(ChunkRecord { capture_index, latent, poses: action.poses, keys: action.keys() })?;
        Ok(capture_index)
    }

    /// Initial noise for a chunk, a pure function of `(noise_seed, capture)`.
    pub fn noise(&self, capture_index: u64) -> Tensor<f32> {
        let cfg = &self.model.cfg;
        rng::normal(&mut rng::stream(self.noise_seed, capture_index), &[cfg.tokens_per_chunk(), cfg.latent_channels()])
    }

    pub fn cache_tag(ctx: &ContextSet, positions: &[(u64, i64)]) -> u64 {
        let mut h = DefaultHasher::new();
        ctx.ordered().hash(&mut h);
        positions.hash(&mut h);
        h.finish()
    }

    /// Generate, commit and return the next chunk.
    pub fn step(&mut self, action: &ActionChunk) -> Result<ChunkOutput> {
        let capture_index = self.bank.next_capture_index();
        let ctx = reconstitute(&self.bank, &action.poses[1], &self.retrieval);
        let (ctx_pos, current) = context_positions(&ctx, capture_index, self.model.cfg.positions);
        let (ctx_specs, ctx_latents) = context_inputs(&self.bank, &ctx_pos)?;
        let spec = ChunkSpec { noise_level: 1.0, keys: action.keys(), poses: action.poses, position: current };
        let x = self.noise(capture_index);
        let tag = Self::cache_tag(&ctx, &ctx_pos);
        let mut cache_rebuilt = false;
        let latent = if self.use_cache {
            if self.cache.as_ref().is_none_or(|c| c.tag != tag) {
                let lat = if ctx_latents.is_empty() {
                    Tensor::zeros(&[0, self.model.cfg.latent_channels()])
                } else {
                    Tensor::concat_rows(&ctx_latents.iter().collect::<Vec<_>>())?
                };
                self.cache = Some(self.model.build_cache(&lat, &ctx_specs, tag)?);
                cache_rebuilt = true;
            }
            let cache = self.cache.as_ref().expect("cache built");
            denoise_with(x, &self.schedule, |x, k| {
                let mut tape = Tape::inference();
                let xv = tape.leaf(x.clone());
                let s = ChunkSpec { noise_level: k, ..spec.clone() };
                let out = self.model.forward_cached(&mut tape, xv, &s, cache)?;
                Ok(tape.value(out).clone())
            })?
        } else {
            let tpc = self.model.cfg.tokens_per_chunk();
            let n_ctx = ctx_specs.len();
            denoise_with(x, &self.schedule, |x, k| {
                let mut parts: Vec<&Tensor<f32>> = ctx_latents.iter().collect();
                parts.push(x);
                let all = Tensor::concat_rows(&parts)?;
                let mut specs = ctx_specs.clone();
                specs.push(ChunkSpec { noise_level: k, ..spec.clone() });
                let mut tape = Tape::inference();
                let xv = tape.leaf(all);
                let out = self.model.forward(&mut tape, xv, &specs, Layout::Causal)?;
                tape.value(out).slice_rows(n_ctx * tpc, tpc)
            })?
        };
        self.commit(latent.clone(), action)?;
        Ok(ChunkOutput {
            capture_index,
            latent,
            positions: ctx_pos.iter().map(|p| p.1).chain([current]).collect(),
            context: ctx,
            cache_rebuilt,
        })
    }

    /// Number of chunks resident in the current cache.
    pub fn cached_chunks(&self) -> usize {
        self.cache.as_ref().map_or(0, |c| c.n_chunks())
    }
}

/// Emit a chunk's frames one at a time, in order, as each is decoded.
pub fn progressive_decode(latent: &Tensor<f32>, width: u32, height: u32, patch: usize, mut emit: impl FnMut(usize, Frame) -> Result<()>) -> Result<()> {
    let (n, _) = latent.dims2()?;
    let per = n / CHUNK_FRAMES;
    for f in 0..CHUNK_FRAMES {
        emit(f, unpatchify(&latent.slice_rows(f * per, per)?, width, height, patch)?)?;
    }
    Ok(())
}

/// Bounded ordered frame queue; the producer blocks while it is full.
pub fn frame_queue() -> (SyncSender<(u64, Frame)>, Receiver<(u64, Frame)>) {
    sync_channel(FRAME_QUEUE_CAPACITY)
}
