//! Chunk-wise autoregressive flow-matching transformer.
//!
//! Each chunk is 4 latent frames. Chunks carry their own noise level, keys
//! and per-frame poses; the per-chunk conditioning vector drives adaLN
//! modulation in every block.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{chunk_frustums, dual_attention, FrustumTokens, KeyEncoder, TokenGeometry};
use crate::params::{hex, ParamStore};
use crate::rng::{self, WmRng};
use crate::tape::{AttnMask, RopeTable, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::world::{CameraPose, DiscreteAction, CHUNK_FRAMES};
use crate::{Error, Result};

/// How memory chunks are numbered for rotary encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Consecutive indices ending next to the current chunk.
    #[default]
    Reframed,
    /// Capture-time chunk indices.
    Absolute,
}

impl PositionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reframed" => Some(Self::Reframed),
            "absolute" => Some(Self::Absolute),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    pub frame_width: u32,
    pub frame_height: u32,
    pub mlp_ratio: usize,
    pub time_features: usize,
    pub rope_base: f64,
    pub teacher_steps: usize,
    pub student_steps: usize,
    pub temporal_memory: usize,
    pub spatial_memory: usize,
    pub use_keys: bool,
    pub use_poses: bool,
    pub positions: PositionMode,
    /// World units to attention units for pose translations.
    pub pose_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            heads: 4,
            blocks: 6,
            patch: 8,
            frame_width: 64,
            frame_height: 64,
            mlp_ratio: 4,
            time_features: 64,
            rope_base: 10000.0,
            teacher_steps: 20,
            student_steps: 4,
            temporal_memory: 3,
            spatial_memory: 1,
            use_keys: true,
            use_poses: true,
            positions: PositionMode::Reframed,
            pose_scale: 0.25,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced geometry used by tests and quick runs on a single CPU core.
    /// The model width exceeds the latent channel count so the noise
    /// component of the velocity can pass through the residual stream.
    pub fn desk_test() -> Self {
        Self { dim: 64, blocks: 3, patch: 4, frame_width: 16, frame_height: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.dim % self.heads != 0 {
            return err(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.head_dim() % 8 != 0 {
            return err(format!("head dim {} must be a multiple of 8", self.head_dim()));
        }
        if self.patch == 0 || self.frame_width as usize % self.patch != 0 || self.frame_height as usize % self.patch != 0 {
            return err(format!("{}×{} frames not divisible by patch {}", self.frame_width, self.frame_height, self.patch));
        }
        if self.time_features == 0 || self.time_features % 2 != 0 {
            return err("time features must be even and positive".into());
        }
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return err("blocks and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.frame_width as usize / self.patch, self.frame_height as usize / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (w, h) = self.grid();
        w * h
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.tokens_per_frame() * CHUNK_FRAMES
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

/// Non-tensor description of one chunk in a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSpec {
    pub noise_level: f64,
    pub keys: DiscreteAction,
    pub poses: [CameraPose; CHUNK_FRAMES],
    /// Chunk index used for rotary encoding.
    pub position: i64,
}

/// Attention pattern over the chunks of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Chunk `i` sees chunks `≤ i`.
    Causal,
    /// The first `context` chunks are block-causal among themselves; the
    /// remaining chunks see all context and each other.
    Window { context: usize },
}

impl Layout {
    pub fn allows(self, query_chunk: usize, key_chunk: usize) -> bool {
        match self {
            Layout::Causal => key_chunk <= query_chunk,
            Layout::Window { context } => {
                if query_chunk < context {
                    key_chunk <= query_chunk
                } else {
                    true
                }
            }
        }
    }
}

/// Token-level mask for `n_chunks` chunks of `tokens_per_chunk` tokens.
pub fn chunk_mask(n_chunks: usize, tokens_per_chunk: usize, layout: Layout) -> Result<AttnMask> {
    let n = n_chunks * tokens_per_chunk;
    AttnMask::from_fn(n, n, |q, k| layout.allows(q / tokens_per_chunk, k / tokens_per_chunk))
}

/// Block-causal mask with `ctx_chunks` clean context chunks ahead of
/// `n_chunks` generated chunks.
pub fn block_causal_mask(n_chunks: usize, ctx_chunks: usize, tokens_per_chunk: usize) -> Result<AttnMask> {
    chunk_mask(n_chunks + ctx_chunks, tokens_per_chunk, Layout::Causal)
}

#[derive(Debug, Clone)]
struct BlockIds {
    mod_w: usize,
    mod_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    o_w: usize,
    o_b: usize,
    mlp_w1: usize,
    mlp_b1: usize,
    mlp_w2: usize,
    mlp_b2: usize,
    gate: usize,
}

#[derive(Debug, Clone)]
struct ParamIds {
    in_w: usize,
    in_b: usize,
    t_w1: usize,
    t_b1: usize,
    t_w2: usize,
    t_b2: usize,
    keys: KeyEncoder,
    blocks: Vec<BlockIds>,
    fmod_w: usize,
    fmod_b: usize,
    out_w: usize,
    out_b: usize,
}

fn linear<T: Scalar>(store: &mut ParamStore<T>, rng: &mut WmRng, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> (usize, usize) {
    let w = store.add(format!("{name}.w"), rng::normal_scaled(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt()));
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    (w, b)
}

/// Cached per-layer keys and values of a clean context.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar> {
    pub tag: u64,
    layers: Vec<(Tensor<T>, Tensor<T>)>,
    specs: Vec<ChunkSpec>,
}

impl<T: Scalar> KvCache<T> {
    pub fn empty(tag: u64) -> Self {
        Self { tag, layers: Vec::new(), specs: Vec::new() }
    }

    pub fn n_chunks(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[ChunkSpec] {
        &self.specs
    }

    pub fn layer(&self, i: usize) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.layers.get(i)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    ids: ParamIds,
    /// Drop the conditioning vector (diagnostics only).
    pub zero_condition: bool,
}

struct Geometry {
    geom: TokenGeometry,
    token_chunk: Arc<[usize]>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.init_seed, 0x1417);
        let mut store = ParamStore::new();
        let (d, c) = (cfg.dim, cfg.latent_channels());
        let (in_w, in_b) = linear(&mut store, &mut rng, "in", c, d, 1.0);
        let (t_w1, t_b1) = linear(&mut store, &mut rng, "time.0", cfg.time_features, d, 1.0);
        let (t_w2, t_b2) = linear(&mut store, &mut rng, "time.1", d, d, 1.0);
        let keys = KeyEncoder::init(&mut store, d, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("block{b}");
            let (mod_w, mod_b) = linear(&mut store, &mut rng, &format!("{p}.mod"), d, 6 * d, 0.1);
            let (qkv_w, qkv_b) = linear(&mut store, &mut rng, &format!("{p}.qkv"), d, 3 * d, 1.0);
            let (o_w, o_b) = linear(&mut store, &mut rng, &format!("{p}.out"), d, d, 0.5);
            let hidden = cfg.mlp_ratio * d;
            let (mlp_w1, mlp_b1) = linear(&mut store, &mut rng, &format!("{p}.mlp.0"), d, hidden, 1.0);
            let (mlp_w2, mlp_b2) = linear(&mut store, &mut rng, &format!("{p}.mlp.1"), hidden, d, 0.5);
            let gate = store.add(format!("{p}.pose_gate"), Tensor::zeros(&[1]));
            blocks.push(BlockIds { mod_w, mod_b, qkv_w, qkv_b, o_w, o_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2, gate });
        }
        let (fmod_w, fmod_b) = linear(&mut store, &mut rng, "final.mod", d, 2 * d, 0.1);
        let (out_w, out_b) = linear(&mut store, &mut rng, "final.out", d, c, 0.1);
        let ids = ParamIds { in_w, in_b, t_w1, t_b1, t_w2, t_b2, keys, blocks, fmod_w, fmod_b, out_w, out_b };
        Ok(Self { cfg, params: store, ids, zero_condition: false })
    }

    /// Same architecture with the given parameters (matched by name).
    pub fn with_params(cfg: ModelConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        let loaded = model.params.load_from(params)?;
        if loaded != model.params.len() {
            return Err(Error::Checkpoint(format!("loaded {loaded} of {} parameters", model.params.len())));
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { cfg: self.cfg.clone(), params: self.params.cast(), ids: self.ids.clone(), zero_condition: self.zero_condition }
    }

    /// Ids of the per-block pose gates.
    pub fn gate_ids(&self) -> Vec<usize> {
        self.ids.blocks.iter().map(|b| b.gate).collect()
    }

    /// Sinusoidal features of `k·1000`, one row per chunk.
    fn time_features(&self, levels: &[f64]) -> Tensor<T> {
        let f = self.cfg.time_features;
        let half = f / 2;
        let mut out = Tensor::zeros(&[levels.len(), f]);
        for (r, &k) in levels.iter().enumerate() {
            for j in 0..half {
                let freq = (-(10000f64.ln()) * j as f64 / half as f64).exp();
                let a = k * 1000.0 * freq;
                out.data_mut()[r * f + j] = T::from_f64c(a.sin());
                out.data_mut()[r * f + half + j] = T::from_f64c(a.cos());
            }
        }
        out
    }

    fn dense(&self, tape: &mut Tape<T>, x: Var, w: usize, b: usize) -> Result<Var> {
        let wv = self.params.var(tape, w);
        let bv = self.params.var(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    /// Per-chunk conditioning: noise-level embedding plus key embedding.
    pub fn condition(&self, tape: &mut Tape<T>, specs: &[ChunkSpec]) -> Result<Var> {
        let levels: Vec<f64> = specs.iter().map(|s| s.noise_level).collect();
        let feats = tape.leaf(self.time_features(&levels));
        let h = self.dense(tape, feats, self.ids.t_w1, self.ids.t_b1)?;
        let h = tape.silu(h);
        let t_emb = self.dense(tape, h, self.ids.t_w2, self.ids.t_b2)?;
        let c = if self.cfg.use_keys {
            let keys: Vec<DiscreteAction> = specs.iter().map(|s| s.keys).collect();
            self.ids.keys.embed(tape, &self.params, &keys, t_emb)?
        } else {
            t_emb
        };
        if self.zero_condition {
            Ok(tape.scale(c, T::zero()))
        } else {
            Ok(c)
        }
    }

    fn geometry(&self, specs: &[ChunkSpec]) -> Result<Geometry> {
        let (gw, gh) = self.cfg.grid();
        let tpf = gw * gh;
        let pairs = self.cfg.head_dim() / 2;
        let groups = [pairs / 2, pairs / 4, pairs / 4];
        let mut positions = Vec::with_capacity(specs.len() * tpf * CHUNK_FRAMES);
        let mut token_chunk = Vec::with_capacity(positions.capacity());
        let mut frustums = Vec::new();
        for (ci, spec) in specs.iter().enumerate() {
            for f in 0..CHUNK_FRAMES {
                let t = spec.position * CHUNK_FRAMES as i64 + f as i64;
                for y in 0..gh {
                    for x in 0..gw {
                        positions.push([t, y as i64, x as i64]);
                        token_chunk.push(ci);
                    }
                }
            }
            if self.cfg.use_poses {
                frustums.extend(chunk_frustums(&spec.poses, tpf, self.cfg.pose_scale)?);
            }
        }
        let rope = Arc::new(RopeTable::from_axes(&positions, &groups, self.cfg.rope_base));
        let frustums = self.cfg.use_poses.then(|| FrustumTokens::new(&frustums));
        Ok(Geometry { geom: TokenGeometry { rope, frustums }, token_chunk: token_chunk.into() })
    }

    /// Run the blocks for query tokens `x` (already embedded). `prefix`
    /// supplies cached keys/values that precede the queries; `record`
    /// collects this pass's raw keys/values per layer.
    #[allow(clippy::too_many_arguments)]
    fn trunk(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        cond: Var,
        query: &Geometry,
        key_geom: &TokenGeometry,
        mask: &AttnMask,
        prefix: Option<&KvCache<T>>,
        mut record: Option<&mut Vec<(Tensor<T>, Tensor<T>)>>,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        let heads = self.cfg.heads;
        let sc = tape.silu(cond);
        for (li, b) in self.ids.blocks.iter().enumerate() {
            let m = self.dense(tape, sc, b.mod_w, b.mod_b)?;
            let m = tape.gather_rows(m, query.token_chunk.clone())?;
            let part = |tape: &mut Tape<T>, i: usize| tape.slice_cols(m, i * d, d);
            let (shift1, scale1, gate1) = (part(tape, 0)?, part(tape, 1)?, part(tape, 2)?);
            let (shift2, scale2, gate2) = (part(tape, 3)?, part(tape, 4)?, part(tape, 5)?);

            let h = modulate(tape, x, shift1, scale1)?;
            let qkv = self.dense(tape, h, b.qkv_w, b.qkv_b)?;
            let q = tape.slice_cols(qkv, 0, d)?;
            let mut k = tape.slice_cols(qkv, d, d)?;
            let mut v = tape.slice_cols(qkv, 2 * d, d)?;
            if let Some(rec) = record.as_deref_mut() {
                rec.push((tape.value(k).clone(), tape.value(v).clone()));
            }
            if let Some(cache) = prefix.filter(|c| c.n_chunks() > 0) {
                let (ck, cv) = &cache.layers[li];
                let ck = tape.leaf(ck.clone());
                let cv = tape.leaf(cv.clone());
                k = tape.concat_rows(&[ck, k])?;
                v = tape.concat_rows(&[cv, v])?;
            }
            let gate = self.cfg.use_poses.then(|| self.params.var(tape, b.gate));
            let a = dual_attention(tape, q, k, v, &query.geom, key_geom, mask, heads, gate)?;
            let a = self.dense(tape, a, b.o_w, b.o_b)?;
            x = gated_residual(tape, x, a, gate1)?;

            let h = modulate(tape, x, shift2, scale2)?;
            let h = self.dense(tape, h, b.mlp_w1, b.mlp_b1)?;
            let h = tape.gelu(h);
            let h = self.dense(tape, h, b.mlp_w2, b.mlp_b2)?;
            x = gated_residual(tape, x, h, gate2)?;
        }
        let fm = self.dense(tape, sc, self.ids.fmod_w, self.ids.fmod_b)?;
        let fm = tape.gather_rows(fm, query.token_chunk.clone())?;
        let shift = tape.slice_cols(fm, 0, d)?;
        let scale = tape.slice_cols(fm, d, d)?;
        let h = modulate(tape, x, shift, scale)?;
        self.dense(tape, h, self.ids.out_w, self.ids.out_b)
    }

    fn check_latent(&self, tape: &Tape<T>, x: Var, n_chunks: usize) -> Result<()> {
        let expect = [n_chunks * self.cfg.tokens_per_chunk(), self.cfg.latent_channels()];
        if tape.shape(x) != expect {
            return Err(Error::Shape(format!("latent {:?}, expected {:?}", tape.shape(x), expect)));
        }
        Ok(())
    }

    /// Velocity prediction for every token of a chunk sequence.
    /// `x: [n_chunks·tokens_per_chunk × channels]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, specs: &[ChunkSpec], layout: Layout) -> Result<Var> {
        self.check_latent(tape, x, specs.len())?;
        let geo = self.geometry(specs)?;
        let mask = chunk_mask(specs.len(), self.cfg.tokens_per_chunk(), layout)?;
        let cond = self.condition(tape, specs)?;
        let h = self.dense(tape, x, self.ids.in_w, self.ids.in_b)?;
        self.trunk(tape, h, cond, &geo, &geo.geom, &mask, None, None)
    }

    /// Encode clean context chunks once into per-layer keys and values.
    pub fn build_cache(&self, latents: &Tensor<T>, specs: &[ChunkSpec], tag: u64) -> Result<KvCache<T>> {
        if specs.is_empty() {
            return Ok(KvCache::empty(tag));
        }
        if specs.iter().any(|s| s.noise_level != 0.0) {
            return Err(Error::Config("cached context must be clean (noise level 0)".into()));
        }
        let mut tape = Tape::inference();
        let x = tape.leaf(latents.clone());
        self.check_latent(&tape, x, specs.len())?;
        let geo = self.geometry(specs)?;
        let mask = chunk_mask(specs.len(), self.cfg.tokens_per_chunk(), Layout::Causal)?;
        let cond = self.condition(&mut tape, specs)?;
        let h = self.dense(&mut tape, x, self.ids.in_w, self.ids.in_b)?;
        let mut layers = Vec::with_capacity(self.cfg.blocks);
        self.trunk(&mut tape, h, cond, &geo, &geo.geom, &mask, None, Some(&mut layers))?;
        Ok(KvCache { tag, layers, specs: specs.to_vec() })
    }

    /// Velocity for one chunk attending to a cached context and itself.
    pub fn forward_cached(&self, tape: &mut Tape<T>, x: Var, spec: &ChunkSpec, cache: &KvCache<T>) -> Result<Var> {
        self.check_latent(tape, x, 1)?;
        let query = self.geometry(std::slice::from_ref(spec))?;
        let tpc = self.cfg.tokens_per_chunk();
        let key_geom = if cache.n_chunks() == 0 {
            query.geom.clone()
        } else {
            let mut all = cache.specs.clone();
            all.push(spec.clone());
            self.geometry(&all)?.geom
        };
        let mask = AttnMask::full(tpc, tpc * (cache.n_chunks() + 1));
        let cond = self.condition(tape, std::slice::from_ref(spec))?;
        let h = self.dense(tape, x, self.ids.in_w, self.ids.in_b)?;
        self.trunk(tape, h, cond, &query, &key_geom, &mask, Some(cache), None)
    }
}

/// `LN(x)·(1 + scale) + shift`.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = tape.layer_norm(x)?;
    let s = tape.add_scalar(scale, T::one());
    let y = tape.mul(n, s)?;
    tape.add(y, shift)
}

/// `x + branch·(1 + gate)`.
fn gated_residual<T: Scalar>(tape: &mut Tape<T>, x: Var, branch: Var, gate: Var) -> Result<Var> {
    let g = tape.add_scalar(gate, T::one());
    let y = tape.mul(branch, g)?;
    tape.add(x, y)
}
