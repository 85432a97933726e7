//! Context-forcing distillation of the causal student from a
//! memory-augmented bidirectional teacher.
//!
//! Each step the student rolls out 4 chunks after a ground-truth history,
//! each with its own reconstituted memory and a random number of denoise
//! steps. The teacher and a trainable fake-score model see the same rolled
//! out window behind the union of the student's memories minus the window;
//! the difference of their clean estimates drives the student.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EpisodeLatents};
use crate::memory::{reconstitute, ChunkRecord, ContextSet, MemoryBank, RetrievalConfig};
use crate::model::{ChunkSpec, Layout, Model, PositionMode};
use crate::optim::{OptimKind, OptimState};
use crate::rng::{self, WmRng};
use crate::sampler::{context_inputs, context_positions, Schedule};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{clean_estimate, example_loss, teacher_context, Example, GradAccum, NoisePath, WINDOW_CHUNKS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr_student: f64,
    pub lr_fake: f64,
    /// Rollouts per student update and windows per fake-score update.
    pub batch: usize,
    pub fake_updates: usize,
    /// Adam first-moment decay of both the student and fake-score optimizers.
    pub beta1: f64,
    pub clip: f64,
    pub seed: u64,
    /// Maximum history lengths and the step fractions where they begin.
    pub max_chunks: Vec<usize>,
    pub phase_starts: Vec<f64>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr_student: 1e-4,
            lr_fake: 2e-5,
            batch: 1,
            fake_updates: 5,
            beta1: 0.0,
            clip: 1.0,
            seed: 0,
            max_chunks: vec![4, 8, 16],
            phase_starts: vec![0.0, 0.4, 0.7],
        }
    }
}

impl DistillConfig {
    /// Maximum history length `m` at `step`.
    pub fn progressive_schedule(&self, step: usize) -> usize {
        let frac = step as f64 / self.steps.max(1) as f64;
        let mut m = self.max_chunks[0];
        for (&start, &len) in self.phase_starts.iter().zip(&self.max_chunks) {
            if frac >= start {
                m = len;
            }
        }
        m
    }
}

/// A student self-rollout after a ground-truth history.
#[derive(Debug, Clone)]
pub struct RolloutWindow {
    /// History is ground-truth chunks `0..=j`.
    pub j: usize,
    /// Capture indices of the rolled-out chunks.
    pub chunks: Vec<u64>,
    pub contexts: Vec<ContextSet>,
    pub steps: Vec<usize>,
    pub latents: Vec<Tensor<f32>>,
    pub specs: Vec<ChunkSpec>,
}

/// Rollout with the teacher's view of it: clean context then the window.
struct Window {
    specs: Vec<ChunkSpec>,
    clean: Vec<Tensor<f32>>,
    n_ctx: usize,
    rollout: RolloutWindow,
}

/// Student graphs of the final denoise step of each rolled-out chunk.
pub struct RolloutGraph {
    pub tapes: Vec<(Tape<f32>, Var)>,
}

/// Teacher context: union of the window's memories with the window removed,
/// in capture order.
pub fn align_context(window: &RolloutWindow) -> Vec<u64> {
    teacher_context(&window.contexts, &window.chunks)
}

/// Roll out `WINDOW_CHUNKS` chunks with `student` after ground-truth chunks
/// `0..=j` of `ep`. With `steps` given they override the random draws.
pub fn self_rollout(
    student: &Model,
    ep: &EpisodeLatents,
    j: usize,
    schedule: &Schedule,
    rng: &mut WmRng,
    steps: Option<&[usize]>,
    with_grad: bool,
) -> Result<(RolloutWindow, RolloutGraph)> {
    if j + WINDOW_CHUNKS >= ep.chunks.len() {
        return Err(Error::Config(format!("history {j} leaves no room for a rollout in {} chunks", ep.chunks.len())));
    }
    let retrieval = RetrievalConfig::new(student.cfg.temporal_memory, student.cfg.spatial_memory, ep.world_size);
    let mut bank = ep.bank(j + 1);
    let mut window = RolloutWindow {
        j,
        chunks: Vec::new(),
        contexts: Vec::new(),
        steps: Vec::new(),
        latents: Vec::new(),
        specs: Vec::new(),
    };
    let mut tapes = Vec::new();
    let (tpc, ch) = (student.cfg.tokens_per_chunk(), student.cfg.latent_channels());
    for o in 0..WINDOW_CHUNKS {
        let c = j + 1 + o;
        let s = match steps {
            Some(st) => st[o],
            None => rng.random_range(1..=schedule.len()),
        };
        let gt = &ep.chunks[c];
        let ctx = reconstitute(&bank, &gt.poses[1], &retrieval);
        let (ctx_pos, current) = context_positions(&ctx, c as u64, student.cfg.positions);
        let (ctx_specs, ctx_latents) = context_inputs(&bank, &ctx_pos)?;
        let lat = Tensor::concat_rows(&ctx_latents.iter().collect::<Vec<_>>())?;
        let cache = student.build_cache(&lat, &ctx_specs, 0)?;
        let spec = ChunkSpec { noise_level: 1.0, keys: gt.keys, poses: gt.poses, position: current };
        let mut x: Tensor<f32> = rng::normal(rng, &[tpc, ch]);
        let knots: Vec<(f64, f64)> = schedule.steps().collect();
        for &(k, next) in &knots[..s - 1] {
            let mut tape = Tape::inference();
            let xv = tape.leaf(x.clone());
            let out = student.forward_cached(&mut tape, xv, &ChunkSpec { noise_level: k, ..spec.clone() }, &cache)?;
            x = x.axpy((k - next) as f32, tape.value(out))?;
        }
        let k = knots[s - 1].0;
        let mut tape = if with_grad { Tape::new() } else { Tape::inference() };
        let xv = tape.leaf(x);
        let v = student.forward_cached(&mut tape, xv, &ChunkSpec { noise_level: k, ..spec.clone() }, &cache)?;
        let kv = tape.scale(v, k as f32);
        let z0 = tape.add(xv, kv)?;
        let latent = tape.value(z0).clone();
        bank.push(ChunkRecord { capture_index: c as u64, latent: latent.clone(), poses: gt.poses, keys: gt.keys })?;
        window.chunks.push(c as u64);
        window.contexts.push(ctx);
        window.steps.push(s);
        window.latents.push(latent);
        window.specs.push(ChunkSpec { noise_level: 0.0, ..spec });
        tapes.push((tape, z0));
    }
    Ok((window, RolloutGraph { tapes }))
}

/// Sequence of clean ground-truth context `ctx` followed by `window`
/// latents, with positions per `mode`.
pub fn teacher_sequence(
    ep: &EpisodeLatents,
    ctx: &[u64],
    window: &RolloutWindow,
    mode: PositionMode,
) -> (Vec<ChunkSpec>, Vec<Tensor<f32>>) {
    let mut specs = Vec::new();
    let mut latents = Vec::new();
    for (p, &c) in ctx.iter().enumerate() {
        let pos = if mode == PositionMode::Absolute { c as i64 } else { p as i64 };
        specs.push(ep.spec(c as usize, 0.0, pos));
        latents.push(ep.chunks[c as usize].latent.clone());
    }
    for (o, (s, lat)) in window.specs.iter().zip(&window.latents).enumerate() {
        let pos = if mode == PositionMode::Absolute { window.chunks[o] as i64 } else { (ctx.len() + o) as i64 };
        specs.push(ChunkSpec { position: pos, ..s.clone() });
        latents.push(lat.clone());
    }
    (specs, latents)
}

/// Velocity of `model` on the noised window behind clean context.
fn window_velocity(model: &Model, specs: &[ChunkSpec], inputs: &Tensor<f32>, n_ctx: usize, k: f64) -> Result<Tensor<f32>> {
    let mut specs = specs.to_vec();
    for s in specs.iter_mut().skip(n_ctx) {
        s.noise_level = k;
    }
    let mut tape = Tape::inference();
    let x = tape.leaf(inputs.clone());
    let out = model.forward(&mut tape, x, &specs, Layout::Window { context: n_ctx })?;
    let tpc = model.cfg.tokens_per_chunk();
    tape.value(out).slice_rows(n_ctx * tpc, (specs.len() - n_ctx) * tpc)
}

/// DMD direction on the window: `(ẑ0_fake − ẑ0_real) / mean|x − ẑ0_real|`.
pub fn dmd_direction(
    real: &Model,
    fake: &Model,
    specs: &[ChunkSpec],
    clean: &[Tensor<f32>],
    n_ctx: usize,
    k: f64,
    rng: &mut WmRng,
) -> Result<Tensor<f32>> {
    let window = Tensor::concat_rows(&clean[n_ctx..].iter().collect::<Vec<_>>())?;
    let path = NoisePath::sample(window.clone(), k, rng);
    let zk = path.zk();
    let mut parts: Vec<&Tensor<f32>> = clean[..n_ctx].iter().collect();
    parts.push(&zk);
    let inputs = Tensor::concat_rows(&parts)?;
    let z0_real = clean_estimate(&zk, &window_velocity(real, specs, &inputs, n_ctx, k)?, k)?;
    let z0_fake = clean_estimate(&zk, &window_velocity(fake, specs, &inputs, n_ctx, k)?, k)?;
    let norm = window.sub(&z0_real)?.data().iter().map(|v| v.abs() as f64).sum::<f64>() / window.numel() as f64;
    Ok(z0_fake.sub(&z0_real)?.scale((1.0 / norm.max(1e-6)) as f32))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub step: usize,
    pub m: usize,
    pub j: usize,
    pub s: Vec<usize>,
    pub k: f64,
    pub grad_norm: f64,
    pub fake_loss: f64,
}

pub struct DistillState {
    pub student: Model,
    pub fake: Model,
    pub real: Model,
    pub cfg: DistillConfig,
    pub schedule: Schedule,
    pub opt_student: OptimState<f32>,
    pub opt_fake: OptimState<f32>,
    pub step: usize,
    rng: WmRng,
}

impl DistillState {
    /// The fake-score model starts as a copy of the frozen teacher.
    pub fn new(student: Model, teacher: Model, cfg: DistillConfig) -> Result<Self> {
        let schedule = Schedule::uniform(student.cfg.student_steps)?;
        let fake = teacher.clone();
        let kind = OptimKind::Adam { beta1: cfg.beta1, beta2: 0.999, eps: 1e-8 };
        let opt_student = OptimState::new(kind, cfg.lr_student);
        let opt_fake = OptimState::new(kind, cfg.lr_fake);
        let rng = rng::stream(cfg.seed, 0xd15);
        Ok(Self { student, fake, real: teacher, cfg, schedule, opt_student, opt_fake, step: 0, rng })
    }

    /// Episodes long enough for a history of at least one chunk plus a window.
    fn pick(&mut self, ds: &Dataset, m: usize) -> Result<(usize, usize)> {
        let usable: Vec<usize> = (0..ds.len()).filter(|&e| ds.episodes[e].chunks.len() > WINDOW_CHUNKS + 1).collect();
        if usable.is_empty() {
            return Err(Error::Config("no episode is long enough to distill on".into()));
        }
        let e = usable[self.rng.random_range(0..usable.len())];
        let max_j = m.min(ds.episodes[e].chunks.len() - WINDOW_CHUNKS - 1);
        Ok((e, self.rng.random_range(0..=max_j)))
    }

    /// Student-sampled window behind its aligned teacher context.
    fn sample_window(&mut self, ds: &Dataset, m: usize, with_grad: bool) -> Result<(Window, RolloutGraph)> {
        let (e, j) = self.pick(ds, m)?;
        let ep = &ds.episodes[e];
        let (rollout, graph) = self_rollout(&self.student, ep, j, &self.schedule, &mut self.rng, None, with_grad)?;
        let ctx = align_context(&rollout);
        let (specs, clean) = teacher_sequence(ep, &ctx, &rollout, self.student.cfg.positions);
        Ok((Window { specs, clean, n_ctx: ctx.len(), rollout }, graph))
    }

    /// One student update over `batch` rollouts, then `fake_updates`
    /// fake-score updates over `batch` windows each, all but the first on
    /// fresh rollouts. The log carries the first rollout's draws.
    pub fn dmd_step(&mut self, ds: &Dataset) -> Result<DistillLog> {
        let m = self.cfg.progressive_schedule(self.step);
        let b = self.cfg.batch.max(1);
        let tpc = self.student.cfg.tokens_per_chunk();
        let mut acc = GradAccum::default();
        let mut windows = Vec::with_capacity(b);
        let (mut grad_norm, mut first_k) = (0.0, 0.0);
        for i in 0..b {
            let (w, graph) = self.sample_window(ds, m, true)?;
            let k = self.rng.random_range(0.02..0.98);
            let dir = dmd_direction(&self.real, &self.fake, &w.specs, &w.clean, w.n_ctx, k, &mut self.rng)?;
            grad_norm += (dir.sq_norm() as f64).sqrt() / b as f64;
            add_student_grads(&mut acc, graph, &dir, tpc, 1.0 / b as f32)?;
            if i == 0 {
                first_k = k;
            }
            windows.push(w);
        }
        self.opt_student.step(&mut self.student.params, &acc.finish(self.cfg.clip))?;

        let (j, s) = (windows[0].rollout.j, windows[0].rollout.steps.clone());
        let mut fake_loss = self.fake_step(&windows)?;
        for _ in 1..self.cfg.fake_updates.max(1) {
            let fresh = (0..b).map(|_| self.sample_window(ds, m, false).map(|(w, _)| w)).collect::<Result<Vec<_>>>()?;
            fake_loss += self.fake_step(&fresh)?;
        }
        self.step += 1;
        Ok(DistillLog { step: self.step, m, j, s, k: first_k, grad_norm, fake_loss: fake_loss / self.cfg.fake_updates.max(1) as f64 })
    }

    /// One flow-matching update of the fake-score model on student windows;
    /// returns the mean loss.
    fn fake_step(&mut self, windows: &[Window]) -> Result<f64> {
        let mut acc = GradAccum::default();
        let mut total = 0.0;
        let scale = 1.0 / windows.len() as f32;
        for w in windows {
            let k = self.rng.random_range(0.0..1.0);
            let ex = Example {
                specs: w.specs.clone(),
                clean: w.clean.clone(),
                layout: Layout::Window { context: w.n_ctx },
                first_target: w.n_ctx,
            };
            let levels = vec![k; w.specs.len() - w.n_ctx];
            let (loss, grads) = example_loss(&self.fake, &ex, &levels, &mut self.rng)?;
            acc.add(&grads, scale)?;
            total += loss;
        }
        self.opt_fake.step(&mut self.fake.params, &acc.finish(self.cfg.clip))?;
        Ok(total / windows.len() as f64)
    }

    pub fn run(&mut self, ds: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Vec<DistillLog>> {
        let mut out = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let line = self.dmd_step(ds)?;
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &line)?;
                w.write_all(b"\n")?;
            }
            out.push(line);
        }
        Ok(out)
    }
}

/// Add `scale` times the student gradients of the surrogate
/// `mse(x, sg(x − dir))` over the window.
pub fn add_student_grads(acc: &mut GradAccum, graph: RolloutGraph, dir: &Tensor<f32>, tpc: usize, scale: f32) -> Result<()> {
    for (o, (mut tape, z0)) in graph.tapes.into_iter().enumerate() {
        let target = tape.value(z0).sub(&dir.slice_rows(o * tpc, tpc)?)?;
        let t = tape.leaf(target);
        let loss = tape.mse(z0, t)?;
        acc.add(&tape.backward(loss)?, scale)?;
    }
    Ok(())
}

/// Replay the memory retrieval of a rollout from its recorded latents.
pub fn replay_contexts(ep: &EpisodeLatents, window: &RolloutWindow, retrieval: &RetrievalConfig) -> Result<Vec<ContextSet>> {
    let mut bank: MemoryBank = ep.bank(window.j + 1);
    let mut out = Vec::new();
    for (o, &c) in window.chunks.iter().enumerate() {
        let gt = &ep.chunks[c as usize];
        out.push(reconstitute(&bank, &gt.poses[1], retrieval));
        bank.push(ChunkRecord { capture_index: c, latent: window.latents[o].clone(), poses: gt.poses, keys: gt.keys })?;
    }
    Ok(out)
}
