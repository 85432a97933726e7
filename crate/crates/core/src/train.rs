//! Flow-matching training for the action, memory and teacher stages.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{context_sequence, Dataset, EpisodeLatents};
use crate::memory::{ContextSet, RetrievalConfig};
use crate::model::{ChunkSpec, Layout, Model};
use crate::optim::{OptimKind, OptimState};
use crate::rng::{self, WmRng};
use crate::tape::{Grads, Tape};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const WINDOW_CHUNKS: usize = 4;

/// Linear path `z_k = (1−k)·z0 + k·z1` with velocity `v = z0 − z1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath<T> {
    pub z0: Tensor<T>,
    pub z1: Tensor<T>,
    pub k: f64,
}

impl<T: Scalar> NoisePath<T> {
    pub fn sample(z0: Tensor<T>, k: f64, rng: &mut WmRng) -> Self {
        let z1 = rng::normal(rng, z0.shape());
        Self { z0, z1, k }
    }

    pub fn zk(&self) -> Tensor<T> {
        let k = T::from_f64c(self.k);
        self.z0.zip_with(&self.z1, |a, b| (T::one() - k) * a + k * b).expect("same shape")
    }

    pub fn velocity(&self) -> Tensor<T> {
        self.z0.sub(&self.z1).expect("same shape")
    }
}

/// Clean estimate `ẑ0 = z_k + k·v̂`.
pub fn clean_estimate<T: Scalar>(zk: &Tensor<T>, v: &Tensor<T>, k: f64) -> Result<Tensor<T>> {
    zk.axpy(T::from_f64c(k), v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// 4-chunk windows, full attention, one shared noise level.
    #[serde(rename = "1a")]
    Bidirectional,
    /// 4-chunk windows, block-causal, independent noise per chunk.
    #[serde(rename = "1b")]
    Causal,
    /// One target chunk after its reconstituted ground-truth memory.
    #[serde(rename = "2")]
    Memory,
    /// 4-chunk bidirectional window after the union of its chunks' memories.
    #[serde(rename = "3-teacher")]
    Teacher,
}

impl Stage {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1a" => Some(Self::Bidirectional),
            "1b" => Some(Self::Causal),
            "2" => Some(Self::Memory),
            "3-teacher" | "3" => Some(Self::Teacher),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bidirectional => "1a",
            Self::Causal => "1b",
            Self::Memory => "2",
            Self::Teacher => "3-teacher",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { stage: Stage::Bidirectional, steps: 2000, lr: 1e-3, warmup: 100, batch: 1, clip: 1.0, seed: 0 }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup as f64).min(1.0)
        }
    }
}

/// One training sequence: clean context, then noised targets.
#[derive(Debug, Clone)]
pub struct Example {
    pub specs: Vec<ChunkSpec>,
    pub clean: Vec<Tensor<f32>>,
    pub layout: Layout,
    /// Index of the first target chunk; everything after it is a target.
    pub first_target: usize,
}

/// Ground-truth teacher context: union of the window chunks' memories with
/// the window itself removed.
pub fn teacher_context(contexts: &[ContextSet], window: &[u64]) -> Vec<u64> {
    let mut all: std::collections::BTreeSet<u64> = contexts.iter().flat_map(|c| c.ordered()).collect();
    for w in window {
        all.remove(w);
    }
    all.into_iter().collect()
}

fn window_start(ep: &EpisodeLatents, rng: &mut WmRng) -> usize {
    rng.random_range(0..=ep.chunks.len() - WINDOW_CHUNKS)
}

/// Draw one example for `stage` from `ds`.
pub fn sample_example(model: &Model, ds: &Dataset, stage: Stage, rng: &mut WmRng) -> Result<Example> {
    let ep = &ds.episodes[rng.random_range(0..ds.len())];
    if ep.chunks.len() < WINDOW_CHUNKS {
        return Err(Error::Config(format!("episodes need at least {WINDOW_CHUNKS} chunks")));
    }
    let cfg = &model.cfg;
    let retrieval = RetrievalConfig::new(cfg.temporal_memory, cfg.spatial_memory, ep.world_size);
    let absolute = cfg.positions == crate::model::PositionMode::Absolute;
    match stage {
        Stage::Bidirectional | Stage::Causal => {
            let s = window_start(ep, rng);
            let specs = (0..WINDOW_CHUNKS)
                .map(|o| ep.spec(s + o, 1.0, if absolute { (s + o) as i64 } else { o as i64 }))
                .collect();
            let clean = (s..s + WINDOW_CHUNKS).map(|i| ep.chunks[i].latent.clone()).collect();
            let layout = if stage == Stage::Causal { Layout::Causal } else { Layout::Window { context: 0 } };
            Ok(Example { specs, clean, layout, first_target: 0 })
        }
        Stage::Memory => {
            let j = rng.random_range(1..ep.chunks.len());
            let ctx = ep.context_for(j, &retrieval);
            let (specs, clean) = context_sequence(ep, &ctx, &[j], cfg.positions);
            let first_target = specs.len() - 1;
            Ok(Example { specs, clean, layout: Layout::Causal, first_target })
        }
        Stage::Teacher => {
            let s = window_start(ep, rng);
            let window: Vec<usize> = (s..s + WINDOW_CHUNKS).collect();
            let contexts: Vec<ContextSet> = window.iter().map(|&i| ep.context_for(i, &retrieval)).collect();
            let ids: Vec<u64> = window.iter().map(|&i| i as u64).collect();
            let ctx = ContextSet { temporal: teacher_context(&contexts, &ids), ..ContextSet::default() };
            let (specs, clean) = context_sequence(ep, &ctx, &window, cfg.positions);
            let first_target = specs.len() - WINDOW_CHUNKS;
            Ok(Example { specs, clean, layout: Layout::Window { context: first_target }, first_target })
        }
    }
}

/// Noise levels for the targets of an example.
pub fn sample_levels(stage: Stage, n_targets: usize, rng: &mut WmRng) -> Vec<f64> {
    match stage {
        Stage::Causal => (0..n_targets).map(|_| rng.random_range(0.0..1.0)).collect(),
        _ => vec![rng.random_range(0.0..1.0); n_targets],
    }
}

/// Flow-matching loss and gradients of one example at given noise levels.
pub fn example_loss(model: &Model, ex: &Example, levels: &[f64], rng: &mut WmRng) -> Result<(f64, Grads<f32>)> {
    let n_targets = ex.specs.len() - ex.first_target;
    if levels.len() != n_targets {
        return Err(Error::Config(format!("{} levels for {n_targets} targets", levels.len())));
    }
    let mut specs = ex.specs.clone();
    let mut inputs = Vec::with_capacity(ex.clean.len());
    let mut targets = Vec::with_capacity(n_targets);
    for (i, clean) in ex.clean.iter().enumerate() {
        if i < ex.first_target {
            specs[i].noise_level = 0.0;
            inputs.push(clean.clone());
        } else {
            let k = levels[i - ex.first_target];
            specs[i].noise_level = k;
            let path = NoisePath::sample(clean.clone(), k, rng);
            inputs.push(path.zk());
            targets.push(path.velocity());
        }
    }
    let x = Tensor::concat_rows(&inputs.iter().collect::<Vec<_>>())?;
    let target = Tensor::concat_rows(&targets.iter().collect::<Vec<_>>())?;
    let tpc = model.cfg.tokens_per_chunk();
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let out = model.forward(&mut tape, xv, &specs, ex.layout)?;
    let pred = tape.slice_rows(out, ex.first_target * tpc, n_targets * tpc)?;
    let tv = tape.leaf(target);
    let loss = tape.mse(pred, tv)?;
    let value = tape.value(loss).data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("flow-matching loss".into()));
    }
    Ok((value, tape.backward(loss)?))
}

/// Sum of per-example gradients, scaled, clipped to a global norm.
#[derive(Debug, Default)]
pub struct GradAccum {
    sums: BTreeMap<usize, Tensor<f32>>,
}

impl GradAccum {
    pub fn add(&mut self, grads: &Grads<f32>, scale: f32) -> Result<()> {
        for id in grads.param_ids().collect::<Vec<_>>() {
            let g = grads.param(id).expect("listed id");
            match self.sums.get_mut(&id) {
                Some(s) => *s = s.axpy(scale, g)?,
                None => {
                    self.sums.insert(id, g.scale(scale));
                }
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.sums.values().map(|t| t.sq_norm() as f64).sum::<f64>().sqrt()
    }

    pub fn finish(mut self, clip: f64) -> Grads<f32> {
        let norm = self.norm();
        if clip > 0.0 && norm > clip {
            let s = (clip / norm) as f32;
            for t in self.sums.values_mut() {
                *t = t.scale(s);
            }
        }
        Grads::from_param_grads(self.sums.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
    pub seed: u64,
}

/// Stateful trainer for one stage.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub opt: OptimState<f32>,
    rng: WmRng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Self {
        let opt = OptimState::new(OptimKind::adam(), cfg.lr);
        let rng = rng::stream(cfg.seed, 0x7a11);
        Self { cfg, opt, rng, step: 0 }
    }

    /// One optimizer step over `batch` sampled examples; returns the mean loss.
    pub fn fm_train_step(&mut self, model: &mut Model, ds: &Dataset) -> Result<f64> {
        let mut acc = GradAccum::default();
        let mut total = 0.0;
        let b = self.cfg.batch.max(1);
        for _ in 0..b {
            let ex = sample_example(model, ds, self.cfg.stage, &mut self.rng)?;
            let levels = sample_levels(self.cfg.stage, ex.specs.len() - ex.first_target, &mut self.rng);
            let (loss, grads) = example_loss(model, &ex, &levels, &mut self.rng)?;
            acc.add(&grads, 1.0 / b as f32)?;
            total += loss;
        }
        self.opt.lr = self.cfg.lr_at(self.step);
        self.opt.step(&mut model.params, &acc.finish(self.cfg.clip))?;
        self.step += 1;
        Ok(total / b as f64)
    }

    /// Run `cfg.steps` steps, writing one JSON line per step to `log`.
    pub fn run(&mut self, model: &mut Model, ds: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let loss = self.fm_train_step(model, ds)?;
            losses.push(loss);
            if let Some(out) = log.as_deref_mut() {
                let line = LogLine {
                    step: self.step,
                    stage: self.cfg.stage.as_str().into(),
                    loss,
                    lr: self.opt.lr,
                    seed: self.cfg.seed,
                };
                serde_json::to_writer(&mut *out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(losses)
    }
}
