//! Metrics and protocols: frame fidelity, revisit consistency, pose-following
//! error and the ablation grid.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{DataConfig, Dataset};
use crate::latent::{chunk_frames, chunk_latent};
use crate::memory::RetrievalRecord;
use crate::model::{Model, ModelConfig, PositionMode};
use crate::rng;
use crate::sampler::{ActionChunk, Generator, Schedule};
use crate::train::{Stage, TrainConfig, Trainer};
use crate::world::{make_trajectory, render, wrap_deg, CameraPose, Episode, Frame, GridWorld, TrajectoryKind, CHUNK_FRAMES};
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn check_shapes(a: &Frame, b: &Frame) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.rgb.len() != b.rgb.len() {
        return Err(Error::Shape(format!("frames {}×{} vs {}×{}", a.width, a.height, b.width, b.height)));
    }
    Ok(())
}

pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_shapes(a, b)?;
    let s: f64 = a.rgb.iter().zip(&b.rgb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.rgb.len().max(1) as f64)
}

/// PSNR in dB over all RGB samples, capped at `PSNR_CAP`.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0 * 255.0 / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 7×7 windows and channels, uniform weighting. Frames
/// smaller than the window use one window covering the whole frame.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width as usize, a.height as usize);
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let n = (ww * wh) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * w + x) * 3 + c;
                        let (p, q) = (a.rgb[i] as f64, b.rgb[i] as f64);
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Anything that turns an episode's first chunk and actions into frames.
pub trait FrameSource {
    fn name(&self) -> String;

    /// Frames for every index of `ep`; the first chunk is given.
    fn rollout(&self, ep: &Episode) -> Result<Rollout>;
}

#[derive(Debug, Clone, Default)]
pub struct Rollout {
    pub frames: Vec<Frame>,
    pub chunk_ms: Vec<f64>,
    pub retrievals: Vec<RetrievalRecord>,
}

/// The simulator itself: revisit-exact by construction.
pub struct Oracle;

impl FrameSource for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn rollout(&self, ep: &Episode) -> Result<Rollout> {
        Ok(Rollout { frames: ep.frames.clone(), ..Rollout::default() })
    }
}

/// Autoregressive generation with a trained model.
pub struct ModelSource<'m> {
    pub label: String,
    pub model: &'m Model,
    pub schedule: Schedule,
    pub noise_seed: u64,
}

impl<'m> ModelSource<'m> {
    pub fn new(label: impl Into<String>, model: &'m Model, steps: usize, noise_seed: u64) -> Result<Self> {
        Ok(Self { label: label.into(), model, schedule: Schedule::uniform(steps)?, noise_seed })
    }
}

pub fn action_chunk(ep: &Episode, c: usize) -> ActionChunk {
    let r = c * CHUNK_FRAMES..(c + 1) * CHUNK_FRAMES;
    ActionChunk { frame_keys: ep.actions[r.clone()].try_into().unwrap(), poses: ep.poses[r].try_into().unwrap() }
}

impl FrameSource for ModelSource<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn rollout(&self, ep: &Episode) -> Result<Rollout> {
        let cfg = &self.model.cfg;
        let seed = self.noise_seed ^ ep.world_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut g = Generator::new(self.model, ep.world_size, self.schedule.clone(), seed);
        g.commit(chunk_latent(&ep.frames[..CHUNK_FRAMES], cfg.patch)?, &action_chunk(ep, 0))?;
        let mut out = Rollout { frames: ep.frames[..CHUNK_FRAMES].to_vec(), ..Rollout::default() };
        for c in 1..ep.num_chunks() {
            let t0 = Instant::now();
            let chunk = g.step(&action_chunk(ep, c))?;
            out.chunk_ms.push(t0.elapsed().as_secs_f64() * 1e3);
            out.frames.extend(chunk_frames(&chunk.latent, cfg.frame_width, cfg.frame_height, cfg.patch)?);
            let mut rec = RetrievalRecord::new(chunk.capture_index, &chunk.context);
            rec.positions = chunk.positions.clone();
            out.retrievals.push(rec);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub trajectories: usize,
    /// Frames per revisit trajectory.
    pub length: usize,
    pub pose_episodes: usize,
    pub pose_length: usize,
    pub world_size: usize,
    pub width: u32,
    pub height: u32,
    /// Worlds are disjoint from training worlds through this seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trajectories: 20,
            length: 96,
            pose_episodes: 8,
            pose_length: 32,
            world_size: crate::world::DEFAULT_WORLD_SIZE,
            width: 16,
            height: 16,
            seed: 0xe7a1,
        }
    }
}

impl EvalConfig {
    fn data(&self, kind: TrajectoryKind, episodes: usize, length: usize, salt: u64) -> DataConfig {
        DataConfig {
            episodes,
            length,
            world_size: self.world_size,
            width: self.width,
            height: self.height,
            seed: self.seed ^ salt,
            kinds: vec![kind],
        }
    }

    pub fn revisit_episodes(&self) -> Result<Vec<Episode>> {
        self.data(TrajectoryKind::OutAndBack, self.trajectories, self.length, 0x0ab).generate()
    }

    pub fn pose_episodes(&self) -> Result<Vec<Episode>> {
        self.data(TrajectoryKind::RandomWalk, self.pose_episodes, self.pose_length, 0x905e).generate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trajectories.max(self.pose_episodes)).map(|i| self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub psnr: f64,
    pub ssim: f64,
    pub n: usize,
}

impl Metric {
    fn from_pairs<'a>(pairs: impl Iterator<Item = (&'a Frame, &'a Frame)>) -> Result<Self> {
        let (mut p, mut s, mut n) = (0.0, 0.0, 0);
        for (a, b) in pairs {
            p += psnr(a, b)?;
            s += ssim(a, b)?;
            n += 1;
        }
        let d = n.max(1) as f64;
        Ok(Self { psnr: p / d, ssim: s / d, n })
    }

    fn merge(parts: &[Metric]) -> Self {
        let n: usize = parts.iter().map(|m| m.n).sum();
        let d = n.max(1) as f64;
        Self {
            psnr: parts.iter().map(|m| m.psnr * m.n as f64).sum::<f64>() / d,
            ssim: parts.iter().map(|m| m.ssim * m.n as f64).sum::<f64>() / d,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub n: usize,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((s.len() - 1) as f64 * p).round() as usize];
        Self { mean_ms: s.iter().sum::<f64>() / s.len() as f64, p50_ms: q(0.5), p95_ms: q(0.95), n: s.len() }
    }
}

/// Pose-following error from oracle-render pose search. A proxy: the
/// search recovers the pose whose rendering best matches each frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub r_err_deg: f64,
    pub t_err_cells: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub checkpoint: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Return-half frames against the source's own first pass.
    pub revisit: Metric,
    /// Generated frames against the simulator.
    pub fidelity: Metric,
    pub pose: Option<PoseError>,
    pub latency: LatencyStats,
    pub notes: Vec<String>,
}

/// Pairs `(t, mirror)` of an out-and-back trajectory of `len` frames: the
/// return frame `t` revisits the pose of outbound frame `len − 1 − t`.
pub fn revisit_pairs(len: usize) -> impl Iterator<Item = (usize, usize)> {
    (len / 2..len).map(move |t| (t, len - 1 - t))
}

pub struct RevisitResult {
    pub revisit: Metric,
    pub fidelity: Metric,
    pub chunk_ms: Vec<f64>,
}

/// Generate each out-and-back episode and compare the return half with the
/// source's own outbound frames at the mirrored poses.
pub fn revisit_protocol(source: &dyn FrameSource, episodes: &[Episode]) -> Result<RevisitResult> {
    let mut revisit = Vec::new();
    let mut fidelity = Vec::new();
    let mut chunk_ms = Vec::new();
    for ep in episodes {
        if ep.kind != TrajectoryKind::OutAndBack {
            return Err(Error::Config("revisit protocol needs out-and-back episodes".into()));
        }
        let r = source.rollout(ep)?;
        revisit.push(Metric::from_pairs(revisit_pairs(ep.len()).map(|(t, m)| (&r.frames[t], &r.frames[m])))?);
        fidelity.push(Metric::from_pairs(r.frames[CHUNK_FRAMES..].iter().zip(&ep.frames[CHUNK_FRAMES..]))?);
        chunk_ms.extend(r.chunk_ms);
    }
    Ok(RevisitResult { revisit: Metric::merge(&revisit), fidelity: Metric::merge(&fidelity), chunk_ms })
}

pub const POSE_SEARCH_CELLS: f64 = 1.0;
pub const POSE_SEARCH_STEP: f64 = 0.25;
pub const POSE_SEARCH_DEG: f64 = 45.0;
pub const POSE_SEARCH_DEG_STEP: f64 = 15.0;

/// Pose on the local search lattice around `commanded` whose rendering has
/// the highest PSNR against `frame`. Ties go to the smaller offset.
pub fn locate_pose(world: &GridWorld, commanded: &CameraPose, frame: &Frame) -> Result<CameraPose> {
    let nt = (POSE_SEARCH_CELLS / POSE_SEARCH_STEP).round() as i64;
    let nr = (POSE_SEARCH_DEG / POSE_SEARCH_DEG_STEP).round() as i64;
    let mut offsets = Vec::new();
    for i in -nt..=nt {
        for j in -nt..=nt {
            for r in -nr..=nr {
                offsets.push((i, j, r));
            }
        }
    }
    offsets.sort_by_key(|&(i, j, r)| (i * i + j * j, r.abs()));
    let mut best = (*commanded, f64::NEG_INFINITY);
    for (i, j, r) in offsets {
        let x = commanded.x() + i as f64 * POSE_SEARCH_STEP;
        let z = commanded.z() + j as f64 * POSE_SEARCH_STEP;
        if !world.is_free_point(x, z) {
            continue;
        }
        let cand = CameraPose::from_yaw(x, z, commanded.yaw_deg() + r as f64 * POSE_SEARCH_DEG_STEP, commanded.intrinsics);
        let Ok(img) = render(world, &cand) else { continue };
        let p = psnr(&img, frame)?;
        if p > best.1 {
            best = (cand, p);
        }
    }
    Ok(best.0)
}

/// Mean rotation and translation gaps between commanded poses and the poses
/// located from generated frames.
pub fn pose_error(source: &dyn FrameSource, episodes: &[Episode]) -> Result<PoseError> {
    let (mut r_sum, mut t_sum, mut n) = (0.0, 0.0, 0);
    for ep in episodes {
        let world = GridWorld::generate_sized(ep.world_seed, ep.world_size);
        let r = source.rollout(ep)?;
        for t in CHUNK_FRAMES..ep.len() {
            let found = locate_pose(&world, &ep.poses[t], &r.frames[t])?;
            r_sum += wrap_deg(found.yaw_deg() - ep.poses[t].yaw_deg()).abs();
            t_sum += found.distance(&ep.poses[t]);
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    Ok(PoseError { r_err_deg: r_sum / d, t_err_cells: t_sum / d, frames: n })
}

/// Revisit, fidelity, pose and latency for one source.
pub fn evaluate(source: &dyn FrameSource, checkpoint: &str, config_hash: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    let rv = revisit_protocol(source, &cfg.revisit_episodes()?)?;
    let pose = if cfg.pose_episodes > 0 { Some(pose_error(source, &cfg.pose_episodes()?)?) } else { None };
    Ok(EvalReport {
        name: source.name(),
        checkpoint: checkpoint.into(),
        config_hash: config_hash.into(),
        seeds: cfg.seeds(),
        revisit: rv.revisit,
        fidelity: rv.fidelity,
        pose,
        latency: LatencyStats::from_samples(&rv.chunk_ms),
        notes: vec!["pose error is an oracle-render search proxy; LPIPS not computed".into()],
    })
}

pub fn evaluate_model(label: &str, model: &Model, steps: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    let src = ModelSource::new(label, model, steps, cfg.seed)?;
    evaluate(&src, &model.params.digest(), &model.cfg.hash(), cfg)
}

/// Plain-text comparison table.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>9} {:>8} {:>9} {:>8} {:>8} {:>8} {:>9}",
        "name", "rev_psnr", "rev_ssim", "fid_psnr", "fid_ssim", "R_err", "T_err", "chunk_ms"
    );
    for r in reports {
        let (re, te) = r.pose.map_or((f64::NAN, f64::NAN), |p| (p.r_err_deg, p.t_err_cells));
        let _ = writeln!(
            s,
            "{:<28} {:>9.3} {:>8.4} {:>9.3} {:>8.4} {:>8.3} {:>8.4} {:>9.2}",
            r.name, r.revisit.psnr, r.revisit.ssim, r.fidelity.psnr, r.fidelity.ssim, re, te, r.latency.mean_ms
        );
    }
    s
}

/// How actions reach the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Discrete,
    Continuous,
    Dual,
}

impl ActionMode {
    pub const ALL: [ActionMode; 3] = [ActionMode::Discrete, ActionMode::Continuous, ActionMode::Dual];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionMode::Discrete => "discrete",
            ActionMode::Continuous => "continuous",
            ActionMode::Dual => "dual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.use_keys = self != ActionMode::Continuous;
        cfg.use_poses = self != ActionMode::Discrete;
    }

    pub fn of(cfg: &ModelConfig) -> Self {
        match (cfg.use_keys, cfg.use_poses) {
            (true, false) => ActionMode::Discrete,
            (false, true) => ActionMode::Continuous,
            _ => ActionMode::Dual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationCell {
    pub action: ActionMode,
    pub positions: PositionMode,
    pub temporal: usize,
    pub spatial: usize,
}

impl AblationCell {
    pub fn name(&self) -> String {
        let rope = match self.positions {
            PositionMode::Reframed => "reframed",
            PositionMode::Absolute => "absolute",
        };
        format!("{}/{}/L{}K{}", self.action.as_str(), rope, self.temporal, self.spatial)
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        self.action.apply(&mut cfg);
        cfg.positions = self.positions;
        cfg.temporal_memory = self.temporal;
        cfg.spatial_memory = self.spatial;
        cfg
    }
}

/// Action × positional index × memory size: 3 × 2 × 2 cells.
pub fn ablation_grid() -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for action in ActionMode::ALL {
        for positions in [PositionMode::Absolute, PositionMode::Reframed] {
            for (temporal, spatial) in [(3, 1), (1, 3)] {
                cells.push(AblationCell { action, positions, temporal, spatial });
            }
        }
    }
    cells
}

/// Steps per stage for one ablation cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub bidirectional: usize,
    pub causal: usize,
    pub memory: usize,
    pub seed: u64,
}

impl Default for Budget {
    fn default() -> Self {
        Self { bidirectional: 2000, causal: 2000, memory: 3000, seed: 0 }
    }
}

pub fn train_stage(model: &mut Model, ds: &Dataset, stage: Stage, steps: usize, seed: u64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let mut t = Trainer::new(TrainConfig { stage, steps, seed, ..TrainConfig::default() });
    t.run(model, ds, None)
}

/// Action-conditioned stages 1a then 1b. Positional mode and memory size
/// play no part in them, so cells sharing an action mode share this model.
pub fn train_action_stages(cfg: &ModelConfig, ds: &Dataset, budget: &Budget) -> Result<Model> {
    let mut model = Model::new(cfg.clone())?;
    train_stage(&mut model, ds, Stage::Bidirectional, budget.bidirectional, budget.seed)?;
    train_stage(&mut model, ds, Stage::Causal, budget.causal, budget.seed ^ 1)?;
    Ok(model)
}

/// Memory stage on top of a stage-1 model, under `cfg`'s memory settings.
pub fn train_memory_stage(stage1: &Model, cfg: &ModelConfig, ds: &Dataset, budget: &Budget) -> Result<Model> {
    let mut model = Model::with_params(cfg.clone(), &stage1.params)?;
    train_stage(&mut model, ds, Stage::Memory, budget.memory, budget.seed ^ 2)?;
    Ok(model)
}

/// Train and evaluate every cell at the same budget. Cells are undistilled,
/// so they are sampled with the full `teacher_steps` schedule.
pub fn ablate(
    cells: &[AblationCell],
    base: &ModelConfig,
    ds: &Dataset,
    budget: &Budget,
    eval: &EvalConfig,
    mut progress: impl FnMut(&EvalReport),
) -> Result<Vec<EvalReport>> {
    let mut stage1: std::collections::BTreeMap<ActionMode, Model> = Default::default();
    let mut reports = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell.model_config(base);
        if !stage1.contains_key(&cell.action) {
            stage1.insert(cell.action, train_action_stages(&cfg, ds, budget)?);
        }
        let model = train_memory_stage(&stage1[&cell.action], &cfg, ds, budget)?;
        let mut report = evaluate_model(&cell.name(), &model, cfg.teacher_steps, eval)?;
        report.notes.push(format!("budget {budget:?}"));
        progress(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Per-chunk generation time in ms after `history` committed chunks, for
/// `samples` consecutive chunks along a random walk.
pub fn chunk_latency_at_history(model: &Model, history: usize, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let cfg = &model.cfg;
    let length = (history + samples) * CHUNK_FRAMES;
    let world_size = crate::world::DEFAULT_WORLD_SIZE;
    let ep = single_episode(TrajectoryKind::RandomWalk, seed, world_size, length, cfg.frame_width, cfg.frame_height)?;
    let mut g = Generator::new(model, world_size, Schedule::uniform(cfg.student_steps)?, seed);
    for c in 0..history {
        g.commit(chunk_latent(&ep.frames[c * CHUNK_FRAMES..(c + 1) * CHUNK_FRAMES], cfg.patch)?, &action_chunk(&ep, c))?;
    }
    (history..history + samples)
        .map(|c| {
            let t = Instant::now();
            g.step(&action_chunk(&ep, c))?;
            Ok(t.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

/// Frame rendered at a yaw offset from `pose`, for constructed pose errors.
pub fn render_offset(world: &GridWorld, pose: &CameraPose, dyaw: f64) -> Result<Frame> {
    render(world, &CameraPose::from_yaw(pose.x(), pose.z(), pose.yaw_deg() + dyaw, pose.intrinsics))
}

/// Deterministic noisy copy of a frame with uniform integer noise in `[-amp, amp]`.
pub fn perturb(frame: &Frame, amp: i32, seed: u64) -> Frame {
    use rand::Rng;
    let mut r = rng::seeded(seed);
    let rgb = frame.rgb.iter().map(|&v| (v as i32 + r.random_range(-amp..=amp)).clamp(0, 255) as u8).collect();
    Frame { rgb, ..frame.clone() }
}

pub fn single_episode(kind: TrajectoryKind, world_seed: u64, world_size: usize, length: usize, width: u32, height: u32) -> Result<Episode> {
    let world = GridWorld::generate_sized(world_seed, world_size);
    make_trajectory(&world, kind, length, world_seed, crate::world::Intrinsics::hfov90(width, height))
}
