//! One generation loop per session, decoupled from the socket by queues.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tokio::sync::Notify;
use wm_core::latent::chunk_latent;
use wm_core::sampler::{progressive_decode, ActionChunk, Generator, Schedule};
use wm_core::world::{render, spawn_pose, step_pose, CameraPose, DiscreteAction, GridWorld, Intrinsics, CHUNK_FRAMES};
use wm_core::Model;

use crate::protocol::{encode_frame, ChunkStats, ServerMsg};

pub const TICKS_PER_CHUNK: u64 = CHUNK_FRAMES as u64;
pub const OUTBOX_FRAMES: usize = 16;
pub const INBOX_TICKS: usize = 1024;
/// Text messages kept while the client is stalled.
const OUTBOX_TEXT: usize = 64;

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub tick: Duration,
    /// Sampling steps; the model's student step count when `None`.
    pub steps: Option<usize>,
    pub world_size: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { tick: Duration::from_millis(80), steps: None, world_size: wm_core::world::DEFAULT_WORLD_SIZE }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("action inbox full")]
pub struct InboxFull;

/// Pending keys by tick. Several actions for one tick are OR-ed.
#[derive(Debug, Default)]
pub struct Inbox {
    pending: Mutex<BTreeMap<u64, u8>>,
}

impl Inbox {
    pub fn push(&self, tick: u64, keys: DiscreteAction) -> Result<(), InboxFull> {
        let mut p = self.pending.lock().unwrap();
        if p.len() >= INBOX_TICKS && !p.contains_key(&tick) {
            return Err(InboxFull);
        }
        *p.entry(tick).or_insert(0) |= keys.0;
        Ok(())
    }

    /// Keys for `tick`, including late actions for earlier ticks; idle when
    /// nothing arrived.
    pub fn take(&self, tick: u64) -> DiscreteAction {
        let mut p = self.pending.lock().unwrap();
        let later = p.split_off(&(tick + 1));
        let keys = p.values().fold(0, |a, k| a | k);
        *p = later;
        DiscreteAction(keys)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Frame(Vec<u8>),
    Text(String),
}

#[derive(Debug, Default)]
struct OutState {
    queue: VecDeque<Outgoing>,
    frames: usize,
    texts: usize,
    lagged: bool,
    dropped: u64,
    closed: bool,
}

/// Bounded outbox. Overflow drops the oldest entry of the same kind and
/// queues a single lag notice ahead of the rest.
#[derive(Debug, Default)]
pub struct Outbox {
    state: Mutex<OutState>,
    notify: Notify,
}

impl Outbox {
    pub fn push(&self, item: Outgoing) {
        let mut s = self.state.lock().unwrap();
        let is_frame = matches!(item, Outgoing::Frame(_));
        let full = if is_frame { s.frames >= OUTBOX_FRAMES } else { s.texts >= OUTBOX_TEXT };
        if full {
            if let Some(i) = s.queue.iter().position(|o| matches!(o, Outgoing::Frame(_)) == is_frame) {
                s.queue.remove(i);
                if is_frame {
                    s.frames -= 1;
                } else {
                    s.texts -= 1;
                }
                s.dropped += 1;
                s.lagged = true;
            }
        }
        if is_frame {
            s.frames += 1;
        } else {
            s.texts += 1;
        }
        s.queue.push_back(item);
        drop(s);
        self.notify.notify_one();
    }

    pub fn try_pop(&self) -> Option<Outgoing> {
        let mut s = self.state.lock().unwrap();
        if s.lagged {
            s.lagged = false;
            return Some(Outgoing::Text(ServerMsg::Lag.to_json()));
        }
        let item = s.queue.pop_front()?;
        match item {
            Outgoing::Frame(_) => s.frames -= 1,
            Outgoing::Text(_) => s.texts -= 1,
        }
        Some(item)
    }

    /// Next item, waiting for one; `None` once closed and drained.
    pub async fn next(&self) -> Option<Outgoing> {
        loop {
            let notified = self.notify.notified();
            if let Some(item) = self.try_pop() {
                return Some(item);
            }
            if self.state.lock().unwrap().closed {
                return None;
            }
            notified.await;
        }
    }

    pub fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.notify.notify_one();
    }

    pub fn dropped(&self) -> u64 {
        self.state.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A running session. Dropping it stops and joins the generation thread.
pub struct Session {
    pub id: u64,
    pub seed: u64,
    pub inbox: Arc<Inbox>,
    pub outbox: Arc<Outbox>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Session {
    pub fn spawn(id: u64, seed: u64, model: Arc<Model>, cfg: SessionConfig) -> Self {
        let inbox = Arc::new(Inbox::default());
        let outbox = Arc::new(Outbox::default());
        let stop = Arc::new(AtomicBool::new(false));
        let thread = {
            let (inbox, outbox, stop) = (inbox.clone(), outbox.clone(), stop.clone());
            std::thread::Builder::new()
                .name(format!("session-{id}"))
                .spawn(move || {
                    if let Err(e) = generate(seed, &model, &cfg, &inbox, &outbox, &stop) {
                        eprintln!("session {id}: {e}");
                        outbox.push(Outgoing::Text(ServerMsg::error("internal").to_json()));
                    }
                    outbox.close();
                })
                .expect("spawn session thread")
        };
        Self { id, seed, inbox, outbox, stop, thread: Some(thread) }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Sleep until `deadline`, waking early on stop. Returns false when stopped.
fn wait_until(deadline: Instant, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(10)));
    }
}

/// Poses of the chunk after `pose` under per-tick keys, collision applied.
pub fn advance(world: &GridWorld, pose: &CameraPose, keys: &[DiscreteAction; CHUNK_FRAMES]) -> [CameraPose; CHUNK_FRAMES] {
    let mut p = *pose;
    std::array::from_fn(|f| {
        p = step_pose(world, &p, keys[f]);
        p
    })
}

fn generate(seed: u64, model: &Model, cfg: &SessionConfig, inbox: &Inbox, outbox: &Outbox, stop: &AtomicBool) -> wm_core::Result<()> {
    let mc = &model.cfg;
    let (w, h) = (mc.frame_width, mc.frame_height);
    let world = GridWorld::generate_sized(seed, cfg.world_size);
    let mut pose = spawn_pose(&world, seed, Intrinsics::hfov90(w, h));
    let schedule = Schedule::uniform(cfg.steps.unwrap_or(mc.student_steps))?;
    let mut gen = Generator::new(model, cfg.world_size, schedule, seed);
    let start = Instant::now();

    let first = render(&world, &pose)?;
    let frames = vec![first; CHUNK_FRAMES];
    let a0 = ActionChunk { frame_keys: [DiscreteAction::IDLE; CHUNK_FRAMES], poses: [pose; CHUNK_FRAMES] };
    gen.commit(chunk_latent(&frames, mc.patch)?, &a0)?;
    for (i, f) in frames.iter().enumerate() {
        outbox.push(Outgoing::Frame(encode_frame(i as u64, f)));
    }
    let stats = ChunkStats {
        chunk: 0,
        first_frame: 0,
        ticks: vec![],
        keys: vec![0; CHUNK_FRAMES],
        poses: vec![pose.to_rows(); CHUNK_FRAMES],
        chunk_ms: 0.0,
        fps: 0.0,
        temporal: vec![],
        spatial: vec![],
        positions: vec![],
        dropped: 0,
    };
    outbox.push(Outgoing::Text(ServerMsg::Stats(stats).to_json()));

    let mut last_done = Instant::now();
    for chunk in 1u64.. {
        // chunk c consumes ticks 4(c-1)..4c, whose window closes at 4c ticks
        if !wait_until(start + cfg.tick * (TICKS_PER_CHUNK * chunk) as u32, stop) {
            break;
        }
        let ticks: Vec<u64> = (0..TICKS_PER_CHUNK).map(|f| TICKS_PER_CHUNK * (chunk - 1) + f).collect();
        let keys: [DiscreteAction; CHUNK_FRAMES] = std::array::from_fn(|f| inbox.take(ticks[f]));
        let poses = advance(&world, &pose, &keys);
        pose = poses[CHUNK_FRAMES - 1];

        let t0 = Instant::now();
        let out = gen.step(&ActionChunk { frame_keys: keys, poses })?;
        let first_frame = TICKS_PER_CHUNK * chunk;
        progressive_decode(&out.latent, w, h, mc.patch, |f, frame| {
            outbox.push(Outgoing::Frame(encode_frame(first_frame + f as u64, &frame)));
            Ok(())
        })?;
        let chunk_ms = t0.elapsed().as_secs_f64() * 1e3;
        let period = last_done.elapsed().as_secs_f64();
        last_done = Instant::now();
        let stats = ChunkStats {
            chunk,
            first_frame,
            ticks,
            keys: keys.iter().map(|k| k.0).collect(),
            poses: poses.iter().map(|p| p.to_rows()).collect(),
            chunk_ms,
            fps: CHUNK_FRAMES as f64 / period.max(1e-9),
            temporal: out.context.temporal.clone(),
            spatial: out.context.spatial.clone(),
            positions: out.positions.clone(),
            dropped: outbox.dropped(),
        };
        outbox.push(Outgoing::Text(ServerMsg::Stats(stats).to_json()));
    }
    Ok(())
}
