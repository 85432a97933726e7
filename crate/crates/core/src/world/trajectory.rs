use rand::Rng;
use serde::{Deserialize, Serialize};

use super::grid::GridWorld;
use super::motion::{collides, step_pose, DiscreteAction};
use super::pose::{CameraPose, Intrinsics};
use super::render::{render, Frame};
use crate::rng::{self, WmRng};
use crate::{Error, Result};

pub const CHUNK_FRAMES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    RandomWalk,
    Loop,
    OutAndBack,
}

impl TrajectoryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrajectoryKind::RandomWalk => "random_walk",
            TrajectoryKind::Loop => "loop",
            TrajectoryKind::OutAndBack => "out_and_back",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random_walk" => Some(Self::RandomWalk),
            "loop" => Some(Self::Loop),
            "out_and_back" => Some(Self::OutAndBack),
            _ => None,
        }
    }
}

/// One rendered trajectory. `actions[t]` moved `poses[t-1]` to `poses[t]`;
/// `actions[0]` is idle.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub world_seed: u64,
    pub world_size: usize,
    pub kind: TrajectoryKind,
    pub frames: Vec<Frame>,
    pub poses: Vec<CameraPose>,
    pub actions: Vec<DiscreteAction>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn num_chunks(&self) -> usize {
        self.frames.len() / CHUNK_FRAMES
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.frames.len() != self.poses.len() || self.poses.len() != self.actions.len() {
            return Err(Error::Trajectory(self.frames.len(), "frames/poses/actions lengths differ".into()));
        }
        if self.frames.len() % CHUNK_FRAMES != 0 {
            return Err(Error::Trajectory(self.frames.len(), "length not divisible by chunk size".into()));
        }
        Ok(())
    }
}

const KEEP_PROB: f64 = 0.7;

fn sample_action(rng: &mut WmRng) -> DiscreteAction {
    use DiscreteAction as A;
    let table: [(A, f64); 9] = [
        (A::FORWARD, 0.35),
        (A::TURN_LEFT, 0.12),
        (A::TURN_RIGHT, 0.12),
        (A::FORWARD | A::TURN_LEFT, 0.08),
        (A::FORWARD | A::TURN_RIGHT, 0.08),
        (A::STRAFE_LEFT, 0.05),
        (A::STRAFE_RIGHT, 0.05),
        (A::BACK, 0.05),
        (A::IDLE, 0.10),
    ];
    let mut u: f64 = rng.random();
    for (a, w) in table {
        if u < w {
            return a;
        }
        u -= w;
    }
    A::IDLE
}

/// `n` non-colliding actions from `start`, sticky with probability 0.7.
fn random_walk_actions(world: &GridWorld, start: &CameraPose, n: usize, rng: &mut WmRng) -> Vec<DiscreteAction> {
    let mut pose = *start;
    let mut prev = DiscreteAction::FORWARD;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut action = if rng.random_bool(KEEP_PROB) { prev } else { sample_action(rng) };
        let mut tries = 0;
        while collides(world, &pose, action) && tries < 16 {
            action = sample_action(rng);
            tries += 1;
        }
        if collides(world, &pose, action) {
            action = if rng.random_bool(0.5) { DiscreteAction::TURN_LEFT } else { DiscreteAction::TURN_RIGHT };
        }
        pose = step_pose(world, &pose, action);
        out.push(action);
        prev = action;
    }
    out
}

pub fn spawn_pose(world: &GridWorld, seed: u64, intrinsics: Intrinsics) -> CameraPose {
    let (cx, cz) = world.spawn_cell(seed);
    let mut r = rng::stream(seed, 0x5a5a);
    let yaw = r.random_range(0..24) as f64 * 15.0;
    CameraPose::from_yaw(cx as f64 + 0.5, cz as f64 + 0.5, yaw, intrinsics)
}

/// Action list for a trajectory of `length` frames (first action idle).
pub fn trajectory_actions(
    world: &GridWorld,
    kind: TrajectoryKind,
    start: &CameraPose,
    length: usize,
    seed: u64,
) -> Result<Vec<DiscreteAction>> {
    if length == 0 || length % CHUNK_FRAMES != 0 {
        return Err(Error::Trajectory(length, "length must be a positive multiple of 4".into()));
    }
    let mut rng = rng::stream(seed, 0x7a1);
    let mut actions = vec![DiscreteAction::IDLE];
    match kind {
        TrajectoryKind::RandomWalk => {
            actions.extend(random_walk_actions(world, start, length - 1, &mut rng));
        }
        TrajectoryKind::OutAndBack => {
            // frames 0..h-1 go out, frame h repeats h-1, then every action is undone
            let half = length / 2;
            let out = random_walk_actions(world, start, half - 1, &mut rng);
            actions.extend(out.iter().copied());
            actions.push(DiscreteAction::IDLE);
            actions.extend(out.iter().rev().map(|a| a.inverse()));
        }
        TrajectoryKind::Loop => {
            // out, turn around, retrace facing the other way, turn back
            let turnaround = (180.0 / super::motion::TURN_STEP_DEG) as usize;
            let fixed = 1 + 2 * turnaround;
            if length < fixed + 3 {
                return Err(Error::Trajectory(length, format!("loop needs at least {} frames", fixed + 3)));
            }
            let n_out = (length - fixed) / 2;
            let pad = length - fixed - 2 * n_out;
            let out = random_walk_actions(world, start, n_out, &mut rng);
            actions.extend(out.iter().copied());
            actions.extend(std::iter::repeat_n(DiscreteAction::TURN_RIGHT, turnaround));
            actions.extend(out.iter().rev().map(|a| a.swap_turns()));
            actions.extend(std::iter::repeat_n(DiscreteAction::TURN_RIGHT, turnaround));
            actions.extend(std::iter::repeat_n(DiscreteAction::IDLE, pad));
        }
    }
    debug_assert_eq!(actions.len(), length);
    Ok(actions)
}

/// Fold `step_pose` over `actions` (the first action is not applied).
pub fn poses_from_actions(world: &GridWorld, start: &CameraPose, actions: &[DiscreteAction]) -> Vec<CameraPose> {
    let mut poses = Vec::with_capacity(actions.len());
    let mut pose = *start;
    for (t, &a) in actions.iter().enumerate() {
        if t > 0 {
            pose = step_pose(world, &pose, a);
        }
        poses.push(pose);
    }
    poses
}

pub fn make_trajectory(
    world: &GridWorld,
    kind: TrajectoryKind,
    length: usize,
    seed: u64,
    intrinsics: Intrinsics,
) -> Result<Episode> {
    let start = spawn_pose(world, seed, intrinsics);
    let actions = trajectory_actions(world, kind, &start, length, seed)?;
    let poses = poses_from_actions(world, &start, &actions);
    let frames = poses.iter().map(|p| render(world, p)).collect::<Result<Vec<_>>>()?;
    let ep = Episode { world_seed: world.seed, world_size: world.size, kind, frames, poses, actions };
    ep.check_invariants()?;
    Ok(ep)
}
