//! Procedural grid world with an exact raycast renderer.
//!
//! Stands in for recorded video: every frame comes with its exact pose and
//! key action, and revisit trajectories return to bit-identical views.

mod episode;
mod grid;
mod motion;
mod pose;
mod render;
mod trajectory;

pub use episode::{read_dataset, read_episode, write_dataset, write_episode, DatasetEntry, DatasetManifest, FrameMeta};
pub use grid::{GridWorld, CEILING_COLOR, DEFAULT_WORLD_SIZE, FLOOR_COLOR};
pub use motion::{
    collides, is_clear, keys_to_pose, pose_to_keys, step_pose, DiscreteAction, COLLISION_MARGIN, MOVE_STEP,
    ROTATION_THRESHOLD_DEG, TRANSLATION_THRESHOLD, TURN_STEP_DEG,
};
pub use pose::{wrap_deg, CameraPose, Intrinsics};
pub use render::{cast_ray, render, Frame};
pub use trajectory::{
    make_trajectory, poses_from_actions, spawn_pose, trajectory_actions, Episode, TrajectoryKind, CHUNK_FRAMES,
};

pub fn generate_world(seed: u64) -> GridWorld {
    GridWorld::generate(seed)
}
