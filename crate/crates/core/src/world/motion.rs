use serde::{Deserialize, Serialize};

use super::grid::GridWorld;
use super::pose::{wrap_deg, CameraPose};

pub const MOVE_STEP: f64 = 0.25;
pub const TURN_STEP_DEG: f64 = 15.0;
pub const TRANSLATION_THRESHOLD: f64 = 0.125;
pub const ROTATION_THRESHOLD_DEG: f64 = 7.5;
/// Minimum clearance between the camera center and any wall cell.
pub const COLLISION_MARGIN: f64 = 0.2;

/// Bitmask of navigation keys. Bit layout is part of the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiscreteAction(pub u8);

impl DiscreteAction {
    pub const IDLE: Self = Self(0);
    pub const FORWARD: Self = Self(1);
    pub const BACK: Self = Self(1 << 1);
    pub const STRAFE_LEFT: Self = Self(1 << 2);
    pub const STRAFE_RIGHT: Self = Self(1 << 3);
    pub const TURN_LEFT: Self = Self(1 << 4);
    pub const TURN_RIGHT: Self = Self(1 << 5);
    pub const ALL_BITS: u8 = 0b11_1111;
    pub const NUM_KEYS: usize = 6;

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0 && other.0 != 0
    }

    pub fn is_idle(self) -> bool {
        self.0 & Self::ALL_BITS == 0
    }

    /// No opposing pair is held at once.
    pub fn is_consistent(self) -> bool {
        !(self.contains(Self::FORWARD) && self.contains(Self::BACK))
            && !(self.contains(Self::STRAFE_LEFT) && self.contains(Self::STRAFE_RIGHT))
            && !(self.contains(Self::TURN_LEFT) && self.contains(Self::TURN_RIGHT))
    }

    /// Action that exactly undoes this one.
    pub fn inverse(self) -> Self {
        let mut out = 0;
        for (a, b) in [
            (Self::FORWARD, Self::BACK),
            (Self::BACK, Self::FORWARD),
            (Self::STRAFE_LEFT, Self::STRAFE_RIGHT),
            (Self::STRAFE_RIGHT, Self::STRAFE_LEFT),
            (Self::TURN_LEFT, Self::TURN_RIGHT),
            (Self::TURN_RIGHT, Self::TURN_LEFT),
        ] {
            if self.contains(a) {
                out |= b.0;
            }
        }
        Self(out)
    }

    /// Same translation keys with the turn direction mirrored.
    pub fn swap_turns(self) -> Self {
        let mut out = self.0 & !(Self::TURN_LEFT.0 | Self::TURN_RIGHT.0);
        if self.contains(Self::TURN_LEFT) {
            out |= Self::TURN_RIGHT.0;
        }
        if self.contains(Self::TURN_RIGHT) {
            out |= Self::TURN_LEFT.0;
        }
        Self(out)
    }

    pub fn set_bits(self) -> impl Iterator<Item = usize> {
        (0..Self::NUM_KEYS).filter(move |b| self.0 & (1 << b) != 0)
    }
}

impl std::ops::BitOr for DiscreteAction {
    type Output = Self;
    fn bitor(self, rhs: Self) -> Self {
        Self(self.0 | rhs.0)
    }
}

fn axis(keys: DiscreteAction, pos: DiscreteAction, neg: DiscreteAction) -> f64 {
    (keys.contains(pos) as i32 - keys.contains(neg) as i32) as f64
}

/// Canonical motion of `keys`: the yaw changes by ±15° and the translation
/// moves 0.25 per move key along the heading halfway through the turn, which
/// makes `keys.inverse()` an exact undo.
pub fn keys_to_pose(pose: &CameraPose, keys: DiscreteAction) -> CameraPose {
    let turn = axis(keys, DiscreteAction::TURN_RIGHT, DiscreteAction::TURN_LEFT) * TURN_STEP_DEG;
    let fwd = axis(keys, DiscreteAction::FORWARD, DiscreteAction::BACK) * MOVE_STEP;
    let side = axis(keys, DiscreteAction::STRAFE_RIGHT, DiscreteAction::STRAFE_LEFT) * MOVE_STEP;
    let yaw = pose.yaw_deg();
    let mid = (yaw + turn / 2.0).to_radians();
    let (s, c) = mid.sin_cos();
    // heading (s, c), right (c, -s)
    let dx = fwd * s + side * c;
    let dz = fwd * c - side * s;
    CameraPose::from_yaw(pose.x() + dx, pose.z() + dz, yaw + turn, pose.intrinsics)
}

/// Distance from a point to the closed unit square of cell `(i, j)`.
fn dist_to_cell(x: f64, z: f64, i: i64, j: i64) -> f64 {
    let cx = x.clamp(i as f64, i as f64 + 1.0);
    let cz = z.clamp(j as f64, j as f64 + 1.0);
    ((x - cx).powi(2) + (z - cz).powi(2)).sqrt()
}

/// The camera center keeps at least [`COLLISION_MARGIN`] from every wall.
pub fn is_clear(world: &GridWorld, x: f64, z: f64) -> bool {
    if !world.is_free_point(x, z) {
        return false;
    }
    let (ci, cj) = (x.floor() as i64, z.floor() as i64);
    for j in cj - 1..=cj + 1 {
        for i in ci - 1..=ci + 1 {
            if world.is_wall(i, j) && dist_to_cell(x, z, i, j) < COLLISION_MARGIN {
                return false;
            }
        }
    }
    true
}

/// [`keys_to_pose`] with collision: blocked moves slide along one axis if
/// possible, otherwise the translation is kept and only the yaw changes.
pub fn step_pose(world: &GridWorld, pose: &CameraPose, keys: DiscreteAction) -> CameraPose {
    let target = keys_to_pose(pose, keys);
    if is_clear(world, target.x(), target.z()) {
        return target;
    }
    let yaw = target.yaw_deg();
    let intr = pose.intrinsics;
    if is_clear(world, target.x(), pose.z()) && target.x() != pose.x() {
        return CameraPose::from_yaw(target.x(), pose.z(), yaw, intr);
    }
    if is_clear(world, pose.x(), target.z()) && target.z() != pose.z() {
        return CameraPose::from_yaw(pose.x(), target.z(), yaw, intr);
    }
    CameraPose::from_yaw(pose.x(), pose.z(), yaw, intr)
}

/// True when `keys` would be clamped by a wall.
pub fn collides(world: &GridWorld, pose: &CameraPose, keys: DiscreteAction) -> bool {
    let target = keys_to_pose(pose, keys);
    !is_clear(world, target.x(), target.z())
}

/// Threshold the relative motion between two poses back into keys.
pub fn pose_to_keys(prev: &CameraPose, next: &CameraPose) -> DiscreteAction {
    let turn = wrap_deg(next.yaw_deg() - prev.yaw_deg());
    let mid = (prev.yaw_deg() + turn / 2.0).to_radians();
    let (s, c) = mid.sin_cos();
    let (dx, dz) = (next.x() - prev.x(), next.z() - prev.z());
    let fwd = dx * s + dz * c;
    let side = dx * c - dz * s;
    let mut bits = 0u8;
    if fwd > TRANSLATION_THRESHOLD {
        bits |= DiscreteAction::FORWARD.0;
    } else if fwd < -TRANSLATION_THRESHOLD {
        bits |= DiscreteAction::BACK.0;
    }
    if side > TRANSLATION_THRESHOLD {
        bits |= DiscreteAction::STRAFE_RIGHT.0;
    } else if side < -TRANSLATION_THRESHOLD {
        bits |= DiscreteAction::STRAFE_LEFT.0;
    }
    if turn > ROTATION_THRESHOLD_DEG {
        bits |= DiscreteAction::TURN_RIGHT.0;
    } else if turn < -ROTATION_THRESHOLD_DEG {
        bits |= DiscreteAction::TURN_LEFT.0;
    }
    DiscreteAction(bits)
}
