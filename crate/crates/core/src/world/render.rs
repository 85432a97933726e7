use serde::{Deserialize, Serialize};

use super::grid::{GridWorld, CEILING_COLOR, FLOOR_COLOR};
use super::pose::CameraPose;
use crate::{Error, Result};

/// Packed RGB8 image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub rgb: Vec<u8>,
}

impl Frame {
    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Brightness falloff with Euclidean ray length.
const DISTANCE_FALLOFF: f64 = 0.25;
/// Faces whose normal points along `z` are drawn darker.
const Z_FACE_SHADE: f64 = 0.8;
const WALL_HALF_HEIGHT: f64 = 0.5;

/// First wall hit by a ground-plane ray from `(px, pz)` along `(dx, dz)`.
/// Returns `(t, cell_x, cell_z, hit_z_face)` where the hit point is
/// `origin + t * dir`.
pub fn cast_ray(world: &GridWorld, px: f64, pz: f64, dx: f64, dz: f64) -> (f64, i64, i64, bool) {
    let mut mx = px.floor() as i64;
    let mut mz = pz.floor() as i64;
    let delta_x = if dx == 0.0 { f64::INFINITY } else { (1.0 / dx).abs() };
    let delta_z = if dz == 0.0 { f64::INFINITY } else { (1.0 / dz).abs() };
    let (step_x, mut side_x) =
        if dx < 0.0 { (-1, (px - mx as f64) * delta_x) } else { (1, (mx as f64 + 1.0 - px) * delta_x) };
    let (step_z, mut side_z) =
        if dz < 0.0 { (-1, (pz - mz as f64) * delta_z) } else { (1, (mz as f64 + 1.0 - pz) * delta_z) };
    let limit = 4 * world.size + 4;
    for _ in 0..limit {
        let z_face;
        let t;
        if side_x < side_z {
            t = side_x;
            side_x += delta_x;
            mx += step_x;
            z_face = false;
        } else {
            t = side_z;
            side_z += delta_z;
            mz += step_z;
            z_face = true;
        }
        if world.is_wall(mx, mz) {
            return (t, mx, mz, z_face);
        }
    }
    (f64::INFINITY, mx, mz, false)
}

/// Column raycast of the grid world from `pose`.
pub fn render(world: &GridWorld, pose: &CameraPose) -> Result<Frame> {
    if !world.is_free_point(pose.x(), pose.z()) {
        return Err(Error::PoseInWall(pose.x(), pose.z()));
    }
    let intr = pose.intrinsics;
    let (w, h) = (intr.width as usize, intr.height as usize);
    let mut rgb = vec![0u8; w * h * 3];
    let (fx, fz) = pose.forward();
    let (rx, rz) = pose.right();
    for col in 0..w {
        let u = (col as f64 + 0.5 - intr.cx) / intr.focal;
        let (dx, dz) = (fx + u * rx, fz + u * rz);
        let (t, cell_x, cell_z, z_face) = cast_ray(world, pose.x(), pose.z(), dx, dz);
        let euclid = t * (1.0 + u * u).sqrt();
        let mut shade = 1.0 / (1.0 + DISTANCE_FALLOFF * euclid);
        if z_face {
            shade *= Z_FACE_SHADE;
        }
        let base = world.wall_color(cell_x, cell_z);
        let wall = [
            (base[0] as f64 * shade).round() as u8,
            (base[1] as f64 * shade).round() as u8,
            (base[2] as f64 * shade).round() as u8,
        ];
        for row in 0..h {
            let v = (row as f64 + 0.5 - intr.cy) / intr.focal;
            let color = if v.abs() * t <= WALL_HALF_HEIGHT {
                wall
            } else if v < 0.0 {
                CEILING_COLOR
            } else {
                FLOOR_COLOR
            };
            let i = (row * w + col) * 3;
            rgb[i..i + 3].copy_from_slice(&color);
        }
    }
    Ok(Frame { width: intr.width, height: intr.height, rgb })
}
