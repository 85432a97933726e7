use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Boundary-walled occupancy grid with a connected free region.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub seed: u64,
    pub size: usize,
    /// Row-major by `z`, then `x`: `occupancy[z * size + x]`, `true` = wall.
    occupancy: Vec<bool>,
}

pub const DEFAULT_WORLD_SIZE: usize = 24;
const TARGET_WALL_FRACTION: f64 = 0.25;
const MAX_FREE_FRACTION_LOSS: f64 = 0.4;

/// Distinct saturated wall colors; each wall cell picks one by hash.
const PALETTE: [[u8; 3]; 8] = [
    [220, 60, 50],
    [60, 170, 70],
    [60, 90, 220],
    [230, 200, 40],
    [180, 70, 200],
    [40, 190, 200],
    [240, 140, 40],
    [235, 235, 235],
];

pub const FLOOR_COLOR: [u8; 3] = [70, 60, 50];
pub const CEILING_COLOR: [u8; 3] = [30, 40, 70];

fn mix(mut h: u64) -> u64 {
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

impl GridWorld {
    pub fn generate(seed: u64) -> Self {
        Self::generate_sized(seed, DEFAULT_WORLD_SIZE)
    }

    /// Carve walls by rejection: a candidate wall segment is kept only if the
    /// free region stays connected, so the result is connected by
    /// construction.
    pub fn generate_sized(seed: u64, size: usize) -> Self {
        let size = size.max(4);
        let mut world = Self { seed, size, occupancy: vec![false; size * size] };
        for i in 0..size {
            world.set(i, 0, true);
            world.set(i, size - 1, true);
            world.set(0, i, true);
            world.set(size - 1, i, true);
        }
        let interior = (size - 2) * (size - 2);
        let target = ((interior as f64) * TARGET_WALL_FRACTION).floor() as usize;
        let max_walls = ((interior as f64) * MAX_FREE_FRACTION_LOSS).floor() as usize;
        let mut rng = rng::stream(seed, 0x5eed);
        let mut walls = 0;
        let mut attempts = 0;
        while walls < target.min(max_walls) && attempts < interior * 8 {
            attempts += 1;
            let x = rng.random_range(1..size - 1);
            let z = rng.random_range(1..size - 1);
            let len = rng.random_range(1..=3usize);
            let horizontal = rng.random_bool(0.5);
            let cells: Vec<(usize, usize)> = (0..len)
                .map(|k| if horizontal { (x + k, z) } else { (x, z + k) })
                .filter(|&(cx, cz)| cx < size - 1 && cz < size - 1 && !world.is_wall(cx as i64, cz as i64))
                .collect();
            if cells.is_empty() || walls + cells.len() > max_walls {
                continue;
            }
            for &(cx, cz) in &cells {
                world.set(cx, cz, true);
            }
            if world.free_connected() {
                walls += cells.len();
            } else {
                for &(cx, cz) in &cells {
                    world.set(cx, cz, false);
                }
            }
        }
        world
    }

    /// World with only the boundary walled.
    pub fn open(seed: u64, size: usize) -> Self {
        let mut world = Self { seed, size, occupancy: vec![false; size * size] };
        for i in 0..size {
            world.set(i, 0, true);
            world.set(i, size - 1, true);
            world.set(0, i, true);
            world.set(size - 1, i, true);
        }
        world
    }

    /// Build from explicit rows (`'#'` = wall), row index = `z`.
    pub fn from_ascii(seed: u64, rows: &[&str]) -> Self {
        let size = rows.len();
        let mut occupancy = vec![false; size * size];
        for (z, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate().take(size) {
                occupancy[z * size + x] = ch == '#';
            }
        }
        Self { seed, size, occupancy }
    }

    fn set(&mut self, x: usize, z: usize, wall: bool) {
        self.occupancy[z * self.size + x] = wall;
    }

    /// Out-of-bounds cells count as walls.
    pub fn is_wall(&self, x: i64, z: i64) -> bool {
        if x < 0 || z < 0 || x >= self.size as i64 || z >= self.size as i64 {
            return true;
        }
        self.occupancy[z as usize * self.size + x as usize]
    }

    pub fn is_free_point(&self, x: f64, z: f64) -> bool {
        !self.is_wall(x.floor() as i64, z.floor() as i64)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for z in 0..self.size {
            for x in 0..self.size {
                if !self.occupancy[z * self.size + x] {
                    out.push((x, z));
                }
            }
        }
        out
    }

    pub fn interior_free_fraction(&self) -> f64 {
        let interior = (self.size - 2) * (self.size - 2);
        self.free_cells().len() as f64 / interior as f64
    }

    pub fn boundary_walled(&self) -> bool {
        (0..self.size).all(|i| {
            self.is_wall(i as i64, 0)
                && self.is_wall(i as i64, self.size as i64 - 1)
                && self.is_wall(0, i as i64)
                && self.is_wall(self.size as i64 - 1, i as i64)
        })
    }

    /// Flood fill from the first free cell reaches every free cell.
    pub fn free_connected(&self) -> bool {
        let free = self.free_cells();
        let Some(&(sx, sz)) = free.first() else { return false };
        let mut seen = vec![false; self.size * self.size];
        let mut queue = VecDeque::from([(sx, sz)]);
        seen[sz * self.size + sx] = true;
        let mut count = 0;
        while let Some((x, z)) = queue.pop_front() {
            count += 1;
            for (dx, dz) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                let (nx, nz) = (x as i64 + dx, z as i64 + dz);
                if !self.is_wall(nx, nz) {
                    let idx = nz as usize * self.size + nx as usize;
                    if !seen[idx] {
                        seen[idx] = true;
                        queue.push_back((nx as usize, nz as usize));
                    }
                }
            }
        }
        count == free.len()
    }

    /// Palette color of a wall cell, a pure function of `(seed, x, z)`.
    pub fn wall_color(&self, x: i64, z: i64) -> [u8; 3] {
        let h = mix(self.seed ^ mix((x as u64).wrapping_mul(0x9e37_79b9) ^ (z as u64).wrapping_shl(32)));
        PALETTE[(h % PALETTE.len() as u64) as usize]
    }

    /// Free cell center chosen deterministically from `seed`.
    pub fn spawn_cell(&self, seed: u64) -> (usize, usize) {
        let free = self.free_cells();
        let mut r = rng::stream(seed, 0xc0de);
        free[r.random_range(0..free.len())]
    }
}
