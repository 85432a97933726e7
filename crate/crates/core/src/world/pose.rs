use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    /// Square pixels, centered principal point, 90° horizontal field of view.
    pub fn hfov90(width: u32, height: u32) -> Self {
        Self { focal: width as f64 / 2.0, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }

    /// 4×4 lift of the intrinsics into normalized device coordinates, mapping
    /// the image to `[-1, 1]²`.
    pub fn ndc_projection(&self) -> Result<[[f64; 4]; 4]> {
        if !(self.focal.is_finite() && self.focal.abs() > 1e-12) || self.width == 0 || self.height == 0 {
            return Err(Error::SingularIntrinsics);
        }
        let (w, h) = (self.width as f64, self.height as f64);
        Ok([
            [2.0 * self.focal / w, 0.0, 2.0 * self.cx / w - 1.0, 0.0],
            [0.0, 2.0 * self.focal / h, 2.0 * self.cy / h - 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ])
    }
}

/// Camera-to-world rigid pose plus intrinsics.
///
/// World frame: `x` east, `y` down, `z` north; grid cell `(i, j)` spans
/// `x ∈ [i, i+1]`, `z ∈ [j, j+1]`. Camera frame: `x` right, `y` down,
/// `z` forward. Rotation columns are the camera axes in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
}

/// Translations and yaw angles snap to these lattices so that inverse action
/// sequences land on bit-identical poses.
const TRANSLATION_QUANTUM: f64 = 1.0 / (1u64 << 32) as f64;
const YAW_QUANTUM_DEG: f64 = 1e-6;

pub(crate) fn snap_translation(x: f64) -> f64 {
    (x / TRANSLATION_QUANTUM).round() * TRANSLATION_QUANTUM
}

pub(crate) fn snap_yaw(deg: f64) -> f64 {
    let wrapped = deg.rem_euclid(360.0);
    let q = (wrapped / YAW_QUANTUM_DEG).round() * YAW_QUANTUM_DEG;
    if q >= 360.0 {
        q - 360.0
    } else {
        q
    }
}

/// Wrap an angle difference into `(-180, 180]`.
pub fn wrap_deg(d: f64) -> f64 {
    let mut w = d.rem_euclid(360.0);
    if w > 180.0 {
        w -= 360.0;
    }
    w
}

impl CameraPose {
    /// Yaw-only pose at ground position `(x, z)`; yaw 0 faces `+z`, positive
    /// yaw turns right.
    pub fn from_yaw(x: f64, z: f64, yaw_deg: f64, intrinsics: Intrinsics) -> Self {
        let yaw = snap_yaw(yaw_deg);
        let (s, c) = yaw.to_radians().sin_cos();
        Self {
            rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            translation: [snap_translation(x), 0.0, snap_translation(z)],
            intrinsics,
        }
    }

    pub fn x(&self) -> f64 {
        self.translation[0]
    }

    pub fn z(&self) -> f64 {
        self.translation[2]
    }

    /// Yaw in degrees, `[0, 360)`.
    pub fn yaw_deg(&self) -> f64 {
        snap_yaw(self.rotation[0][2].atan2(self.rotation[2][2]).to_degrees())
    }

    /// Unit heading on the ground plane as `(x, z)`.
    pub fn forward(&self) -> (f64, f64) {
        (self.rotation[0][2], self.rotation[2][2])
    }

    pub fn right(&self) -> (f64, f64) {
        (self.rotation[0][0], self.rotation[2][0])
    }

    pub fn distance(&self, other: &CameraPose) -> f64 {
        let d: f64 = (0..3).map(|i| (self.translation[i] - other.translation[i]).powi(2)).sum();
        d.sqrt()
    }

    /// `[R | T]` row-major, 12 floats.
    pub fn to_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            out[r * 4..r * 4 + 3].copy_from_slice(&self.rotation[r]);
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_rows(rows: &[f64; 12], intrinsics: Intrinsics) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        let mut translation = [0.0; 3];
        for r in 0..3 {
            rotation[r].copy_from_slice(&rows[r * 4..r * 4 + 3]);
            translation[r] = rows[r * 4 + 3];
        }
        Self { rotation, translation, intrinsics }
    }

    /// 4×4 camera-to-world matrix.
    pub fn cam_to_world(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// 4×4 world-to-camera matrix `[Rᵀ | -RᵀT]`.
    pub fn world_to_cam(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = r[j][i];
            }
            m[i][3] = -(0..3).map(|k| r[k][i] * t[k]).sum::<f64>();
        }
        m[3][3] = 1.0;
        m
    }

    /// World point expressed in this camera's frame.
    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [p[0] - self.translation[0], p[1] - self.translation[1], p[2] - self.translation[2]];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// Max deviation of `RᵀR` from identity and the determinant of `R`.
    pub fn orthonormality(&self) -> (f64, f64) {
        let r = &self.rotation;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                dev = dev.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (dev, det)
    }

    /// Apply a world-frame rigid transform `G` (4×4) to the camera:
    /// `cam_to_world' = G · cam_to_world`.
    pub fn transformed(&self, g: &[[f64; 4]; 4]) -> Self {
        let c2w = self.cam_to_world();
        let mut out = *self;
        for i in 0..3 {
            for j in 0..3 {
                out.rotation[i][j] = (0..3).map(|k| g[i][k] * c2w[k][j]).sum();
            }
            out.translation[i] = (0..4).map(|k| g[i][k] * c2w[k][3]).sum();
        }
        out
    }
}
