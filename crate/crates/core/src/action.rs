//! Dual action representation.
//!
//! Discrete keys join the noise-level embedding through a zero-initialized
//! MLP. Continuous poses enter self-attention as projective frustum
//! transforms `D = P_ndc · world_to_camera` applied to 4-vector groups of
//! queries, keys and values, in a second attention branch behind a learned
//! gate that starts at zero.

use std::sync::Arc;

use crate::params::ParamStore;
use crate::rng::{self, WmRng};
use crate::tape::{AttnMask, RopeTable, Tape, TokenMats, Var};
use crate::tensor::{Scalar, Tensor};
use crate::world::{CameraPose, DiscreteAction, CHUNK_FRAMES};
use crate::{Error, Result};

/// Dominant key mask of a chunk: the most frequent per-frame mask, ties going
/// to the one seen last.
pub fn chunk_keys(frame_keys: &[DiscreteAction]) -> DiscreteAction {
    let mut best = DiscreteAction::IDLE;
    let mut best_count = 0;
    for (i, &k) in frame_keys.iter().enumerate() {
        let count = frame_keys.iter().filter(|&&o| o == k).count();
        let last = frame_keys[i + 1..].iter().all(|&o| o != k);
        if last && count >= best_count {
            best = k;
            best_count = count;
        }
    }
    best
}

pub type Mat4 = [[f64; 4]; 4];

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat4_transpose(a: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn mat4_inverse(a: &Mat4) -> Option<Mat4> {
    let mut m = *a;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..4 {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..4 {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for j in 0..4 {
                        m[r][j] -= f * m[col][j];
                        inv[r][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

fn flat(m: &Mat4) -> [f64; 16] {
    let mut out = [0.0; 16];
    for i in 0..4 {
        out[i * 4..i * 4 + 4].copy_from_slice(&m[i]);
    }
    out
}

/// Per-frame projective frustum matrix and its inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectiveFrustum {
    pub d: Mat4,
    pub d_inv: Mat4,
}

impl ProjectiveFrustum {
    /// `D_self · D_other⁻¹`.
    pub fn relative_to(&self, other: &ProjectiveFrustum) -> Mat4 {
        mat4_mul(&self.d, &other.d_inv)
    }
}

/// `D = P_ndc(K) · world_to_camera(R, T·scale)` for each pose. `scale`
/// converts world units so that translations stay O(1) inside attention.
pub fn build_dproj(poses: &[CameraPose], scale: f64) -> Result<Vec<ProjectiveFrustum>> {
    poses
        .iter()
        .map(|pose| {
            let p = pose.intrinsics.ndc_projection()?;
            let p_inv = mat4_inverse(&p).ok_or(Error::SingularIntrinsics)?;
            let mut scaled = *pose;
            for t in scaled.translation.iter_mut() {
                *t *= scale;
            }
            let d = mat4_mul(&p, &scaled.world_to_cam());
            let d_inv = mat4_mul(&scaled.cam_to_world(), &p_inv);
            Ok(ProjectiveFrustum { d, d_inv })
        })
        .collect()
}

/// Frustum transforms laid out per token.
#[derive(Debug, Clone)]
pub struct FrustumTokens {
    /// `Dᵀ`, applied to queries.
    pub dt: Arc<TokenMats>,
    /// `D⁻¹`, applied to keys and values.
    pub d_inv: Arc<TokenMats>,
    /// `D`, applied to the branch output.
    pub d: Arc<TokenMats>,
}

impl FrustumTokens {
    /// `frames[t]` is the frustum of token `t`'s frame.
    pub fn new(per_token: &[ProjectiveFrustum]) -> Self {
        Self {
            dt: Arc::new(TokenMats::new(per_token.iter().map(|f| flat(&mat4_transpose(&f.d))).collect())),
            d_inv: Arc::new(TokenMats::new(per_token.iter().map(|f| flat(&f.d_inv)).collect())),
            d: Arc::new(TokenMats::new(per_token.iter().map(|f| flat(&f.d)).collect())),
        }
    }

    pub fn concat(parts: &[&FrustumTokens]) -> Self {
        let cat = |sel: fn(&FrustumTokens) -> &Arc<TokenMats>| {
            Arc::new(TokenMats::new(parts.iter().flat_map(|p| sel(p).mats().iter().copied()).collect()))
        };
        Self { dt: cat(|p| &p.dt), d_inv: cat(|p| &p.d_inv), d: cat(|p| &p.d) }
    }
}

/// Positional and projective inputs for one side (queries or keys).
#[derive(Debug, Clone)]
pub struct TokenGeometry {
    pub rope: Arc<RopeTable>,
    pub frustums: Option<FrustumTokens>,
}

/// `Attn₁ + g·Attn₂`: RoPE attention plus the projective branch. Without
/// frustums (or without a gate) only `Attn₁` is computed.
#[allow(clippy::too_many_arguments)]
pub fn dual_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    query_geom: &TokenGeometry,
    key_geom: &TokenGeometry,
    mask: &AttnMask,
    heads: usize,
    gate: Option<Var>,
) -> Result<Var> {
    let width = tape.shape(q)[1];
    if width % heads != 0 || (width / heads) % 4 != 0 {
        return Err(Error::Config(format!("head dim {} must be divisible by 4", width / heads.max(1))));
    }
    let qr = tape.rope(q, query_geom.rope.clone(), heads)?;
    let kr = tape.rope(k, key_geom.rope.clone(), heads)?;
    let attn1 = tape.attention(qr, kr, v, mask, heads)?;
    let (Some(gate), Some(qf), Some(kf)) = (gate, &query_geom.frustums, &key_geom.frustums) else {
        return Ok(attn1);
    };
    let qp = tape.token_mats(q, qf.dt.clone(), heads)?;
    let kp = tape.token_mats(k, kf.d_inv.clone(), heads)?;
    let vp = tape.token_mats(v, kf.d_inv.clone(), heads)?;
    let inner = tape.attention(qp, kp, vp, mask, heads)?;
    let attn2 = tape.token_mats(inner, qf.d.clone(), heads)?;
    let gated = tape.scale_by(attn2, gate)?;
    tape.add(attn1, gated)
}

/// Learned per-key vectors summed over the set bits, then a two-layer MLP
/// whose output layer starts at zero.
#[derive(Debug, Clone)]
pub struct KeyEncoder {
    pub table: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl KeyEncoder {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut WmRng) -> Self {
        let n = DiscreteAction::NUM_KEYS;
        Self {
            table: store.add("keys.table", rng::normal_scaled(rng, &[n, dim], 1.0)),
            w1: store.add("keys.w1", rng::normal_scaled(rng, &[dim, dim], 1.0 / (dim as f64).sqrt())),
            b1: store.add("keys.b1", Tensor::zeros(&[dim])),
            w2: store.add("keys.w2", Tensor::zeros(&[dim, dim])),
            b2: store.add("keys.b2", Tensor::zeros(&[dim])),
        }
    }

    /// Multi-hot `[n × 6]` encoding of per-chunk keys.
    pub fn multi_hot<T: Scalar>(keys: &[DiscreteAction]) -> Tensor<T> {
        let n = DiscreteAction::NUM_KEYS;
        let mut t = Tensor::zeros(&[keys.len(), n]);
        for (r, k) in keys.iter().enumerate() {
            for b in k.set_bits() {
                t.data_mut()[r * n + b] = T::one();
            }
        }
        t
    }

    /// `t_emb + MLP(Σ table[bit])`, one row per chunk.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, keys: &[DiscreteAction], t_emb: Var) -> Result<Var> {
        let hot = tape.leaf(Self::multi_hot(keys));
        let table = store.var(tape, self.table);
        let e = tape.matmul(hot, table)?;
        let w1 = store.var(tape, self.w1);
        let b1 = store.var(tape, self.b1);
        let h = tape.matmul(e, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.silu(h);
        let w2 = store.var(tape, self.w2);
        let b2 = store.var(tape, self.b2);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        tape.add(t_emb, o)
    }
}

/// Per-frame frustums for a chunk's 4 poses, repeated over the frame tokens.
pub fn chunk_frustums(poses: &[CameraPose; CHUNK_FRAMES], tokens_per_frame: usize, scale: f64) -> Result<Vec<ProjectiveFrustum>> {
    let per_frame = build_dproj(poses, scale)?;
    Ok(per_frame.iter().flat_map(|f| std::iter::repeat_n(*f, tokens_per_frame)).collect())
}
