//! Reverse-mode differentiation over an append-only operation tape.
//!
//! Every op appends one node holding its output value and whatever the
//! backward pass needs. `backward` walks the nodes in exact reverse order and
//! accumulates gradients additively, so shared inputs sum their contributions.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` = may attend. Row-major `[queries × keys]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    nq: usize,
    nk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(nq: usize, nk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != nq * nk {
            return Err(Error::Shape(format!("mask needs {} entries, got {}", nq * nk, allowed.len())));
        }
        for r in 0..nq {
            if !allowed[r * nk..(r + 1) * nk].iter().any(|&a| a) {
                return Err(Error::MaskedRow(r));
            }
        }
        Ok(Self { nq, nk, allowed })
    }

    pub fn full(nq: usize, nk: usize) -> Self {
        Self { nq, nk, allowed: vec![true; nq * nk] }
    }

    pub fn from_fn(nq: usize, nk: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(nq * nk);
        for i in 0..nq {
            for j in 0..nk {
                allowed.push(f(i, j));
            }
        }
        Self::new(nq, nk, allowed)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nq, self.nk)
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.nk + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.nk..(q + 1) * self.nk]
    }

    /// Rows `start..start+len` as a new mask.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        Self::new(len, self.nk, self.allowed[start * self.nk..(start + len) * self.nk].to_vec())
    }
}

/// Per-token rotation angles for rotary encoding, stored as cos/sin per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    n_tokens: usize,
    pairs: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// One positional axis across all `pairs` rotated pairs.
    pub fn new_1d(positions: &[i64], pairs: usize, base: f64) -> Self {
        let axes: Vec<[i64; 1]> = positions.iter().map(|&p| [p]).collect();
        Self::from_axes(&axes, &[pairs], base)
    }

    /// Multi-axis variant: `groups[a]` consecutive pairs rotate with axis `a`.
    /// Inside each group the frequencies run `base^(-j/group)`.
    pub fn from_axes<const A: usize>(positions: &[[i64; A]], groups: &[usize; A], base: f64) -> Self {
        let pairs: usize = groups.iter().sum();
        let mut freqs = Vec::with_capacity(pairs);
        for (axis, &g) in groups.iter().enumerate() {
            for j in 0..g {
                freqs.push((axis, base.powf(-(j as f64) / g as f64)));
            }
        }
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for pos in positions {
            for &(axis, f) in &freqs {
                let angle = pos[axis] as f64 * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Self { n_tokens: positions.len(), pairs, cos, sin }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn concat(parts: &[&RopeTable]) -> Result<Self> {
        let pairs = parts.first().map(|p| p.pairs).unwrap_or(0);
        let mut out = Self { n_tokens: 0, pairs, cos: Vec::new(), sin: Vec::new() };
        for p in parts {
            if p.pairs != pairs {
                return Err(Error::Shape("rope tables disagree on pair count".into()));
            }
            out.n_tokens += p.n_tokens;
            out.cos.extend_from_slice(&p.cos);
            out.sin.extend_from_slice(&p.sin);
        }
        Ok(out)
    }
}

/// One 4×4 matrix per token, applied to every homogeneous 4-vector group of
/// each head's features.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMats {
    n_tokens: usize,
    mats: Vec<[f64; 16]>,
}

impl TokenMats {
    pub fn new(mats: Vec<[f64; 16]>) -> Self {
        Self { n_tokens: mats.len(), mats }
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn mats(&self) -> &[[f64; 16]] {
        &self.mats
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    LayerNorm { x: Var, rstd: Vec<T> },
    Silu(Var),
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Rope { x: Var, table: Arc<RopeTable>, heads: usize },
    TokenMats { x: Var, mats: Arc<TokenMats> },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records differentiable ops. `grad_enabled = false` gives an inference
/// tape that keeps values but no backward bookkeeping.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter by its store id; `None` if it was not used.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    /// Build gradients directly, keyed by parameter id.
    pub fn from_param_grads(items: Vec<(usize, Tensor<T>)>) -> Self {
        let mut grads = Vec::new();
        let mut params = HashMap::new();
        for (i, (id, g)) in items.into_iter().enumerate() {
            grads.push(Some(g));
            params.insert(id, Var(i));
        }
        Self { grads, params }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input, deduplicated by `id` within this tape.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value: value.clone(), op: Op::Param, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// A differentiable input that is not a stored parameter (used by tests
    /// and by gradient checks on raw inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node { value, op: Op::Param, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[n×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.numel() != d {
            return Err(Error::Shape(format!("bias of {} for width {d}", b.numel())));
        }
        let mut out = self.value(x).clone();
        let bd = b.data().to_vec();
        for r in 0..n {
            for (o, &bb) in out.data_mut()[r * d..(r + 1) * d].iter_mut().zip(&bd) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Multiply every element of `x` by the single element of `g`.
    pub fn scale_by(&mut self, x: Var, g: Var) -> Result<Var> {
        if self.value(g).numel() != 1 {
            return Err(Error::Shape("scale_by expects a one-element gate".into()));
        }
        let s = self.value(g).data()[0];
        let out = self.value(x).scale(s);
        Ok(self.push(out, Op::ScaleBy(x, g), &[x, g]))
    }

    /// `out[i] = x[idx[i]]` over rows.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            if i >= n {
                return Err(Error::Shape(format!("gather index {i} out of {n} rows")));
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::Shape(format!("column slice {start}+{len} out of {d}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Normalize each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let eps = T::from_f64c(1e-6);
        let dn = T::from_usize(d).unwrap();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&v| (v - mean) * rs));
            rstd.push(rs);
        }
        let out = Tensor::new(vec![n, d], out)?;
        let rstd = if self.grad_enabled { rstd } else { Vec::new() };
        Ok(self.push(out, Op::LayerNorm { x, rstd }, &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Multi-head masked softmax attention. `q: [nq × heads·dh]`,
    /// `k, v: [nk × heads·dh]`; logits are scaled by `1/sqrt(dh)` and masked
    /// keys get exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttnMask, heads: usize) -> Result<Var> {
        let (nq, width) = self.value(q).dims2()?;
        let (nk, kw) = self.value(k).dims2()?;
        let (nv, vw) = self.value(v).dims2()?;
        if kw != width || vw != width || nv != nk || width % heads != 0 {
            return Err(Error::Shape(format!(
                "attention shapes q[{nq}x{width}] k[{nk}x{kw}] v[{nv}x{vw}] heads {heads}"
            )));
        }
        if mask.dims() != (nq, nk) {
            return Err(Error::Shape(format!("mask {:?} for {nq}x{nk} logits", mask.dims())));
        }
        let (out, probs) = attention_fwd(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            mask,
            nq,
            nk,
            width,
            heads,
        )?;
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        let out = Tensor::new(vec![nq, width], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Rotate feature pairs of every head by the table's per-token angles.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>, heads: usize) -> Result<Var> {
        let (n, width) = self.value(x).dims2()?;
        check_rope(n, width, heads, &table)?;
        let mut out = self.value(x).clone();
        rope_apply(out.data_mut(), &table, n, width, heads, false);
        Ok(self.push(out, Op::Rope { x, table, heads }, &[x]))
    }

    /// Apply each token's 4×4 matrix to every 4-vector group of its features.
    pub fn token_mats(&mut self, x: Var, mats: Arc<TokenMats>, heads: usize) -> Result<Var> {
        let (n, width) = self.value(x).dims2()?;
        if mats.n_tokens != n || width % heads != 0 || (width / heads) % 4 != 0 {
            return Err(Error::Shape(format!(
                "token_mats: {} mats for {n} tokens of width {width} / {heads} heads",
                mats.n_tokens
            )));
        }
        let out = token_mats_apply(self.value(x).data(), &mats, n, width, false);
        let out = Tensor::new(vec![n, width], out)?;
        Ok(self.push(out, Op::TokenMats { x, mats }, &[x]))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.value(a).sub(self.value(b))?;
        let n = T::from_usize(d.numel().max(1)).unwrap();
        let out = Tensor::scalar(d.sq_norm() / n);
        Ok(self.push(out, Op::Mse(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Detached);
        }
        lv.check_finite("loss")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads, params: self.params.clone() })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                if self.nodes[a.0].needs_grad {
                    // dA = dOut · Bᵀ
                    let mut da = Tensor::zeros(&[m, k]);
                    T::gemm_raw(m, n, k, T::one(), g.data(), n, 1, bv.data(), 1, n, T::zero(), da.data_mut(), k, 1);
                    self.accumulate(grads, *a, da);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dOut
                    let mut db = Tensor::zeros(&[k, n]);
                    T::gemm_raw(k, m, n, T::one(), av.data(), 1, k, g.data(), n, 1, T::zero(), db.data_mut(), n, 1);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let (n, d) = g.dims2()?;
                    let mut db = vec![T::zero(); d];
                    for r in 0..n {
                        for (acc, &v) in db.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.zip_with(self.value(*b), |x, y| x * y)?);
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, g.zip_with(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, c) => self.accumulate(grads, *x, g.scale(*c)),
            Op::ScaleBy(x, gate) => {
                let s = self.value(*gate).data()[0];
                if self.nodes[x.0].needs_grad {
                    self.accumulate(grads, *x, g.scale(s));
                }
                if self.nodes[gate.0].needs_grad {
                    let dg: T = g.data().iter().zip(self.value(*x).data()).map(|(&a, &b)| a * b).sum();
                    let shape = self.value(*gate).shape().to_vec();
                    self.accumulate(grads, *gate, Tensor::new(shape, vec![dg])?);
                }
            }
            Op::GatherRows(x, idx) => {
                let (n, d) = self.value(*x).dims2()?;
                let mut dx = Tensor::zeros(&[n, d]);
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &v) in dx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (n, d) = self.value(*x).dims2()?;
                let (_, len) = g.dims2()?;
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    dx.data_mut()[r * d + start..r * d + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows(x, start) => {
                let (n, d) = self.value(*x).dims2()?;
                let (len, _) = g.dims2()?;
                let mut dx = Tensor::zeros(&[n, d]);
                dx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let (r, _) = self.value(*p).dims2()?;
                    if self.nodes[p.0].needs_grad {
                        self.accumulate(grads, *p, g.slice_rows(row, r)?);
                    }
                    row += r;
                }
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let (n, d) = y.dims2()?;
                let dn = T::from_usize(d).unwrap();
                let mut dx = Tensor::zeros(&[n, d]);
                for r in 0..n {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.iter().copied().sum::<T>() / dn;
                    let mean_gy = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for ((o, &gg), &yy) in dx.data_mut()[r * d..(r + 1) * d].iter_mut().zip(gy).zip(yr) {
                        *o = rstd[r] * (gg - mean_g - yy * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Silu(x) => {
                let dx = g.zip_with(self.value(*x), |gg, v| {
                    let s = T::one() / (T::one() + (-v).exp());
                    gg * s * (T::one() + v * (T::one() - s))
                })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let dx = g.zip_with(self.value(*x), |gg, v| gg * gelu_grad(v))?;
                self.accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, width) = self.value(*q).dims2()?;
                let (nk, _) = self.value(*k).dims2()?;
                let (dq, dk, dv) = attention_bwd(
                    g.data(),
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    nq,
                    nk,
                    width,
                    *heads,
                );
                self.accumulate(grads, *q, Tensor::new(vec![nq, width], dq)?);
                self.accumulate(grads, *k, Tensor::new(vec![nk, width], dk)?);
                self.accumulate(grads, *v, Tensor::new(vec![nk, width], dv)?);
            }
            Op::Rope { x, table, heads } => {
                let (n, width) = g.dims2()?;
                let mut dx = g.clone();
                rope_apply(dx.data_mut(), table, n, width, *heads, true);
                self.accumulate(grads, *x, dx);
            }
            Op::TokenMats { x, mats, .. } => {
                let (n, width) = g.dims2()?;
                let dx = token_mats_apply(g.data(), mats, n, width, true);
                self.accumulate(grads, *x, Tensor::new(vec![n, width], dx)?);
            }
            Op::Mse(a, b) => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let n = T::from_usize(diff.numel().max(1)).unwrap();
                let s = g.data()[0] * T::from_f64c(2.0) / n;
                let da = diff.scale(s);
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, da.scale(-T::one()));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, g.data()[0]));
            }
        }
        Ok(())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(0.044715);
    let half = T::from_f64c(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::from_f64c(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn check_rope(n: usize, width: usize, heads: usize, table: &RopeTable) -> Result<()> {
    if table.n_tokens != n {
        return Err(Error::Shape(format!("rope table has {} tokens, input {n}", table.n_tokens)));
    }
    if width % heads != 0 {
        return Err(Error::Shape(format!("width {width} not divisible by {heads} heads")));
    }
    let dh = width / heads;
    if dh % 2 != 0 {
        return Err(Error::OddPairDim(dh));
    }
    if table.pairs * 2 != dh {
        return Err(Error::Shape(format!("rope table rotates {} pairs, head dim {dh}", table.pairs)));
    }
    Ok(())
}

fn rope_apply<T: Scalar>(data: &mut [T], table: &RopeTable, n: usize, width: usize, heads: usize, inverse: bool) {
    let dh = width / heads;
    let pairs = dh / 2;
    for t in 0..n {
        let cs = &table.cos[t * pairs..(t + 1) * pairs];
        let sn = &table.sin[t * pairs..(t + 1) * pairs];
        for h in 0..heads {
            let base = t * width + h * dh;
            for p in 0..pairs {
                let c = T::from_f64c(cs[p]);
                let s = if inverse { T::from_f64c(-sn[p]) } else { T::from_f64c(sn[p]) };
                let a = data[base + 2 * p];
                let b = data[base + 2 * p + 1];
                data[base + 2 * p] = a * c - b * s;
                data[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

fn token_mats_apply<T: Scalar>(x: &[T], mats: &TokenMats, n: usize, width: usize, transpose: bool) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for t in 0..n {
        let m = &mats.mats[t];
        let mut mt = [T::zero(); 16];
        for r in 0..4 {
            for c in 0..4 {
                mt[r * 4 + c] = T::from_f64c(if transpose { m[c * 4 + r] } else { m[r * 4 + c] });
            }
        }
        let row = &x[t * width..(t + 1) * width];
        let orow = &mut out[t * width..(t + 1) * width];
        for (src, dst) in row.chunks_exact(4).zip(orow.chunks_exact_mut(4)) {
            for r in 0..4 {
                dst[r] = mt[r * 4] * src[0] + mt[r * 4 + 1] * src[1] + mt[r * 4 + 2] * src[2] + mt[r * 4 + 3] * src[3];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_fwd<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &AttnMask,
    nq: usize,
    nk: usize,
    width: usize,
    heads: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut out = vec![T::zero(); nq * width];
    let mut probs = vec![T::zero(); heads * nq * nk];
    for h in 0..heads {
        let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
        T::gemm_raw(nq, dh, nk, scale, &q[h * dh..], width, 1, &k[h * dh..], 1, width, T::zero(), p, nk, 1);
        for r in 0..nq {
            let row = &mut p[r * nk..(r + 1) * nk];
            let allowed = mask.row(r);
            let mut mx = T::neg_infinity();
            for (&s, &a) in row.iter().zip(allowed) {
                if a && s > mx {
                    mx = s;
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::MaskedRow(r));
            }
            let mut total = T::zero();
            for (s, &a) in row.iter_mut().zip(allowed) {
                *s = if a { (*s - mx).exp() } else { T::zero() };
                total += *s;
            }
            let inv = T::one() / total;
            for s in row.iter_mut() {
                *s *= inv;
            }
        }
        T::gemm_raw(nq, nk, dh, T::one(), p, nk, 1, &v[h * dh..], width, 1, T::zero(), &mut out[h * dh..], width, 1);
    }
    Ok((out, probs))
}

#[allow(clippy::too_many_arguments)]
fn attention_bwd<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    nq: usize,
    nk: usize,
    width: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = width / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); nq * width];
    let mut dk = vec![T::zero(); nk * width];
    let mut dv = vec![T::zero(); nk * width];
    let mut ds = vec![T::zero(); nq * nk];
    for h in 0..heads {
        let p = &probs[h * nq * nk..(h + 1) * nq * nk];
        // dP = dO · Vᵀ
        T::gemm_raw(nq, dh, nk, T::one(), &dout[h * dh..], width, 1, &v[h * dh..], 1, width, T::zero(), &mut ds, nk, 1);
        // dV = Pᵀ · dO
        T::gemm_raw(nk, nq, dh, T::one(), p, 1, nk, &dout[h * dh..], width, 1, T::zero(), &mut dv[h * dh..], width, 1);
        for r in 0..nq {
            let pr = &p[r * nk..(r + 1) * nk];
            let dr = &mut ds[r * nk..(r + 1) * nk];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in dr.iter_mut().zip(pr) {
                *d = pp * (*d - dot) * scale;
            }
        }
        // dQ = dS · K, dK = dSᵀ · Q
        T::gemm_raw(nq, nk, dh, T::one(), &ds, nk, 1, &k[h * dh..], width, 1, T::zero(), &mut dq[h * dh..], width, 1);
        T::gemm_raw(nk, nq, dh, T::one(), &ds, 1, nk, &q[h * dh..], width, 1, T::zero(), &mut dk[h * dh..], width, 1);
    }
    (dq, dk, dv)
}
