//! Adam with bias correction, and plain gradient descent.

use crate::params::ParamStore;
use crate::tape::Grads;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub kind: OptimKind,
    pub lr: f64,
    /// Decoupled weight decay, applied as `p -= lr * wd * p`.
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Self { kind, lr, weight_decay: 0.0, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn moment_shapes(&self) -> Vec<Option<Vec<usize>>> {
        self.m.iter().map(|m| m.as_ref().map(|t| t.shape().to_vec())).collect()
    }

    /// Apply one update to every parameter that received a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        for id in 0..params.len() {
            if let Some(g) = grads.param(id) {
                g.check_finite(params.name(id))?;
            }
        }
        self.step += 1;
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        let lr = self.lr;
        let wd = self.weight_decay;
        for id in 0..params.len() {
            let Some(g) = grads.param(id) else { continue };
            let p = params.get_mut(id);
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("grad {:?} for param {:?}", g.shape(), p.shape())));
            }
            if wd != 0.0 {
                let f = T::from_f64c(1.0 - lr * wd);
                p.data_mut().iter_mut().for_each(|x| *x *= f);
            }
            match self.kind {
                OptimKind::Sgd => {
                    let s = T::from_f64c(lr);
                    for (x, &gg) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= s * gg;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let m = self.m[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.v[id].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (b1, b2) = (T::from_f64c(beta1), T::from_f64c(beta2));
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    let (c1, c2) = (T::from_f64c(c1), T::from_f64c(c2));
                    let (lr_t, eps_t) = (T::from_f64c(lr), T::from_f64c(eps));
                    for (((x, &gg), mm), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        *mm = b1 * *mm + (T::one() - b1) * gg;
                        *vv = b2 * *vv + (T::one() - b2) * gg * gg;
                        let mhat = *mm / c1;
                        let vhat = *vv / c2;
                        *x -= lr_t * mhat / (vhat.sqrt() + eps_t);
                    }
                }
            }
        }
        Ok(())
    }
}
