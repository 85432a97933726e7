//! Named parameter storage shared by models, optimizers and checkpoints.

use sha2::{Digest, Sha256};

use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    /// Register a tensor and return its id.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Put parameter `id` on the tape (once per tape).
    pub fn var(&self, tape: &mut Tape<T>, id: usize) -> Var {
        tape.param(id, &self.values[id])
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Copy every same-named, same-shaped tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.id_of(name) {
                if other.values[j].shape() != self.values[i].shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?} vs {:?}",
                        other.values[j].shape(),
                        self.values[i].shape()
                    )));
                }
                self.values[i] = other.values[j].clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(|v| v.cast()).collect() }
    }

    /// Content hash over names, shapes and exact bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_f64c().to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Global L2 norm of the gradients of every stored parameter.
    pub fn grad_norm(&self, grads: &Grads<T>) -> f64 {
        (0..self.len())
            .filter_map(|id| grads.param(id))
            .map(|g| g.sq_norm().to_f64c())
            .sum::<f64>()
            .sqrt()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
