//! Central finite-difference gradient oracle (fp64).

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-10).
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare tape gradients of `f` against central differences with step `h`.
///
/// `f` receives a fresh tape and one differentiable var per input and must
/// return a scalar loss.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.input(v.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.data_mut()[j] = (up - down) / (2.0 * h);
        }
        let diff = analytic.sub(&numeric)?.sq_norm().sqrt();
        let denom = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt()).max(1e-10);
        rel_errors.push(diff / denom);
    }
    Ok(GradCheck { rel_errors })
}
