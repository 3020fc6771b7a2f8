//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::Result;

/// Outcome of comparing tape gradients with finite differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Per input: ‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂).
    pub relative_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the gradient of the scalar `f(inputs)` computed on the tape with
/// central differences of step `h` applied to every element of every input.
/// Gradients with both norms below this count as zero; central differences
/// of an invariant direction only produce rounding noise.
pub const ZERO_GRADIENT: f64 = 1e-7;

pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(root))
    };

    let mut work = inputs.to_vec();
    let mut relative_errors = Vec::with_capacity(inputs.len());
    for (idx, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for e in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[idx].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[e];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        relative_errors.push(if denom <= ZERO_GRADIENT { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradCheck { relative_errors })
}
