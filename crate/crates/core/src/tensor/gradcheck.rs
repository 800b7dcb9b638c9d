//! Central finite-difference gradient checks, independent of [`Tape::backward`].

use super::{Result, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)` seen.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` for every element of every input. Every input is treated as
/// differentiable regardless of its `requires_grad` flag.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = xs
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
