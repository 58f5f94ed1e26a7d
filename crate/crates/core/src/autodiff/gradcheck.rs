//! Central finite-difference gradient checking.
//!
//! The op under test may return a tensor of any shape; it is reduced to a
//! scalar with a fixed pseudo-random probe `Σ r_i y_i`, which exercises
//! every output component with a distinct weight.
//!
//! Errors are normalized by the gradient scale of the whole op (largest
//! analytic or numeric component over all inputs), not per tensor: inputs with
//! a structurally zero gradient, such as a key bias under softmax or a conv
//! bias ahead of train-mode batch norm, would otherwise divide round-off noise
//! by the `1e-8` floor.

use serde::Serialize;

use super::tape::{Fault, Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Error for one checked input.
#[derive(Debug, Clone, Serialize)]
pub struct InputCheck {
    pub input: String,
    /// `max|a − n| / max(scale, 1e-8)` with `scale` the op-wide gradient scale.
    pub rel_error: f64,
    pub max_abs_error: f64,
    /// Largest component of this input's analytic gradient.
    pub grad_scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub op: String,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
    pub error: Option<String>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        if self.error.is_some() {
            return f64::INFINITY;
        }
        self.inputs.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    fn failed(op: &str, tol: f64, msg: String) -> Self {
        Self {
            op: op.to_string(),
            tol,
            inputs: Vec::new(),
            error: Some(msg),
            passed: false,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)` on the largest-deviation component,
/// with magnitudes taken over whole tensors.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.max_abs_diff(numeric);
    diff / analytic.max_abs().max(numeric.max_abs()).max(1e-8)
}

pub struct Gradcheck {
    pub tol: f64,
    pub step: f64,
    pub fault: Option<Fault>,
    pub probe_seed: u64,
}

impl Default for Gradcheck {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            step: DEFAULT_STEP,
            fault: None,
            probe_seed: 0x5EED,
        }
    }
}

impl Gradcheck {
    /// Checks `f` with respect to every named input.
    ///
    /// `f` receives the tape and one leaf per input, in order, and returns
    /// the output variable. Failures are reported, never raised.
    pub fn run<F>(&self, op: &str, inputs: &[(String, Tensor)], f: F) -> GradcheckReport
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        match self.try_run(op, inputs, &f) {
            Ok(r) => r,
            Err(e) => GradcheckReport::failed(op, self.tol, e.to_string()),
        }
    }

    fn probed_loss<F>(&self, tape: &mut Tape, values: &[Tensor], f: &F) -> Result<(Var, Vec<Var>)>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let leaves: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(tape, &leaves)?;
        let shape = tape.value(out).shape().to_vec();
        let probe_seed = self.probe_seed;
        let probe = Tensor::from_fn(&shape, |i| 2.0 * rng::uniform_at(probe_seed, i as u64) - 1.0);
        Ok((tape.weighted_sum(out, probe)?, leaves))
    }

    fn try_run<F>(&self, op: &str, inputs: &[(String, Tensor)], f: &F) -> Result<GradcheckReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
        let mut tape = Tape::with_fault(self.fault);
        let (loss, leaves) = self.probed_loss(&mut tape, &values, f)?;
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor> = leaves
            .iter()
            .zip(&values)
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect();

        let eval = |vals: &[Tensor]| -> Result<f64> {
            let mut t = Tape::new();
            let (l, _) = self.probed_loss(&mut t, vals, f)?;
            Ok(t.value(l).data()[0])
        };

        let mut numerics = Vec::with_capacity(values.len());
        for k in 0..values.len() {
            let mut numeric = Tensor::zeros(values[k].shape());
            for i in 0..values[k].len() {
                let orig = values[k].data()[i];
                values[k].data_mut()[i] = orig + self.step;
                let up = eval(&values)?;
                values[k].data_mut()[i] = orig - self.step;
                let down = eval(&values)?;
                values[k].data_mut()[i] = orig;
                numeric.data_mut()[i] = (up - down) / (2.0 * self.step);
            }
            numerics.push(numeric);
        }
        let scale = analytic
            .iter()
            .zip(&numerics)
            .map(|(a, n)| a.max_abs().max(n.max_abs()))
            .fold(1e-8, f64::max);
        let checks: Vec<InputCheck> = inputs
            .iter()
            .zip(analytic.iter().zip(&numerics))
            .map(|((name, _), (a, n))| {
                let abs = a.max_abs_diff(n);
                InputCheck {
                    input: name.clone(),
                    rel_error: abs / scale,
                    max_abs_error: abs,
                    grad_scale: a.max_abs(),
                }
            })
            .collect();
        let passed = checks.iter().all(|c| c.rel_error < self.tol);
        Ok(GradcheckReport {
            op: op.to_string(),
            tol: self.tol,
            inputs: checks,
            error: None,
            passed,
        })
    }
}
