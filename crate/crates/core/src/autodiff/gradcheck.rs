//! Central finite-difference checks for tape gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Components with both gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64) {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = rel;
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }
}

fn eval_inputs(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks the gradient of `f` with respect to every element of every input.
pub fn check_inputs(
    inputs: &[Tensor],
    step: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.input(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let mut report = GradCheckReport::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let numeric = (eval_inputs(&plus, &f)? - eval_inputs(&minus, &f)?) / (2.0 * step);
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar loss built from `params`.
///
/// `stride` > 1 checks every `stride`-th element of each tensor (always
/// including the first), which keeps large miniature networks affordable.
pub fn check_params(
    params: &ParamStore,
    step: f64,
    stride: usize,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let out = f(&mut tape, params)?;
    let grads = tape.backward(out)?.keyed_like(params);
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, p)?;
        Ok(tape.value(out).item())
    };
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        let analytic = grads.get(&name).cloned();
        for i in (0..n).step_by(stride.max(1)) {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |g| g.data()[i]);
            report.record(&name, i, a, numeric);
        }
    }
    Ok(report)
}
