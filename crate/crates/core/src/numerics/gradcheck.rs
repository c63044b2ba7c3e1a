//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it is independent of
//! every backward rule it checks.

use crate::error::Result;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Set when a perturbation changed the discrete signature returned by
    /// the function (e.g. a top-K selection), making the point unusable.
    pub unstable: bool,
}

/// Relative error with a small absolute floor so that near-zero
/// derivatives are compared on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks `d f / d inputs` for a function of leaf tensors.
pub fn check_leaves<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic.data()[k], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks parameter gradients of a scalar function of a [`ParamStore`].
///
/// `f` returns the loss node and a discrete signature; if any perturbed
/// evaluation yields a different signature the result is flagged
/// `unstable`. `stride` > 1 checks every `stride`-th scalar of each
/// parameter (always including the first).
pub fn check_params<F>(store: &ParamStore<f64>, eps: f64, stride: usize, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<(Var, Vec<usize>)>,
{
    let mut base = store.clone();
    base.zero_grad();
    let mut tape = Tape::new();
    let (loss, signature) = f(&mut tape, &base)?;
    let grads = tape.backward(loss)?;
    grads.accumulate_into(&tape, &mut base, 1.0);

    let mut report = GradCheck::default();
    let mut work = base.clone();
    let ids: Vec<_> = base.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = base.value(id).len();
        for k in (0..n).step_by(stride.max(1)) {
            let orig = base.value(id).data()[k];
            let mut eval = |delta: f64| -> Result<(f64, bool)> {
                work.value_mut(id).data_mut()[k] = orig + delta;
                let mut t = Tape::new();
                let (l, sig) = f(&mut t, &work)?;
                work.value_mut(id).data_mut()[k] = orig;
                Ok((t.value(l).item(), sig == signature))
            };
            let (up, s1) = eval(eps)?;
            let (down, s2) = eval(-eps)?;
            if !(s1 && s2) {
                report.unstable = true;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let analytic = base.grad(id).data()[k];
            report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}
