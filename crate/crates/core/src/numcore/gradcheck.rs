//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked elements.
    pub max_rel_err: f64,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
    pub evaluations: usize,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of `f` against `(f(p+h) - f(p-h)) / 2h` for
/// every element of every tensor in `params`. `f` receives a fresh graph and
/// one parameter leaf per tensor and must return a scalar loss; it must be
/// deterministic. `params` is restored before returning.
pub fn finite_difference_check<F>(mut f: F, params: &mut [Tensor], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut eval = |params: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|p| g.param(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = f(&mut g, &vars)?;
        let value = g.scalar_value(loss);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = if g.requires_grad(loss) {
            g.backward(loss)?;
            vars.iter()
                .zip(params)
                .map(|(v, p)| g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]))
                .collect()
        } else {
            params.iter().map(|p| vec![0.0; p.len()]).collect()
        };
        Ok((value, grads))
    };

    let (_, analytic) = eval(params, true)?;
    let mut per_param = vec![0.0f64; params.len()];
    let mut evaluations = 1;
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + h;
            let (plus, _) = eval(params, false)?;
            params[pi].data_mut()[ei] = orig - h;
            let (minus, _) = eval(params, false)?;
            params[pi].data_mut()[ei] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi][ei], numeric);
            per_param[pi] = per_param[pi].max(err);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().copied().fold(0.0, f64::max),
        per_param,
        evaluations,
    })
}
