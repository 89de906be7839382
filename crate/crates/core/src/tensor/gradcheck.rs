//! Central finite-difference checks of analytic gradients.

use super::{Graph, Shape, Var};
use crate::error::Result;

/// Relative errors below this denominator are measured absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input, element)` where the largest error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the gradient of the scalar built by `f` w.r.t. every element
/// of every input with `(f(x+h) - f(x-h)) / 2h`.
pub fn gradient_check<F>(inputs: &[(Vec<f64>, Shape)], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[(Vec<f64>, Shape)]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values.iter().map(|(v, s)| g.constant(v.clone(), *s)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let vars = inputs.iter().map(|(v, s)| g.param(v.clone(), *s)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0 };
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].0.len()]);
        for j in 0..inputs[i].0.len() {
            let x = inputs[i].0[j];
            work[i].0[j] = x + step;
            let plus = eval(&work)?;
            work[i].0[j] = x - step;
            let minus = eval(&work)?;
            work[i].0[j] = x;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error || !rel.is_finite() {
                report = GradCheck { max_rel_error: rel, worst: (i, j), analytic: a, numeric };
            }
        }
    }
    Ok(report)
}
