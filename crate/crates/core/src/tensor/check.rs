//! Finite-difference validation of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the analytic gradient of `f` at `x` against central differences.
///
/// `f` must build a deterministic scalar-valued computation from its input
/// var. Returns the worst relative error over coordinates,
/// `|analytic - central| / max(|analytic|, |central|, 1e-8)`.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::config("gradient_check: step must be positive"));
    }

    let mut tracked = x.clone();
    tracked.set_requires_grad(true);
    let mut g = Graph::new();
    let v = g.leaf(&tracked);
    let out = f(&mut g, v)?;
    if g.numel(out) != 1 {
        return Err(Error::dim(format!(
            "gradient_check: f returned shape {:?}, expected a scalar",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<f64> =
        g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let out = f(&mut g, v)?;
        let y = g.item(out);
        if !y.is_finite() {
            return Err(Error::numeric("gradient_check: non-finite function value"));
        }
        Ok(y)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic[i];
        if !a.is_finite() || !central.is_finite() {
            return Err(Error::numeric(format!(
                "gradient_check: non-finite derivative at coordinate {i}"
            )));
        }
        let rel = (a - central).abs() / a.abs().max(central.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
