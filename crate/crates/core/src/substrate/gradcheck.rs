//! Central-difference gradient verification.

use super::graph::{Graph, Var};
use super::tensor::Tensor4;
use crate::error::{config_err, Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh training-mode graph and the leaf holding `x`, and must
/// return a scalar node. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, x: &Tensor4, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, epsilon, &coords)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor4, epsilon: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(config_err!("grad_check: epsilon {epsilon} outside (0, 1e-2]"));
    }
    let mut g = Graph::training();
    let leaf = g.leaf(x.clone(), true);
    let out = f(&mut g, leaf)?;
    if g.value(out).numel() != 1 {
        return Err(config_err!("grad_check: function output has shape {:?}, expected a scalar", g.shape(out)));
    }
    check_finite(g.scalar(out))?;
    g.backward(out)?;
    let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor4| -> Result<f64> {
        let mut g = Graph::training();
        let leaf = g.leaf(t, true);
        let out = f(&mut g, leaf)?;
        let v = g.scalar(out);
        check_finite(v)?;
        Ok(v)
    };
    let mut worst = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(config_err!("grad_check: coordinate {i} out of range"));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("grad_check: function value {v} is not finite")))
    }
}
