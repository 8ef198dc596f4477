use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the backward gradient of a scalar function against central
/// differences and returns the largest relative discrepancy,
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
///
/// `f` receives a fresh graph and the leaf holding `x`; it must be
/// deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let mut leaf = x.clone();
    leaf.requires_grad = true;
    leaf.grad = None;
    let xv = g.leaf(leaf);
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe);
        let out = f(&mut g, v)?;
        let value = g.value(out);
        if value.numel() != 1 {
            return Err(Error::contract("grad_check function must return a scalar"));
        }
        Ok(value.item())
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
