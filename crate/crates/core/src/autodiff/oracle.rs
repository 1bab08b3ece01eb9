//! Finite-difference references for gradients and Hessian-vector products.

use crate::error::{Error, Result};
use crate::vecops;

use super::GradientVector;

/// Central differences `(f(θ + h·e_i) − f(θ − h·e_i)) / 2h` per coordinate.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], h: f64) -> Result<GradientVector>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference objective",
                index: i,
            });
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector::from_vec(out))
}

/// `H·v` by central differences of the gradient along `v`.
///
/// The probe step is `h / ‖v‖`, so the perturbation of `θ` always has norm
/// `h` regardless of the scale of `v`.
pub fn hessian_vector_product<G>(grad_fn: G, theta: &[f64], v: &[f64], h: f64) -> Result<Vec<f64>>
where
    G: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if theta.len() != v.len() {
        return Err(Error::shape(
            "hessian_vector_product",
            format!("|θ| = {} but |v| = {}", theta.len(), v.len()),
        ));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidConfig(format!("step h must be > 0, got {h}")));
    }
    let vnorm = vecops::norm(v);
    if vnorm == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let step = h / vnorm;
    let mut probe = theta.to_vec();
    vecops::axpy(step, v, &mut probe);
    let up = grad_fn(&probe)?;
    probe.copy_from_slice(theta);
    vecops::axpy(-step, v, &mut probe);
    let down = grad_fn(&probe)?;
    for g in [&up, &down] {
        if let Some(i) = vecops::first_non_finite(g) {
            return Err(Error::NonFinite {
                context: "gradient inside hessian_vector_product",
                index: i,
            });
        }
    }
    Ok(up
        .iter()
        .zip(&down)
        .map(|(a, b)| (a - b) / (2.0 * step))
        .collect())
}
