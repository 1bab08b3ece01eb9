//! Gaussian-quadratic testbed where the steepest-descent directions are exact.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DirectionCheckResult;
use crate::error::{Error, Result};
use crate::vecops;

/// `L^f(θ) = ½(θ−a)ᵀA(θ−a)` and `L^r(θ) = ½(θ−b)ᵀB(θ−b)`, with `L^f` weighted by `eps`.
#[derive(Debug, Clone)]
pub struct QuadraticTestbed {
    pub forget_hessian: DMatrix<f64>,
    pub remain_hessian: DMatrix<f64>,
    pub forget_min: DVector<f64>,
    pub remain_min: DVector<f64>,
    pub eps: f64,
    pub p_forget: f64,
}

fn random_spd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(dim, dim) * 0.5
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    let asym = (m - m.transpose()).norm();
    m.is_square() && asym <= 1e-12 * m.norm().max(1.0) && m.clone().cholesky().is_some()
}

impl QuadraticTestbed {
    pub fn random(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let forget_hessian = random_spd(&mut rng, dim);
        let remain_hessian = random_spd(&mut rng, dim);
        let forget_min = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        let remain_min = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
        Self {
            forget_hessian,
            remain_hessian,
            forget_min,
            remain_min,
            eps: rng.random_range(0.2..2.0),
            p_forget: rng.random_range(0.05..0.95),
        }
    }

    pub fn dim(&self) -> usize {
        self.forget_min.len()
    }

    pub fn p_remain(&self) -> f64 {
        1.0 - self.p_forget
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let shapes_ok = self.remain_min.len() == d
            && self.forget_hessian.shape() == (d, d)
            && self.remain_hessian.shape() == (d, d);
        if !shapes_ok {
            return Err(Error::shape("quadratic testbed", format!("dimension {d} mismatch")));
        }
        if !is_spd(&self.forget_hessian) || !is_spd(&self.remain_hessian) {
            return Err(Error::Singular("testbed Hessians must be symmetric positive definite"));
        }
        if !(self.p_forget > 0.0 && self.p_forget < 1.0) {
            return Err(Error::InvalidConfig(format!("p_forget must lie in (0,1), got {}", self.p_forget)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }

    /// Minimizer of `L^r + eps·L^f`.
    pub fn weighted_minimizer(&self) -> Result<DVector<f64>> {
        let (a, b) = (&self.forget_hessian, &self.remain_hessian);
        let lhs = b + a * self.eps;
        let rhs = b * &self.remain_min + a * &self.forget_min * self.eps;
        lhs.lu().solve(&rhs).ok_or(Error::Singular("B + eps·A"))
    }

    pub fn forget_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.forget_hessian * (theta - &self.forget_min) * self.eps
    }

    pub fn remain_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        &self.remain_hessian * (theta - &self.remain_min)
    }

    /// `A·B⁻¹·(−∇L^f(θ; eps))` through an LU solve.
    fn forget_natural_term(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let solved = self
            .remain_hessian
            .clone()
            .lu()
            .solve(&(-self.forget_grad(theta)))
            .ok_or(Error::Singular("remaining Hessian"))?;
        Ok(&self.forget_hessian * solved)
    }
}

fn compare(direction: &DVector<f64>, oracle: &DVector<f64>) -> DirectionCheckResult {
    DirectionCheckResult {
        cosine: vecops::cosine(direction.as_slice(), oracle.as_slice()),
        rel_norm_err: vecops::rel_err(direction.as_slice(), oracle.as_slice()),
        residual: (direction - oracle).norm(),
    }
}

/// Formula direction `−[p_f·A B⁻¹(−∇L^f) + p_r·∇L^r]` against the exact
/// negative gradient `−(p_f·A + p_r·B)(θ_t − b)` of the output-KL objective.
pub fn check_prop1_quadratic(tb: &QuadraticTestbed) -> Result<DirectionCheckResult> {
    tb.validate()?;
    let theta = tb.weighted_minimizer()?;
    let d = -(tb.forget_natural_term(&theta)? * tb.p_forget + tb.remain_grad(&theta) * tb.p_remain());
    let metric = &tb.forget_hessian * tb.p_forget + &tb.remain_hessian * tb.p_remain();
    let exact = -(metric * (&theta - &tb.remain_min));
    Ok(compare(&d, &exact))
}

/// Scaled step size `α·p_f / (α·p_r + 1)`.
pub fn scaled_step(alpha: f64, p_forget: f64) -> f64 {
    alpha * p_forget / (alpha * (1.0 - p_forget) + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prop2Outcome {
    pub direction: DirectionCheckResult,
    /// Gap between the formula direction and `B⁻¹` applied to the forgetting
    /// part of the unconstrained direction, rescaled by `α/(α·p_r + 1)`.
    pub identity_residual: f64,
}

/// Natural-gradient direction `−α̃·B⁻¹·A B⁻¹(−∇L^f)` against the minimizer of
/// `p_f·sᵀΔ + ½(p_r + 1/α)·ΔᵀBΔ` with `s = A(θ_t − b)`, solved by Cholesky.
pub fn check_prop2_quadratic(tb: &QuadraticTestbed, alpha: f64) -> Result<Prop2Outcome> {
    tb.validate()?;
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("alpha must be > 0, got {alpha}")));
    }
    let theta = tb.weighted_minimizer()?;
    let lu = tb.remain_hessian.clone().lu();
    let natural = tb.forget_natural_term(&theta)?;
    let formula = -lu.solve(&natural).ok_or(Error::Singular("remaining Hessian"))? * scaled_step(alpha, tb.p_forget);

    let s = &tb.forget_hessian * (&theta - &tb.remain_min);
    let curvature = &tb.remain_hessian * (tb.p_remain() + 1.0 / alpha);
    let oracle = curvature
        .cholesky()
        .ok_or(Error::Singular("remaining Hessian"))?
        .solve(&(-s * tb.p_forget));

    let forget_part = -natural * tb.p_forget;
    let via_identity =
        lu.solve(&forget_part).ok_or(Error::Singular("remaining Hessian"))? * (alpha / (alpha * tb.p_remain() + 1.0));
    Ok(Prop2Outcome {
        direction: compare(&formula, &oracle),
        identity_residual: (&formula - via_identity).norm(),
    })
}
