use serde::{Deserialize, Serialize};

use super::DirectionCheckResult;
use crate::autodiff::hessian_vector_product;
use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradient, ModelConfig, ParamVector};
use crate::unlearn::{CoefficientVector, SaliencyMask};
use crate::vecops;

pub const HVP_STEP: f64 = 1e-5;

/// Directions produced by one fast step followed by one remaining step.
#[derive(Debug, Clone)]
pub struct FastSlowTerms {
    /// `θ − θ^r` as realized by the two steps.
    pub realized: Vec<f64>,
    /// `β_f(I − β_r·H^r)∇L^u + β_r∇L^r` at `θ`.
    pub predicted: Vec<f64>,
    /// `β_f∇L^u + β_r∇L^r`, the jointly optimized step.
    pub joint: Vec<f64>,
}

impl FastSlowTerms {
    pub fn check(&self) -> DirectionCheckResult {
        DirectionCheckResult {
            cosine: vecops::cosine(&self.realized, &self.predicted),
            rel_norm_err: vecops::rel_err(&self.realized, &self.predicted),
            residual: vecops::norm(&vecops::sub(&self.realized, &self.predicted)),
        }
    }

    /// `‖realized − joint‖`: the part beyond first order in the step sizes.
    pub fn joint_gap(&self) -> f64 {
        vecops::norm(&vecops::sub(&self.realized, &self.joint))
    }
}

/// Full-set forgetting (weighted by `coeffs`) and remaining gradients drive
/// both steps, so the comparison is deterministic.
#[allow(clippy::too_many_arguments)]
pub fn fast_slow_terms(
    theta: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    beta_f: f64,
    beta_r: f64,
    mask: &SaliencyMask,
    coeffs: &CoefficientVector,
) -> Result<FastSlowTerms> {
    if split.forget_idx.is_empty() || split.remain_idx.is_empty() {
        return Err(Error::EmptySet("fast-slow forget/remain sets"));
    }
    if mask.len() != theta.len() {
        return Err(Error::shape("fast-slow mask", format!("{} bits for {} params", mask.len(), theta.len())));
    }
    let (xf, yf) = dataset.gather(&split.forget_idx);
    let (xr, yr) = dataset.gather(&split.remain_idx);
    let remain_grad = |p: &[f64]| -> Result<Vec<f64>> {
        Ok(loss_and_gradient(&ParamVector::from_vec(p.to_vec()), cfg, &xr, &yr, None)?.1.into_vec())
    };

    let (_, g_f) = loss_and_gradient(theta, cfg, &xf, &yf, Some(coeffs.as_slice()))?;
    let unlearn_grad: Vec<f64> = g_f
        .as_slice()
        .iter()
        .zip(mask.as_weights())
        .map(|(g, m)| -(m * g))
        .collect();
    let mut fast = theta.as_slice().to_vec();
    vecops::axpy(-beta_f, &unlearn_grad, &mut fast);
    let mut repaired = fast.clone();
    vecops::axpy(-beta_r, &remain_grad(&fast)?, &mut repaired);
    let realized = vecops::sub(theta.as_slice(), &repaired);

    let g_r = remain_grad(theta.as_slice())?;
    let hv = hessian_vector_product(remain_grad, theta.as_slice(), &unlearn_grad, HVP_STEP)?;
    let mut predicted = vecops::scaled(beta_r, &g_r);
    let mut joint = predicted.clone();
    for i in 0..predicted.len() {
        predicted[i] += beta_f * (unlearn_grad[i] - beta_r * hv[i]);
        joint[i] += beta_f * unlearn_grad[i];
    }
    for v in [&realized, &predicted] {
        if let Some(i) = vecops::first_non_finite(v) {
            return Err(Error::NonFinite {
                context: "fast-slow direction",
                index: i,
            });
        }
    }
    Ok(FastSlowTerms {
        realized,
        predicted,
        joint,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn check_fast_slow_direction(
    theta: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    beta_f: f64,
    beta_r: f64,
    mask: &SaliencyMask,
    coeffs: &CoefficientVector,
) -> Result<DirectionCheckResult> {
    Ok(fast_slow_terms(theta, cfg, dataset, split, beta_f, beta_r, mask, coeffs)?.check())
}

/// One row of the step-size sweep with `β_f = β_r = beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub beta: f64,
    pub joint_gap: f64,
    pub residual: f64,
}

pub fn fast_slow_scaling(
    theta: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    betas: &[f64],
    mask: &SaliencyMask,
    coeffs: &CoefficientVector,
) -> Result<Vec<ScalingPoint>> {
    betas
        .iter()
        .map(|&beta| {
            let t = fast_slow_terms(theta, cfg, dataset, split, beta, beta, mask, coeffs)?;
            Ok(ScalingPoint {
                beta,
                joint_gap: t.joint_gap(),
                residual: t.check().residual,
            })
        })
        .collect()
}

/// Consecutive ratios of `pick` along the sweep.
pub fn growth_ratios(points: &[ScalingPoint], pick: impl Fn(&ScalingPoint) -> f64) -> Vec<f64> {
    points.windows(2).map(|w| pick(&w[1]) / pick(&w[0])).collect()
}
