use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_gradient, Tensor};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_gradient, weighted_loss, ModelConfig, ParamVector};
use crate::vecops;

pub const FD_STEP: f64 = 1e-5;
const BATCH: usize = 6;

/// Norm-wise relative error between backprop and central differences for one
/// random model and batch.
pub fn gradient_rel_err(layer_sizes: &[usize], seed: u64) -> Result<f64> {
    let mut cfg = ModelConfig::new(layer_sizes.to_vec(), seed);
    cfg.init_scale = 1.5;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut theta = init_params(&cfg)?;
    // Non-zero biases so no pre-activation sits on a ReLU kink by construction.
    for v in theta.as_mut_slice() {
        *v += rng.random_range(-0.1..0.1);
    }
    let dim = cfg.input_dim();
    let rows: Vec<Vec<f64>> = (0..BATCH).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let x = Tensor::from_rows(&rows)?;
    let y: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..cfg.class_count())).collect();
    let w: Vec<f64> = (0..BATCH).map(|_| rng.random_range(0.5..1.5)).collect();
    let (_, analytic) = loss_and_gradient(&theta, &cfg, &x, &y, Some(&w))?;
    let numeric = finite_diff_gradient(
        |p| {
            weighted_loss(&ParamVector::from_vec(p.to_vec()), &cfg, &x, &y, Some(&w))
                .map(|r| r.value())
                .unwrap_or(f64::NAN)
        },
        theta.as_slice(),
        FD_STEP,
    )?;
    Ok(vecops::rel_err(analytic.as_slice(), numeric.as_slice()))
}

/// Worst relative gradient error over `seeds`.
pub fn check_gradients(layer_sizes: &[usize], seeds: &[u64]) -> Result<f64> {
    if seeds.is_empty() {
        return Err(Error::EmptySet("gradient check seeds"));
    }
    seeds
        .iter()
        .map(|&s| gradient_rel_err(layer_sizes, s))
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_near_exact() {
        let e = check_gradients(&[4, 3], &[1, 2, 3]).unwrap();
        assert!(e <= 1e-10, "{e}");
    }

    #[test]
    fn two_hidden_layers_within_tolerance() {
        let seeds: Vec<u64> = (0..20).collect();
        let e = check_gradients(&[6, 16, 12, 4], &seeds).unwrap();
        assert!(e <= 1e-6, "{e}");
    }
}
