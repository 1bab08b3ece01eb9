//! Fisher-diagonal saliency mask and per-sample ascent coefficients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradient, ModelConfig, ParamVector};

/// Guard added to the remaining diagonal before dividing.
pub const RATIO_GUARD: f64 = 1e-12;
/// Floor on per-sample losses before raising them to `−λ`.
pub const LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    /// Mean of squared per-sample gradients.
    #[default]
    PerSampleMean,
    /// Square of the set-mean gradient.
    BatchSquare,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonals {
    pub forget: Vec<f64>,
    pub remain: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SaliencyMask {
    bits: Vec<bool>,
}

impl SaliencyMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn all(len: usize, value: bool) -> Self {
        Self {
            bits: vec![value; len],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &SaliencyMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn as_weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Reduces per-sample gradients to a Fisher diagonal.
pub fn fisher_from_sample_gradients<G: AsRef<[f64]>>(grads: &[G], mode: FisherMode) -> Result<Vec<f64>> {
    let first = grads.first().ok_or(Error::EmptySet("fisher samples"))?;
    let n = grads.len() as f64;
    let mut acc = vec![0.0; first.as_ref().len()];
    for g in grads {
        for (a, v) in acc.iter_mut().zip(g.as_ref()) {
            *a += match mode {
                FisherMode::PerSampleMean => v * v,
                FisherMode::BatchSquare => *v,
            };
        }
    }
    Ok(match mode {
        FisherMode::PerSampleMean => acc.into_iter().map(|a| a / n).collect(),
        FisherMode::BatchSquare => acc.into_iter().map(|a| (a / n) * (a / n)).collect(),
    })
}

fn sample_gradients(
    theta: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<Vec<Vec<f64>>> {
    rows.iter()
        .map(|&r| {
            let (x, y) = dataset.gather(&[r]);
            Ok(loss_and_gradient(theta, cfg, &x, &y, None)?.1.into_vec())
        })
        .collect()
}

/// Forgetting and remaining Fisher diagonals at `theta`.
///
/// With `sample_cap`, at most that many remaining rows are used, drawn
/// without replacement from a generator seeded by `seed`.
pub fn fisher_diagonals(
    theta: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    mode: FisherMode,
    sample_cap: Option<usize>,
    seed: u64,
) -> Result<FisherDiagonals> {
    if split.forget_idx.is_empty() {
        return Err(Error::EmptySet("forgetting set"));
    }
    if split.remain_idx.is_empty() {
        return Err(Error::EmptySet("remaining set"));
    }
    let remain_rows = match sample_cap {
        Some(cap) if cap < split.remain_idx.len() => {
            if cap == 0 {
                return Err(Error::EmptySet("remaining set (sample_cap = 0)"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, split.remain_idx.len(), cap)
                .into_iter()
                .map(|i| split.remain_idx[i])
                .collect();
            picked.sort_unstable();
            picked
        }
        _ => split.remain_idx.clone(),
    };
    let forget = fisher_from_sample_gradients(&sample_gradients(theta, cfg, dataset, &split.forget_idx)?, mode)?;
    let remain = fisher_from_sample_gradients(&sample_gradients(theta, cfg, dataset, &remain_rows)?, mode)?;
    Ok(FisherDiagonals { forget, remain })
}

/// `bit_i = 1` iff `forget_i / (remain_i + 1e-12) ≥ γ`.
pub fn saliency_mask(fd: &FisherDiagonals, gamma: f64) -> Result<SaliencyMask> {
    if !(gamma >= 0.0) {
        return Err(Error::InvalidConfig(format!("gamma must be >= 0, got {gamma}")));
    }
    if fd.forget.len() != fd.remain.len() {
        return Err(Error::shape(
            "saliency_mask",
            format!("{} forget vs {} remain entries", fd.forget.len(), fd.remain.len()),
        ));
    }
    let bits = fd
        .forget
        .iter()
        .zip(&fd.remain)
        .map(|(f, r)| f / (r + RATIO_GUARD) >= gamma)
        .collect();
    Ok(SaliencyMask { bits })
}

/// Per-sample weights for the forgetting ascent loss of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector(Vec<f64>);

impl CoefficientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `ε_i = (1 − t/T) · B · ℓ_i^{−λ} / Σ_j ℓ_j^{−λ}` with losses floored at 1e-8.
///
/// Losses enter as plain numbers, so the coefficients never carry gradient.
pub fn adaptive_coefficients(losses: &[f64], t: usize, total: usize, lambda: f64) -> Result<CoefficientVector> {
    if losses.is_empty() {
        return Err(Error::EmptySet("coefficient losses"));
    }
    if total == 0 || t > total {
        return Err(Error::InvalidConfig(format!("need 0 <= t <= T with T >= 1, got t={t}, T={total}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
    }
    if let Some(i) = losses.iter().position(|l| !(l.is_finite() && *l >= 0.0)) {
        return Err(Error::NonFinite {
            context: "non-negative finite loss for coefficients",
            index: i,
        });
    }
    let logs: Vec<f64> = losses.iter().map(|l| l.max(LOSS_FLOOR).ln()).collect();
    let min_log = logs.iter().copied().fold(f64::INFINITY, f64::min);
    // ℓ^{−λ} rescaled by ℓ_min^{λ} so the largest weight is exactly 1.
    let raw: Vec<f64> = logs.iter().map(|l| (-lambda * (l - min_log)).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let decay = 1.0 - t as f64 / total as f64;
    let scale = decay * losses.len() as f64 / norm;
    Ok(CoefficientVector(raw.into_iter().map(|r| r * scale).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fisher_modes_diverge_on_opposite_gradients() {
        let grads = [vec![2.0], vec![-2.0]];
        assert_eq!(fisher_from_sample_gradients(&grads, FisherMode::PerSampleMean).unwrap(), vec![4.0]);
        assert_eq!(fisher_from_sample_gradients(&grads, FisherMode::BatchSquare).unwrap(), vec![0.0]);
    }

    #[test]
    fn fisher_of_zero_gradients_is_zero() {
        let grads = [vec![0.0; 3], vec![0.0; 3]];
        for mode in [FisherMode::PerSampleMean, FisherMode::BatchSquare] {
            assert_eq!(fisher_from_sample_gradients(&grads, mode).unwrap(), vec![0.0; 3]);
        }
        let empty: [Vec<f64>; 0] = [];
        assert!(fisher_from_sample_gradients(&empty, FisherMode::BatchSquare).is_err());
    }

    #[test]
    fn mask_reference_case() {
        let fd = FisherDiagonals {
            forget: vec![4.0, 1.0],
            remain: vec![1.0, 4.0],
        };
        assert_eq!(saliency_mask(&fd, 1.0).unwrap().bits(), &[true, false]);
        assert_eq!(saliency_mask(&fd, 0.0).unwrap().count_ones(), 2);
        assert!(saliency_mask(&fd, -1.0).is_err());
    }

    #[test]
    fn mask_with_huge_threshold_is_empty() {
        let fd = FisherDiagonals {
            forget: vec![4.0, 1.0, 0.0],
            remain: vec![1.0, 4.0, 2.0],
        };
        assert_eq!(saliency_mask(&fd, 1e12).unwrap().count_ones(), 0);
    }

    #[test]
    fn coefficients_reference_values() {
        let c = adaptive_coefficients(&[0.7, 0.7, 0.7], 0, 10, 1.3).unwrap();
        for v in c.as_slice() {
            assert!((v - 1.0).abs() < 1e-15);
        }
        let c = adaptive_coefficients(&[0.2, 3.0], 5, 5, 0.5).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.0]);
        let c = adaptive_coefficients(&[1.0, 2.0], 0, 4, 1.0).unwrap();
        assert!((c.as_slice()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((c.as_slice()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn coefficients_floor_zero_losses() {
        let c = adaptive_coefficients(&[0.0, 1e-8], 0, 2, 2.0).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 1.0]);
        assert!(adaptive_coefficients(&[-1.0], 0, 1, 1.0).is_err());
        assert!(adaptive_coefficients(&[1.0], 3, 2, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn coefficient_sum_invariant(
            losses in proptest::collection::vec(0.0f64..30.0, 1..64),
            t in 0usize..50,
            extra in 0usize..50,
            lambda in 0.0f64..4.0,
        ) {
            let total = t + extra.max(1);
            let c = adaptive_coefficients(&losses, t, total, lambda).unwrap();
            let expected = (1.0 - t as f64 / total as f64) * losses.len() as f64;
            prop_assert!((c.sum() - expected).abs() <= 1e-9, "{} vs {}", c.sum(), expected);
            prop_assert!(c.as_slice().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn coefficients_order_reverses_losses(a in 0.01f64..10.0, b in 0.01f64..10.0, lambda in 0.1f64..3.0) {
            let c = adaptive_coefficients(&[a, b], 0, 1, lambda).unwrap();
            if a > b {
                prop_assert!(c.as_slice()[0] <= c.as_slice()[1]);
            }
        }

        #[test]
        fn mask_monotone_in_gamma(
            pairs in proptest::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..40),
            g1 in 0.0f64..5.0,
            dg in 0.0f64..5.0,
        ) {
            let fd = FisherDiagonals {
                forget: pairs.iter().map(|p| p.0).collect(),
                remain: pairs.iter().map(|p| p.1).collect(),
            };
            let low = saliency_mask(&fd, g1).unwrap();
            let high = saliency_mask(&fd, g1 + dg).unwrap();
            prop_assert!(high.is_subset_of(&low));
            prop_assert_eq!(saliency_mask(&fd, 0.0).unwrap().count_ones(), pairs.len());
        }
    }
}
