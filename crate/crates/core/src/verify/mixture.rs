use crate::error::{Error, Result};

/// Exact `Σ p ln(p/q)` with `0·ln(0/q) = 0`.
fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn check_distribution(d: &[f64]) -> Result<()> {
    if d.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::InvalidConfig("distribution entries must be finite and >= 0".into()));
    }
    let sum: f64 = d.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Residual between the KL of two disjoint-support mixtures and the
/// `p_f`-weighted sum of the component KLs. Each pair is `(p, q)`.
pub fn check_kl_mixture(forget_pair: (&[f64], &[f64]), remain_pair: (&[f64], &[f64]), p_forget: f64) -> Result<f64> {
    if !(p_forget > 0.0 && p_forget < 1.0) {
        return Err(Error::InvalidConfig(format!("p_forget must lie in (0,1), got {p_forget}")));
    }
    for d in [forget_pair.0, forget_pair.1, remain_pair.0, remain_pair.1] {
        check_distribution(d)?;
    }
    if forget_pair.0.len() != forget_pair.1.len() || remain_pair.0.len() != remain_pair.1.len() {
        return Err(Error::shape("check_kl_mixture", "paired distributions differ in length"));
    }
    let p_remain = 1.0 - p_forget;
    let mix = |f: &[f64], r: &[f64]| -> Vec<f64> {
        f.iter().map(|v| p_forget * v).chain(r.iter().map(|v| p_remain * v)).collect()
    };
    let whole = kl(&mix(forget_pair.0, remain_pair.0), &mix(forget_pair.1, remain_pair.1));
    let parts = p_forget * kl(forget_pair.0, forget_pair.1) + p_remain * kl(remain_pair.0, remain_pair.1);
    Ok((whole - parts).abs())
}
