//! Numerical checks of the steepest-descent and fast-slow identities.

mod fast_slow;
mod gradcheck;
mod mixture;
mod quadratic;

use std::collections::BTreeMap;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use fast_slow::{
    check_fast_slow_direction, fast_slow_scaling, fast_slow_terms, growth_ratios, FastSlowTerms, ScalingPoint,
    HVP_STEP,
};
pub use gradcheck::{check_gradients, gradient_rel_err, FD_STEP};
pub use mixture::check_kl_mixture;
pub use quadratic::{check_prop1_quadratic, check_prop2_quadratic, scaled_step, Prop2Outcome, QuadraticTestbed};

use crate::data::{generate_blobs, make_random_subset_split, Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{init_params, per_sample_losses, ModelConfig, ParamVector};
use crate::trainer::{sgd_train, Schedule, TrainConfig};
use crate::unlearn::{
    adaptive_coefficients, fisher_diagonals, saliency_mask, CoefficientVector, FisherMode, SaliencyMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DirectionCheckResult {
    pub cosine: f64,
    pub rel_norm_err: f64,
    pub residual: f64,
}

pub const PROP1_TOL: f64 = 1e-9;
pub const PROP2_TOL: f64 = 1e-10;
pub const KL_MIX_TOL: f64 = 1e-12;
pub const GRAD_TOL: f64 = 1e-6;
pub const FAST_SLOW_COSINE: f64 = 0.999;
pub const FAST_SLOW_REL_ERR: f64 = 0.01;
pub const FAST_SLOW_BETA: f64 = 1e-4;
pub const SCALING_BETAS: [f64; 3] = [1e-4, 2e-4, 4e-4];
pub const SCALING_RATIO: (f64, f64) = (3.0, 5.0);
pub const GRAD_LAYERS: [usize; 4] = [6, 16, 12, 4];

/// A lightly trained tiny MLP on blobs with a Fisher saliency mask and
/// first-iteration ascent coefficients over the whole forgetting set.
pub struct FastSlowFixture {
    pub dataset: Dataset,
    pub split: ForgetSplit,
    pub model: ModelConfig,
    pub theta: ParamVector,
    pub mask: SaliencyMask,
    pub coeffs: CoefficientVector,
}

impl FastSlowFixture {
    pub fn standard(seed: u64) -> Result<Self> {
        let dataset = generate_blobs(seed, 40, 3, 4, 1.0)?;
        let split = make_random_subset_split(&dataset, 0.1, 0.2, seed)?;
        let model = ModelConfig::new(vec![4, 10, 3], seed);
        let train = TrainConfig {
            lr: 0.1,
            epochs: 10,
            batch_size: 16,
            schedule: Schedule::Constant,
            momentum: 0.0,
            seed,
        };
        let theta = sgd_train(&init_params(&model)?, &model, &train, &dataset, &split.train_idx())?.params;
        let fd = fisher_diagonals(&theta, &model, &dataset, &split, FisherMode::PerSampleMean, None, seed)?;
        let mask = saliency_mask(&fd, 1.0)?;
        let (xf, yf) = dataset.gather(&split.forget_idx);
        let coeffs = adaptive_coefficients(&per_sample_losses(&theta, &model, &xf, &yf)?, 0, 10, 0.5)?;
        Ok(Self {
            dataset,
            split,
            model,
            theta,
            mask,
            coeffs,
        })
    }

    pub fn terms(&self, beta_f: f64, beta_r: f64) -> Result<FastSlowTerms> {
        fast_slow_terms(
            &self.theta,
            &self.model,
            &self.dataset,
            &self.split,
            beta_f,
            beta_r,
            &self.mask,
            &self.coeffs,
        )
    }

    pub fn scaling(&self, betas: &[f64]) -> Result<Vec<ScalingPoint>> {
        fast_slow_scaling(
            &self.theta,
            &self.model,
            &self.dataset,
            &self.split,
            betas,
            &self.mask,
            &self.coeffs,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Grad,
    Prop1,
    Prop2,
    Fastslow,
    Klmix,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grad" => Suite::Grad,
            "prop1" => Suite::Prop1,
            "prop2" => Suite::Prop2,
            "fastslow" => Suite::Fastslow,
            "klmix" => Suite::Klmix,
            "all" => Suite::All,
            other => return Err(Error::InvalidConfig(format!("unknown suite '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub check_name: String,
    pub pass: bool,
    pub residuals: BTreeMap<String, f64>,
}

impl CheckOutcome {
    fn new(name: &str, pass: bool, residuals: &[(&str, f64)]) -> Self {
        Self {
            check_name: name.to_string(),
            pass,
            residuals: residuals.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

/// The quadratic instances used by the suite: dims cycle through 2..=8.
pub fn suite_testbeds() -> Vec<QuadraticTestbed> {
    (0..10u64).map(|s| QuadraticTestbed::random(1000 + s, 2 + (s as usize % 7))).collect()
}

pub fn run_grad() -> Result<CheckOutcome> {
    let seeds: Vec<u64> = (0..20).collect();
    let worst = check_gradients(&GRAD_LAYERS, &seeds)?;
    Ok(CheckOutcome::new("grad", worst <= GRAD_TOL, &[("max_rel_err", worst)]))
}

pub fn run_prop1() -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for tb in suite_testbeds() {
        worst = worst.max(check_prop1_quadratic(&tb)?.residual);
    }
    Ok(CheckOutcome::new("prop1", worst <= PROP1_TOL, &[("max_residual", worst)]))
}

pub fn run_prop2() -> Result<CheckOutcome> {
    let (mut worst, mut worst_identity) = (0.0f64, 0.0f64);
    for tb in suite_testbeds() {
        for alpha in [0.5, 1.0, 3.0] {
            let r = check_prop2_quadratic(&tb, alpha)?;
            worst = worst.max(r.direction.residual);
            worst_identity = worst_identity.max(r.identity_residual);
        }
    }
    Ok(CheckOutcome::new(
        "prop2",
        worst <= PROP2_TOL && worst_identity <= PROP2_TOL,
        &[("max_residual", worst), ("max_identity_residual", worst_identity)],
    ))
}

pub fn run_fast_slow() -> Result<CheckOutcome> {
    let fx = FastSlowFixture::standard(7)?;
    let d = fx.terms(FAST_SLOW_BETA, FAST_SLOW_BETA)?.check();
    let points = fx.scaling(&SCALING_BETAS)?;
    let gap_ratios = growth_ratios(&points, |p| p.joint_gap);
    let residual_ratios = growth_ratios(&points, |p| p.residual);
    let ratios_ok = gap_ratios.iter().all(|r| (SCALING_RATIO.0..=SCALING_RATIO.1).contains(r));
    let pass = d.cosine >= FAST_SLOW_COSINE && d.rel_norm_err <= FAST_SLOW_REL_ERR && ratios_ok;
    Ok(CheckOutcome::new(
        "fastslow",
        pass,
        &[
            ("cosine", d.cosine),
            ("rel_norm_err", d.rel_norm_err),
            ("gap_ratio_1", gap_ratios[0]),
            ("gap_ratio_2", gap_ratios[1]),
            ("residual_ratio_1", residual_ratios[0]),
            ("residual_ratio_2", residual_ratios[1]),
        ],
    ))
}

pub fn run_kl_mixture() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut dist = |n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let mut worst = 0.0f64;
    for i in 0..50 {
        let (nf, nr) = (2 + i % 5, 3 + i % 4);
        let (fp, fq, rp, rq) = (dist(nf), dist(nf), dist(nr), dist(nr));
        let p = [0.01, 0.3, 0.5, 0.99][i % 4];
        worst = worst.max(check_kl_mixture((&fp, &fq), (&rp, &rq), p)?);
    }
    Ok(CheckOutcome::new("klmix", worst <= KL_MIX_TOL, &[("max_residual", worst)]))
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckOutcome>> {
    match suite {
        Suite::Grad => Ok(vec![run_grad()?]),
        Suite::Prop1 => Ok(vec![run_prop1()?]),
        Suite::Prop2 => Ok(vec![run_prop2()?]),
        Suite::Fastslow => Ok(vec![run_fast_slow()?]),
        Suite::Klmix => Ok(vec![run_kl_mixture()?]),
        Suite::All => Ok(vec![run_grad()?, run_prop1()?, run_prop2()?, run_fast_slow()?, run_kl_mixture()?]),
    }
}
