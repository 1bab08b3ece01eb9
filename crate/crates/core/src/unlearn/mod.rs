//! Unlearning methods: the fast-slow saliency method and its baselines.

mod baselines;
mod saliency;
mod sfr;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::trainer::{Checkpoint, Provenance, Role, Schedule};

pub use baselines::{
    ft_unlearn, ft_unlearn_observed, ga_unlearn, joint_unlearn, random_relabels, rl_unlearn, salun_mask,
    salun_unlearn,
};
pub use saliency::{
    adaptive_coefficients, fisher_diagonals, fisher_from_sample_gradients, saliency_mask, CoefficientVector,
    FisherDiagonals, FisherMode, SaliencyMask, LOSS_FLOOR, RATIO_GUARD,
};
pub use sfr::{sfr_on, sfr_on_with_mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SfrOn,
    Ft,
    Ga,
    Rl,
    Salun,
    Joint,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::SfrOn,
        Method::Ft,
        Method::Ga,
        Method::Rl,
        Method::Salun,
        Method::Joint,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::SfrOn => "sfr_on",
            Method::Ft => "ft",
            Method::Ga => "ga",
            Method::Rl => "rl",
            Method::Salun => "salun",
            Method::Joint => "joint",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method '{s}'")))
    }
}

/// Hyperparameters for every method.
///
/// `alpha`, `beta_f`, `beta_r`, `t_in`, `t_out`, `lambda_temp`, `gamma` and
/// `fisher_mode` drive `sfr_on`; `lr`, `epochs`, `momentum`, `topk_percent`
/// and `remain_weight` drive the baselines. `schedule` applies to both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    pub alpha: f64,
    pub beta_f: f64,
    pub beta_r: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub lambda_temp: f64,
    pub gamma: f64,
    pub batch_f: usize,
    pub batch_r: usize,
    pub seed: u64,
    #[serde(default)]
    pub fisher_mode: FisherMode,
    /// Cap on remaining rows used for the remaining Fisher diagonal.
    #[serde(default)]
    pub fisher_sample_cap: Option<usize>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub momentum: f64,
    /// SalUn keeps this percentage of coordinates.
    #[serde(default = "default_topk")]
    pub topk_percent: f64,
    /// Weight on the remaining gradient in `joint`.
    #[serde(default = "default_remain_weight")]
    pub remain_weight: f64,
}

fn default_lr() -> f64 {
    0.01
}

fn default_epochs() -> usize {
    5
}

fn default_topk() -> f64 {
    20.0
}

fn default_remain_weight() -> f64 {
    1.0
}

impl UnlearnConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            alpha: 1.0,
            beta_f: 0.25,
            beta_r: 0.01,
            t_in: 5,
            t_out: 100,
            lambda_temp: 0.5,
            gamma: 1.0,
            batch_f: 32,
            batch_r: 32,
            seed,
            fisher_mode: FisherMode::default(),
            fisher_sample_cap: None,
            schedule: Schedule::Constant,
            lr: default_lr(),
            epochs: default_epochs(),
            momentum: 0.0,
            topk_percent: default_topk(),
            remain_weight: default_remain_weight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let nonneg = |name: &str, v: f64| -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        // alpha = 0 is accepted as the degenerate identity run.
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        nonneg("beta_f", self.beta_f)?;
        nonneg("beta_r", self.beta_r)?;
        nonneg("lambda_temp", self.lambda_temp)?;
        nonneg("gamma", self.gamma)?;
        nonneg("lr", self.lr)?;
        nonneg("remain_weight", self.remain_weight)?;
        if self.t_out == 0 {
            return bad("t_out must be >= 1".into());
        }
        if self.batch_f == 0 || self.batch_r == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.topk_percent > 0.0 && self.topk_percent <= 100.0) {
            return bad(format!("topk_percent must lie in (0, 100], got {}", self.topk_percent));
        }
        Ok(())
    }
}

/// Runs the method named in `ucfg` from a pretrained checkpoint.
pub fn run_unlearning(
    pretrained: &Checkpoint,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    let theta = &pretrained.params;
    let cfg = &pretrained.model_config;
    match ucfg.method {
        Method::SfrOn => sfr_on(theta, cfg, dataset, split, ucfg),
        Method::Ft => ft_unlearn(theta, cfg, dataset, split, ucfg),
        Method::Ga => ga_unlearn(theta, cfg, dataset, split, ucfg),
        Method::Rl => rl_unlearn(theta, cfg, dataset, split, ucfg),
        Method::Salun => salun_unlearn(theta, cfg, dataset, split, ucfg),
        Method::Joint => joint_unlearn(theta, cfg, dataset, split, ucfg),
    }
}

pub(crate) fn check_inputs(dataset: &Dataset, split: &ForgetSplit, ucfg: &UnlearnConfig) -> Result<()> {
    ucfg.validate()?;
    split.validate(Some(dataset.len()))?;
    if split.forget_idx.is_empty() {
        return Err(Error::EmptySet("forgetting set"));
    }
    Ok(())
}

pub(crate) fn unlearned_provenance(method: Method, seed: u64, wall_seconds: f64) -> Provenance {
    let mut p = Provenance::new(Role::Unlearned);
    p.method = Some(method.id().to_string());
    p.seeds = BTreeMap::from([("unlearn".to_string(), seed)]);
    p.wall_seconds = wall_seconds;
    p
}

/// Draws `size` rows from `pool`: without replacement when the pool is large
/// enough, otherwise independently with replacement.
pub(crate) fn sample_batch(pool: &[usize], size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.len() >= size {
        rand::seq::index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}


#[cfg(test)]
mod method_tests;
