use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::saliency::{adaptive_coefficients, fisher_diagonals, saliency_mask, SaliencyMask};
use super::{check_inputs, sample_batch, unlearned_provenance, Method, UnlearnConfig};
use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradient, per_sample_losses, ModelConfig, ParamVector};
use crate::trainer::Checkpoint;

const FISHER_STREAM: u64 = 0x5eed_f15e;

/// Fast-slow saliency unlearning with the mask computed at `theta0`.
pub fn sfr_on(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    let start = Instant::now();
    let fd = fisher_diagonals(
        theta0,
        cfg,
        dataset,
        split,
        ucfg.fisher_mode,
        ucfg.fisher_sample_cap,
        ucfg.seed ^ FISHER_STREAM,
    )?;
    let mask = saliency_mask(&fd, ucfg.gamma)?;
    let mut ckpt = sfr_on_with_mask(theta0, cfg, dataset, split, ucfg, &mask)?;
    ckpt.provenance.wall_seconds = start.elapsed().as_secs_f64();
    Ok(ckpt)
}

/// The fast-slow loop with a caller-supplied mask.
///
/// Each outer step: ascend the coefficient-weighted forgetting loss on masked
/// coordinates, repair with `t_in` remaining-batch SGD steps, then move the
/// slow weights a fraction `alpha` toward the repaired weights.
pub fn sfr_on_with_mask(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
    mask: &SaliencyMask,
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    if mask.len() != theta0.len() {
        return Err(Error::shape(
            "sfr_on mask",
            format!("{} bits for {} parameters", mask.len(), theta0.len()),
        ));
    }
    if ucfg.t_in > 0 && split.remain_idx.is_empty() {
        return Err(Error::EmptySet("remaining set"));
    }
    let start = Instant::now();
    let m = mask.as_weights();
    let mut forget_rng = ChaCha8Rng::seed_from_u64(ucfg.seed);
    let mut remain_rng = ChaCha8Rng::seed_from_u64(ucfg.seed);
    remain_rng.set_stream(1);

    let mut theta = theta0.clone();
    let mut forget_losses = Vec::with_capacity(ucfg.t_out);
    for t in 1..=ucfg.t_out {
        let factor = ucfg.schedule.factor(t - 1, ucfg.t_out);
        let rows = sample_batch(&split.forget_idx, ucfg.batch_f, &mut forget_rng);
        let (x, y) = dataset.gather(&rows);
        let losses = per_sample_losses(&theta, cfg, &x, &y)?;
        forget_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
        let eps = adaptive_coefficients(&losses, t - 1, ucfg.t_out, ucfg.lambda_temp)?;
        let (_, g_f) = loss_and_gradient(&theta, cfg, &x, &y, Some(eps.as_slice()))?;

        let step_f = ucfg.beta_f * factor;
        let mut fast = theta.clone();
        for ((p, g), mi) in fast.as_mut_slice().iter_mut().zip(g_f.as_slice()).zip(&m) {
            *p += step_f * (mi * g);
        }

        let step_r = ucfg.beta_r * factor;
        for _ in 0..ucfg.t_in {
            let rows = sample_batch(&split.remain_idx, ucfg.batch_r.min(split.remain_idx.len()), &mut remain_rng);
            let (x, y) = dataset.gather(&rows);
            let (_, g_r) = loss_and_gradient(&fast, cfg, &x, &y, None)?;
            for (p, g) in fast.as_mut_slice().iter_mut().zip(g_r.as_slice()) {
                *p -= step_r * g;
            }
        }

        for (p, r) in theta.as_mut_slice().iter_mut().zip(fast.as_slice()) {
            *p -= ucfg.alpha * (*p - r);
        }
        if !theta.is_finite() {
            return Err(Error::NonFinite {
                context: "sfr_on parameters at outer iteration",
                index: t,
            });
        }
    }
    let mut prov = unlearned_provenance(Method::SfrOn, ucfg.seed, start.elapsed().as_secs_f64());
    prov.forget_batch_losses = forget_losses;
    Checkpoint::new(theta, cfg.clone(), prov)
}
