use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::saliency::SaliencyMask;
use super::{check_inputs, sample_batch, unlearned_provenance, Method, UnlearnConfig};
use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradient, ModelConfig, ParamVector};
use crate::trainer::{run_sgd, Checkpoint, TrainConfig};

const RELABEL_STREAM: u64 = 2;

fn baseline_train_config(ucfg: &UnlearnConfig) -> TrainConfig {
    TrainConfig {
        lr: ucfg.lr,
        epochs: ucfg.epochs,
        batch_size: ucfg.batch_r,
        schedule: ucfg.schedule,
        momentum: ucfg.momentum,
        seed: ucfg.seed,
    }
}

/// Fine-tunes on the remaining rows only.
pub fn ft_unlearn(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    ft_unlearn_observed(theta0, cfg, dataset, split, ucfg, &mut |_| {})
}

/// As [`ft_unlearn`], reporting every batch of row indices to `observer`.
pub fn ft_unlearn_observed(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
    observer: &mut dyn FnMut(&[usize]),
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    let run = run_sgd(theta0, cfg, &baseline_train_config(ucfg), dataset, &split.remain_idx, None, observer)?;
    let mut prov = unlearned_provenance(Method::Ft, ucfg.seed, run.wall_seconds);
    prov.epoch_losses = run.epoch_losses;
    Checkpoint::new(run.params, cfg.clone(), prov)
}

/// Gradient ascent on the forgetting rows.
pub fn ga_unlearn(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    ascent_loop(theta0, cfg, dataset, split, ucfg, Method::Ga, 0.0)
}

/// Per forgetting batch, descends `−L^f + w·L^r` on a paired remaining batch.
///
/// The forgetting batches follow the same sequence as [`ga_unlearn`], so with
/// `remain_weight = 0` both produce identical parameters.
pub fn joint_unlearn(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    ascent_loop(theta0, cfg, dataset, split, ucfg, Method::Joint, ucfg.remain_weight)
}

fn ascent_loop(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
    method: Method,
    remain_weight: f64,
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    let use_remain = method == Method::Joint;
    if use_remain && split.remain_idx.is_empty() {
        return Err(Error::EmptySet("remaining set"));
    }
    let start = Instant::now();
    let mut forget_rng = ChaCha8Rng::seed_from_u64(ucfg.seed);
    let mut remain_rng = ChaCha8Rng::seed_from_u64(ucfg.seed);
    remain_rng.set_stream(1);
    let mut order = split.forget_idx.clone();
    let per_epoch = order.len().div_ceil(ucfg.batch_f);
    let total = per_epoch * ucfg.epochs;
    let mut theta = theta0.clone();
    let mut epoch_losses = Vec::with_capacity(ucfg.epochs);
    let mut step = 0;
    for _ in 0..ucfg.epochs {
        order.shuffle(&mut forget_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(ucfg.batch_f) {
            let lr = ucfg.lr * ucfg.schedule.factor(step, total);
            let (x, y) = dataset.gather(batch);
            let (loss, g_f) = loss_and_gradient(&theta, cfg, &x, &y, None)?;
            loss_sum += loss;
            if use_remain {
                let rows = sample_batch(&split.remain_idx, ucfg.batch_r.min(split.remain_idx.len()), &mut remain_rng);
                let (xr, yr) = dataset.gather(&rows);
                let (_, g_r) = loss_and_gradient(&theta, cfg, &xr, &yr, None)?;
                for ((p, gf), gr) in theta.as_mut_slice().iter_mut().zip(g_f.as_slice()).zip(g_r.as_slice()) {
                    *p -= lr * (-gf + remain_weight * gr);
                }
            } else {
                for (p, gf) in theta.as_mut_slice().iter_mut().zip(g_f.as_slice()) {
                    *p -= lr * -gf;
                }
            }
            if !theta.is_finite() {
                return Err(Error::NonFinite {
                    context: "ascent parameters at step",
                    index: step,
                });
            }
            step += 1;
        }
        epoch_losses.push(loss_sum / per_epoch as f64);
    }
    let mut prov = unlearned_provenance(method, ucfg.seed, start.elapsed().as_secs_f64());
    prov.epoch_losses = epoch_losses;
    Checkpoint::new(theta, cfg.clone(), prov)
}

/// One fixed random label per forgetting row, each different from the original.
pub fn random_relabels(dataset: &Dataset, forget_idx: &[usize], seed: u64) -> Result<Vec<(usize, usize)>> {
    let c = dataset.class_count();
    if c < 2 {
        return Err(Error::InvalidConfig(format!("relabeling needs >= 2 classes, got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(RELABEL_STREAM);
    Ok(forget_idx
        .iter()
        .map(|&i| {
            let old = dataset.labels()[i];
            (i, (old + 1 + rng.random_range(0..c - 1)) % c)
        })
        .collect())
}

fn relabel_run(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
    method: Method,
    mask: Option<&[f64]>,
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    let changes = random_relabels(dataset, &split.forget_idx, ucfg.seed)?;
    let relabeled = dataset.relabeled(&changes)?;
    let rows = split.train_idx();
    let run = run_sgd(theta0, cfg, &baseline_train_config(ucfg), &relabeled, &rows, mask, &mut |_| {})?;
    let mut prov = unlearned_provenance(method, ucfg.seed, run.wall_seconds);
    prov.epoch_losses = run.epoch_losses;
    Checkpoint::new(run.params, cfg.clone(), prov)
}

/// Random relabeling of the forgetting rows, then fine-tuning on all training rows.
pub fn rl_unlearn(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    relabel_run(theta0, cfg, dataset, split, ucfg, Method::Rl, None)
}

/// Keeps the `topk_percent` coordinates with the largest forgetting-gradient
/// magnitude at `theta0`. Ties go to the lower index.
pub fn salun_mask(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    topk_percent: f64,
) -> Result<SaliencyMask> {
    if !(topk_percent > 0.0 && topk_percent <= 100.0) {
        return Err(Error::InvalidConfig(format!("topk_percent must lie in (0, 100], got {topk_percent}")));
    }
    if split.forget_idx.is_empty() {
        return Err(Error::EmptySet("forgetting set"));
    }
    let (x, y) = dataset.gather(&split.forget_idx);
    let (_, g) = loss_and_gradient(theta0, cfg, &x, &y, None)?;
    let n = g.len();
    let keep = ((topk_percent / 100.0 * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in &order[..keep] {
        bits[i] = true;
    }
    Ok(SaliencyMask::from_bits(bits))
}

/// Relabel fine-tuning restricted to the salient coordinates.
pub fn salun_unlearn(
    theta0: &ParamVector,
    cfg: &ModelConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    ucfg: &UnlearnConfig,
) -> Result<Checkpoint> {
    check_inputs(dataset, split, ucfg)?;
    let start = Instant::now();
    let mask = salun_mask(theta0, cfg, dataset, split, ucfg.topk_percent)?;
    let mut ckpt = relabel_run(theta0, cfg, dataset, split, ucfg, Method::Salun, Some(&mask.as_weights()))?;
    ckpt.provenance.wall_seconds = start.elapsed().as_secs_f64();
    Ok(ckpt)
}
