use std::path::PathBuf;

use unlearn_core::data::{generate_blobs, make_random_subset_split};
use unlearn_core::eval::accuracy;
use unlearn_core::model::{init_params, per_sample_losses, ModelConfig};
use unlearn_core::pipeline::{pretrain, retrain, ExperimentConfig, RunContext};
use unlearn_core::trainer::{Checkpoint, Schedule};
use unlearn_core::unlearn::{ft_unlearn, run_unlearning, Method, UnlearnConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Seeded {
    ctx: RunContext,
    pre: Checkpoint,
}

fn benchmark_seeds() -> (ExperimentConfig, Vec<Seeded>) {
    let cfg = ExperimentConfig::blobs_benchmark(PathBuf::from("unused"));
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| {
            let ctx = cfg.resolve(s).unwrap();
            let pre = pretrain(&ctx).unwrap();
            Seeded { ctx, pre }
        })
        .collect();
    (cfg, runs)
}

fn fa_ra(ck: &Checkpoint, ctx: &RunContext) -> (f64, f64) {
    (
        accuracy(&ck.params, &ck.model_config, &ctx.dataset, &ctx.split.forget_idx).unwrap(),
        accuracy(&ck.params, &ck.model_config, &ctx.dataset, &ctx.split.remain_idx).unwrap(),
    )
}

#[test]
fn forgetting_methods_lower_forget_accuracy_on_blobs() {
    let (cfg, runs) = benchmark_seeds();
    for method in [Method::SfrOn, Method::Rl, Method::Salun] {
        let mut fa_drop = Vec::new();
        let mut ra_shift = Vec::new();
        for r in &runs {
            let ucfg = cfg.unlearn_config(method, r.ctx.seed).unwrap();
            let out = run_unlearning(&r.pre, &r.ctx.dataset, &r.ctx.split, &ucfg).unwrap();
            let (fa0, ra0) = fa_ra(&r.pre, &r.ctx);
            let (fa, ra) = fa_ra(&out, &r.ctx);
            fa_drop.push(fa0 - fa);
            ra_shift.push((ra0 - ra).abs());
        }
        assert!(median(fa_drop.clone()) > 0.0, "{method}: FA drops {fa_drop:?}");
        if method == Method::SfrOn {
            assert!(median(ra_shift.clone()) <= 0.02, "{method}: RA shifts {ra_shift:?}");
        }
    }
}

#[test]
fn reference_generalizes_to_forget_rows_like_test_rows() {
    let (_, runs) = benchmark_seeds();
    let mut gaps = Vec::new();
    for r in &runs {
        let rt = retrain(&r.ctx).unwrap();
        let (fa, ra) = fa_ra(&rt, &r.ctx);
        let ta = accuracy(&rt.params, &rt.model_config, &r.ctx.dataset, &r.ctx.split.test_idx).unwrap();
        assert!(ra >= fa, "seed {}: RA {ra} < FA {fa}", r.ctx.seed);
        gaps.push((fa - ta).abs());
    }
    assert!(median(gaps.clone()) <= 0.05, "|FA - TA| {gaps:?}");
}

#[test]
fn fine_tuning_remain_loss_non_increasing_on_convex_toy() {
    for seed in 0..3 {
        let data = generate_blobs(seed, 60, 3, 4, 0.8).unwrap();
        let split = make_random_subset_split(&data, 0.1, 0.0, seed).unwrap();
        let model = ModelConfig::new(vec![4, 3], seed);
        let theta0 = init_params(&model).unwrap();
        let mut u = UnlearnConfig::new(Method::Ft, seed);
        u.lr = 0.1;
        u.epochs = 40;
        u.batch_r = split.remain_idx.len();
        u.schedule = Schedule::Constant;
        let out = ft_unlearn(&theta0, &model, &data, &split, &u).unwrap();
        let losses = &out.provenance.epoch_losses;
        assert_eq!(losses.len(), 40);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "seed {seed}: {} -> {}", w[0], w[1]);
        }
        let (x, y) = data.gather(&split.remain_idx);
        let end: f64 = per_sample_losses(&out.params, &model, &x, &y).unwrap().iter().sum::<f64>() / y.len() as f64;
        assert!(end <= losses[losses.len() - 1] + 1e-9);
    }
}
