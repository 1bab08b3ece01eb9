use super::*;
use crate::data::{generate_blobs, make_random_subset_split};
use crate::model::{init_params, weighted_loss, ModelConfig, ParamVector};
use crate::trainer::{sgd_train, TrainConfig};

struct Fixture {
    data: Dataset,
    split: ForgetSplit,
    model: ModelConfig,
    theta0: ParamVector,
}

fn fixture(seed: u64) -> Fixture {
    let data = generate_blobs(seed, 60, 4, 5, 0.8).unwrap();
    let split = make_random_subset_split(&data, 0.1, 0.2, seed).unwrap();
    let model = ModelConfig::new(vec![5, 12, 4], seed);
    let train = TrainConfig {
        lr: 0.1,
        epochs: 15,
        batch_size: 16,
        schedule: Schedule::Constant,
        momentum: 0.0,
        seed,
    };
    let theta0 = sgd_train(&init_params(&model).unwrap(), &model, &train, &data, &split.train_idx())
        .unwrap()
        .params;
    Fixture {
        data,
        split,
        model,
        theta0,
    }
}

fn ucfg(method: Method) -> UnlearnConfig {
    let mut c = UnlearnConfig::new(method, 11);
    c.t_out = 8;
    c.t_in = 2;
    c.batch_f = 8;
    c.batch_r = 16;
    c.epochs = 2;
    c.lr = 0.01;
    c
}

fn run(f: &Fixture, c: &UnlearnConfig) -> Checkpoint {
    let pre = Checkpoint::new(f.theta0.clone(), f.model.clone(), Provenance::new(Role::Pretrain)).unwrap();
    run_unlearning(&pre, &f.data, &f.split, c).unwrap()
}

fn forget_loss(f: &Fixture, theta: &ParamVector) -> f64 {
    let (x, y) = f.data.gather(&f.split.forget_idx);
    weighted_loss(theta, &f.model, &x, &y, None).unwrap().value()
}

#[test]
fn sfr_with_zero_alpha_is_identity() {
    let f = fixture(1);
    let mut c = ucfg(Method::SfrOn);
    c.alpha = 0.0;
    assert_eq!(run(&f, &c).params, f.theta0);
}

#[test]
fn sfr_with_empty_mask_and_no_repair_is_identity() {
    let f = fixture(2);
    let mut c = ucfg(Method::SfrOn);
    c.t_in = 0;
    let mask = SaliencyMask::all(f.theta0.len(), false);
    let out = sfr_on_with_mask(&f.theta0, &f.model, &f.data, &f.split, &c, &mask).unwrap();
    assert_eq!(out.params, f.theta0);
    c.gamma = 1e12;
    assert_eq!(run(&f, &c).params, f.theta0);
}

#[test]
fn sfr_fast_step_leaves_unmasked_coordinates() {
    let f = fixture(3);
    let mut c = ucfg(Method::SfrOn);
    c.t_in = 0;
    let bits: Vec<bool> = (0..f.theta0.len()).map(|i| i % 3 == 0).collect();
    let mask = SaliencyMask::from_bits(bits.clone());
    let out = sfr_on_with_mask(&f.theta0, &f.model, &f.data, &f.split, &c, &mask).unwrap();
    let mut moved = 0;
    for (i, b) in bits.iter().enumerate() {
        if *b {
            moved += usize::from(out.params[i] != f.theta0[i]);
        } else {
            assert_eq!(out.params[i], f.theta0[i], "coordinate {i}");
        }
    }
    assert!(moved > 0);
}

#[test]
fn sfr_records_losses_and_is_deterministic() {
    let f = fixture(4);
    let c = ucfg(Method::SfrOn);
    let a = run(&f, &c);
    let b = run(&f, &c);
    assert_eq!(a.params, b.params);
    assert_eq!(a.provenance.forget_batch_losses.len(), c.t_out);
    assert_eq!(a.provenance.forget_batch_losses, b.provenance.forget_batch_losses);
    assert_eq!(a.provenance.method.as_deref(), Some("sfr_on"));
    let mut other = c.clone();
    other.seed += 1;
    assert_ne!(run(&f, &other).params, a.params);
}

#[test]
fn sfr_rejects_wrong_mask_length() {
    let f = fixture(5);
    let mask = SaliencyMask::all(3, true);
    assert!(sfr_on_with_mask(&f.theta0, &f.model, &f.data, &f.split, &ucfg(Method::SfrOn), &mask).is_err());
}

#[test]
fn ft_zero_epochs_and_remain_only() {
    let f = fixture(6);
    let mut c = ucfg(Method::Ft);
    c.epochs = 0;
    assert_eq!(run(&f, &c).params, f.theta0);
    c.epochs = 3;
    let mut touched = Vec::new();
    ft_unlearn_observed(&f.theta0, &f.model, &f.data, &f.split, &c, &mut |b| touched.extend_from_slice(b)).unwrap();
    assert!(!touched.is_empty());
    assert!(touched.iter().all(|i| f.split.remain_idx.binary_search(i).is_ok()));
}

#[test]
fn ga_degenerate_runs_are_identity() {
    let f = fixture(7);
    let mut c = ucfg(Method::Ga);
    c.lr = 0.0;
    assert_eq!(run(&f, &c).params, f.theta0);
    c.lr = 0.01;
    c.epochs = 0;
    assert_eq!(run(&f, &c).params, f.theta0);
}

#[test]
fn ga_raises_forgetting_loss() {
    let f = fixture(8);
    let mut c = ucfg(Method::Ga);
    c.lr = 1e-3;
    c.epochs = 3;
    let out = run(&f, &c);
    assert!(forget_loss(&f, &out.params) >= forget_loss(&f, &f.theta0));
}

#[test]
fn ga_divergence_reports_step() {
    let f = fixture(9);
    let mut c = ucfg(Method::Ga);
    c.lr = 1e300;
    let err = ga_unlearn(&f.theta0, &f.model, &f.data, &f.split, &c).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err}");
}

#[test]
fn relabels_differ_and_repeat_per_seed() {
    let f = fixture(10);
    let a = random_relabels(&f.data, &f.split.forget_idx, 3).unwrap();
    assert_eq!(a, random_relabels(&f.data, &f.split.forget_idx, 3).unwrap());
    for (i, new) in &a {
        assert_ne!(*new, f.data.labels()[*i]);
        assert!(*new < 4);
    }
    let one_class = Dataset::new(f.data.features().clone(), vec![0; f.data.len()], 1).unwrap();
    assert!(random_relabels(&one_class, &f.split.forget_idx, 3).is_err());
}

#[test]
fn salun_full_mask_matches_rl() {
    let f = fixture(11);
    let mut c = ucfg(Method::Salun);
    c.topk_percent = 100.0;
    let s = run(&f, &c);
    c.method = Method::Rl;
    assert_eq!(s.params, run(&f, &c).params);
}

#[test]
fn salun_keeps_unsalient_coordinates() {
    let f = fixture(12);
    let c = ucfg(Method::Salun);
    let mask = salun_mask(&f.theta0, &f.model, &f.data, &f.split, c.topk_percent).unwrap();
    assert_eq!(mask.count_ones(), (0.2 * f.theta0.len() as f64).ceil() as usize);
    let out = run(&f, &c);
    for (i, b) in mask.bits().iter().enumerate() {
        if !b {
            assert_eq!(out.params[i], f.theta0[i]);
        }
    }
    assert_ne!(out.params, f.theta0);
}

#[test]
fn joint_degenerate_cases() {
    let f = fixture(13);
    let mut c = ucfg(Method::Joint);
    c.lr = 0.0;
    assert_eq!(run(&f, &c).params, f.theta0);
    c.lr = 2e-3;
    c.remain_weight = 0.0;
    let joint = run(&f, &c);
    c.method = Method::Ga;
    assert_eq!(joint.params, run(&f, &c).params);
}

#[test]
fn every_method_is_deterministic() {
    let f = fixture(14);
    for m in Method::ALL {
        let c = ucfg(m);
        assert_eq!(run(&f, &c).params, run(&f, &c).params, "{m}");
    }
}

#[test]
fn fisher_diagonals_are_nonnegative_and_capped() {
    let f = fixture(15);
    for mode in [FisherMode::PerSampleMean, FisherMode::BatchSquare] {
        let fd = fisher_diagonals(&f.theta0, &f.model, &f.data, &f.split, mode, Some(10), 1).unwrap();
        assert_eq!(fd.forget.len(), f.theta0.len());
        assert!(fd.forget.iter().chain(&fd.remain).all(|v| *v >= 0.0));
    }
    let zero = ParamVector::zeros(f.theta0.len());
    // With zero weights only the output bias receives gradient.
    let fd = fisher_diagonals(&zero, &f.model, &f.data, &f.split, FisherMode::PerSampleMean, None, 0).unwrap();
    assert!(fd.forget[..5 * 12 + 12 + 12 * 4].iter().all(|v| *v == 0.0));
    let mut empty = f.split.clone();
    empty.forget_idx.clear();
    assert!(fisher_diagonals(&f.theta0, &f.model, &f.data, &empty, FisherMode::PerSampleMean, None, 0).is_err());
}
