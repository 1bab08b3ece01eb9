//! Multilayer-perceptron classifier over a flat parameter vector.
//!
//! Layout per layer `l` with fan-in `I` and fan-out `O`: the `I·O` weights in
//! row-major `[I, O]` order, then the `O` biases. Hidden layers use relu, the
//! last layer emits raw logits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_row, GradientVector, Tape, Tensor, Var, PROB_FLOOR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input width, hidden widths, class count.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub init_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(layer_sizes: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_sizes,
            activation: Activation::Relu,
            init_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer sizes must be >= 1, got {:?}",
                self.layer_sizes
            )));
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "init_scale must be > 0, got {}",
                self.init_scale
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// `(fan_in, fan_out)` for each affine layer.
    pub fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat, ordered view of every model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Splits the flat vector into per-layer `(weights [I,O], biases [O])`.
    pub fn unflatten(&self, cfg: &ModelConfig) -> Result<Vec<(Tensor, Tensor)>> {
        check_len(self, cfg)?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(cfg.layer_sizes.len() - 1);
        for (i, o) in cfg.layers() {
            let w = self.0[offset..offset + i * o].to_vec();
            offset += i * o;
            let b = self.0[offset..offset + o].to_vec();
            offset += o;
            out.push((Tensor::new(vec![i, o], w)?, Tensor::vector(b)));
        }
        Ok(out)
    }

    pub fn flatten(layers: &[(Tensor, Tensor)]) -> Self {
        let mut v = Vec::new();
        for (w, b) in layers {
            v.extend_from_slice(w.data());
            v.extend_from_slice(b.data());
        }
        Self(v)
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_len(theta: &ParamVector, cfg: &ModelConfig) -> Result<()> {
    let expected = cfg.param_count();
    if theta.len() != expected {
        return Err(Error::shape(
            "params",
            format!("model {:?} needs {expected} params, got {}", cfg.layer_sizes, theta.len()),
        ));
    }
    Ok(())
}

/// Seeded uniform fan-in initialization: weights ~ U(−s, s) with
/// `s = init_scale / √fan_in`, biases zero.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamVector> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = Vec::with_capacity(cfg.param_count());
    for (fan_in, fan_out) in cfg.layers() {
        let s = cfg.init_scale / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            v.push(rng.random_range(-s..s));
        }
        v.extend(std::iter::repeat_n(0.0, fan_out));
    }
    Ok(ParamVector(v))
}

fn record_forward(tape: &mut Tape, theta: &ParamVector, cfg: &ModelConfig, x: &Tensor) -> Result<Var> {
    if x.shape().len() != 2 || x.cols() != cfg.input_dim() {
        return Err(Error::shape(
            "forward_logits",
            format!("input {:?} but model expects width {}", x.shape(), cfg.input_dim()),
        ));
    }
    let layers = theta.unflatten(cfg)?;
    let last = layers.len() - 1;
    let mut h = tape.constant(x.clone());
    for (l, (w, b)) in layers.into_iter().enumerate() {
        let w = tape.param(w);
        let b = tape.param(b);
        h = tape.affine(h, w, b)?;
        if l != last {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

/// Logits `[B, C]` for a batch of inputs `[B, I]`.
pub fn forward_logits(theta: &ParamVector, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = record_forward(&mut tape, theta, cfg, x)?;
    Ok(tape.value(out).clone())
}

/// A recorded scalar loss ready for [`LossRecord::gradient`].
#[derive(Debug, Clone)]
pub struct LossRecord {
    pub tape: Tape,
    pub root: Var,
}

impl LossRecord {
    pub fn value(&self) -> f64 {
        self.tape.value(self.root).item()
    }

    /// Gradient in [`ParamVector`] order.
    pub fn gradient(&self) -> Result<GradientVector> {
        self.tape.backward(self.root)
    }
}

/// Records `mean_i w_i · CE(θ; x_i, y_i)`. The weights are constants, so no
/// gradient flows through them.
pub fn weighted_loss(
    theta: &ParamVector,
    cfg: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<LossRecord> {
    let mut tape = Tape::new();
    let logits = record_forward(&mut tape, theta, cfg, x)?;
    let root = tape.softmax_cross_entropy(logits, labels, weights)?;
    Ok(LossRecord { tape, root })
}

/// Loss value and its gradient in one pass.
pub fn loss_and_gradient(
    theta: &ParamVector,
    cfg: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
    weights: Option<&[f64]>,
) -> Result<(f64, GradientVector)> {
    let rec = weighted_loss(theta, cfg, x, labels, weights)?;
    Ok((rec.value(), rec.gradient()?))
}

/// Per-sample cross-entropy (probability floored at 1e-12), no graph kept.
pub fn per_sample_losses(
    theta: &ParamVector,
    cfg: &ModelConfig,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let logits = forward_logits(theta, cfg, x)?;
    if labels.len() != logits.rows() {
        return Err(Error::shape(
            "per_sample_losses",
            format!("{} labels for batch of {}", labels.len(), logits.rows()),
        ));
    }
    let max_loss = -PROB_FLOOR.ln();
    labels
        .iter()
        .enumerate()
        .map(|(r, &label)| {
            if label >= logits.cols() {
                return Err(Error::LabelOutOfRange {
                    row: r,
                    label,
                    classes: logits.cols(),
                });
            }
            let (_, nll) = softmax_row(logits.row(r), label);
            Ok(nll.min(max_loss))
        })
        .collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn predict_labels(theta: &ParamVector, cfg: &ModelConfig, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward_logits(theta, cfg, x)?;
    Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_gradient;
    use crate::vecops;
    use proptest::prelude::*;

    fn random_batch(seed: u64, rows: usize, cols: usize, classes: usize) -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        (Tensor::new(vec![rows, cols], data).unwrap(), labels)
    }

    #[test]
    fn param_count_and_zero_biases() {
        let cfg = ModelConfig::new(vec![2, 3, 2], 7);
        assert_eq!(cfg.param_count(), 17);
        let theta = init_params(&cfg).unwrap();
        assert_eq!(theta.len(), 17);
        let layers = theta.unflatten(&cfg).unwrap();
        for (w, b) in &layers {
            assert!(b.data().iter().all(|v| *v == 0.0));
            let s = 1.0 / (w.rows() as f64).sqrt();
            assert!(w.data().iter().all(|v| v.abs() <= s));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig::new(vec![4, 8, 3], 11);
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig::new(vec![4, 8, 3], 12);
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ModelConfig::new(vec![3], 0).validate().is_err());
        assert!(ModelConfig::new(vec![3, 0, 2], 0).validate().is_err());
        let mut cfg = ModelConfig::new(vec![3, 2], 0);
        cfg.init_scale = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let cfg = ModelConfig::new(vec![3, 5, 4], 0);
        let theta = ParamVector::zeros(cfg.param_count());
        let (x, _) = random_batch(1, 6, 3, 4);
        let logits = forward_logits(&theta, &cfg, &x).unwrap();
        assert_eq!(logits.shape(), &[6, 4]);
        assert!(logits.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_identity_layer_passes_input_through() {
        let cfg = ModelConfig::new(vec![3, 3], 0);
        let theta = ParamVector::from_vec(vec![
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
        ]);
        let (x, _) = random_batch(2, 4, 3, 3);
        assert_eq!(forward_logits(&theta, &cfg, &x).unwrap(), x);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let cfg = ModelConfig::new(vec![3, 2], 0);
        let theta = init_params(&cfg).unwrap();
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(forward_logits(&theta, &cfg, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn batch_permutation_permutes_rows() {
        let cfg = ModelConfig::new(vec![3, 6, 4], 5);
        let theta = init_params(&cfg).unwrap();
        let (x, _) = random_batch(3, 5, 3, 4);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| x.row(r).to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let a = forward_logits(&theta, &cfg, &x).unwrap();
        let b = forward_logits(&theta, &cfg, &xp).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            assert_eq!(a.row(r), b.row(i));
        }
    }

    #[test]
    fn weighted_loss_special_weights() {
        let cfg = ModelConfig::new(vec![3, 6, 4], 5);
        let theta = init_params(&cfg).unwrap();
        let (x, y) = random_batch(4, 5, 3, 4);
        let plain = weighted_loss(&theta, &cfg, &x, &y, None).unwrap();
        let ones = weighted_loss(&theta, &cfg, &x, &y, Some(&[1.0; 5])).unwrap();
        assert_eq!(plain.value(), ones.value());
        assert_eq!(plain.gradient().unwrap(), ones.gradient().unwrap());

        let zeros = weighted_loss(&theta, &cfg, &x, &y, Some(&[0.0; 5])).unwrap();
        assert_eq!(zeros.value(), 0.0);
        assert!(zeros.gradient().unwrap().as_slice().iter().all(|v| *v == 0.0));

        // weights [2, 0] on (a, b) == plain mean over the duplicated pair (a, a)
        let xa = Tensor::from_rows(&[x.row(0), x.row(1)]).unwrap();
        let xd = Tensor::from_rows(&[x.row(0), x.row(0)]).unwrap();
        let w = weighted_loss(&theta, &cfg, &xa, &[y[0], y[1]], Some(&[2.0, 0.0])).unwrap();
        let d = weighted_loss(&theta, &cfg, &xd, &[y[0], y[0]], None).unwrap();
        assert!((w.value() - d.value()).abs() < 1e-14);
        let per = per_sample_losses(&theta, &cfg, &xa, &[y[0], y[1]]).unwrap();
        assert!((w.value() - (2.0 * per[0] + 0.0 * per[1]) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn weighted_loss_rejects_bad_label() {
        let cfg = ModelConfig::new(vec![2, 3], 0);
        let theta = init_params(&cfg).unwrap();
        let x = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            weighted_loss(&theta, &cfg, &x, &[3], None),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn argmax_tie_break_and_basic() {
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = ModelConfig::new(vec![4, 7, 5, 3], 9);
        let theta = init_params(&cfg).unwrap();
        let (x, y) = random_batch(10, 6, 4, 3);
        let g = weighted_loss(&theta, &cfg, &x, &y, None).unwrap().gradient().unwrap();
        let fd = finite_diff_gradient(
            |t| {
                weighted_loss(&ParamVector::from_vec(t.to_vec()), &cfg, &x, &y, None)
                    .unwrap()
                    .value()
            },
            theta.as_slice(),
            1e-5,
        )
        .unwrap();
        let err = vecops::rel_err(g.as_slice(), fd.as_slice());
        assert!(err < 1e-6, "rel err {err}");
    }

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(seed in 0u64..1000, hidden in 1usize..6) {
            let cfg = ModelConfig::new(vec![3, hidden, 2], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f64> = (0..cfg.param_count()).map(|_| rng.random_range(-5.0..5.0)).collect();
            let theta = ParamVector::from_vec(v);
            let back = ParamVector::flatten(&theta.unflatten(&cfg).unwrap());
            prop_assert_eq!(back, theta);
        }

        #[test]
        fn predictions_invariant_under_row_shift(seed in 0u64..500, shift in -20.0f64..20.0) {
            // a constant added to every output bias shifts each logit row uniformly
            let cfg = ModelConfig::new(vec![3, 6, 5], seed);
            let theta = init_params(&cfg).unwrap();
            let mut shifted = theta.clone();
            let n = shifted.len();
            for v in &mut shifted.as_mut_slice()[n - 5..] {
                *v += shift;
            }
            let (x, _) = random_batch(seed + 1, 16, 3, 5);
            prop_assert_eq!(
                predict_labels(&theta, &cfg, &x).unwrap(),
                predict_labels(&shifted, &cfg, &x).unwrap()
            );
        }
    }
}
