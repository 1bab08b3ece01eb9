use crate::error::{Error, Result};

use super::tensor::Tensor;
use super::GradientVector;

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Option<Vec<f64>>,
        probs: Vec<f64>,
        // false where the probability floor clamps the log (zero gradient).
        active: Vec<bool>,
    },
    Square(Var),
    Sum(Var),
    Add(Var, Var),
    Scale(Var, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every input of a node has a
/// smaller index and the record is acyclic by construction. Parameters are
/// leaves registered with [`Tape::param`]; [`Tape::backward`] returns their
/// gradients concatenated in registration order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of scalar parameters across all registered leaves.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| self.value(*p).len()).sum()
    }

    /// `y[r,c] = Σ_k x[r,k]·w[k,c] + b[c]`
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::shape(
                "affine",
                format!("x {xs:?}, w {ws:?}, b {bs:?}: need x[B,I], w[I,O], b[O]"),
            ));
        }
        let (batch, inner, out) = (xs[0], xs[1], ws[1]);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut y = Vec::with_capacity(batch * out);
        for r in 0..batch {
            y.extend_from_slice(bd);
            let row = &mut y[r * out..(r + 1) * out];
            for k in 0..inner {
                let xv = xd[r * inner + k];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[k * out..(k + 1) * out];
                for (yc, wc) in row.iter_mut().zip(wrow) {
                    *yc += xv * wc;
                }
            }
        }
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        let value = Tensor::new(vec![batch, out], y)?;
        Ok(self.push(value, Op::Affine { x, w, b }, needs))
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.node(x).needs_grad;
        self.push(value, Op::Relu(x), needs)
    }

    /// Batch mean of `w_i · (−ln softmax(logits_i)[label_i])`.
    ///
    /// Uses max-subtraction for stability; the per-row probability is floored
    /// at [`PROB_FLOOR`] before the log. Weights are constants.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        weights: Option<&[f64]>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be [B,C], got {:?}", lv.shape()),
            ));
        }
        let (batch, classes) = (lv.rows(), lv.cols());
        if labels.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for batch of {batch}", labels.len()),
            ));
        }
        if let Some(w) = weights {
            if w.len() != batch {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{} weights for batch of {batch}", w.len()),
                ));
            }
            if let Some(i) = w.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "sample weight",
                    index: i,
                });
            }
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(Error::LabelOutOfRange {
                    row,
                    label,
                    classes,
                });
            }
        }
        let max_loss = -PROB_FLOOR.ln();
        let mut probs = Vec::with_capacity(batch * classes);
        let mut active = Vec::with_capacity(batch);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let (p, nll) = softmax_row(row, label);
            probs.extend_from_slice(&p);
            let clamped = nll > max_loss;
            active.push(!clamped);
            let loss = if clamped { max_loss } else { nll };
            let w = weights.map_or(1.0, |w| w[r]);
            total += w * loss;
        }
        let value = Tensor::scalar(if batch == 0 { 0.0 } else { total / batch as f64 });
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.map(<[f64]>::to_vec),
                probs,
                active,
            },
            needs,
        ))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v * v).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.node(x).needs_grad;
        self.push(value, Op::Square(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let needs = self.node(x).needs_grad;
        self.push(value, Op::Sum(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| c * v).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let needs = self.node(x).needs_grad;
        self.push(value, Op::Scale(x, c), needs)
    }

    /// Reverse-mode gradient of a scalar `root` with respect to every
    /// registered parameter, concatenated in registration order.
    pub fn backward(&self, root: Var) -> Result<GradientVector> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (batch, inner, out) = (xv.rows(), xv.cols(), wv.cols());
                    if self.node(*x).needs_grad {
                        let mut dx = vec![0.0; batch * inner];
                        for r in 0..batch {
                            let gy = &g[r * out..(r + 1) * out];
                            for k in 0..inner {
                                let wrow = &wv.data()[k * out..(k + 1) * out];
                                dx[r * inner + k] = gy.iter().zip(wrow).map(|(a, b)| a * b).sum();
                            }
                        }
                        accumulate(&mut grads, *x, &dx);
                    }
                    if self.node(*w).needs_grad {
                        let mut dw = vec![0.0; inner * out];
                        for r in 0..batch {
                            let gy = &g[r * out..(r + 1) * out];
                            for k in 0..inner {
                                let xv = xv.data()[r * inner + k];
                                if xv == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[k * out..(k + 1) * out];
                                for (d, gc) in drow.iter_mut().zip(gy) {
                                    *d += xv * gc;
                                }
                            }
                        }
                        accumulate(&mut grads, *w, &dw);
                    }
                    if self.node(*b).needs_grad {
                        let mut db = vec![0.0; out];
                        for r in 0..batch {
                            for (d, gc) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *d += gc;
                            }
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    probs,
                    active,
                } => {
                    let classes = self.value(*logits).cols();
                    let batch = labels.len();
                    let upstream = g[0] / batch as f64;
                    let mut dl = vec![0.0; batch * classes];
                    for (r, &label) in labels.iter().enumerate() {
                        if !active[r] {
                            continue;
                        }
                        let w = weights.as_ref().map_or(1.0, |w| w[r]);
                        let coef = upstream * w;
                        if coef == 0.0 {
                            continue;
                        }
                        let p = &probs[r * classes..(r + 1) * classes];
                        let d = &mut dl[r * classes..(r + 1) * classes];
                        for c in 0..classes {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            d[c] = coef * (p[c] - onehot);
                        }
                    }
                    accumulate(&mut grads, *logits, &dl);
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<f64> = g.iter().zip(xv).map(|(gi, xi)| 2.0 * xi * gi).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Scale(x, c) => {
                    let dx: Vec<f64> = g.iter().map(|gi| c * gi).collect();
                    accumulate(&mut grads, *x, &dx);
                }
            }
        }

        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            match grads.get(p.0).and_then(Option::as_ref) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, self.value(*p).len())),
            }
        }
        Ok(GradientVector::from_vec(out))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

/// Softmax of one logit row and the unclamped negative log-likelihood of `label`.
pub(crate) fn softmax_row(row: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let lse = max + z.ln();
    let probs = exps.into_iter().map(|e| e / z).collect();
    (probs, lse - row[label])
}

/// Softmax probabilities of each row, each floored at [`PROB_FLOOR`].
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let (p, _) = softmax_row(logits.row(r), 0);
            p.into_iter().map(|v| v.max(PROB_FLOOR)).collect()
        })
        .collect()
}
