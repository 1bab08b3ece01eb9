//! Accuracy, entropy membership inference, output KL and the summary report.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, PROB_FLOOR};
use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{forward_logits, predict_labels, ModelConfig, ParamVector};
use crate::autodiff::Tensor;
use crate::trainer::Checkpoint;

pub const MIA_STEPS: usize = 500;
pub const MIA_LR: f64 = 0.1;

/// Fraction of `indices` whose argmax prediction matches the label.
pub fn accuracy(theta: &ParamVector, cfg: &ModelConfig, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptySet("accuracy indices"));
    }
    let (x, y) = dataset.gather(indices);
    let pred = predict_labels(theta, cfg, &x)?;
    let hits = pred.iter().zip(&y).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / indices.len() as f64)
}

fn entropy_of(probs: &[f64]) -> f64 {
    -probs.iter().map(|p| p * p.ln()).sum::<f64>()
}

/// Natural-log predictive entropy per row.
pub fn prediction_entropy(theta: &ParamVector, cfg: &ModelConfig, x: &Tensor) -> Result<Vec<f64>> {
    let logits = forward_logits(theta, cfg, x)?;
    Ok(softmax_rows(&logits).iter().map(|p| entropy_of(p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiaOutcome {
    pub rate: f64,
    /// The entropy feature had zero variance; every forget row got the majority label.
    pub fallback: bool,
}

/// Logistic attacker on the standardized entropy: remaining rows are members,
/// test rows are non-members. Returns the fraction of forget rows scored as members.
pub fn mia_from_entropies(remain: &[f64], test: &[f64], forget: &[f64]) -> Result<MiaOutcome> {
    if remain.is_empty() || test.is_empty() || forget.is_empty() {
        return Err(Error::EmptySet("membership inference sets"));
    }
    let feats: Vec<f64> = remain.iter().chain(test).copied().collect();
    let targets: Vec<f64> = remain.iter().map(|_| 1.0).chain(test.iter().map(|_| 0.0)).collect();
    let n = feats.len() as f64;
    let mean = feats.iter().sum::<f64>() / n;
    let var = feats.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        let member = remain.len() >= test.len();
        return Ok(MiaOutcome {
            rate: if member { 1.0 } else { 0.0 },
            fallback: true,
        });
    }
    let z: Vec<f64> = feats.iter().map(|f| (f - mean) / std).collect();
    let (mut w, mut b) = (0.0, 0.0);
    for _ in 0..MIA_STEPS {
        let (mut gw, mut gb) = (0.0, 0.0);
        for (zi, ti) in z.iter().zip(&targets) {
            let err = sigmoid(w * zi + b) - ti;
            gw += err * zi;
            gb += err;
        }
        w -= MIA_LR * gw / n;
        b -= MIA_LR * gb / n;
    }
    let members = forget
        .iter()
        .filter(|f| sigmoid(w * (*f - mean) / std + b) >= 0.5)
        .count();
    Ok(MiaOutcome {
        rate: members as f64 / forget.len() as f64,
        fallback: false,
    })
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn mia_success_rate(
    theta: &ParamVector,
    cfg: &ModelConfig,
    split: &ForgetSplit,
    dataset: &Dataset,
) -> Result<MiaOutcome> {
    let ent = |rows: &[usize]| -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Err(Error::EmptySet("membership inference sets"));
        }
        prediction_entropy(theta, cfg, &dataset.gather(rows).0)
    };
    mia_from_entropies(&ent(&split.remain_idx)?, &ent(&split.test_idx)?, &ent(&split.forget_idx)?)
}

/// `Σ_c p(c) ln(p(c)/q(c))` for two distributions floored at 1e-12.
pub fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let (a, b) = (a.max(PROB_FLOOR), b.max(PROB_FLOOR));
            a * (a / b).ln()
        })
        .sum()
}

/// Mean output KL from `reference` to `unlearned` over remaining and forgetting rows.
pub fn empirical_kl(
    unlearned: &Checkpoint,
    reference: &Checkpoint,
    dataset: &Dataset,
    split: &ForgetSplit,
) -> Result<f64> {
    if unlearned.model_config.layer_sizes != reference.model_config.layer_sizes
        || unlearned.model_config.activation != reference.model_config.activation
    {
        return Err(Error::InvalidConfig(format!(
            "model configs differ: {:?} vs {:?}",
            unlearned.model_config.layer_sizes, reference.model_config.layer_sizes
        )));
    }
    let rows: Vec<usize> = split.remain_idx.iter().chain(&split.forget_idx).copied().collect();
    if rows.is_empty() {
        return Err(Error::EmptySet("kl rows"));
    }
    let (x, _) = dataset.gather(&rows);
    let p_ref = softmax_rows(&forward_logits(&reference.params, &reference.model_config, &x)?);
    let p_u = softmax_rows(&forward_logits(&unlearned.params, &unlearned.model_config, &x)?);
    let total: f64 = p_ref.iter().zip(&p_u).map(|(p, q)| categorical_kl(p, q)).sum();
    Ok(total / rows.len() as f64)
}

/// Absolute differences in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricGaps {
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
}

impl MetricGaps {
    pub fn mean(&self) -> f64 {
        (self.fa + self.ra + self.ta + self.mia) / 4.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub method: Option<String>,
    pub mia_fallback: bool,
    pub reference_mia_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fa: f64,
    pub ra: f64,
    pub ta: f64,
    pub mia: f64,
    pub kl_to_ref: f64,
    pub avg_d: f64,
    pub rte_seconds: f64,
    pub gaps: MetricGaps,
    pub provenance: ReportProvenance,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// `| FA | RA | TA | MIA | Avg.D | D_KL | RTE |` with gaps in parentheses.
    pub fn markdown_row(&self) -> String {
        let pct = |v: f64, gap: f64| format!("{:.2} ({:.2})", 100.0 * v, gap);
        let cells = [
            pct(self.fa, self.gaps.fa),
            pct(self.ra, self.gaps.ra),
            pct(self.ta, self.gaps.ta),
            pct(self.mia, self.gaps.mia),
            format!("{:.2}", self.avg_d),
            format!("{:.4}", self.kl_to_ref),
            format!("{:.2}", self.rte_seconds),
        ];
        format!("| {} |", cells.join(" | "))
    }
}

pub const MARKDOWN_COLUMNS: [&str; 7] = ["FA", "RA", "TA", "MIA", "Avg.D", "D_KL", "RTE"];

/// Table with a leading method column.
pub fn markdown_table(rows: &[(String, MetricsReport)]) -> String {
    let mut out = format!("| Method | {} |\n", MARKDOWN_COLUMNS.join(" | "));
    out.push_str(&format!("|{}\n", "---|".repeat(MARKDOWN_COLUMNS.len() + 1)));
    for (name, r) in rows {
        out.push_str(&format!("| {name} {}\n", r.markdown_row()));
    }
    out
}

/// Gaps between two reports' FA, RA, TA and MIA, in percentage points.
pub fn metric_gaps(a: &MetricsReport, b: &MetricsReport) -> MetricGaps {
    MetricGaps {
        fa: 100.0 * (a.fa - b.fa).abs(),
        ra: 100.0 * (a.ra - b.ra).abs(),
        ta: 100.0 * (a.ta - b.ta).abs(),
        mia: 100.0 * (a.mia - b.mia).abs(),
    }
}

pub fn avg_disparity(a: &MetricsReport, b: &MetricsReport) -> f64 {
    metric_gaps(a, b).mean()
}

/// Metrics of one checkpoint with zero gaps and no reference.
pub fn standalone_report(ckpt: &Checkpoint, dataset: &Dataset, split: &ForgetSplit) -> Result<MetricsReport> {
    let (theta, cfg) = (&ckpt.params, &ckpt.model_config);
    let mia = mia_success_rate(theta, cfg, split, dataset)?;
    Ok(MetricsReport {
        fa: accuracy(theta, cfg, dataset, &split.forget_idx)?,
        ra: accuracy(theta, cfg, dataset, &split.remain_idx)?,
        ta: accuracy(theta, cfg, dataset, &split.test_idx)?,
        mia: mia.rate,
        kl_to_ref: 0.0,
        avg_d: 0.0,
        rte_seconds: ckpt.provenance.wall_seconds,
        gaps: MetricGaps::default(),
        provenance: ReportProvenance {
            method: ckpt.provenance.method.clone(),
            mia_fallback: mia.fallback,
            reference_mia_fallback: false,
        },
    })
}

/// Metrics of `unlearned` with gaps and KL measured against `reference`.
pub fn full_report(
    unlearned: &Checkpoint,
    reference: &Checkpoint,
    dataset: &Dataset,
    split: &ForgetSplit,
    rte_seconds: f64,
) -> Result<MetricsReport> {
    let kl = empirical_kl(unlearned, reference, dataset, split)?;
    let reference_report = standalone_report(reference, dataset, split)?;
    let mut report = standalone_report(unlearned, dataset, split)?;
    report.gaps = metric_gaps(&report, &reference_report);
    report.avg_d = report.gaps.mean();
    report.kl_to_ref = kl;
    report.rte_seconds = rte_seconds;
    report.provenance.reference_mia_fallback = reference_report.provenance.mia_fallback;
    Ok(report)
}
