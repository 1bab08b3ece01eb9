//! Minibatch SGD for pretraining and the retrain reference, plus the
//! on-disk checkpoint format.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ForgetSplit};
use crate::error::{Error, Result};
use crate::model::{init_params, loss_and_gradient, ModelConfig, ParamVector};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning-rate multiplier at `step` of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => {
                0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Pretrain,
    Retrain,
    Unlearned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Wall-clock seconds of the update loop only.
    pub wall_seconds: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_losses: Vec<f64>,
    /// Mean unweighted forgetting-batch loss per outer iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub forget_batch_losses: Vec<f64>,
}

impl Provenance {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            method: None,
            seeds: BTreeMap::new(),
            wall_seconds: 0.0,
            epoch_losses: Vec::new(),
            forget_batch_losses: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub model_config: ModelConfig,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn new(params: ParamVector, model_config: ModelConfig, provenance: Provenance) -> Result<Self> {
        if params.len() != model_config.param_count() {
            return Err(Error::Checkpoint(format!(
                "{} params for a model with {}",
                params.len(),
                model_config.param_count()
            )));
        }
        Ok(Self {
            params,
            model_config,
            provenance,
        })
    }
}

/// Result of one SGD run before it is wrapped into a checkpoint.
pub(crate) struct SgdRun {
    pub params: ParamVector,
    pub epoch_losses: Vec<f64>,
    pub wall_seconds: f64,
}

/// Core SGD-with-momentum loop shared by pretraining, retraining and the
/// fine-tuning baselines.
///
/// `grad_mask`, when present, multiplies every gradient elementwise. The
/// observer sees the row indices of every batch whose gradient is computed.
pub(crate) fn run_sgd(
    init: &ParamVector,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    indices: &[usize],
    grad_mask: Option<&[f64]>,
    observer: &mut dyn FnMut(&[usize]),
) -> Result<SgdRun> {
    cfg.validate()?;
    if indices.is_empty() {
        return Err(Error::EmptySet("training indices"));
    }
    let start = Instant::now();
    let mut theta = init.clone();
    let mut velocity = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = indices.to_vec();
    let batches_per_epoch = indices.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            observer(batch);
            let (x, y) = dataset.gather(batch);
            let (loss, grad) = loss_and_gradient(&theta, model_cfg, &x, &y, None)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: "training loss at step",
                    index: step,
                });
            }
            loss_sum += loss;
            let lr = cfg.lr * cfg.schedule.factor(step, total);
            let g = grad.as_slice();
            for (i, (p, v)) in theta.as_mut_slice().iter_mut().zip(&mut velocity).enumerate() {
                let gi = match grad_mask {
                    Some(m) => g[i] * m[i],
                    None => g[i],
                };
                *v = cfg.momentum * *v + gi;
                *p -= lr * *v;
            }
            if !theta.is_finite() {
                return Err(Error::NonFinite {
                    context: "parameters after step",
                    index: step,
                });
            }
            step += 1;
        }
        epoch_losses.push(loss_sum / batches_per_epoch as f64);
    }
    Ok(SgdRun {
        params: theta,
        epoch_losses,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Minibatch SGD with momentum over seeded per-epoch shuffles of `indices`.
pub fn sgd_train(
    init: &ParamVector,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Checkpoint> {
    sgd_train_observed(init, model_cfg, cfg, dataset, indices, &mut |_| {})
}

/// [`sgd_train`] with a hook that receives every batch of row indices.
pub fn sgd_train_observed(
    init: &ParamVector,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    indices: &[usize],
    observer: &mut dyn FnMut(&[usize]),
) -> Result<Checkpoint> {
    let run = run_sgd(init, model_cfg, cfg, dataset, indices, None, observer)?;
    let mut prov = Provenance::new(Role::Pretrain);
    prov.seeds.insert("model_init".into(), model_cfg.seed);
    prov.seeds.insert("shuffle".into(), cfg.seed);
    prov.wall_seconds = run.wall_seconds;
    prov.epoch_losses = run.epoch_losses;
    Checkpoint::new(run.params, model_cfg.clone(), prov)
}

/// Exact unlearning reference: fresh initialization from `model_cfg.seed`,
/// then SGD on the remaining rows only.
pub fn retrain_oracle(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
) -> Result<Checkpoint> {
    retrain_oracle_observed(model_cfg, cfg, dataset, split, &mut |_| {})
}

pub fn retrain_oracle_observed(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    split: &ForgetSplit,
    observer: &mut dyn FnMut(&[usize]),
) -> Result<Checkpoint> {
    split.validate(Some(dataset.len()))?;
    let forget: HashSet<usize> = split.forget_idx.iter().copied().collect();
    let mut leaked = 0usize;
    let init = init_params(model_cfg)?;
    let run = run_sgd(&init, model_cfg, cfg, dataset, &split.remain_idx, None, &mut |rows| {
        leaked += rows.iter().filter(|r| forget.contains(r)).count();
        observer(rows);
    })?;
    if leaked > 0 {
        return Err(Error::Contract(format!("retrain touched {leaked} forgetting rows")));
    }
    let mut prov = Provenance::new(Role::Retrain);
    prov.method = Some("rt".into());
    prov.seeds.insert("model_init".into(), model_cfg.seed);
    prov.seeds.insert("shuffle".into(), cfg.seed);
    prov.wall_seconds = run.wall_seconds;
    prov.epoch_losses = run.epoch_losses;
    Checkpoint::new(run.params, model_cfg.clone(), prov)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model_config: ModelConfig,
    provenance: Provenance,
    param_count: usize,
    dtype: String,
    blob: String,
}

/// Writes `manifest.json` and `params.bin` (raw little-endian f64) into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_config: ckpt.model_config.clone(),
        provenance: ckpt.provenance.clone(),
        param_count: ckpt.params.len(),
        dtype: "f64".into(),
        blob: BLOB.into(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bytes: Vec<u8> = ckpt
        .params
        .as_slice()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let bpath = dir.join(BLOB);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unknown schema_version {}",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {:?}", manifest.dtype)));
    }
    if manifest.blob.contains(['/', '\\']) || manifest.blob.starts_with("..") {
        return Err(Error::Checkpoint(format!("blob name {:?} must be a plain file name", manifest.blob)));
    }
    let bpath = dir.join(&manifest.blob);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() != manifest.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "param_count {} needs {} bytes, blob has {}",
            manifest.param_count,
            manifest.param_count * 8,
            bytes.len()
        )));
    }
    let params: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Checkpoint::new(ParamVector::from_vec(params), manifest.model_config, manifest.provenance)
}
