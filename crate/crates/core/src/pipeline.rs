//! Config-driven experiment runner: data, split, pretrain, retrain, unlearn, eval, report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_blobs, load_csv_dataset, load_split, make_classwise_split, make_random_subset_split, save_split, Dataset,
    ForgetSplit, SplitMode,
};
use crate::error::{Error, Result};
use crate::eval::{full_report, MetricsReport};
use crate::model::{init_params, ModelConfig};
use crate::trainer::{load_checkpoint, retrain_oracle, save_checkpoint, sgd_train, Checkpoint, Schedule, TrainConfig};
use crate::unlearn::{run_unlearning, Method, UnlearnConfig};

pub const EXPERIMENT_SCHEMA_VERSION: u32 = 1;
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        n_per_class: usize,
        class_count: usize,
        dim: usize,
        spread: f64,
    },
    Csv {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Train a second reference with different seeds and report its distance.
    #[serde(default)]
    pub noise_floor: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    pub split: SplitSpec,
    /// Architecture; its seed is replaced per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Recipe for the reference; defaults to `train`.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    pub unlearn: BTreeMap<Method, UnlearnConfig>,
    #[serde(default)]
    pub eval: EvalOptions,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
}

/// Mixes a run seed with a named stream so each stage gets its own generator.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Concrete per-seed inputs.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub seed: u64,
    pub dataset: Dataset,
    pub split: ForgetSplit,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub retrain: TrainConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        if let (DatasetSpec::Csv { path: csv }, Some(base)) = (&mut cfg.dataset, path.parent()) {
            if csv.is_relative() {
                *csv = base.join(&*csv);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != EXPERIMENT_SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported experiment schema_version {} (expected {EXPERIMENT_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(r) = &self.retrain {
            r.validate()?;
        }
        for (m, u) in &self.unlearn {
            if u.method != *m {
                return Err(Error::InvalidConfig(format!("unlearn entry '{m}' has method '{}'", u.method)));
            }
            u.validate()?;
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must not be empty".into()));
        }
        if let DatasetSpec::Csv { path } = &self.dataset {
            if !path.exists() {
                return Err(Error::InvalidConfig(format!("dataset file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }

    pub fn load_dataset(&self, seed: u64) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs {
                n_per_class,
                class_count,
                dim,
                spread,
            } => generate_blobs(derive_seed(seed, "data"), *n_per_class, *class_count, *dim, *spread),
            DatasetSpec::Csv { path } => load_csv_dataset(path),
        }
    }

    pub fn make_split(&self, dataset: &Dataset, seed: u64) -> Result<ForgetSplit> {
        let s = derive_seed(seed, "split");
        match self.split.mode {
            SplitMode::RandomSubset { fraction } => make_random_subset_split(dataset, fraction, self.split.test_fraction, s),
            SplitMode::Classwise { class_id } => make_classwise_split(dataset, class_id, self.split.test_fraction, s),
        }
    }

    fn model_for(&self, seed: u64) -> ModelConfig {
        let mut m = self.model.clone();
        m.seed = derive_seed(seed, "model");
        m
    }

    fn train_for(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = derive_seed(seed, "shuffle");
        t
    }

    fn retrain_for(&self, seed: u64) -> TrainConfig {
        let mut t = self.retrain.clone().unwrap_or_else(|| self.train.clone());
        t.seed = derive_seed(seed, "shuffle");
        t
    }

    /// Builds dataset and split from the config and seed.
    pub fn resolve(&self, seed: u64) -> Result<RunContext> {
        let dataset = self.load_dataset(seed)?;
        let split = self.make_split(&dataset, seed)?;
        self.resolve_with_split(seed, dataset, split)
    }

    pub fn resolve_with_split(&self, seed: u64, dataset: Dataset, split: ForgetSplit) -> Result<RunContext> {
        split.validate(Some(dataset.len()))?;
        if dataset.dim() != self.model.input_dim() || dataset.class_count() > self.model.class_count() {
            return Err(Error::InvalidConfig(format!(
                "model {:?} does not fit data with dim {} and {} classes",
                self.model.layer_sizes,
                dataset.dim(),
                dataset.class_count()
            )));
        }
        Ok(RunContext {
            seed,
            model: self.model_for(seed),
            train: self.train_for(seed),
            retrain: self.retrain_for(seed),
            dataset,
            split,
        })
    }

    pub fn unlearn_config(&self, method: Method, seed: u64) -> Result<UnlearnConfig> {
        let base = self
            .unlearn
            .get(&method)
            .ok_or_else(|| Error::InvalidConfig(format!("no unlearn config for method '{method}'")))?;
        Ok(self.unlearn_config_from(base, seed))
    }

    /// `base` with its seed mixed with the run seed.
    pub fn unlearn_config_from(&self, base: &UnlearnConfig, seed: u64) -> UnlearnConfig {
        let mut u = base.clone();
        u.seed = derive_seed(seed ^ base.seed, "unlearn");
        u
    }
}

impl ExperimentConfig {
    /// Desk-scale benchmark: 4 overlapping 8-d blobs, 2000 training and 500
    /// test rows, a [8,32,32,4] MLP and 10% random forgetting over five seeds.
    pub fn blobs_benchmark(output_dir: PathBuf) -> Self {
        let train = TrainConfig {
            lr: 0.05,
            epochs: 200,
            batch_size: 32,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            seed: 0,
        };
        let mut unlearn = BTreeMap::new();
        for method in Method::ALL {
            unlearn.insert(method, benchmark_unlearn_config(method));
        }
        Self {
            schema_version: EXPERIMENT_SCHEMA_VERSION,
            dataset: DatasetSpec::Blobs {
                n_per_class: 625,
                class_count: 4,
                dim: 8,
                spread: 0.8,
            },
            split: SplitSpec {
                mode: SplitMode::RandomSubset { fraction: 0.1 },
                test_fraction: 0.2,
            },
            model: ModelConfig::new(vec![8, 32, 32, 4], 0),
            train,
            retrain: None,
            unlearn,
            eval: EvalOptions { noise_floor: true },
            output_dir,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn benchmark_unlearn_config(method: Method) -> UnlearnConfig {
    let mut u = UnlearnConfig::new(method, 0);
    u.batch_f = 32;
    u.batch_r = 32;
    match method {
        Method::SfrOn => {
            u.alpha = 1.0;
            u.beta_f = 800.0;
            u.beta_r = 0.5;
            u.t_in = 5;
            u.t_out = 800;
            u.lambda_temp = 0.5;
            u.gamma = 10.0;
            u.schedule = Schedule::Cosine;
        }
        Method::Ft => {
            u.lr = 0.05;
            u.epochs = 60;
            u.momentum = 0.9;
            u.schedule = Schedule::Cosine;
        }
        Method::Ga => {
            u.lr = 0.005;
            u.epochs = 5;
        }
        Method::Rl => {
            u.lr = 0.003;
            u.epochs = 20;
            u.momentum = 0.9;
        }
        Method::Salun => {
            u.lr = 0.003;
            u.epochs = 10;
            u.momentum = 0.9;
            u.topk_percent = 20.0;
        }
        Method::Joint => {
            u.lr = 0.005;
            u.epochs = 20;
        }
    }
    u
}

pub fn pretrain(ctx: &RunContext) -> Result<Checkpoint> {
    sgd_train(&init_params(&ctx.model)?, &ctx.model, &ctx.train, &ctx.dataset, &ctx.split.train_idx())
}

pub fn retrain(ctx: &RunContext) -> Result<Checkpoint> {
    retrain_oracle(&ctx.model, &ctx.retrain, &ctx.dataset, &ctx.split)
}

/// A second reference with independent init and shuffle seeds.
pub fn retrain_alternate(ctx: &RunContext) -> Result<Checkpoint> {
    let mut model = ctx.model.clone();
    model.seed = derive_seed(ctx.seed, "model-alt");
    let mut train = ctx.retrain.clone();
    train.seed = derive_seed(ctx.seed, "shuffle-alt");
    retrain_oracle(&model, &train, &ctx.dataset, &ctx.split)
}

/// Contents of `provenance.json` in every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactProvenance {
    pub library_version: String,
    pub stage: String,
    pub seed: u64,
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub unlearn_config: Option<UnlearnConfig>,
    pub experiment: ExperimentConfig,
}

impl ArtifactProvenance {
    pub fn new(stage: &str, seed: u64, experiment: &ExperimentConfig) -> Self {
        Self {
            library_version: LIBRARY_VERSION.to_string(),
            stage: stage.to_string(),
            seed,
            method: None,
            unlearn_config: None,
            experiment: experiment.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(PROVENANCE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(PROVENANCE_FILE), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_stage(dir: &Path, ckpt: &Checkpoint, prov: &ArtifactProvenance) -> Result<()> {
    save_checkpoint(ckpt, dir)?;
    prov.save(dir)
}

/// Writes the split and the pretrained checkpoint under the seed directory.
pub fn stage_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(RunContext, PathBuf)> {
    let ctx = cfg.resolve(seed)?;
    let dir = cfg.seed_dir(seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_split(&ctx.split, &dir.join(SPLIT_FILE))?;
    let out = dir.join("pretrain");
    save_stage(&out, &pretrain(&ctx)?, &ArtifactProvenance::new("pretrain", seed, cfg))?;
    Ok((ctx, out))
}

/// Reference training for an existing split.
pub fn stage_retrain(cfg: &ExperimentConfig, seed: u64, split_path: &Path, out: &Path) -> Result<Checkpoint> {
    let ctx = cfg.resolve_with_split(seed, cfg.load_dataset(seed)?, load_split(split_path)?)?;
    let ckpt = retrain(&ctx)?;
    save_stage(out, &ckpt, &ArtifactProvenance::new("retrain", seed, cfg))?;
    Ok(ckpt)
}

pub fn stage_unlearn(
    cfg: &ExperimentConfig,
    seed: u64,
    method: Method,
    pretrained_dir: &Path,
    split_path: &Path,
    out: &Path,
) -> Result<Checkpoint> {
    let pre = load_checkpoint(pretrained_dir)?;
    let dataset = cfg.load_dataset(seed)?;
    let split = load_split(split_path)?;
    split.validate(Some(dataset.len()))?;
    let ucfg = cfg.unlearn_config(method, seed)?;
    let ckpt = run_unlearning(&pre, &dataset, &split, &ucfg)?;
    let mut prov = ArtifactProvenance::new("unlearn", seed, cfg);
    prov.method = Some(method);
    prov.unlearn_config = Some(ucfg);
    save_stage(out, &ckpt, &prov)?;
    Ok(ckpt)
}

/// Report comparing `model_dir` to `reference_dir`; the dataset is rebuilt from
/// the model directory's provenance.
pub fn stage_eval(model_dir: &Path, reference_dir: &Path, split_path: &Path) -> Result<MetricsReport> {
    let prov = ArtifactProvenance::load(model_dir)?;
    let dataset = prov.experiment.load_dataset(prov.seed)?;
    let split = load_split(split_path)?;
    split.validate(Some(dataset.len()))?;
    let model = load_checkpoint(model_dir)?;
    let reference = load_checkpoint(reference_dir)?;
    full_report(&model, &reference, &dataset, &split, model.provenance.wall_seconds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub reports: BTreeMap<Method, MetricsReport>,
    /// Report of the reference against itself.
    pub reference: MetricsReport,
    /// Output KL between two references trained with different seeds.
    pub noise_floor_kl: Option<f64>,
}

/// Runs every stage for one seed, writing all artifacts under its directory.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    seed_pipeline(cfg, seed, true)
}

/// As [`run_seed`] without touching the filesystem.
pub fn evaluate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    seed_pipeline(cfg, seed, false)
}

fn seed_pipeline(cfg: &ExperimentConfig, seed: u64, persist: bool) -> Result<SeedResult> {
    let ctx = cfg.resolve(seed)?;
    let dir = cfg.seed_dir(seed);
    let stage = |name: &str, ckpt: &Checkpoint, prov: ArtifactProvenance| -> Result<()> {
        if persist {
            save_stage(&dir.join(name), ckpt, &prov)?;
        }
        Ok(())
    };
    let report = |name: &str, r: &MetricsReport| -> Result<()> {
        if persist {
            write_json(&dir.join("reports").join(format!("{name}.json")), r)?;
        }
        Ok(())
    };
    if persist {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_split(&ctx.split, &dir.join(SPLIT_FILE))?;
    }

    let pre = pretrain(&ctx)?;
    stage("pretrain", &pre, ArtifactProvenance::new("pretrain", seed, cfg))?;
    let rt = retrain(&ctx)?;
    stage("retrain", &rt, ArtifactProvenance::new("retrain", seed, cfg))?;
    let reference = full_report(&rt, &rt, &ctx.dataset, &ctx.split, rt.provenance.wall_seconds)?;
    report("rt", &reference)?;

    let noise_floor_kl = if cfg.eval.noise_floor {
        let alt = retrain_alternate(&ctx)?;
        stage("retrain_alt", &alt, ArtifactProvenance::new("retrain_alt", seed, cfg))?;
        let r = full_report(&alt, &rt, &ctx.dataset, &ctx.split, alt.provenance.wall_seconds)?;
        report("rt_alt", &r)?;
        Some(r.kl_to_ref)
    } else {
        None
    };

    let mut reports = BTreeMap::new();
    for &method in cfg.unlearn.keys() {
        let ucfg = cfg.unlearn_config(method, seed)?;
        let ckpt = run_unlearning(&pre, &ctx.dataset, &ctx.split, &ucfg)?;
        let mut prov = ArtifactProvenance::new("unlearn", seed, cfg);
        prov.method = Some(method);
        prov.unlearn_config = Some(ucfg);
        stage(&format!("unlearn/{}", method.id()), &ckpt, prov)?;
        let r = full_report(&ckpt, &rt, &ctx.dataset, &ctx.split, ckpt.provenance.wall_seconds)?;
        report(method.id(), &r)?;
        reports.insert(method, r);
    }
    Ok(SeedResult {
        seed,
        reports,
        reference,
        noise_floor_kl,
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub runs: usize,
    pub fa: Spread,
    pub ra: Spread,
    pub ta: Spread,
    pub mia: Spread,
    pub avg_d: Spread,
    pub kl_to_ref: Spread,
    pub rte_seconds: Spread,
}

impl AggregateRow {
    pub fn from_reports(method: &str, reports: &[MetricsReport]) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| Spread::of(&reports.iter().map(f).collect::<Vec<_>>());
        Self {
            method: method.to_string(),
            runs: reports.len(),
            fa: col(|r| 100.0 * r.fa),
            ra: col(|r| 100.0 * r.ra),
            ta: col(|r| 100.0 * r.ta),
            mia: col(|r| 100.0 * r.mia),
            avg_d: col(|r| r.avg_d),
            kl_to_ref: col(|r| r.kl_to_ref),
            rte_seconds: col(|r| r.rte_seconds),
        }
    }
}

/// Markdown table of `mean ± std` cells; accuracies in percent.
pub fn aggregate_markdown(rows: &[AggregateRow]) -> String {
    let mut out = String::from("| Method | FA | RA | TA | MIA | Avg.D | D_KL | RTE |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let c = |s: Spread, p: usize| format!("{:.p$} ± {:.p$}", s.mean, s.std);
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.method,
            c(r.fa, 2),
            c(r.ra, 2),
            c(r.ta, 2),
            c(r.mia, 2),
            c(r.avg_d, 2),
            c(r.kl_to_ref, 4),
            c(r.rte_seconds, 2)
        ));
    }
    out
}

/// Reads every `seed_*/reports/*.json` under `output_dir` and aggregates per method.
pub fn collect_reports(output_dir: &Path) -> Result<Vec<AggregateRow>> {
    let mut by_method: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    let mut seed_dirs: Vec<PathBuf> = fs::read_dir(output_dir)
        .map_err(|e| Error::io(output_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed_")))
        .collect();
    seed_dirs.sort();
    for dir in seed_dirs {
        let reports = dir.join("reports");
        if !reports.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = fs::read_dir(&reports)
            .map_err(|e| Error::io(&reports, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let name = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            by_method.entry(name).or_default().push(read_json(&f)?);
        }
    }
    if by_method.is_empty() {
        return Err(Error::EmptySet("reports under output directory"));
    }
    Ok(by_method
        .iter()
        .map(|(m, reports)| AggregateRow::from_reports(m, reports))
        .collect())
}

/// Every seed in sequence, then the aggregate summary.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    let results = cfg.seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    let rows = collect_reports(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("summary.json"), &rows)?;
    let md = aggregate_markdown(&rows);
    let path = cfg.output_dir.join("summary.md");
    fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}
