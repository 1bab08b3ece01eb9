use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use unlearn_core::pipeline::{
    aggregate_markdown, collect_reports, run_experiment, stage_eval, stage_pretrain, stage_retrain, stage_unlearn,
    write_json, ExperimentConfig,
};
use unlearn_core::unlearn::Method;
use unlearn_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "unlearn", version, about = "Approximate machine unlearning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "sfr_on")]
    SfrOn,
    Ft,
    Ga,
    Rl,
    Salun,
    Joint,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::SfrOn => Method::SfrOn,
            MethodArg::Ft => Method::Ft,
            MethodArg::Ga => Method::Ga,
            MethodArg::Rl => Method::Rl,
            MethodArg::Salun => Method::Salun,
            MethodArg::Joint => Method::Joint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Grad,
    Prop1,
    Prop2,
    Fastslow,
    Klmix,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Grad => Suite::Grad,
            SuiteArg::Prop1 => Suite::Prop1,
            SuiteArg::Prop2 => Suite::Prop2,
            SuiteArg::Fastslow => Suite::Fastslow,
            SuiteArg::Klmix => Suite::Klmix,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the default blobs benchmark config.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Where runs of this config write artifacts.
        #[arg(long, default_value = "runs/blobs")]
        output_dir: PathBuf,
    },
    /// Build the split and train the original model.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the reference model on the remaining rows of a split.
    Retrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unlearn the forgetting rows from a pretrained checkpoint.
    Unlearn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare a checkpoint with a reference checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run numerical verification checks; exits 1 if any fails.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: SuiteArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate per-seed reports as mean ± std.
    Report {
        /// Experiment output directory containing seed_* folders.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage for every seed, then the summary.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

fn resolve_seed(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Init { out, output_dir } => {
            ExperimentConfig::blobs_benchmark(output_dir).save(&out)?;
            println!("{}", out.display());
        }
        Command::Pretrain { config, seed } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let (_, dir) = stage_pretrain(&cfg, seed)?;
            println!("{}", dir.display());
        }
        Command::Retrain { config, split, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let out = out.unwrap_or_else(|| cfg.seed_dir(seed).join("retrain"));
            stage_retrain(&cfg, seed, &split, &out)?;
            println!("{}", out.display());
        }
        Command::Unlearn {
            config,
            method,
            pretrained,
            split,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seed = resolve_seed(&cfg, seed);
            let method = Method::from(method);
            let out = out.unwrap_or_else(|| cfg.seed_dir(seed).join("unlearn").join(method.id()));
            stage_unlearn(&cfg, seed, method, &pretrained, &split, &out)?;
            println!("{}", out.display());
        }
        Command::Eval {
            model,
            reference,
            split,
            out,
        } => {
            let report = stage_eval(&model, &reference, &split)?;
            write_json(&out, &report)?;
            println!("{}", report.markdown_row());
        }
        Command::Verify { suite, out } => {
            let outcomes = run_suite(suite.into())?;
            let text = serde_json::to_string_pretty(&outcomes)?;
            if let Some(path) = out {
                write_json(&path, &outcomes)?;
            }
            println!("{text}");
            return Ok(outcomes.iter().all(|c| c.pass));
        }
        Command::Report { dir, out } => {
            let rows = collect_reports(&dir)?;
            let md = aggregate_markdown(&rows);
            if let Some(path) = out {
                std::fs::write(&path, &md).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{md}");
        }
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let results = run_experiment(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.output_dir.join("summary.md"))?);
            if results.iter().any(|r| r.noise_floor_kl.is_some()) {
                let floors: Vec<String> = results
                    .iter()
                    .filter_map(|r| r.noise_floor_kl.map(|k| format!("seed {}: {k:.4}", r.seed)))
                    .collect();
                println!("reference noise floor (D_KL between two references): {}", floors.join(", "));
            }
        }
    }
    Ok(true)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    if !path.exists() {
        bail!("config file {} does not exist", path.display());
    }
    ExperimentConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
