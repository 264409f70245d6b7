use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use codistill::{GpdReduction, SelectionMethod, Split};
use codistill_cli::ablate::{AblateArgs, AblateSpec};
use codistill_cli::commands::{
    replay, DistillArgs, EvalArgs, EvalConfig, GenDataArgs, ImageSource, Invocation, PretrainArgs, SelectArgs,
    SelectConfig, POOL_FILE, REPORT_TXT,
};
use codistill_cli::load_config;

/// Concept-decoupled classification with cross-modal concept distillation.
///
/// Flags override values from --config; the merged configuration is written to
/// manifest.json in the output directory before any work starts.
#[derive(Parser)]
#[command(name = "codistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset and its concept pool.
    GenData(GenDataCmd),
    /// Train the teacher on its own modality and freeze it.
    Pretrain(PretrainCmd),
    /// Train the student against a frozen teacher.
    Distill(DistillCmd),
    /// Evaluate a checkpoint, optionally fused with a teacher.
    Eval(EvalCmd),
    /// Reduce a concept pool to k concepts per class.
    SelectConcepts(SelectCmd),
    /// Run a grid sweep described by a JSON spec.
    Ablate(AblateCmd),
    /// Repeat a command from its manifest.
    Replay(ReplayCmd),
}

#[derive(Args)]
struct Common {
    /// JSON config file; flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "CODISTILL_SEED")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    teacher_dominance: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Concept pool; defaults to pool.json inside the dataset directory.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, env = "CODISTILL_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct PretrainCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct DistillCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    /// Frozen teacher checkpoint written by pretrain.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_reduction)]
    gpd_reduction: Option<GpdReduction>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Average student and teacher probabilities on class-paired records.
    #[arg(long)]
    fuse: bool,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
}

#[derive(Args)]
struct SelectCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    pool: PathBuf,
    /// One of none, random, svd, kmeans, similarity, submodular.
    #[arg(long, value_parser = parse_method)]
    method: Option<SelectionMethod>,
    /// Concepts kept per class.
    #[arg(long)]
    k: Option<usize>,
    /// JSON array of image embedding rows in the concept space.
    #[arg(long, conflicts_with_all = ["data", "encoder"])]
    images: Option<PathBuf>,
    /// Dataset whose training features are encoded by --encoder.
    #[arg(long, requires = "encoder")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    encoder: Option<PathBuf>,
}

#[derive(Args)]
struct AblateCmd {
    #[command(flatten)]
    common: Common,
    /// Parallel runs; each run is isolated and deterministic.
    #[arg(long, env = "CODISTILL_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct ReplayCmd {
    manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<SelectionMethod, String> {
    s.parse().map_err(|e: codistill::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}; valid splits: {{train,val,test}}")),
    }
}

fn parse_reduction(s: &str) -> Result<GpdReduction, String> {
    match s {
        "mean" => Ok(GpdReduction::Mean),
        "sum" => Ok(GpdReduction::Sum),
        _ => Err(format!("unknown reduction {s:?}; valid values: {{mean,sum}}")),
    }
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    path.as_deref().map_or_else(|| Ok(T::default()), load_config)
}

fn default_pool(data: &Path, pool: Option<PathBuf>) -> PathBuf {
    pool.unwrap_or_else(|| data.join(POOL_FILE))
}

fn train_config(common: &Common, flags: &TrainFlags) -> Result<codistill::TrainConfig> {
    let mut cfg: codistill::TrainConfig = config_or_default(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = flags.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    Ok(cfg)
}

fn build(command: Command) -> Result<Option<Invocation>> {
    Ok(Some(match command {
        Command::GenData(c) => {
            let mut config: codistill::GeneratorConfig = config_or_default(&c.common.config)?;
            if let Some(s) = c.common.seed {
                config.seed = s;
            }
            if let Some(v) = c.teacher_dominance {
                config.teacher_dominance = v;
            }
            if let Some(v) = c.noise_sigma {
                config.noise_sigma = v;
            }
            Invocation::GenData(GenDataArgs {
                config,
                out: c.common.out,
            })
        }
        Command::Pretrain(c) => {
            let config = train_config(&c.common, &c.train)?;
            Invocation::Pretrain(PretrainArgs {
                pool: default_pool(&c.train.data, c.train.pool),
                data: c.train.data,
                config,
                out: c.common.out,
            })
        }
        Command::Distill(c) => {
            let mut config = train_config(&c.common, &c.train)?;
            if let Some(v) = c.alpha {
                config.distill.alpha = v;
            }
            if let Some(v) = c.beta {
                config.distill.beta = v;
            }
            if let Some(v) = c.tau {
                config.distill.tau = v;
            }
            if let Some(v) = c.gpd_reduction {
                config.distill.gpd_reduction = v;
            }
            Invocation::Distill(DistillArgs {
                pool: default_pool(&c.train.data, c.train.pool),
                data: c.train.data,
                teacher: c.teacher,
                config,
                out: c.common.out,
            })
        }
        Command::Eval(c) => {
            let mut config: EvalConfig = config_or_default(&c.common.config)?;
            if c.fuse {
                config.fuse = true;
            }
            if let Some(s) = c.split {
                config.split = s;
            }
            Invocation::Eval(EvalArgs {
                pool: default_pool(&c.data, c.pool),
                data: c.data,
                checkpoint: c.checkpoint,
                teacher: c.teacher,
                config,
                out: c.common.out,
            })
        }
        Command::SelectConcepts(c) => {
            let mut config: SelectConfig = config_or_default(&c.common.config)?;
            if let Some(s) = c.common.seed {
                config.seed = s;
            }
            if let Some(m) = c.method {
                config.method = m;
            }
            if let Some(k) = c.k {
                config.k = k;
            }
            let images = match (c.images, c.data, c.encoder) {
                (Some(path), _, _) => Some(ImageSource::Embeddings { path }),
                (None, Some(data), Some(encoder)) => Some(ImageSource::Encoded { data, encoder }),
                _ => None,
            };
            Invocation::SelectConcepts(SelectArgs {
                pool: c.pool,
                images,
                config,
                out: c.common.out,
            })
        }
        Command::Ablate(c) => {
            let path = c
                .common
                .config
                .as_deref()
                .context("ablate needs --config pointing at a sweep spec")?;
            let mut spec: AblateSpec = load_config(path)?;
            if let Some(s) = c.common.seed {
                spec.seeds = vec![s];
            }
            Invocation::Ablate(AblateArgs {
                spec,
                workers: c.workers,
                out: c.common.out,
            })
        }
        Command::Replay(r) => {
            let m = replay(&r.manifest, r.out)?;
            print_table(&m.invocation);
            return Ok(None);
        }
    }))
}

/// Human-readable results go to stdout; everything else stays in files.
fn print_table(inv: &Invocation) {
    let file = match inv {
        Invocation::Eval(_) => REPORT_TXT,
        Invocation::Ablate(_) => codistill_cli::ablate::TABLE_TXT,
        _ => return,
    };
    if let Ok(text) = std::fs::read_to_string(inv.out().join(file)) {
        print!("{text}");
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    if let Some(inv) = build(cli.command)? {
        let name = inv.name();
        let m = inv.execute().with_context(|| format!("{name} failed"))?;
        print_table(&m.invocation);
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
