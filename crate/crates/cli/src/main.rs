use std::path::PathBuf;
use std::process::ExitCode;

use asmr_core::{ErrorKind, LossConfig, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use commands::Context;
use config::{RunConfig, DEFAULT_OUT_DIR, OUT_DIR_ENV};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "asmr", version, about = "Attribute-based person retrieval with an adaptive semantic margin regularizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory [default: $ASMR_OUT_DIR or ./asmr-out].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Loss hyper-parameter preset: peta, market or pa100k.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one config key, e.g. `--set loss.lambda=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Drop categories that have a single sample after loading.
    #[arg(long, global = true)]
    drop_singletons: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its split.
    Synth(NoArgs),
    /// Pretrain the image encoder on per-group attribute classification.
    Pretrain(NoArgs),
    /// Train both encoders; warm-starts or resumes from --checkpoint.
    Train(NoArgs),
    /// Rank-k, mAP and the similarity/δ rank correlation.
    Eval(NoArgs),
    /// Rank gallery images for an attribute query.
    Retrieve(RetrieveArgs),
    /// Baseline, pretraining and regularizer variants under matched seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of the objective's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct NoArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct RetrieveArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated `group:attribute` pairs; omitted groups are blank.
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Gallery images: test, seen, unseen, train or all.
    #[arg(long, default_value = "test")]
    gallery: String,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Seeds run in parallel. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    inject_bug: bool,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) | Command::Pretrain(a) | Command::Train(a) | Command::Eval(a) => &a.common,
            Command::Retrieve(a) => &a.common,
            Command::Ablate(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
        }
    }
}

fn resolve(common: &Common) -> Result<Context> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &common.preset {
        let preset = LossConfig::preset(name)?;
        cfg.loss.lambda = preset.lambda;
        cfg.loss.sigma = preset.sigma;
        cfg.loss.gamma = preset.gamma;
    }
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    for o in &common.overrides {
        cfg = cfg.apply_override(o)?;
    }
    if let Some(ckpt) = &common.checkpoint {
        cfg.paths.checkpoint = Some(ckpt.clone());
    }
    if common.drop_singletons {
        cfg.drop_singletons = true;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.paths.reports.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(Context::new(cfg, out))
}

fn run(command: &Command) -> Result<u8> {
    let ctx = resolve(command.common())?;
    log::debug!("config hash {}", ctx.hash);
    match command {
        Command::Synth(_) => commands::cmd_synth(&ctx)?,
        Command::Pretrain(_) => commands::cmd_pretrain(&ctx)?,
        Command::Train(_) => commands::cmd_train(&ctx)?,
        Command::Eval(_) => commands::cmd_eval(&ctx)?,
        Command::Retrieve(a) => commands::cmd_retrieve(&ctx, &a.query, a.k, &a.gallery)?,
        Command::Ablate(a) => commands::cmd_ablate(&ctx, a.jobs)?,
        Command::Gradcheck(a) => {
            if !commands::cmd_gradcheck(&ctx, a.inject_bug)? {
                return Ok(EXIT_NUMERIC);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.command.common().verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    match run(&cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
                ErrorKind::Numeric => EXIT_NUMERIC,
            })
        }
    }
}
