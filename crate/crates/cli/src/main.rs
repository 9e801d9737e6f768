//! `nr-attack`: corpus synthesis, generator and universal-perturbation
//! training, per-image attacks, benchmarking and artifact verification.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Timing, TrainMode};
use nr_attack_core::attacks::{AttackKind, AttackSpec};
use nr_attack_core::metrics::MetricId;

#[derive(Parser, Debug)]
#[command(name = "nr-attack", version, about = "Adversarial attacks on no-reference image-quality metrics")]
struct Cli {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a procedural image corpus and its manifest.
    Synth(SynthArgs),
    /// Train a generator (or a universal perturbation) against one metric.
    Train(TrainArgs),
    /// Attack images and write adversarial PNGs with score records.
    Attack(AttackArgs),
    /// Run the attack × metric matrix and write the report.
    Bench(BenchArgs),
    /// Check that artifacts embed the digest of a run configuration.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: Option<usize>,
    /// Square side length, or HxW.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Option<TrainMode>,
    #[arg(long)]
    metric: Option<MetricId>,
    /// Training manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output weights file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Input manifest.
    #[arg(long, conflicts_with = "image")]
    data: Option<PathBuf>,
    /// Single input PNG.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    metric: Option<MetricId>,
    /// Attack kind; replaces the configured attack list.
    #[arg(long)]
    attack: Option<AttackKind>,
    #[arg(long, requires = "attack")]
    iters: Option<usize>,
    /// Generator weights for `facpa`.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Universal perturbation file for `uap`.
    #[arg(long)]
    uap: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Evaluation manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    timing: Option<Timing>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Artifacts to check; directories are scanned (non-recursively).
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size `{s}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|v| (v, v)),
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("NR_ATTACK_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|e| anyhow::anyhow!("NR_ATTACK_THREADS=`{v}`: {e}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.n {
                cfg.data.synth_n = n;
            }
            if let Some(size) = a.size {
                cfg.data.size = size;
            }
            if let Some(out) = &a.out {
                cfg.output.dir = out.clone();
            }
        }
        Command::Train(a) => {
            if let Some(mode) = a.mode {
                cfg.train.mode = mode;
            }
            if let Some(m) = &a.metric {
                cfg.metric = vec![m.clone()];
            }
            if let Some(d) = &a.data {
                cfg.data.manifest = Some(d.clone());
            }
            if let Some(out) = &a.out {
                cfg.train.out = Some(out.clone());
            }
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.lr = Some(lr);
            }
        }
        Command::Attack(a) => {
            if let Some(d) = &a.data {
                cfg.data.manifest = Some(d.clone());
                cfg.data.image = None;
            }
            if let Some(i) = &a.image {
                cfg.data.image = Some(i.clone());
                cfg.data.manifest = None;
            }
            if let Some(m) = &a.metric {
                cfg.metric = vec![m.clone()];
            }
            if let Some(kind) = a.attack {
                let mut spec = AttackSpec::new(kind);
                if let Some(iters) = a.iters {
                    spec.iters = iters;
                }
                cfg.attacks = vec![spec];
            }
            for m in &cfg.metric {
                if let Some(w) = &a.weights {
                    cfg.bench.weights.insert(m.to_string(), w.clone());
                }
                if let Some(u) = &a.uap {
                    cfg.bench.uap.insert(m.to_string(), u.clone());
                }
            }
            if let Some(out) = &a.out {
                cfg.output.dir = out.clone();
            }
        }
        Command::Bench(a) => {
            if let Some(d) = &a.data {
                cfg.data.manifest = Some(d.clone());
            }
            if let Some(t) = a.timing {
                cfg.bench.timing = t;
            }
            if let Some(out) = &a.out {
                cfg.output.dir = out.clone();
            }
        }
        Command::Verify(_) => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), commands::Failure> {
    use commands::{Failure, Stage};
    configure_threads().config_stage()?;
    let cfg = effective_config(&cli).config_stage()?;
    if let Command::Verify(a) = &cli.command {
        let Some(path) = &cli.config else {
            return Err(Failure::Config(anyhow::anyhow!("verify needs --config")));
        };
        return commands::verify(path, &cfg, &a.paths);
    }
    cfg.validate().config_stage()?;
    match &cli.command {
        Command::Synth(_) => commands::synth(&cfg),
        Command::Train(_) => commands::train(&cfg),
        Command::Attack(_) => commands::attack(&cfg),
        Command::Bench(_) => commands::bench(&cfg),
        Command::Verify(_) => unreachable!(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
