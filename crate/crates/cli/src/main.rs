//! `dos`: generate data, train, evaluate, compare strategies and analyse
//! cluster coverage of outlier selections.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
//! 1 anything else.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use dos_core::data::{generate_toy, Split};
use dos_core::eval::{export_report, ReportFormat};
use dos_core::harness::{cluster_histogram, compare, evaluate_model, train_on, GridConfig};
use dos_core::{Checkpoint, EmbeddingDataset, Error, ExperimentConfig, ScoreKind};

#[derive(Parser)]
#[command(name = "dos", version, about = "Diverse outlier sampling lab")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy benchmark described by a config and save it as an
    /// embedding file.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV copy.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model and write its artifacts.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the id-test and ood-test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "absent")]
        score: String,
        /// Write the report here (format from the extension, json or csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid of configs and tabulate the results.
    Compare {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the outlier pool and count where each strategy's picks land.
    SampleAnalyze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        k: usize,
        /// Outliers drawn per strategy.
        #[arg(long, default_value_t = 64)]
        m: usize,
        #[arg(long, default_value = "absent")]
        score: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Input data that could not be read or validated.
#[derive(Debug)]
struct DataError(Error);

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "data error: {}", self.0)
    }
}

impl std::error::Error for DataError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.0)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<DataError>().is_some() {
        return 3;
    }
    match err.downcast_ref::<Error>() {
        Some(e) => e.exit_code() as u8,
        None => 1,
    }
}

fn load_data(path: &Path) -> Result<EmbeddingDataset> {
    EmbeddingDataset::load(path).map_err(|e| DataError(e).into())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| DataError(e).into())
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn parse_score(s: &str) -> Result<ScoreKind> {
    s.parse::<ScoreKind>()
        .map_err(|_| Error::Config(format!("unknown score '{s}' (expected absent, msp or energy)")).into())
}

fn unix_seconds() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn gen_data(config: Option<&Path>, out: &Path, csv: bool) -> Result<()> {
    let cfg = load_config(config)?;
    let toy = generate_toy(cfg.data_seed(), &cfg.toy)?;
    let ds = EmbeddingDataset::from_toy(&toy);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("data.emb");
    ds.save(&path)?;
    if csv {
        ds.save(&out.join("data.csv"))?;
    }
    for split in Split::ALL {
        println!("{split}: {} rows", ds.features_of(split).rows());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn run_train(config: Option<&Path>, out: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(o) = out {
        cfg.run.out_dir = Some(o.to_path_buf());
    }
    let dir = cfg
        .run
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("no output directory (pass --out or set run.out_dir)".into()))?;
    let data = match &cfg.data.path {
        Some(p) => load_data(p)?,
        None => EmbeddingDataset::from_toy(&generate_toy(cfg.data_seed(), &cfg.toy)?),
    };
    let resume = resume.map(load_checkpoint).transpose()?;
    let started = unix_seconds();
    let clock = Instant::now();
    let run = train_on(&cfg, &data, resume)?;
    run.write(&dir)?;
    fs::write(
        dir.join("run.log"),
        format!(
            "started_unix={started}\nelapsed_secs={:.3}\nconfig_hash={:016x}\n",
            clock.elapsed().as_secs_f64(),
            cfg.hash()
        ),
    )?;
    let r = &run.report;
    println!(
        "fpr95={} auroc={} acc={} tau={} (n_id={}, n_ood={})",
        r.fpr95, r.auroc, r.id_accuracy, r.tau, r.n_id, r.n_ood
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, score: &str, out: Option<&Path>) -> Result<()> {
    let kind = parse_score(score)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let data = load_data(data)?;
    let report = evaluate_model(&ckpt.model, &data, kind).map_err(DataError)?;
    if let Some(path) = out {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        };
        export_report(&report, path, format)?;
    }
    println!("{}", report.to_json()?);
    Ok(())
}

fn run_compare(grid: &Path, out: &Path) -> Result<()> {
    let grid = GridConfig::load(grid)?;
    let configs = grid.expand();
    info!("running {} configs", configs.len());
    let cmp = compare(&configs, Some(out))?;
    print!("{}", cmp.aggregate_csv());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sample_analyze(
    data: &Path,
    checkpoint: Option<&Path>,
    k: usize,
    m: usize,
    score: &str,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let kind = parse_score(score)?;
    let data = load_data(data)?;
    let pool = data.features_of(Split::OodPool);
    let ckpt = checkpoint.map(load_checkpoint).transpose()?;
    let hist = cluster_histogram(&pool, k, m, ckpt.as_ref().map(|c| (&c.model, kind)), seed)?;
    let csv = hist.to_csv();
    if let Some(path) = out {
        fs::write(path, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, csv } => gen_data(config.as_deref(), &out, csv),
        Command::Train { config, out, resume } => run_train(config.as_deref(), out.as_deref(), resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            score,
            out,
        } => run_eval(&checkpoint, &data, &score, out.as_deref()),
        Command::Compare { grid, out } => run_compare(&grid, &out),
        Command::SampleAnalyze {
            data,
            checkpoint,
            k,
            m,
            score,
            seed,
            out,
        } => run_sample_analyze(&data, checkpoint.as_deref(), k, m, &score, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
