mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdeforecast::config::AppConfig;
use cdeforecast::datastore::{generate_dataset, load, save, Dataset, Split};
use cdeforecast::evalx::{self, Axis, SweepOutcome};
use cdeforecast::trainer::{self, Variant};
use cdeforecast::{Error, TrainedModel64};
use clap::{Args, Parser, Subcommand};

const ENV_OUT_DIR: &str = "CDEFORECAST_OUT_DIR";
const ENV_THREADS: &str = "CDEFORECAST_THREADS";

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Parser)]
#[command(name = "cdeforecast", version, about = "Tumour-growth simulation and inverse-intensity-weighted CDE forecasters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML settings file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config and CDEFORECAST_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweeps (overrides CDEFORECAST_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset and write it with its metadata sidecar.
    Simulate,
    /// Train one variant on a dataset.
    Train {
        #[arg(long)]
        variant: String,
        /// Observations file; defaults to `<out>/dataset.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every run of one experiment axis.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Also render each plot-data table as an SVG line chart.
        #[arg(long)]
        svg: bool,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

fn load_config(common: &Common) -> Result<AppConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => AppConfig::from_path(p)?,
        None => AppConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Ok(dir) = std::env::var(ENV_OUT_DIR) {
        cfg.out_dir = PathBuf::from(dir);
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Ok(t) = std::env::var(ENV_THREADS) {
        let n = t
            .parse()
            .map_err(|_| Failure::Usage(format!("{ENV_THREADS}={t} is not a thread count")))?;
        cfg.sweep.threads = Some(n);
    }
    if let Some(t) = common.threads {
        cfg.sweep.threads = Some(t);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(cfg: &AppConfig) -> Result<(), Error> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Io {
        path: cfg.out_dir.clone(),
        source: e,
    })?;
    let path = cfg.out_dir.join("effective_config.toml");
    std::fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::Io { path, source: e })
}

fn dataset_path(cfg: &AppConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| cfg.out_dir.join("dataset.csv"))
}

fn deciles(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    (1..10)
        .map(|k| v[((k * v.len()) / 10).min(v.len() - 1)])
        .collect()
}

fn summarize(ds: &Dataset) {
    let n = ds.patients.len();
    println!(
        "patients: {n} (train {}, val {}, test {})",
        ds.split(Split::Train).count(),
        ds.split(Split::Val).count(),
        ds.split(Split::Test).count()
    );
    let sampled: Vec<_> = ds.patients.iter().filter(|p| p.split != Split::Test).collect();
    if !sampled.is_empty() {
        let obs: usize = sampled.iter().map(|p| p.n_observed()).sum();
        let expected: f64 = sampled
            .iter()
            .flat_map(|p| p.observations.iter().map(|o| o.lambda_true))
            .sum();
        println!(
            "observations per train/val patient: mean {:.2}, expected {:.2}",
            obs as f64 / sampled.len() as f64,
            expected / sampled.len() as f64
        );
    }
    let lambdas: Vec<f64> = ds
        .patients
        .iter()
        .flat_map(|p| p.observations.iter().map(|o| o.lambda_true))
        .collect();
    if !lambdas.is_empty() {
        let d: Vec<String> = deciles(lambdas).iter().map(|v| format!("{v:.4}")).collect();
        println!("intensity deciles: {}", d.join(" "));
    }
}

fn cmd_simulate(cfg: &AppConfig) -> Result<(), Failure> {
    prepare_out(cfg)?;
    let ds = generate_dataset(&cfg.data_config())?;
    let path = dataset_path(cfg, None);
    save(&ds, &path)?;
    summarize(&ds);
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(cfg: &AppConfig, variant: &str, data: Option<PathBuf>) -> Result<(), Failure> {
    let variant = Variant::parse(variant).ok_or_else(|| {
        Failure::Usage(format!("unknown variant {variant:?}; expected tecde, twostep or multitask"))
    })?;
    let ds = load(&dataset_path(cfg, data))?;
    prepare_out(cfg)?;
    let mut train_cfg = cfg.train_config();
    train_cfg.variant = variant;
    let model: TrainedModel64 = trainer::train(&ds, &cfg.model, &train_cfg)?;
    let ckpt = cfg.out_dir.join(format!("{variant}.ckpt"));
    trainer::save_checkpoint(&model, &ckpt)?;
    let log = cfg.out_dir.join(format!("{variant}_loss.csv"));
    trainer::write_loss_log(&model, &log)?;
    println!(
        "{variant}: stopped after {} epochs (best {}), wrote {} and {}",
        model.stopped_epoch(),
        model.history.best_epoch,
        ckpt.display(),
        log.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &AppConfig, checkpoint: &Path, data: Option<PathBuf>) -> Result<(), Failure> {
    let model: TrainedModel64 = trainer::load_checkpoint(checkpoint)?;
    let ds = load(&dataset_path(cfg, data))?;
    let r = evalx::rmse(&model, &ds)?;
    let per_tau: Vec<String> = r.per_tau.iter().map(|v| format!("{v:.4}")).collect();
    println!("rmse per tau (cm3): {}", per_tau.join(" "));
    println!("rmse overall: {:.4} (sequential {:.4}, concurrent {:.4})", r.overall, r.per_arm[0], r.per_arm[1]);
    match evalx::brier(&model, &ds)? {
        Some(b) => println!("brier: {b:.6} (constant 0.5: {:.6})", evalx::brier_constant(&ds, 0.5)?),
        None => println!("brier: n/a"),
    }
    Ok(())
}

fn series(outcome: &SweepOutcome) -> Vec<svg::Series> {
    outcome
        .spec
        .variants
        .iter()
        .map(|&v| svg::Series {
            name: v.name().into(),
            points: outcome
                .aggregates
                .iter()
                .filter(|a| a.variant == v)
                .map(|a| (a.x, a.mean, a.se))
                .collect(),
        })
        .collect()
}

fn cmd_sweep(cfg: &AppConfig, axis: &str, with_svg: bool) -> Result<(), Failure> {
    let axis = Axis::parse(axis).ok_or_else(|| {
        Failure::Usage(format!(
            "unknown axis {axis:?}; expected one of {}",
            Axis::ALL.map(|a| a.name()).join(", ")
        ))
    })?;
    prepare_out(cfg)?;
    let spec = cfg.sweep_spec(axis)?;
    let dir = cfg.out_dir.join(format!("sweep_{}", axis.name()));
    let outcome = evalx::run_sweep(&spec, Some(&dir))?;
    for a in &outcome.aggregates {
        println!(
            "{}={} {}: rmse {:.4} ± {:.4} (n={}, failed={})",
            axis.name(),
            a.x,
            a.variant,
            a.mean,
            a.se,
            a.n,
            a.n_failed
        );
    }
    let table = dir.join(format!("{}.csv", axis.name()));
    println!("wrote {} ({} failed runs)", table.display(), outcome.n_failed);
    if with_svg {
        let path = table.with_extension("svg");
        let chart = svg::line_chart(&format!("RMSE over {}", axis.name()), axis.name(), "RMSE (cm3)", &series(&outcome));
        std::fs::write(&path, chart).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common)?;
    env_logger::Builder::new()
        .parse_filters(&std::env::var("RUST_LOG").unwrap_or_else(|_| cfg.log_level.clone()))
        .try_init()
        .ok();
    match cli.cmd {
        Cmd::Simulate => cmd_simulate(&cfg),
        Cmd::Train { variant, data } => cmd_train(&cfg, &variant, data),
        Cmd::Evaluate { checkpoint, data } => cmd_evaluate(&cfg, &checkpoint, data),
        Cmd::Sweep { axis, svg } => cmd_sweep(&cfg, &axis, svg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
