use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{brier, brier_constant, mean_se, rmse, RmseReport};
use crate::cdeflow::ModelConfig;
use crate::datastore::{derive_seed, generate_dataset, DataConfig};
use crate::error::{Error, Result};
use crate::sampler::IntensityMode;
use crate::trainer::{train, TrainConfig, TrainedModel, Variant};

/// Bumped whenever a code change alters run results, invalidating cached runs.
pub const CACHE_VERSION: u32 = 1;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Gamma,
    Tau,
    Scarcity,
    Alpha,
    UnrelatedGamma,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::Gamma, Axis::Tau, Axis::Scarcity, Axis::Alpha, Axis::UnrelatedGamma];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::Tau => "tau",
            Axis::Scarcity => "scarcity",
            Axis::Alpha => "alpha",
            Axis::UnrelatedGamma => "unrelated_gamma",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub n_seeds: usize,
    pub variants: Vec<Variant>,
    /// Informativeness where it is not the swept axis.
    pub gamma: f64,
    pub scarcity: f64,
    pub alpha: f64,
    /// Horizon reported on the non-horizon axes.
    pub tau: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Worker threads; `0` uses every available core.
    pub threads: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec::for_axis(Axis::Gamma)
    }
}

impl SweepSpec {
    pub fn for_axis(axis: Axis) -> Self {
        let (values, gamma, variants) = match axis {
            Axis::Gamma | Axis::UnrelatedGamma => (vec![0.0, 2.0, 4.0, 6.0, 8.0], 0.0, Variant::ALL.to_vec()),
            Axis::Tau => (vec![1.0, 2.0, 3.0, 4.0, 5.0], 6.0, Variant::ALL.to_vec()),
            Axis::Scarcity => (vec![1.0, 2.0, 3.0, 4.0], 4.0, Variant::ALL.to_vec()),
            Axis::Alpha => (vec![0.2, 0.5, 0.8, 0.95], 6.0, vec![Variant::Multitask]),
        };
        SweepSpec {
            axis,
            values,
            n_seeds: 10,
            variants,
            gamma,
            scarcity: 1.0,
            alpha: 0.8,
            tau: 1,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.n_seeds == 0 || self.variants.is_empty() {
            return Err(Error::Config("sweep needs values, seeds and variants".into()));
        }
        if self.tau == 0 || self.tau > self.data.max_horizon {
            return Err(Error::Config(format!("tau {} outside 1..={}", self.tau, self.data.max_horizon)));
        }
        if self.axis == Axis::Tau
            && self
                .values
                .iter()
                .any(|&t| t.fract() != 0.0 || t < 1.0 || t > self.data.max_horizon as f64)
        {
            return Err(Error::Config("horizon sweep values must be integers in 1..=max_horizon".into()));
        }
        if self.axis == Axis::Alpha {
            for &a in &self.values {
                crate::objectives::check_alpha(a)?;
            }
        }
        self.data.validate()?;
        self.model.validate()?;
        let mut t = self.train.clone();
        t.alpha = self.alpha;
        t.validate()
    }

    /// One entry per (setting, seed, variant) that must be trained.
    pub fn run_keys(&self) -> Vec<RunKey> {
        let points: Vec<(f64, f64, f64, IntensityMode)> = match self.axis {
            Axis::Gamma => self
                .values
                .iter()
                .map(|&g| (g, self.scarcity, self.alpha, IntensityMode::SarOutcome))
                .collect(),
            Axis::Tau => vec![(self.gamma, self.scarcity, self.alpha, IntensityMode::SarOutcome)],
            Axis::Scarcity => self
                .values
                .iter()
                .map(|&s| (self.gamma, s, self.alpha, IntensityMode::SarOutcome))
                .collect(),
            Axis::Alpha => self
                .values
                .iter()
                .map(|&a| (self.gamma, self.scarcity, a, IntensityMode::SarOutcome))
                .collect(),
            Axis::UnrelatedGamma => self
                .values
                .iter()
                .map(|&g| (g, self.scarcity, self.alpha, IntensityMode::SarUnrelated))
                .collect(),
        };
        let mut keys = Vec::new();
        for &(gamma, scarcity, alpha, mode) in &points {
            for seed in 0..self.n_seeds {
                for &variant in &self.variants {
                    keys.push(RunKey {
                        gamma,
                        scarcity,
                        alpha,
                        mode,
                        variant,
                        seed,
                    });
                }
            }
        }
        keys
    }

    /// Dataset and training settings of one run. Datasets depend only on the
    /// setting and the seed index, so all variants see the same patients.
    pub fn run_configs(&self, key: &RunKey) -> (DataConfig, TrainConfig) {
        let mut data = self.data.clone();
        data.seed = derive_seed(self.data.seed, key.seed as u64, 0xda7a);
        data.intensity.mode = key.mode;
        data.intensity.gamma = key.gamma;
        data.intensity.scarcity = key.scarcity;
        let mut train = self.train.clone();
        train.seed = derive_seed(self.train.seed, key.seed as u64, 0x7ea1);
        train.variant = key.variant;
        train.alpha = key.alpha;
        (data, train)
    }

    /// x-coordinate of a run on this sweep's axis (`None` on the horizon axis).
    fn x_of(&self, key: &RunKey) -> Option<f64> {
        match self.axis {
            Axis::Gamma | Axis::UnrelatedGamma => Some(key.gamma),
            Axis::Scarcity => Some(key.scarcity),
            Axis::Alpha => Some(key.alpha),
            Axis::Tau => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub gamma: f64,
    pub scarcity: f64,
    pub alpha: f64,
    pub mode: IntensityMode,
    pub variant: Variant,
    pub seed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub key: RunKey,
    pub fingerprint: String,
    pub rmse: RmseReport,
    pub brier: Option<f64>,
    pub brier_constant: f64,
    pub stopped_epoch: usize,
    pub wall_time: f64,
    pub error: Option<String>,
}

impl RunResult {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Stable digest of everything that determines a run's result.
pub fn fingerprint(data: &DataConfig, model: &ModelConfig, train: &TrainConfig) -> String {
    let text = serde_json::to_string(&(CACHE_VERSION, data, model, train)).expect("configs serialize");
    format!("{:016x}", fnv1a(text.as_bytes()))
}

fn execute(spec: &SweepSpec, key: &RunKey) -> RunResult {
    let (data, train_cfg) = spec.run_configs(key);
    let fp = fingerprint(&data, &spec.model, &train_cfg);
    let start = Instant::now();
    let outcome = (|| -> Result<(RmseReport, Option<f64>, f64, usize)> {
        let ds = generate_dataset(&data)?;
        let model: TrainedModel<f64> = train(&ds, &spec.model, &train_cfg)?;
        Ok((rmse(&model, &ds)?, brier(&model, &ds)?, brier_constant(&ds, 0.5)?, model.stopped_epoch()))
    })();
    let wall_time = start.elapsed().as_secs_f64();
    match outcome {
        Ok((r, b, bc, stopped)) => RunResult {
            key: *key,
            fingerprint: fp,
            rmse: r,
            brier: b,
            brier_constant: bc,
            stopped_epoch: stopped,
            wall_time,
            error: None,
        },
        Err(e) => RunResult {
            key: *key,
            fingerprint: fp,
            rmse: RmseReport::default(),
            brier: None,
            brier_constant: f64::NAN,
            stopped_epoch: 0,
            wall_time,
            error: Some(e.to_string()),
        },
    }
}

/// Reads a results file, skipping lines that do not parse (e.g. a line cut
/// short by an interrupted run).
pub fn load_results(path: &Path) -> Result<Vec<RunResult>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<RunResult>(&line) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("{}:{}: skipping unreadable result: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Mean ± SE of one metric at one x-coordinate for one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub x: f64,
    pub variant: Variant,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub spec: SweepSpec,
    /// In the order of [`SweepSpec::run_keys`].
    pub results: Vec<RunResult>,
    pub aggregates: Vec<Aggregate>,
    pub n_failed: usize,
    /// Runs taken from an earlier invocation's results file.
    pub n_cached: usize,
}

impl SweepOutcome {
    pub fn point(&self, x: f64, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.x == x && a.variant == variant)
    }
}

/// RMSE aggregates for the panel of `spec.axis`: the reported horizon on the
/// setting axes, each horizon on the horizon axis, and the mean over
/// horizons on the outcome-unrelated axis.
pub fn aggregate(spec: &SweepSpec, results: &[RunResult]) -> Vec<Aggregate> {
    let metric = |r: &RunResult, x: f64| -> f64 {
        match spec.axis {
            Axis::Tau => r.rmse.per_tau[x as usize - 1],
            Axis::UnrelatedGamma => r.rmse.per_tau.iter().sum::<f64>() / r.rmse.per_tau.len() as f64,
            _ => r.rmse.per_tau[spec.tau - 1],
        }
    };
    aggregate_by(spec, results, |r, x| Some(metric(r, x)))
}

/// Aggregates of an arbitrary per-run metric over the sweep's x-coordinates.
pub fn aggregate_by(
    spec: &SweepSpec,
    results: &[RunResult],
    metric: impl Fn(&RunResult, f64) -> Option<f64>,
) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &x in &spec.values {
        for &variant in &spec.variants {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.key.variant == variant && spec.x_of(&r.key).is_none_or(|k| k == x))
                .collect();
            let vals: Vec<f64> = runs.iter().filter(|r| r.ok()).filter_map(|r| metric(r, x)).collect();
            let (mean, se) = mean_se(&vals);
            out.push(Aggregate {
                x,
                variant,
                mean,
                se,
                n: vals.len(),
                n_failed: runs.iter().filter(|r| !r.ok()).count(),
            });
        }
    }
    out
}

/// Wide table: `x, <variant>_mean, <variant>_se, …`.
pub fn write_plot_data(spec: &SweepSpec, aggregates: &[Aggregate], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Structural(format!("{}: {e}", path.display())))?;
    let mut header = vec![spec.axis.name().to_string()];
    for v in &spec.variants {
        header.push(format!("{v}_mean"));
        header.push(format!("{v}_se"));
    }
    w.write_record(&header).map_err(|e| Error::Structural(e.to_string()))?;
    for &x in &spec.values {
        let mut row = vec![x.to_string()];
        for &v in &spec.variants {
            let a = aggregates.iter().find(|a| a.x == x && a.variant == v);
            row.push(a.map_or(String::new(), |a| a.mean.to_string()));
            row.push(a.map_or(String::new(), |a| a.se.to_string()));
        }
        w.write_record(&row).map_err(|e| Error::Structural(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    axis: &'a str,
    total: usize,
    completed: usize,
    failed: usize,
    complete: bool,
}

fn write_manifest(dir: &Path, axis: Axis, total: usize, done: &[RunResult]) -> Result<()> {
    let failed = done.iter().filter(|r| !r.ok()).count();
    let m = Manifest {
        axis: axis.name(),
        total,
        completed: done.len(),
        failed,
        complete: done.len() == total,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Trains and evaluates every run of `spec`. With `out_dir`, each finished run
/// is appended to `results.jsonl` as soon as it completes and runs already
/// present there with a matching fingerprint are reused.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<SweepOutcome> {
    spec.validate()?;
    let keys = spec.run_keys();
    let mut cached: HashMap<String, RunResult> = HashMap::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in load_results(&dir.join(RESULTS_FILE))? {
            cached.insert(r.fingerprint.clone(), r);
        }
    }
    let fps: Vec<String> = keys
        .iter()
        .map(|k| {
            let (d, t) = spec.run_configs(k);
            fingerprint(&d, &spec.model, &t)
        })
        .collect();
    let pending: Vec<usize> = (0..keys.len()).filter(|&i| !cached.contains_key(&fps[i])).collect();
    let n_cached = keys.len() - pending.len();
    log::info!(
        "sweep over {}: {} runs, {} cached, {} to train",
        spec.axis.name(),
        keys.len(),
        n_cached,
        pending.len()
    );

    let sink = match out_dir {
        Some(dir) => {
            let path = dir.join(RESULTS_FILE);
            // a run cut short mid-write leaves a partial line; start on a fresh one
            let torn = fs::read(&path).map(|b| b.last().is_some_and(|&c| c != b'\n')).unwrap_or(false);
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if torn {
                writeln!(file).map_err(|e| Error::io(&path, e))?;
            }
            Some((file, path))
        }
        None => None,
    };
    let done: Vec<RunResult> = keys
        .iter()
        .zip(&fps)
        .filter_map(|(_, fp)| cached.get(fp).cloned())
        .collect();
    let state = Mutex::new((sink, done));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let fresh: Vec<Result<RunResult>> = pool.install(|| {
        pending
            .par_iter()
            .map(|&i| {
                let r = execute(spec, &keys[i]);
                log::info!(
                    "run {:?} seed {} {}: rmse {:.3} in {:.1}s{}",
                    keys[i].variant,
                    keys[i].seed,
                    spec.axis.name(),
                    r.rmse.overall,
                    r.wall_time,
                    r.error.as_ref().map(|e| format!(" FAILED: {e}")).unwrap_or_default()
                );
                let mut guard = state.lock().expect("sweep state");
                let (sink, done) = &mut *guard;
                if let Some((file, path)) = sink {
                    let line = serde_json::to_string(&r).expect("result serializes");
                    writeln!(file, "{line}").map_err(|e| Error::io(&*path, e))?;
                    file.flush().map_err(|e| Error::io(&*path, e))?;
                }
                done.push(r.clone());
                if let Some(dir) = out_dir {
                    write_manifest(dir, spec.axis, keys.len(), done)?;
                }
                Ok(r)
            })
            .collect()
    });
    let mut by_fp = cached;
    for r in fresh {
        let r = r?;
        by_fp.insert(r.fingerprint.clone(), r);
    }
    let results: Vec<RunResult> = fps
        .iter()
        .map(|fp| by_fp.get(fp).cloned().expect("every run finished"))
        .collect();
    let aggregates = aggregate(spec, &results);
    let n_failed = results.iter().filter(|r| !r.ok()).count();
    if let Some(dir) = out_dir {
        write_manifest(dir, spec.axis, keys.len(), &results)?;
        write_plot_data(spec, &aggregates, &dir.join(format!("{}.csv", spec.axis.name())))?;
    }
    Ok(SweepOutcome {
        spec: spec.clone(),
        results,
        aggregates,
        n_failed,
        n_cached,
    })
}
