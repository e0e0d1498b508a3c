//! Training loops for the unweighted baseline, the two-step weighted model and
//! the multitask model with routed gradients.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdeflow::{prepare_window, Batch, CdeModel, Heads, ModelConfig, PreparedWindow, Routing};
use crate::datastore::{derive_seed, windows, Dataset, ForecastWindow, PlanArm, Split};
use crate::error::{Error, Result};
use crate::gradcore::checkpoint::{read_checkpoint, write_checkpoint};
use crate::gradcore::{Adam, Tape, Tensor};
use crate::objectives::{batch_losses, check_alpha, make_weights, LossReport, Weighting};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tecde,
    Twostep,
    Multitask,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Tecde, Variant::Twostep, Variant::Multitask];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tecde => "tecde",
            Variant::Twostep => "twostep",
            Variant::Multitask => "multitask",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn has_intensity(self) -> bool {
        self != Variant::Tecde
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub alpha: f64,
    pub c_min: f64,
    pub variant: Variant,
    pub seed: u64,
    /// Optimizer steps per epoch; `0` means one full pass over the training windows.
    pub batches_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr: 5e-4,
            max_epochs: 1000,
            patience: 50,
            alpha: 0.8,
            c_min: 0.001,
            variant: Variant::Multitask,
            seed: 0,
            batches_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.c_min > 0.0 && self.c_min <= 1.0) {
            return Err(Error::Config("lr must be positive and c_min inside (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Loss the stopping rule watches.
    pub loss: f64,
    pub best: f64,
    pub wmse: f64,
    pub ce: f64,
    pub mt: f64,
    pub mean_weight: f64,
}

/// Per-stage optimisation trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel<S> {
    pub variant: Variant,
    pub train: TrainConfig,
    /// Outcome model (for the multitask variant it also carries the intensity head).
    pub outcome: CdeModel<S>,
    /// Frozen intensity model of the two-step variant.
    pub intensity: Option<CdeModel<S>>,
    pub history: TrainHistory,
    pub intensity_history: Option<TrainHistory>,
}

impl<S: Scalar> TrainedModel<S> {
    pub fn stopped_epoch(&self) -> usize {
        self.history.stopped_epoch
    }

    fn intensity_model(&self) -> Option<&CdeModel<S>> {
        match self.variant {
            Variant::Tecde => None,
            Variant::Twostep => self.intensity.as_ref(),
            Variant::Multitask => Some(&self.outcome),
        }
    }
}

/// Normalized training windows of a split.
pub fn prepare_split<S: Scalar>(
    ds: &Dataset,
    split: Split,
    plan: PlanArm,
    model: &ModelConfig,
) -> Result<(Vec<ForecastWindow>, Vec<PreparedWindow<S>>)> {
    let norm = ds.normalization();
    let raw: Vec<ForecastWindow> = windows(ds, split, plan).collect();
    let prepared = raw
        .iter()
        .map(|w| prepare_window(w, &norm, model))
        .collect::<Result<Vec<_>>>()?;
    Ok((raw, prepared))
}

struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler {
            order: (0..n).collect(),
            cursor: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + size).min(self.order.len());
        let out = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }
}

#[derive(Clone, Copy)]
enum Stage {
    Outcome,
    Intensity,
    Multitask,
}

fn monitored(stage: Stage, r: &LossReport) -> f64 {
    match stage {
        Stage::Outcome => r.wmse,
        Stage::Intensity => r.ce,
        Stage::Multitask => r.mt,
    }
}

/// Adam on `model` until the monitored epoch loss fails to improve for
/// `patience` epochs; the best epoch's parameters are restored at the end.
fn optimise<S: Scalar>(
    model: &mut CdeModel<S>,
    data: &[PreparedWindow<S>],
    fixed_weights: Option<&[Vec<S>]>,
    stage: Stage,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    if data.is_empty() {
        return Err(Error::Structural("no training windows".into()));
    }
    let adam = Adam::new(cfg.lr);
    let mut sampler = Sampler::new(data.len(), seed);
    let per_epoch = if cfg.batches_per_epoch == 0 {
        data.len().div_ceil(cfg.batch_size)
    } else {
        cfg.batches_per_epoch
    };
    let (routing, weighting_kind) = match stage {
        Stage::Multitask => (Routing::DetachIntensity, Weighting::OwnIntensity),
        _ => (Routing::Joint, Weighting::Unweighted),
    };
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut best_params = model.params().clone();
    for epoch in 0..cfg.max_epochs {
        let mut sum = LossReport::default();
        let mut monitored_sum = 0.0;
        for _ in 0..per_epoch {
            let idx = sampler.next_batch(cfg.batch_size);
            let members: Vec<&PreparedWindow<S>> = idx.iter().map(|&i| &data[i]).collect();
            let batch = Batch::from_windows(&members)?;
            let weighting = match fixed_weights {
                Some(w) => {
                    let h = batch.horizon;
                    let b = batch.size;
                    let mut t = Vec::with_capacity(h * b);
                    for k in 0..h {
                        for &i in &idx {
                            t.push(w[i][k]);
                        }
                    }
                    Weighting::Fixed(Tensor::from_vec(h * b, 1, t)?)
                }
                None => weighting_kind.clone(),
            };
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &batch, routing)?;
            let losses = batch_losses(&mut tape, &fwd, &batch, &weighting, cfg.alpha, cfg.c_min)?;
            let root = match (losses.outcome, losses.intensity, stage) {
                (Some(o), _, Stage::Outcome) => o,
                (_, Some(i), Stage::Intensity) => i,
                (Some(o), Some(i), Stage::Multitask) => tape.add(o, i)?,
                _ => return Err(Error::Structural("model heads do not match the training stage".into())),
            };
            let m = monitored(stage, &losses.report);
            if !m.is_finite() || !tape.value(root).all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    msg: format!("non-finite loss {m}"),
                });
            }
            model.params_mut().zero_grads();
            tape.backward_into(root, model.params_mut())?;
            adam.step(model.params_mut());
            sum.wmse += losses.report.wmse;
            sum.ce += losses.report.ce;
            sum.mt += losses.report.mt;
            sum.mean_weight += losses.report.mean_weight;
            monitored_sum += m;
        }
        let n = per_epoch as f64;
        let loss = monitored_sum / n;
        if loss < best {
            best = loss;
            history.best_epoch = epoch;
            best_params = model.params().clone();
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            best,
            wmse: sum.wmse / n,
            ce: sum.ce / n,
            mt: sum.mt / n,
            mean_weight: sum.mean_weight / n,
        });
        history.stopped_epoch = epoch + 1;
        if epoch % 50 == 0 {
            log::debug!("epoch {epoch}: loss {loss:.6} best {best:.6}");
        }
        if epoch - history.best_epoch >= cfg.patience {
            break;
        }
    }
    model.params_mut().copy_values_from(&best_params)?;
    model.params_mut().reset_optimizer();
    Ok(history)
}

fn init_seed(cfg: &TrainConfig, stage: u64) -> u64 {
    derive_seed(cfg.seed, 0x7261_696e, stage)
}

fn check_variant(cfg: &TrainConfig, expected: Variant) -> Result<()> {
    cfg.validate()?;
    if cfg.variant != expected {
        return Err(Error::Config(format!(
            "config selects variant {}, called trainer for {}",
            cfg.variant, expected
        )));
    }
    Ok(())
}

pub fn train_tecde<S: Scalar>(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedModel<S>> {
    check_variant(cfg, Variant::Tecde)?;
    let (_, data) = prepare_split::<S>(ds, Split::Train, PlanArm::Factual, model_cfg)?;
    let mut model = CdeModel::new(model_cfg.clone(), Heads::Outcome, ds.n_static(), init_seed(cfg, 1))?;
    let history = optimise(&mut model, &data, None, Stage::Outcome, cfg, init_seed(cfg, 2))?;
    Ok(TrainedModel {
        variant: Variant::Tecde,
        train: cfg.clone(),
        outcome: model,
        intensity: None,
        history,
        intensity_history: None,
    })
}

/// Stage-2 weights `1 / max(λ̂₁, c_min)` for every prepared window, per horizon.
pub fn twostep_weights<S: Scalar>(
    stage1: &CdeModel<S>,
    data: &[PreparedWindow<S>],
    batch_size: usize,
    c_min: f64,
) -> Result<Vec<Vec<S>>> {
    let lambdas = predict(stage1, data, batch_size)?;
    Ok(lambdas
        .into_iter()
        .map(|p| make_weights(&p.lambda.expect("intensity head"), S::of(c_min)))
        .collect())
}

fn fit_intensity<S: Scalar>(
    ds: &Dataset,
    data: &[PreparedWindow<S>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(CdeModel<S>, TrainHistory)> {
    let mut stage1 = CdeModel::new(model_cfg.clone(), Heads::Intensity, ds.n_static(), init_seed(cfg, 3))?;
    let h1 = optimise(&mut stage1, data, None, Stage::Intensity, cfg, init_seed(cfg, 4))?;
    Ok((stage1, h1))
}

/// Stage 1 of the two-step variant on its own: an intensity-only model fit to
/// the cross-entropy of the observation indicators.
pub fn train_intensity<S: Scalar>(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<(CdeModel<S>, TrainHistory)> {
    check_variant(cfg, Variant::Twostep)?;
    let (_, data) = prepare_split::<S>(ds, Split::Train, PlanArm::Factual, model_cfg)?;
    fit_intensity(ds, &data, model_cfg, cfg)
}

pub fn train_twostep<S: Scalar>(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedModel<S>> {
    check_variant(cfg, Variant::Twostep)?;
    let (_, data) = prepare_split::<S>(ds, Split::Train, PlanArm::Factual, model_cfg)?;
    let (stage1, h1) = fit_intensity(ds, &data, model_cfg, cfg)?;
    let weights = twostep_weights(&stage1, &data, cfg.batch_size, cfg.c_min)?;
    let mut stage2 = CdeModel::new(model_cfg.clone(), Heads::Outcome, ds.n_static(), init_seed(cfg, 5))?;
    let h2 = optimise(&mut stage2, &data, Some(&weights), Stage::Outcome, cfg, init_seed(cfg, 6))?;
    Ok(TrainedModel {
        variant: Variant::Twostep,
        train: cfg.clone(),
        outcome: stage2,
        intensity: Some(stage1),
        history: h2,
        intensity_history: Some(h1),
    })
}

pub fn train_multitask<S: Scalar>(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedModel<S>> {
    check_variant(cfg, Variant::Multitask)?;
    let (_, data) = prepare_split::<S>(ds, Split::Train, PlanArm::Factual, model_cfg)?;
    let mut model = CdeModel::new(model_cfg.clone(), Heads::Both, ds.n_static(), init_seed(cfg, 7))?;
    let history = optimise(&mut model, &data, None, Stage::Multitask, cfg, init_seed(cfg, 8))?;
    Ok(TrainedModel {
        variant: Variant::Multitask,
        train: cfg.clone(),
        outcome: model,
        intensity: None,
        history,
        intensity_history: None,
    })
}

/// Dispatches on `cfg.variant`.
pub fn train<S: Scalar>(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedModel<S>> {
    match cfg.variant {
        Variant::Tecde => train_tecde(ds, model_cfg, cfg),
        Variant::Twostep => train_twostep(ds, model_cfg, cfg),
        Variant::Multitask => train_multitask(ds, model_cfg, cfg),
    }
}

/// Normalized per-horizon predictions of one model for one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction<S> {
    pub y: Option<Vec<S>>,
    pub lambda: Option<Vec<S>>,
}

/// Batched forward passes without gradients.
pub fn predict<S: Scalar>(model: &CdeModel<S>, data: &[PreparedWindow<S>], batch_size: usize) -> Result<Vec<WindowPrediction<S>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let members: Vec<&PreparedWindow<S>> = chunk.iter().collect();
        let batch = Batch::from_windows(&members)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, Routing::Joint)?;
        let unstack = |v: Option<crate::gradcore::Var>, b: usize| {
            v.map(|v| {
                let d = tape.value(v).data();
                (0..batch.horizon).map(|k| d[k * batch.size + b]).collect::<Vec<S>>()
            })
        };
        for b in 0..batch.size {
            out.push(WindowPrediction {
                y: unstack(fwd.y_hat, b),
                lambda: unstack(fwd.lambda_hat, b),
            });
        }
    }
    Ok(out)
}

/// Forecast in original units: volume in cm³ and intensity, per horizon `1..=H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Forecast {
    pub volume: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
}

pub fn forecast_many<S: Scalar>(
    model: &TrainedModel<S>,
    ds: &Dataset,
    windows: &[ForecastWindow],
    batch_size: usize,
) -> Result<Vec<Forecast>> {
    let norm = ds.normalization();
    let cfg = model.outcome.config();
    let prepared = windows
        .iter()
        .map(|w| prepare_window::<S>(w, &norm, cfg))
        .collect::<Result<Vec<_>>>()?;
    let ys = predict(&model.outcome, &prepared, batch_size)?;
    let lambdas = match (model.variant, model.intensity_model()) {
        (Variant::Twostep, Some(m)) => Some(predict(m, &prepared, batch_size)?),
        _ => None,
    };
    Ok(ys
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let volume = p
                .y
                .expect("outcome head")
                .iter()
                .map(|v| v.as_f64() * norm.volume_scale)
                .collect();
            let lambda = match &lambdas {
                Some(l) => l[i].lambda.clone(),
                None => p.lambda,
            }
            .map(|l| l.iter().map(|v| v.as_f64()).collect());
            Forecast { volume, lambda }
        })
        .collect())
}

/// Forecast `(volume cm³, intensity)` at one horizon `τ ∈ (0, H]` under the
/// window's plan; non-integer horizons integrate the decoder directly.
pub fn forecast<S: Scalar>(model: &TrainedModel<S>, ds: &Dataset, window: &ForecastWindow, tau: f64) -> Result<(f64, Option<f64>)> {
    let h = window.max_horizon() as f64;
    if !(tau > 0.0 && tau <= h) {
        return Err(Error::Domain(format!("horizon {tau} outside (0, {h}]")));
    }
    let norm = ds.normalization();
    let run = |m: &CdeModel<S>| -> Result<Vec<S>> {
        let cfg = m.config();
        let enc = crate::cdeflow::encoder_knots(window, &norm, cfg)?;
        let path = crate::cdeflow::build_control_path::<S>(&enc, cfg.interpolation)?;
        let plan = crate::cdeflow::build_control_path::<S>(&crate::cdeflow::decoder_knots(window, &norm, cfg), cfg.interpolation)?;
        let lookback = (window.history.len() - 1) as f64;
        let z = m.encode(&path, enc[0].0, lookback)?;
        m.decode(&z, &plan, 0.0, tau)
    };
    let z = run(&model.outcome)?;
    let (y, own_lambda) = model.outcome.apply_heads(&z)?;
    let lambda = match model.variant {
        Variant::Twostep => {
            let m = model.intensity.as_ref().expect("two-step intensity model");
            m.apply_heads(&run(m)?)?.1
        }
        _ => own_lambda,
    };
    let y = y.ok_or_else(|| Error::Structural("model has no outcome head".into()))?;
    Ok((y.as_f64() * norm.volume_scale, lambda.map(|l| l.as_f64())))
}

/// Metadata stored next to a checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    variant: Variant,
    train: TrainConfig,
    model: ModelConfig,
    n_static: usize,
    /// Initialisation seeds of the outcome and (two-step) intensity models.
    seeds: (u64, Option<u64>),
    history: TrainHistory,
    intensity_history: Option<TrainHistory>,
}

pub fn checkpoint_meta_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint<S: Scalar>(model: &TrainedModel<S>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut stores = vec![("outcome", model.outcome.params())];
    if let Some(m) = &model.intensity {
        stores.push(("intensity", m.params()));
    }
    write_checkpoint(&mut w, &stores).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = CheckpointMeta {
        variant: model.variant,
        train: model.train.clone(),
        model: model.outcome.config().clone(),
        n_static: model.outcome.n_static(),
        seeds: (model.outcome.seed(), model.intensity.as_ref().map(|m| m.seed())),
        history: model.history.clone(),
        intensity_history: model.intensity_history.clone(),
    };
    let meta_path = checkpoint_meta_path(path);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Structural(e.to_string()))?;
    std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<TrainedModel<S>> {
    let meta_path = checkpoint_meta_path(path);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        record: e.line() as u64,
        msg: e.to_string(),
    })?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let stores = read_checkpoint::<S>(&mut BufReader::new(file))?;
    let take = |name: &str| stores.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    let outcome_heads = match meta.variant {
        Variant::Multitask => Heads::Both,
        _ => Heads::Outcome,
    };
    let outcome = CdeModel::with_params(
        meta.model.clone(),
        outcome_heads,
        meta.n_static,
        meta.seeds.0,
        take("outcome").ok_or_else(|| Error::Structural("checkpoint lacks the outcome store".into()))?,
    )?;
    let intensity = match meta.variant {
        Variant::Twostep => Some(CdeModel::with_params(
            meta.model.clone(),
            Heads::Intensity,
            meta.n_static,
            meta.seeds.1.unwrap_or(0),
            take("intensity").ok_or_else(|| Error::Structural("checkpoint lacks the intensity store".into()))?,
        )?),
        _ => None,
    };
    Ok(TrainedModel {
        variant: meta.variant,
        train: meta.train,
        outcome,
        intensity,
        history: meta.history,
        intensity_history: meta.intensity_history,
    })
}

/// Per-epoch losses as CSV; the two-step intensity stage is tagged `stage=1`.
pub fn write_loss_log<S: Scalar>(model: &TrainedModel<S>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Structural(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    if let Some(h) = &model.intensity_history {
        rows.extend(h.epochs.iter().map(|r| (1, r)));
    }
    let stage = if model.intensity_history.is_some() { 2 } else { 1 };
    rows.extend(model.history.epochs.iter().map(|r| (stage, r)));
    w.write_record(["stage", "epoch", "loss", "best", "wmse", "ce", "mt", "mean_weight"])
        .map_err(|e| Error::Structural(e.to_string()))?;
    for (s, r) in rows {
        w.write_record(&[
            s.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.best.to_string(),
            r.wmse.to_string(),
            r.ce.to_string(),
            r.mt.to_string(),
            r.mean_weight.to_string(),
        ])
        .map_err(|e| Error::Structural(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
