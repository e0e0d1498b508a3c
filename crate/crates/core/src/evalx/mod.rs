//! Forecast accuracy and intensity calibration metrics, and experiment sweeps.

mod sweep;

pub use sweep::{
    aggregate, aggregate_by, fingerprint, load_results, run_sweep, write_plot_data, Aggregate, Axis, RunKey, RunResult,
    SweepOutcome, SweepSpec, CACHE_VERSION, MANIFEST_FILE, RESULTS_FILE,
};

use serde::{Deserialize, Serialize};

use crate::datastore::{windows, Dataset, ForecastWindow, PlanArm, Split};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::simkit::Arm;
use crate::trainer::{forecast_many, TrainedModel, Variant};

/// Windows scored per forward batch during evaluation.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// RMSE per horizon `τ = 1..=H` in cm³.
    pub per_tau: Vec<f64>,
    /// RMSE pooled over every horizon term.
    pub overall: f64,
    /// Pooled RMSE for the sequential and the concurrent plan.
    pub per_arm: Vec<f64>,
    pub n_terms: usize,
}

struct SqAcc {
    sum: Vec<f64>,
    n: Vec<usize>,
}

impl SqAcc {
    fn new(h: usize) -> Self {
        SqAcc {
            sum: vec![0.0; h],
            n: vec![0; h],
        }
    }

    fn rmse(&self, k: usize) -> f64 {
        if self.n[k] == 0 {
            0.0
        } else {
            (self.sum[k] / self.n[k] as f64).sqrt()
        }
    }

    fn pooled(&self) -> f64 {
        let n: usize = self.n.iter().sum();
        if n == 0 {
            0.0
        } else {
            (self.sum.iter().sum::<f64>() / n as f64).sqrt()
        }
    }
}

/// Test windows forecasting each potential outcome: the factual history up to
/// the origin followed by the plan of each arm.
pub fn test_windows(ds: &Dataset, arm: Arm) -> Vec<ForecastWindow> {
    windows(ds, Split::Test, PlanArm::Arm(arm)).collect()
}

/// RMSE of `predictor` (volumes in cm³, per horizon) against the potential
/// outcomes of both arms on the test split.
pub fn rmse_with<F>(ds: &Dataset, mut predictor: F) -> Result<RmseReport>
where
    F: FnMut(&[ForecastWindow]) -> Result<Vec<Vec<f64>>>,
{
    let h = ds.config.max_horizon;
    let mut all = SqAcc::new(h);
    let mut per_arm = Vec::new();
    for arm in [Arm::Sequential, Arm::Concurrent] {
        let ws = test_windows(ds, arm);
        let preds = predictor(&ws)?;
        let mut acc = SqAcc::new(h);
        for (w, p) in ws.iter().zip(&preds) {
            for k in 0..w.valid {
                if let Some(y) = w.targets[k] {
                    let e = p[k] - y;
                    acc.sum[k] += e * e;
                    acc.n[k] += 1;
                }
            }
        }
        for k in 0..h {
            all.sum[k] += acc.sum[k];
            all.n[k] += acc.n[k];
        }
        per_arm.push(acc.pooled());
    }
    Ok(RmseReport {
        per_tau: (0..h).map(|k| all.rmse(k)).collect(),
        overall: all.pooled(),
        per_arm,
        n_terms: all.n.iter().sum(),
    })
}

pub fn rmse<S: Scalar>(model: &TrainedModel<S>, ds: &Dataset) -> Result<RmseReport> {
    rmse_with(ds, |ws| {
        Ok(forecast_many(model, ds, ws, EVAL_BATCH)?
            .into_iter()
            .map(|f| f.volume)
            .collect())
    })
}

/// Mean squared gap between true and predicted intensities over the valid
/// `(t, τ)` grid of the factual test windows.
pub fn brier_with<F>(ds: &Dataset, mut predictor: F) -> Result<f64>
where
    F: FnMut(&[ForecastWindow]) -> Result<Vec<Vec<f64>>>,
{
    let ws: Vec<ForecastWindow> = windows(ds, Split::Test, PlanArm::Factual).collect();
    let preds = predictor(&ws)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (w, p) in ws.iter().zip(&preds) {
        for k in 0..w.valid {
            let e = w.lambda_true[k] - p[k];
            sum += e * e;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Brier score of a model; `None` for a variant without an intensity map.
pub fn brier<S: Scalar>(model: &TrainedModel<S>, ds: &Dataset) -> Result<Option<f64>> {
    if model.variant == Variant::Tecde {
        return Ok(None);
    }
    brier_with(ds, |ws| {
        Ok(forecast_many(model, ds, ws, EVAL_BATCH)?
            .into_iter()
            .map(|f| f.lambda.expect("intensity head"))
            .collect())
    })
    .map(Some)
}

/// Brier score of predicting `value` everywhere.
pub fn brier_constant(ds: &Dataset, value: f64) -> Result<f64> {
    brier_with(ds, |ws| Ok(ws.iter().map(|w| vec![value; w.max_horizon()]).collect()))
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
