//! Observation process: turns latent daily trajectories into irregular
//! observations by daily Bernoulli draws with a history-dependent intensity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::sigmoid;
use crate::simkit::{sphere_diameter, PatientTrajectory, TreatmentSchedule, D_MAX_CM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntensityMode {
    /// Every day observed.
    Regular,
    /// Constant intensity 1/2 before scarcity scaling.
    Scar,
    /// Intensity driven by the recent average tumour diameter.
    SarOutcome,
    /// Intensity driven by static covariates unrelated to the outcome.
    SarUnrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensitySpec {
    pub mode: IntensityMode,
    pub gamma: f64,
    pub scarcity: f64,
    pub d_max: f64,
    pub window: usize,
    pub n_static: usize,
}

impl Default for IntensitySpec {
    fn default() -> Self {
        IntensitySpec {
            mode: IntensityMode::SarOutcome,
            gamma: 0.0,
            scarcity: 1.0,
            d_max: D_MAX_CM,
            window: 15,
            n_static: 10,
        }
    }
}

impl IntensitySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.scarcity >= 1.0) {
            return Err(Error::Config(format!("scarcity must be >= 1, got {}", self.scarcity)));
        }
        if self.window == 0 || !(self.d_max > 0.0) {
            return Err(Error::Config("window and d_max must be positive".into()));
        }
        Ok(())
    }

    pub fn uses_static_covariates(&self) -> bool {
        self.mode == IntensityMode::SarUnrelated
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationRecord {
    pub t: usize,
    pub observed: bool,
    pub lambda_true: f64,
    pub treatment_chemo: bool,
    pub treatment_radio: bool,
    pub y_observed: Option<f64>,
}

/// `σ(γ·(D̄/D_max − 1/2))`
pub fn intensity_outcome(diam_avg: f64, gamma: f64, d_max: f64) -> Result<f64> {
    // Clamped volumes can round a hair above D_max on the way back to a diameter.
    let tol = 1e-9 * d_max;
    if !(diam_avg >= 0.0 && diam_avg <= d_max + tol) {
        return Err(Error::Domain(format!(
            "average diameter {diam_avg} outside [0, {d_max}]"
        )));
    }
    Ok(sigmoid(gamma * (diam_avg.min(d_max) / d_max - 0.5)))
}

/// Mean diameter over days `max(0, t−window) .. t−1`; day 0's diameter at `t = 0`.
pub fn rolling_diameter(y_history: &[f64], t: usize, window: usize) -> f64 {
    if t == 0 {
        return sphere_diameter(y_history[0]);
    }
    let lo = t.saturating_sub(window);
    let days = &y_history[lo..t];
    days.iter().map(|&v| sphere_diameter(v)).sum::<f64>() / days.len() as f64
}

/// `σ(γ·Σ c_j x_j)`
pub fn intensity_unrelated(x_static: &[f64], coeffs: &[f64], gamma: f64) -> f64 {
    let s: f64 = x_static.iter().zip(coeffs).map(|(x, c)| x * c).sum();
    sigmoid(gamma * s)
}

pub fn apply_scarcity(lambda: f64, scarcity: f64) -> Result<f64> {
    if !(scarcity >= 1.0) {
        return Err(Error::Config(format!("scarcity divisor must be >= 1, got {scarcity}")));
    }
    Ok(lambda / scarcity)
}

/// Daily true intensities of the factual trajectory.
pub fn intensity_path(
    traj: &PatientTrajectory,
    spec: &IntensitySpec,
    x_static: &[f64],
    coeffs: &[f64],
) -> Result<Vec<f64>> {
    spec.validate()?;
    let y = &traj.y_factual;
    (0..y.len())
        .map(|t| {
            let base = match spec.mode {
                IntensityMode::Regular => return Ok(1.0),
                IntensityMode::Scar => 0.5,
                IntensityMode::SarOutcome => {
                    intensity_outcome(rolling_diameter(y, t, spec.window), spec.gamma, spec.d_max)?
                }
                IntensityMode::SarUnrelated => intensity_unrelated(x_static, coeffs, spec.gamma),
            };
            apply_scarcity(base, spec.scarcity)
        })
        .collect()
}

/// Draws `dN(t) ~ Bernoulli(λ(t))` for each day. Treatments are always recorded;
/// the volume only on observed days.
pub fn realize_observations<R: Rng + ?Sized>(
    traj: &PatientTrajectory,
    schedule: &TreatmentSchedule,
    spec: &IntensitySpec,
    x_static: &[f64],
    coeffs: &[f64],
    rng: &mut R,
) -> Result<Vec<ObservationRecord>> {
    let lambda = intensity_path(traj, spec, x_static, coeffs)?;
    Ok(lambda
        .iter()
        .enumerate()
        .map(|(t, &l)| {
            let u: f64 = rng.gen();
            let observed = spec.mode == IntensityMode::Regular || u < l;
            record(traj, schedule, t, l, observed)
        })
        .collect())
}

/// Every day observed, with intensities still computed under `spec`.
pub fn observe_daily(
    traj: &PatientTrajectory,
    schedule: &TreatmentSchedule,
    spec: &IntensitySpec,
    x_static: &[f64],
    coeffs: &[f64],
) -> Result<Vec<ObservationRecord>> {
    let lambda = intensity_path(traj, spec, x_static, coeffs)?;
    Ok(lambda
        .iter()
        .enumerate()
        .map(|(t, &l)| record(traj, schedule, t, l, true))
        .collect())
}

fn record(
    traj: &PatientTrajectory,
    schedule: &TreatmentSchedule,
    t: usize,
    lambda: f64,
    observed: bool,
) -> ObservationRecord {
    ObservationRecord {
        t,
        observed,
        lambda_true: lambda,
        treatment_chemo: schedule.chemo_on(t),
        treatment_radio: schedule.radio_on(t),
        y_observed: observed.then(|| traj.y_factual[t]),
    }
}
