use super::{Dataset, PatientRecord, Split};
use crate::simkit::{build_schedule, continue_under_plan, Arm};

/// Which treatment plan the forecast horizon follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanArm {
    Factual,
    /// Factual history up to the origin, then this arm's schedule.
    Arm(Arm),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryDay {
    pub t: usize,
    pub observed: bool,
    pub y: Option<f64>,
    pub chemo: bool,
    pub radio: bool,
}

/// One forecasting sample: lookback history, future plan and horizon targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow {
    pub patient_id: u32,
    pub origin: usize,
    pub plan_arm: Arm,
    pub x_static: Vec<f64>,
    /// Doses given before the first history day.
    pub chemo_before: usize,
    pub radio_before: usize,
    /// Days `origin − lookback ..= origin`.
    pub history: Vec<HistoryDay>,
    /// `(chemo, radio)` on days `origin + 1 ..= origin + max_horizon`.
    pub future_plan: Vec<(bool, bool)>,
    /// Volume at `origin + τ` when observed, for τ = 1..=max_horizon.
    pub targets: Vec<Option<f64>>,
    /// Observation indicator `dN(origin + τ)`.
    pub target_dn: Vec<bool>,
    pub lambda_true: Vec<f64>,
    /// Number of horizon days that fall inside the simulated period.
    pub valid: usize,
}

impl ForecastWindow {
    pub fn max_horizon(&self) -> usize {
        self.targets.len()
    }

    pub fn first_observed(&self) -> Option<&HistoryDay> {
        self.history.iter().find(|d| d.observed)
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

fn patient_windows<'a>(
    ds: &'a Dataset,
    p: &'a PatientRecord,
    plan: PlanArm,
) -> impl Iterator<Item = ForecastWindow> + 'a {
    let horizon = ds.horizon();
    let lookback = ds.config.lookback_days;
    let max_h = ds.config.max_horizon;
    let factual = ds.schedule(p);
    let arm = match plan {
        PlanArm::Factual => p.trajectory.params.arm,
        PlanArm::Arm(a) => a,
    };
    let plan_schedule = build_schedule(arm, horizon).expect("validated horizon");
    let counterfactual = arm != p.trajectory.params.arm;
    let obs = &p.observations;
    (lookback..=horizon - max_h).filter_map(move |t| {
        let history: Vec<HistoryDay> = (t - lookback..=t)
            .map(|d| HistoryDay {
                t: d,
                observed: obs[d].observed,
                y: obs[d].y_observed,
                chemo: obs[d].treatment_chemo,
                radio: obs[d].treatment_radio,
            })
            .collect();
        if !history.iter().any(|d| d.observed) {
            return None;
        }
        let valid = max_h.min(horizon - 1 - t);
        let potential = if counterfactual {
            continue_under_plan(&ds.config.sim, &p.trajectory, t, &plan_schedule, max_h)
                .expect("clamped volumes stay positive")
        } else {
            p.trajectory.y_factual[t + 1..=t + valid].to_vec()
        };
        let mut targets = vec![None; max_h];
        let mut target_dn = vec![false; max_h];
        let mut lambda_true = vec![0.0; max_h];
        let mut future_plan = vec![(false, false); max_h];
        for k in 0..valid {
            let day = t + 1 + k;
            target_dn[k] = obs[day].observed;
            lambda_true[k] = obs[day].lambda_true;
            if obs[day].observed {
                targets[k] = Some(potential[k]);
            }
        }
        for (k, slot) in future_plan.iter_mut().enumerate() {
            let day = t + 1 + k;
            *slot = (plan_schedule.chemo_on(day), plan_schedule.radio_on(day));
        }
        let start = t - lookback;
        Some(ForecastWindow {
            patient_id: p.id(),
            origin: t,
            plan_arm: arm,
            x_static: p.x_static.clone(),
            chemo_before: factual.chemo_days.range(..start).count(),
            radio_before: factual.radio_days.range(..start).count(),
            history,
            future_plan,
            targets,
            target_dn,
            lambda_true,
            valid,
        })
    })
}

/// Forecast windows for every patient of `split`, one per origin
/// `t ∈ [lookback, T − max_horizon]`, skipping windows without any observed
/// history day.
pub fn windows(ds: &Dataset, split: Split, plan: PlanArm) -> impl Iterator<Item = ForecastWindow> + '_ {
    ds.split(split).flat_map(move |p| patient_windows(ds, p, plan))
}
