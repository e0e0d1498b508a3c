//! Tumour-volume simulator with chemotherapy and radiotherapy arms.
//!
//! Volumes follow the one-day multiplicative recurrence
//! `y(t) = (1 + ρ·ln(K/y) − β_c·C(t) − (α_r·d(t) + β_r·d(t)²) + ε(t)) · y(t−1)`,
//! where `C` is the decaying chemotherapy concentration and `d` the
//! radiotherapy dose given on day `t`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximal tumour diameter in cm; volumes are clamped to the matching sphere.
pub const D_MAX_CM: f64 = 13.0;
/// Carrying capacity expressed as a diameter in cm.
pub const K_DIAMETER_CM: f64 = 30.0;
pub const Y_MIN: f64 = 0.01;

pub fn sphere_volume(diameter: f64) -> f64 {
    4.0 / 3.0 * PI * (diameter / 2.0).powi(3)
}

pub fn sphere_diameter(volume: f64) -> f64 {
    2.0 * (3.0 * volume / (4.0 * PI)).cbrt()
}

pub fn y_max() -> f64 {
    sphere_volume(D_MAX_CM)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Sequential,
    Concurrent,
}

impl Arm {
    pub fn other(self) -> Arm {
        match self {
            Arm::Sequential => Arm::Concurrent,
            Arm::Concurrent => Arm::Sequential,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Sequential => "sequential",
            Arm::Concurrent => "concurrent",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        match s {
            "sequential" => Some(Arm::Sequential),
            "concurrent" => Some(Arm::Concurrent),
            _ => None,
        }
    }
}

/// Simulation constants. Defaults reproduce the reference tumour setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon_days: usize,
    pub rho_mean: f64,
    pub rho_std: f64,
    pub beta_c_mean: f64,
    pub beta_c_std: f64,
    pub alpha_r_mean: f64,
    pub alpha_r_std: f64,
    /// Group 1 multiplies the mean radio sensitivity by this factor.
    pub group1_alpha_factor: f64,
    /// Group 3 multiplies the mean chemo sensitivity by this factor.
    pub group3_beta_c_factor: f64,
    pub noise_std: f64,
    pub chemo_dose: f64,
    pub chemo_half_life_days: f64,
    pub radio_dose_gy: f64,
    pub init_diameter_min: f64,
    pub init_diameter_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon_days: 120,
            rho_mean: 7.00e-5,
            rho_std: 7.23e-3,
            beta_c_mean: 0.028,
            beta_c_std: 0.0007,
            alpha_r_mean: 0.0398,
            alpha_r_std: 0.168,
            group1_alpha_factor: 1.1,
            group3_beta_c_factor: 1.1,
            noise_std: 0.01,
            chemo_dose: 5.0,
            chemo_half_life_days: 1.0,
            radio_dose_gy: 2.0,
            init_diameter_min: 1.0,
            init_diameter_max: 4.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_days < 70 {
            return Err(Error::Config(format!(
                "horizon of {} days is shorter than the 70-day treatment plans",
                self.horizon_days
            )));
        }
        if !(self.init_diameter_min > 0.0 && self.init_diameter_min <= self.init_diameter_max)
            || self.init_diameter_max > D_MAX_CM
        {
            return Err(Error::Config("initial diameter range must lie in (0, 13] cm".into()));
        }
        if self.noise_std < 0.0 || self.chemo_half_life_days <= 0.0 {
            return Err(Error::Config("noise std and half-life must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    pub rho: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub beta_c: f64,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub group: u8,
    pub arm: Arm,
    pub seed: u64,
}

impl PatientParams {
    /// Parameters from standard-normal draws `z = [z_rho, z_beta_c, z_alpha_r]`.
    /// Returns `None` when a sensitivity comes out negative.
    pub fn from_standard_draws(
        cfg: &SimConfig,
        group: u8,
        arm: Arm,
        z: [f64; 3],
        seed: u64,
    ) -> Option<PatientParams> {
        let alpha_mean = if group == 1 {
            cfg.alpha_r_mean * cfg.group1_alpha_factor
        } else {
            cfg.alpha_r_mean
        };
        let beta_mean = if group == 3 {
            cfg.beta_c_mean * cfg.group3_beta_c_factor
        } else {
            cfg.beta_c_mean
        };
        let beta_c = beta_mean + cfg.beta_c_std * z[1];
        let alpha_r = alpha_mean + cfg.alpha_r_std * z[2];
        if beta_c < 0.0 || alpha_r < 0.0 {
            return None;
        }
        Some(PatientParams {
            rho: cfg.rho_mean + cfg.rho_std * z[0],
            k: sphere_volume(K_DIAMETER_CM),
            beta_c,
            alpha_r,
            beta_r: alpha_r / 10.0,
            group,
            arm,
            seed,
        })
    }
}

pub fn sample_patient_params(rng_seed: u64) -> PatientParams {
    sample_patient_params_with(&SimConfig::default(), rng_seed)
}

pub fn sample_patient_params_with(cfg: &SimConfig, rng_seed: u64) -> PatientParams {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let group = rng.gen_range(1..=3u8);
    let arm = if rng.gen_bool(0.5) {
        Arm::Sequential
    } else {
        Arm::Concurrent
    };
    loop {
        let z = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        if let Some(p) = PatientParams::from_standard_draws(cfg, group, arm, z, rng_seed) {
            return p;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreatmentSchedule {
    pub chemo_days: BTreeSet<usize>,
    pub radio_days: BTreeSet<usize>,
}

impl TreatmentSchedule {
    pub fn chemo_on(&self, t: usize) -> bool {
        self.chemo_days.contains(&t)
    }

    pub fn radio_on(&self, t: usize) -> bool {
        self.radio_days.contains(&t)
    }
}

/// Sequential: weekly chemo for five weeks, then weekly radio for five weeks.
/// Concurrent: both every two weeks for ten weeks.
pub fn build_schedule(arm: Arm, horizon_days: usize) -> Result<TreatmentSchedule> {
    if horizon_days < 70 {
        return Err(Error::Config(format!(
            "horizon of {horizon_days} days cannot hold a ten-week plan"
        )));
    }
    let (chemo_days, radio_days) = match arm {
        Arm::Sequential => (
            (0..5).map(|w| 7 * w).collect(),
            (5..10).map(|w| 7 * w).collect(),
        ),
        Arm::Concurrent => {
            let days: BTreeSet<usize> = (0..10)
                .map(|w| 14 * w)
                .filter(|&d| d < horizon_days)
                .collect();
            (days.clone(), days)
        }
    };
    Ok(TreatmentSchedule {
        chemo_days,
        radio_days,
    })
}

/// Unclamped one-day growth factor.
pub fn growth_factor(y: f64, params: &PatientParams, chemo_conc: f64, radio_dose: f64, eps: f64) -> f64 {
    1.0 + params.rho * (params.k / y).ln()
        - params.beta_c * chemo_conc
        - (params.alpha_r * radio_dose + params.beta_r * radio_dose * radio_dose)
        + eps
}

/// One day of tumour dynamics, clamped to `[Y_MIN, V(D_MAX)]`.
pub fn step_tumor(y: f64, params: &PatientParams, chemo_conc: f64, radio_dose: f64, eps: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!("tumour volume must be positive, got {y}")));
    }
    let next = growth_factor(y, params, chemo_conc, radio_dose, eps) * y;
    Ok(next.clamp(Y_MIN, y_max()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientTrajectory {
    pub patient_id: u32,
    pub params: PatientParams,
    pub y_factual: Vec<f64>,
    pub y_counterfactual: Vec<f64>,
    pub noise: Vec<f64>,
}

impl PatientTrajectory {
    pub fn horizon(&self) -> usize {
        self.y_factual.len()
    }

    pub fn outcome(&self, arm: Arm) -> &[f64] {
        if arm == self.params.arm {
            &self.y_factual
        } else {
            &self.y_counterfactual
        }
    }
}

fn decay(cfg: &SimConfig) -> f64 {
    (-(2.0f64).ln() / cfg.chemo_half_life_days).exp()
}

/// Chemotherapy concentration per day under `schedule`.
pub fn chemo_concentration(cfg: &SimConfig, schedule: &TreatmentSchedule, horizon: usize) -> Vec<f64> {
    let k = decay(cfg);
    let mut c = 0.0;
    (0..horizon)
        .map(|t| {
            c = c * k + if schedule.chemo_on(t) { cfg.chemo_dose } else { 0.0 };
            c
        })
        .collect()
}

fn run_arm(
    cfg: &SimConfig,
    params: &PatientParams,
    schedule: &TreatmentSchedule,
    y0: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    let conc = chemo_concentration(cfg, schedule, noise.len());
    let mut y = Vec::with_capacity(noise.len());
    y.push(y0);
    for t in 1..noise.len() {
        let d = if schedule.radio_on(t) { cfg.radio_dose_gy } else { 0.0 };
        let next = step_tumor(y[t - 1], params, conc[t], d, noise[t])?;
        y.push(next);
    }
    Ok(y)
}

/// Simulates the factual arm under `schedule` and the opposite arm with the
/// same initial volume and noise sequence.
pub fn simulate_trajectory(
    cfg: &SimConfig,
    params: &PatientParams,
    schedule: &TreatmentSchedule,
    patient_id: u32,
) -> Result<PatientTrajectory> {
    cfg.validate()?;
    let horizon = cfg.horizon_days;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let d0 = rng.gen_range(cfg.init_diameter_min..=cfg.init_diameter_max);
    let y0 = sphere_volume(d0).clamp(Y_MIN, y_max());
    let noise: Vec<f64> = (0..horizon)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.noise_std * z
        })
        .collect();
    let other = build_schedule(params.arm.other(), horizon)?;
    Ok(PatientTrajectory {
        patient_id,
        params: params.clone(),
        y_factual: run_arm(cfg, params, schedule, y0, &noise)?,
        y_counterfactual: run_arm(cfg, params, &other, y0, &noise)?,
        noise,
    })
}

/// Volumes on days `t+1..=t+horizon` when the factual schedule is followed up
/// to day `t` and `plan` afterwards, reusing the trajectory's noise.
pub fn continue_under_plan(
    cfg: &SimConfig,
    traj: &PatientTrajectory,
    t: usize,
    plan: &TreatmentSchedule,
    horizon: usize,
) -> Result<Vec<f64>> {
    let factual = build_schedule(traj.params.arm, cfg.horizon_days)?;
    let t_end = (t + horizon).min(traj.horizon() - 1);
    let mut conc = chemo_concentration(cfg, &factual, t + 1)[t];
    let k = decay(cfg);
    let mut y = traj.y_factual[t];
    let mut out = Vec::with_capacity(horizon);
    for s in t + 1..=t_end {
        conc = conc * k + if plan.chemo_on(s) { cfg.chemo_dose } else { 0.0 };
        let d = if plan.radio_on(s) { cfg.radio_dose_gy } else { 0.0 };
        y = step_tumor(y, &traj.params, conc, d, traj.noise[s])?;
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(rho: f64, beta_c: f64, alpha_r: f64) -> PatientParams {
        PatientParams {
            rho,
            k: sphere_volume(30.0),
            beta_c,
            alpha_r,
            beta_r: alpha_r / 10.0,
            group: 2,
            arm: Arm::Sequential,
            seed: 0,
        }
    }

    #[test]
    fn carrying_capacity_is_a_thirty_cm_sphere() {
        // (4/3)·π·15³
        let expected = 4.0 / 3.0 * PI * 3375.0;
        assert!((sphere_volume(30.0) - 14137.167).abs() < 1e-3);
        assert_eq!(sample_patient_params(3).k, expected);
    }

    #[test]
    fn beta_r_is_tenth_of_alpha_r() {
        let p = PatientParams::from_standard_draws(&SimConfig::default(), 2, Arm::Concurrent, [0.0; 3], 1)
            .unwrap();
        assert_eq!(p.alpha_r, 0.0398);
        assert!((p.beta_r - 0.00398).abs() < 1e-15);
        for seed in 0..50 {
            let p = sample_patient_params(seed);
            assert_eq!(p.beta_r, p.alpha_r / 10.0);
            assert!(p.alpha_r >= 0.0 && p.beta_c >= 0.0);
            assert!((1..=3).contains(&p.group));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample_patient_params(77), sample_patient_params(77));
    }

    #[test]
    fn schedules() {
        let seq = build_schedule(Arm::Sequential, 120).unwrap();
        assert_eq!(seq.chemo_days.iter().copied().collect::<Vec<_>>(), vec![0, 7, 14, 21, 28]);
        assert_eq!(seq.radio_days.iter().copied().collect::<Vec<_>>(), vec![35, 42, 49, 56, 63]);
        assert!(seq.chemo_days.is_disjoint(&seq.radio_days));
        let con = build_schedule(Arm::Concurrent, 120).unwrap();
        assert_eq!(con.chemo_days, con.radio_days);
        assert_eq!(con.chemo_days.len(), 9);
        assert!(con.chemo_days.iter().all(|&d| d < 120 && d % 14 == 0));
        assert!(matches!(build_schedule(Arm::Sequential, 60), Err(Error::Config(_))));
    }

    #[test]
    fn growth_term_vanishes_at_capacity() {
        let p = params(7e-5, 0.028, 0.0398);
        assert_eq!(growth_factor(p.k, &p, 0.0, 0.0, 0.0), 1.0);
    }

    #[test]
    fn chemo_step_example() {
        let p = params(7e-5, 0.028, 0.0398);
        let y = step_tumor(100.0, &p, 5.0, 0.0, 0.0).unwrap();
        let expected = (1.0 + 7e-5 * (14137.167f64 / 100.0).ln() - 0.14) * 100.0;
        assert!((y - expected).abs() < 1e-3);
        assert!((y - 86.035).abs() < 1e-3);
    }

    #[test]
    fn radio_step_example() {
        let p = params(7e-5, 0.028, 0.0398);
        let y = step_tumor(100.0, &p, 0.0, 2.0, 0.0).unwrap();
        assert!((y - 90.483).abs() < 1e-3, "{y}");
    }

    #[test]
    fn non_positive_volume_is_domain_error() {
        let p = params(7e-5, 0.028, 0.0398);
        assert!(matches!(step_tumor(0.0, &p, 0.0, 0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(step_tumor(-1.0, &p, 0.0, 0.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn untreated_noiseless_growth_is_nondecreasing() {
        let cfg = SimConfig {
            noise_std: 0.0,
            ..SimConfig::default()
        };
        let p = params(0.01, 0.028, 0.0398);
        let none = TreatmentSchedule {
            chemo_days: BTreeSet::new(),
            radio_days: BTreeSet::new(),
        };
        let y = run_arm(&cfg, &p, &none, 5.0, &vec![0.0; 120]).unwrap();
        assert!(y.windows(2).all(|w| w[1] >= w[0]));
        assert!(y[119] > y[0]);
    }

    #[test]
    fn arms_share_history_until_treatments_differ() {
        let cfg = SimConfig::default();
        let p = sample_patient_params(5);
        let s = build_schedule(p.arm, 120).unwrap();
        let tr = simulate_trajectory(&cfg, &p, &s, 0).unwrap();
        // Day 0 radiotherapy in the concurrent arm acts from day 1 onward only
        // through the shared initial volume, so day 0 agrees.
        assert_eq!(tr.y_factual[0], tr.y_counterfactual[0]);
        assert_eq!(tr.y_factual.len(), 120);
        assert!(tr.y_factual.iter().chain(&tr.y_counterfactual).all(|&y| y >= Y_MIN));
        assert_eq!(tr, simulate_trajectory(&cfg, &p, &s, 0).unwrap());
    }

    #[test]
    fn swapping_factual_arm_swaps_outcomes() {
        let cfg = SimConfig::default();
        let p = sample_patient_params(11);
        let mut q = p.clone();
        q.arm = p.arm.other();
        let a = simulate_trajectory(&cfg, &p, &build_schedule(p.arm, 120).unwrap(), 0).unwrap();
        let b = simulate_trajectory(&cfg, &q, &build_schedule(q.arm, 120).unwrap(), 0).unwrap();
        assert_eq!(a.y_factual, b.y_counterfactual);
        assert_eq!(a.y_counterfactual, b.y_factual);
    }

    #[test]
    fn treatment_causes_decline_then_regrowth_on_average() {
        let cfg = SimConfig::default();
        let n = 300;
        let mut mean = vec![0.0; 120];
        for id in 0..n {
            let mut p = sample_patient_params(1000 + id);
            p.arm = Arm::Sequential;
            let s = build_schedule(p.arm, 120).unwrap();
            let tr = simulate_trajectory(&cfg, &p, &s, id as u32).unwrap();
            for (m, y) in mean.iter_mut().zip(&tr.y_factual) {
                *m += (y / n as f64).ln();
            }
        }
        // log-mean volume falls over the treatment phase and rises afterwards
        assert!(mean[65] < mean[0]);
        assert!(mean[119] > mean[70]);
    }

    #[test]
    fn plan_continuation_reproduces_factual_path() {
        let cfg = SimConfig::default();
        let p = sample_patient_params(8);
        let s = build_schedule(p.arm, 120).unwrap();
        let tr = simulate_trajectory(&cfg, &p, &s, 0).unwrap();
        for t in [0, 13, 40, 114] {
            let cont = continue_under_plan(&cfg, &tr, t, &s, 5).unwrap();
            assert_eq!(cont[..], tr.y_factual[t + 1..t + 6]);
        }
        // switching at day 0 gives the other arm's stored potential outcome
        let other = build_schedule(p.arm.other(), 120).unwrap();
        let c0 = continue_under_plan(&cfg, &tr, 0, &other, 5).unwrap();
        if !s.chemo_on(0) || other.chemo_on(0) {
            assert_eq!(c0[..], tr.y_counterfactual[1..6]);
        }
    }

    proptest! {
        #[test]
        fn larger_radio_sensitivity_group_shrinks_more(z in prop::array::uniform3(-2.0f64..2.0)) {
            let cfg = SimConfig::default();
            let g1 = PatientParams::from_standard_draws(&cfg, 1, Arm::Sequential, z, 0);
            let g2 = PatientParams::from_standard_draws(&cfg, 2, Arm::Sequential, z, 0);
            if let (Some(g1), Some(g2)) = (g1, g2) {
                let y1 = step_tumor(50.0, &g1, 0.0, 2.0, 0.0).unwrap();
                let y2 = step_tumor(50.0, &g2, 0.0, 2.0, 0.0).unwrap();
                prop_assert!(y1 <= y2);
            }
            let g3 = PatientParams::from_standard_draws(&cfg, 3, Arm::Sequential, z, 0);
            let g2 = PatientParams::from_standard_draws(&cfg, 2, Arm::Sequential, z, 0);
            if let (Some(g3), Some(g2)) = (g3, g2) {
                let y3 = step_tumor(50.0, &g3, 5.0, 0.0, 0.0).unwrap();
                let y2 = step_tumor(50.0, &g2, 5.0, 0.0, 0.0).unwrap();
                prop_assert!(y3 <= y2);
            }
        }
    }
}
