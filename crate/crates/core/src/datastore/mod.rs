//! Dataset assembly, splitting, forecast-window extraction and persistence.

mod io;
mod window;

pub use io::{load, metadata_path, save, SCHEMA_VERSION};
pub use window::{windows, ForecastWindow, HistoryDay, PlanArm};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{observe_daily, realize_observations, IntensitySpec, ObservationRecord};
use crate::simkit::{build_schedule, sample_patient_params_with, simulate_trajectory, y_max, PatientTrajectory, SimConfig, TreatmentSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub lookback_days: usize,
    pub max_horizon: usize,
    pub seed: u64,
    pub sim: SimConfig,
    pub intensity: IntensitySpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 200,
            n_val: 50,
            n_test: 200,
            lookback_days: 7,
            max_horizon: 5,
            seed: 0,
            sim: SimConfig::default(),
            intensity: IntensitySpec::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.intensity.validate()?;
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        if self.lookback_days == 0 || self.max_horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        if self.lookback_days + self.max_horizon >= self.sim.horizon_days {
            return Err(Error::Config("lookback + horizon exceed the simulated period".into()));
        }
        Ok(())
    }

    pub fn n_patients(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn split_of(&self, patient_id: u32) -> Split {
        let id = patient_id as usize;
        if id < self.n_train {
            Split::Train
        } else if id < self.n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Scale factors applied to model inputs and outputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub volume_scale: f64,
    pub time_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub split: Split,
    pub trajectory: PatientTrajectory,
    /// Static covariates; empty unless the intensity uses them.
    pub x_static: Vec<f64>,
    pub observations: Vec<ObservationRecord>,
}

impl PatientRecord {
    pub fn id(&self) -> u32 {
        self.trajectory.patient_id
    }

    pub fn n_observed(&self) -> usize {
        self.observations.iter().filter(|o| o.observed).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    /// Per-dataset coefficients of the outcome-unrelated intensity.
    pub coeffs: Vec<f64>,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn horizon(&self) -> usize {
        self.config.sim.horizon_days
    }

    pub fn normalization(&self) -> Normalization {
        Normalization {
            volume_scale: y_max(),
            time_scale: self.horizon() as f64,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &PatientRecord> {
        self.patients.iter().filter(move |p| p.split == split)
    }

    pub fn schedule(&self, p: &PatientRecord) -> TreatmentSchedule {
        build_schedule(p.trajectory.params.arm, self.horizon()).expect("validated horizon")
    }

    pub fn n_static(&self) -> usize {
        if self.config.intensity.uses_static_covariates() {
            self.config.intensity.n_static
        } else {
            0
        }
    }
}

/// SplitMix64-style mixing of the dataset seed with a stream tag.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_PARAMS: u64 = 1;
const STREAM_OBS: u64 = 2;
const STREAM_STATIC: u64 = 3;
const STREAM_COEFFS: u64 = 4;

pub fn generate_dataset(config: &DataConfig) -> Result<Dataset> {
    config.validate()?;
    let n_static = if config.intensity.uses_static_covariates() {
        config.intensity.n_static
    } else {
        0
    };
    let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX, STREAM_COEFFS));
    let coeffs: Vec<f64> = (0..n_static).map(|_| crng.gen_range(-1.0..1.0)).collect();
    let patients = (0..config.n_patients() as u32)
        .map(|id| {
            let pseed = derive_seed(config.seed, id as u64, STREAM_PARAMS);
            let params = sample_patient_params_with(&config.sim, pseed);
            let schedule = build_schedule(params.arm, config.sim.horizon_days)?;
            let traj = simulate_trajectory(&config.sim, &params, &schedule, id)?;
            let mut xrng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, id as u64, STREAM_STATIC));
            let x_static: Vec<f64> = (0..n_static).map(|_| StandardNormal.sample(&mut xrng)).collect();
            let split = config.split_of(id);
            let observations = if split == Split::Test {
                observe_daily(&traj, &schedule, &config.intensity, &x_static, &coeffs)?
            } else {
                let mut orng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, id as u64, STREAM_OBS));
                realize_observations(&traj, &schedule, &config.intensity, &x_static, &coeffs, &mut orng)?
            };
            Ok(PatientRecord {
                split,
                trajectory: traj,
                x_static,
                observations,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        coeffs,
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::IntensityMode;

    fn small(n: usize) -> DataConfig {
        DataConfig {
            n_train: n,
            n_val: 2,
            n_test: 3,
            seed: 17,
            ..Default::default()
        }
    }

    #[test]
    fn default_sizes() {
        let c = DataConfig::default();
        assert_eq!(c.n_patients(), 450);
        assert_eq!(c.sim.horizon_days, 120);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let d = generate_dataset(&small(6)).unwrap();
        assert_eq!(d.split(Split::Train).count(), 6);
        assert_eq!(d.split(Split::Val).count(), 2);
        assert_eq!(d.split(Split::Test).count(), 3);
        let mut ids: Vec<u32> = d.patients.iter().map(|p| p.id()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 11);
    }

    #[test]
    fn test_split_observed_daily() {
        let d = generate_dataset(&small(2)).unwrap();
        for p in d.split(Split::Test) {
            assert_eq!(p.observations.len(), 120);
            assert_eq!(p.n_observed(), 120);
            assert_eq!(p.trajectory.y_counterfactual.len(), 120);
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_dataset(&small(3)).unwrap();
        assert_eq!(a, generate_dataset(&small(3)).unwrap());
        let mut c = small(3);
        c.seed = 18;
        assert_ne!(a, generate_dataset(&c).unwrap());
    }

    #[test]
    fn gamma_zero_yields_about_sixty_observations() {
        let d = generate_dataset(&DataConfig {
            n_train: 200,
            n_val: 0,
            n_test: 0,
            ..Default::default()
        })
        .unwrap();
        let total: usize = d.split(Split::Train).map(|p| p.n_observed()).sum();
        let mean = total as f64 / 200.0;
        // Binomial(24000, 1/2): per-patient mean sd = sqrt(120/4/200)
        let sd = (120.0 * 0.25 / 200.0f64).sqrt();
        assert!((mean - 60.0).abs() <= 3.0 * sd, "{mean}");
    }

    #[test]
    fn unrelated_mode_draws_covariates() {
        let mut c = small(2);
        c.intensity.mode = IntensityMode::SarUnrelated;
        c.intensity.gamma = 2.0;
        let d = generate_dataset(&c).unwrap();
        assert_eq!(d.coeffs.len(), 10);
        assert!(d.coeffs.iter().all(|c| (-1.0..1.0).contains(c)));
        for p in &d.patients {
            assert_eq!(p.x_static.len(), 10);
            let l = p.observations[0].lambda_true;
            assert!(p.observations.iter().all(|o| o.lambda_true == l));
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        let c = DataConfig {
            n_train: 0,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&c), Err(Error::Config(_))));
    }
}
