//! On-disk layout: an observations CSV with one row per (patient, day) and a
//! TOML metadata sidecar next to it (`<stem>.meta.toml`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataConfig, Dataset, Normalization, PatientRecord, Split};
use crate::error::{Error, Result};
use crate::sampler::ObservationRecord;
use crate::simkit::{Arm, PatientParams, PatientTrajectory};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatientMeta {
    id: u32,
    split: Split,
    group: u8,
    arm: Arm,
    rho: f64,
    #[serde(rename = "K")]
    k: f64,
    beta_c: f64,
    alpha_r: f64,
    beta_r: f64,
    /// Decimal string: seeds use the full `u64` range, TOML integers do not.
    seed: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    schema_version: u32,
    coeffs: Vec<f64>,
    normalization: Normalization,
    config: DataConfig,
    patients: Vec<PatientMeta>,
}

pub fn metadata_path(observations: &Path) -> PathBuf {
    observations.with_extension("meta.toml")
}

fn header(n_static: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "patient_id",
        "split",
        "arm",
        "t",
        "observed",
        "y_observed",
        "chemo",
        "radio",
        "lambda_true",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..n_static).map(|j| format!("x_static_{j}")));
    h.extend(["y_factual", "y_counterfactual", "noise"].map(String::from));
    h
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes the observations file at `path` and its metadata sidecar.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let n_static = ds.config.intensity.n_static;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(header(n_static)).map_err(|e| csv_io(path, e))?;
    for p in &ds.patients {
        let tr = &p.trajectory;
        for o in &p.observations {
            let mut row = vec![
                p.id().to_string(),
                p.split.name().to_string(),
                tr.params.arm.name().to_string(),
                o.t.to_string(),
                flag(o.observed).to_string(),
                o.y_observed.map(|y| y.to_string()).unwrap_or_default(),
                flag(o.treatment_chemo).to_string(),
                flag(o.treatment_radio).to_string(),
                o.lambda_true.to_string(),
            ];
            row.extend((0..n_static).map(|j| p.x_static.get(j).map(|x| x.to_string()).unwrap_or_default()));
            row.push(tr.y_factual[o.t].to_string());
            row.push(tr.y_counterfactual[o.t].to_string());
            row.push(tr.noise[o.t].to_string());
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        coeffs: ds.coeffs.clone(),
        normalization: ds.normalization(),
        config: ds.config.clone(),
        patients: ds
            .patients
            .iter()
            .map(|p| {
                let q = &p.trajectory.params;
                PatientMeta {
                    id: p.id(),
                    split: p.split,
                    group: q.group,
                    arm: q.arm,
                    rho: q.rho,
                    k: q.k,
                    beta_c: q.beta_c,
                    alpha_r: q.alpha_r,
                    beta_r: q.beta_r,
                    seed: q.seed.to_string(),
                }
            })
            .collect(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Structural(format!("metadata encoding: {e}")))?;
    let mpath = metadata_path(path);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            record: 0,
            msg: format!("{other:?}"),
        },
    }
}

struct RowParser<'a> {
    path: &'a Path,
    line: u64,
}

impl RowParser<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            record: self.line,
            msg: msg.into(),
        }
    }

    fn num<T: std::str::FromStr>(&self, field: &str, col: &str) -> Result<T> {
        field
            .parse()
            .map_err(|_| self.err(format!("column {col}: cannot parse {field:?}")))
    }

    fn flag(&self, field: &str, col: &str) -> Result<bool> {
        match field {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.err(format!("column {col}: expected 0/1, got {field:?}"))),
        }
    }
}

#[derive(Default)]
struct PatientRows {
    split: Option<Split>,
    arm: Option<Arm>,
    x_static: Vec<f64>,
    obs: Vec<ObservationRecord>,
    y_factual: Vec<f64>,
    y_counterfactual: Vec<f64>,
    noise: Vec<f64>,
}

pub fn load(path: &Path) -> Result<Dataset> {
    let mpath = metadata_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let meta: Metadata = toml::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        record: 0,
        msg: e.to_string(),
    })?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Parse {
            path: mpath,
            record: 0,
            msg: format!("unsupported schema version {}", meta.schema_version),
        });
    }
    let n_static = meta.config.intensity.n_static;
    let expected = header(n_static);

    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(String::from)
        .collect();
    if got != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            record: 1,
            msg: format!("unexpected header {got:?}"),
        });
    }

    let mut rows: BTreeMap<u32, PatientRows> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                record: line,
                msg: e.to_string(),
            }
        })?;
        let rp = RowParser {
            path,
            line: rec.position().map(|p| p.line()).unwrap_or(0),
        };
        if rec.len() != expected.len() {
            return Err(rp.err(format!("expected {} fields, got {}", expected.len(), rec.len())));
        }
        let id: u32 = rp.num(&rec[0], "patient_id")?;
        let split = Split::parse(&rec[1]).ok_or_else(|| rp.err(format!("unknown split {:?}", &rec[1])))?;
        let arm = Arm::parse(&rec[2]).ok_or_else(|| rp.err(format!("unknown arm {:?}", &rec[2])))?;
        let t: usize = rp.num(&rec[3], "t")?;
        let observed = rp.flag(&rec[4], "observed")?;
        let y_observed = if rec[5].is_empty() {
            None
        } else {
            Some(rp.num::<f64>(&rec[5], "y_observed")?)
        };
        if observed != y_observed.is_some() {
            return Err(rp.err("y_observed must be present exactly when observed = 1"));
        }
        let entry = rows.entry(id).or_default();
        if entry.obs.len() != t {
            return Err(rp.err(format!("patient {id}: expected day {}, got {t}", entry.obs.len())));
        }
        if *entry.split.get_or_insert(split) != split || *entry.arm.get_or_insert(arm) != arm {
            return Err(rp.err(format!("patient {id}: split/arm changes between rows")));
        }
        if t == 0 {
            for j in 0..n_static {
                let f = &rec[9 + j];
                if !f.is_empty() {
                    entry.x_static.push(rp.num(f, "x_static")?);
                }
            }
        }
        entry.obs.push(ObservationRecord {
            t,
            observed,
            lambda_true: rp.num(&rec[8], "lambda_true")?,
            treatment_chemo: rp.flag(&rec[6], "chemo")?,
            treatment_radio: rp.flag(&rec[7], "radio")?,
            y_observed,
        });
        let base = 9 + n_static;
        entry.y_factual.push(rp.num(&rec[base], "y_factual")?);
        entry.y_counterfactual.push(rp.num(&rec[base + 1], "y_counterfactual")?);
        entry.noise.push(rp.num(&rec[base + 2], "noise")?);
    }

    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        record: 0,
        msg,
    };
    if rows.len() != meta.patients.len() {
        return Err(bad(format!(
            "{} patients in observations, {} in metadata",
            rows.len(),
            meta.patients.len()
        )));
    }
    let horizon = meta.config.sim.horizon_days;
    let patients = meta
        .patients
        .into_iter()
        .map(|pm| {
            let r = rows
                .remove(&pm.id)
                .ok_or_else(|| bad(format!("patient {} has no observation rows", pm.id)))?;
            if r.obs.len() != horizon {
                return Err(bad(format!("patient {} has {} days, expected {horizon}", pm.id, r.obs.len())));
            }
            if r.split != Some(pm.split) || r.arm != Some(pm.arm) {
                return Err(bad(format!("patient {} disagrees with metadata", pm.id)));
            }
            let seed = pm
                .seed
                .parse()
                .map_err(|_| bad(format!("patient {}: bad seed {:?}", pm.id, pm.seed)))?;
            Ok(PatientRecord {
                split: pm.split,
                trajectory: PatientTrajectory {
                    patient_id: pm.id,
                    params: PatientParams {
                        rho: pm.rho,
                        k: pm.k,
                        beta_c: pm.beta_c,
                        alpha_r: pm.alpha_r,
                        beta_r: pm.beta_r,
                        group: pm.group,
                        arm: pm.arm,
                        seed,
                    },
                    y_factual: r.y_factual,
                    y_counterfactual: r.y_counterfactual,
                    noise: r.noise,
                },
                x_static: r.x_static,
                observations: r.obs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: meta.config,
        coeffs: meta.coeffs,
        patients,
    })
}
