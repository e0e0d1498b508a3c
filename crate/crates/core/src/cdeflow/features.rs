//! Control-path construction from forecast windows.
//!
//! Encoder channels: `[time, x_static…, chemo, radio, volume, observed?]`.
//! Decoder channels: `[time, chemo, radio]`. Treatment channels carry the
//! running dose count (or the raw daily indicator), time is divided by the
//! simulated period and volume by the maximal volume.

use serde::{Deserialize, Serialize};

use super::spline::{CubicSpline, LinearInterp};
use super::ModelConfig;
use crate::datastore::{ForecastWindow, Normalization};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Divisor applied to running dose counts.
pub const DOSE_SCALE: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Cubic,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TreatmentEncoding {
    /// Running number of doses given so far.
    Cumulative,
    /// Daily 0/1 indicator.
    Indicator,
}

#[derive(Clone, Debug, PartialEq)]
enum Channel<S> {
    Cubic(CubicSpline<S>),
    Linear(LinearInterp<S>),
}

/// Multichannel interpolant of knot vectors, evaluable with derivative anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPath<S> {
    knots: Vec<S>,
    channels: Vec<Channel<S>>,
}

impl<S: Scalar> ControlPath<S> {
    pub fn knots(&self) -> &[S] {
        &self.knots
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn value(&self, t: S) -> Vec<S> {
        self.channels
            .iter()
            .map(|c| match c {
                Channel::Cubic(s) => s.value(t),
                Channel::Linear(l) => l.value(t),
            })
            .collect()
    }

    pub fn derivative(&self, t: S) -> Vec<S> {
        self.channels
            .iter()
            .map(|c| match c {
                Channel::Cubic(s) => s.derivative(t),
                Channel::Linear(l) => l.derivative(t),
            })
            .collect()
    }
}

/// Interpolates `(time, channel values)` knots channel by channel.
pub fn build_control_path<S: Scalar>(knots: &[(f64, Vec<f64>)], kind: Interpolation) -> Result<ControlPath<S>> {
    let first = knots
        .first()
        .ok_or_else(|| Error::Structural("control path needs at least one knot".into()))?;
    let c = first.1.len();
    if knots.iter().any(|(_, v)| v.len() != c) {
        return Err(Error::Structural("knots have differing channel counts".into()));
    }
    let t: Vec<S> = knots.iter().map(|(t, _)| S::of(*t)).collect();
    let channels = (0..c)
        .map(|j| {
            let y: Vec<S> = knots.iter().map(|(_, v)| S::of(v[j])).collect();
            Ok(match kind {
                Interpolation::Cubic => Channel::Cubic(CubicSpline::natural(&t, &y)?),
                Interpolation::Linear => Channel::Linear(LinearInterp::new(&t, &y)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlPath { knots: t, channels })
}

pub fn encoder_channels(cfg: &ModelConfig, n_static: usize) -> usize {
    4 + n_static + usize::from(cfg.observed_flag)
}

pub const DECODER_CHANNELS: usize = 3;

/// Encoder knots in window-relative days (`0` = first lookback day). Knots sit
/// on the first observed day, every later observed or treatment day, and the
/// origin. Volumes between observations carry the last observed value.
pub fn encoder_knots(w: &ForecastWindow, norm: &Normalization, cfg: &ModelConfig) -> Result<Vec<(f64, Vec<f64>)>> {
    let start = w.history.first().map(|d| d.t).unwrap_or(w.origin);
    let first = w
        .history
        .iter()
        .position(|d| d.observed)
        .ok_or_else(|| Error::Structural(format!("window at day {} has no observed history", w.origin)))?;
    let mut chemo = w.chemo_before as f64;
    let mut radio = w.radio_before as f64;
    for d in &w.history[..first] {
        chemo += f64::from(u8::from(d.chemo));
        radio += f64::from(u8::from(d.radio));
    }
    let mut last_y = 0.0;
    let mut knots = Vec::new();
    for (i, d) in w.history.iter().enumerate().skip(first) {
        chemo += f64::from(u8::from(d.chemo));
        radio += f64::from(u8::from(d.radio));
        if let Some(y) = d.y {
            last_y = y;
        }
        let is_knot = i == first || d.observed || d.chemo || d.radio || d.t == w.origin;
        if !is_knot {
            continue;
        }
        let mut v = Vec::with_capacity(encoder_channels(cfg, w.x_static.len()));
        v.push(d.t as f64 / norm.time_scale);
        v.extend_from_slice(&w.x_static);
        match cfg.treatment_encoding {
            TreatmentEncoding::Cumulative => {
                v.push(chemo / DOSE_SCALE);
                v.push(radio / DOSE_SCALE);
            }
            TreatmentEncoding::Indicator => {
                v.push(f64::from(u8::from(d.chemo)));
                v.push(f64::from(u8::from(d.radio)));
            }
        }
        v.push(last_y / norm.volume_scale);
        if cfg.observed_flag {
            v.push(f64::from(u8::from(d.observed)));
        }
        knots.push(((d.t - start) as f64, v));
    }
    Ok(knots)
}

/// Decoder knots at `origin + k`, `k = 0..=max_horizon`, relative to the origin.
pub fn decoder_knots(w: &ForecastWindow, norm: &Normalization, cfg: &ModelConfig) -> Vec<(f64, Vec<f64>)> {
    let origin_day = w.history.last().expect("non-empty history");
    let (mut chemo, mut radio) = (0.0, 0.0);
    let mut knots = Vec::with_capacity(w.future_plan.len() + 1);
    let first = match cfg.treatment_encoding {
        TreatmentEncoding::Cumulative => vec![w.origin as f64 / norm.time_scale, 0.0, 0.0],
        TreatmentEncoding::Indicator => vec![
            w.origin as f64 / norm.time_scale,
            f64::from(u8::from(origin_day.chemo)),
            f64::from(u8::from(origin_day.radio)),
        ],
    };
    knots.push((0.0, first));
    for (k, &(c, r)) in w.future_plan.iter().enumerate() {
        let t = (w.origin + k + 1) as f64 / norm.time_scale;
        let v = match cfg.treatment_encoding {
            TreatmentEncoding::Cumulative => {
                chemo += f64::from(u8::from(c));
                radio += f64::from(u8::from(r));
                vec![t, chemo / DOSE_SCALE, radio / DOSE_SCALE]
            }
            TreatmentEncoding::Indicator => vec![t, f64::from(u8::from(c)), f64::from(u8::from(r))],
        };
        knots.push(((k + 1) as f64, v));
    }
    knots
}

/// A window reduced to everything the batched solver needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedWindow<S> {
    pub patient_id: u32,
    pub origin: usize,
    /// Encoder channel values at the first observed day (input of `g`).
    pub init: Vec<S>,
    /// Encoder control derivatives per solver step, `steps × 3 × channels`.
    pub enc_deriv: Vec<S>,
    pub dec_deriv: Vec<S>,
    /// Normalized targets, zero where unobserved.
    pub targets: Vec<S>,
    /// 1 where a target is observed.
    pub target_mask: Vec<S>,
    /// 1 where the horizon day lies inside the simulated period.
    pub grid_mask: Vec<S>,
    pub dn: Vec<S>,
    pub lambda_true: Vec<S>,
}

/// Control derivatives at the start, midpoint and end of every solver step on
/// `[0, span]`, laid out `steps × 3 × channels`. Step ends that touch the first
/// or last knot from outside take the outside limit (zero), so the latent state
/// stays fixed outside the knot range.
fn sample_step_derivatives<S: Scalar>(path: &ControlPath<S>, span: f64, h: f64, kind: Interpolation) -> Vec<S> {
    let steps = (span / h).round() as usize;
    let c = path.n_channels();
    let (lo, hi) = match (path.knots().first(), path.knots().last()) {
        (Some(a), Some(b)) => (a.as_f64(), b.as_f64()),
        _ => (0.0, 0.0),
    };
    let zeros = vec![S::zero(); c];
    let mut out = Vec::with_capacity(steps * 3 * c);
    for j in 0..steps {
        let a = j as f64 * h;
        let b = a + h;
        let m = a + h / 2.0;
        match kind {
            Interpolation::Linear => {
                let d = path.derivative(S::of(m));
                for _ in 0..3 {
                    out.extend_from_slice(&d);
                }
            }
            Interpolation::Cubic => {
                out.extend(if a >= hi { zeros.clone() } else { path.derivative(S::of(a)) });
                out.extend(path.derivative(S::of(m)));
                out.extend(if b <= lo { zeros.clone() } else { path.derivative(S::of(b)) });
            }
        }
    }
    out
}

pub fn prepare_window<S: Scalar>(
    w: &ForecastWindow,
    norm: &Normalization,
    cfg: &ModelConfig,
) -> Result<PreparedWindow<S>> {
    let lookback = (w.history.len() - 1) as f64;
    let enc_knots = encoder_knots(w, norm, cfg)?;
    let enc_path: ControlPath<S> = build_control_path(&enc_knots, cfg.interpolation)?;
    let dec_path: ControlPath<S> = build_control_path(&decoder_knots(w, norm, cfg), cfg.interpolation)?;
    let h = cfg.solver_step;
    let mask = |b: bool| if b { S::one() } else { S::zero() };
    Ok(PreparedWindow {
        patient_id: w.patient_id,
        origin: w.origin,
        init: enc_knots[0].1.iter().map(|&v| S::of(v)).collect(),
        enc_deriv: sample_step_derivatives(&enc_path, lookback, h, cfg.interpolation),
        dec_deriv: sample_step_derivatives(&dec_path, w.max_horizon() as f64, h, cfg.interpolation),
        targets: w
            .targets
            .iter()
            .map(|t| S::of(t.unwrap_or(0.0) / norm.volume_scale))
            .collect(),
        target_mask: w.targets.iter().map(|t| mask(t.is_some())).collect(),
        grid_mask: (0..w.max_horizon()).map(|k| mask(k < w.valid)).collect(),
        dn: w.target_dn.iter().map(|&d| mask(d)).collect(),
        lambda_true: w.lambda_true.iter().map(|&l| S::of(l)).collect(),
    })
}
