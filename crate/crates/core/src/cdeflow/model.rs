use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{encoder_channels, ControlPath, Interpolation, PreparedWindow, TreatmentEncoding, DECODER_CHANNELS};
use crate::error::{Error, Result};
use crate::gradcore::{Activation, Block, BoundMlp, Mlp, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub map_layers: usize,
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub map_hidden: usize,
    /// Fixed RK4 step in days; must divide one day evenly.
    pub solver_step: f64,
    pub interpolation: Interpolation,
    pub observed_flag: bool,
    pub treatment_encoding: TreatmentEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 32,
            encoder_layers: 3,
            decoder_layers: 2,
            map_layers: 1,
            encoder_hidden: 8,
            decoder_hidden: 8,
            map_hidden: 8,
            solver_step: 0.25,
            interpolation: Interpolation::Cubic,
            observed_flag: true,
            treatment_encoding: TreatmentEncoding::Cumulative,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.encoder_hidden == 0 || self.decoder_hidden == 0 || self.map_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        let per_day = 1.0 / self.solver_step;
        if !(self.solver_step > 0.0 && self.solver_step <= 1.0) || (per_day - per_day.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "solver_step {} must divide one day evenly",
                self.solver_step
            )));
        }
        Ok(())
    }
}

/// Which output maps a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heads {
    Outcome,
    Intensity,
    Both,
}

impl Heads {
    pub fn outcome(self) -> bool {
        matches!(self, Heads::Outcome | Heads::Both)
    }

    pub fn intensity(self) -> bool {
        matches!(self, Heads::Intensity | Heads::Both)
    }
}

/// How gradients reach the intensity map during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// The intensity map sees the latent path as a differentiable input.
    Joint,
    /// The intensity map sees a detached copy of the latent path.
    DetachIntensity,
}

#[derive(Clone, Debug, PartialEq)]
struct Networks {
    embed: Mlp,
    enc_field: Mlp,
    dec_field: Mlp,
    y_head: Option<Mlp>,
    lambda_head: Option<Mlp>,
}

/// Embedding, encoder and decoder vector fields and output maps over one
/// parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct CdeModel<S> {
    config: ModelConfig,
    heads: Heads,
    n_static: usize,
    seed: u64,
    nets: Networks,
    params: ParamStore<S>,
}

/// Windows stacked for the batched solver. Per-horizon tensors are laid out
/// horizon-major: row `k·B + b` holds horizon `k + 1` of window `b`.
#[derive(Clone, Debug)]
pub struct Batch<S> {
    pub size: usize,
    pub horizon: usize,
    pub init: Tensor<S>,
    /// Per encoder step: controls at start, midpoint and end.
    pub enc_ctrl: Vec<[Tensor<S>; 3]>,
    pub dec_ctrl: Vec<[Tensor<S>; 3]>,
    pub targets: Tensor<S>,
    pub target_mask: Tensor<S>,
    pub grid_mask: Tensor<S>,
    pub dn: Tensor<S>,
    pub lambda_true: Tensor<S>,
}

fn step_controls<S: Scalar>(windows: &[&PreparedWindow<S>], get: impl Fn(&PreparedWindow<S>) -> &[S], c: usize) -> Result<Vec<[Tensor<S>; 3]>> {
    let len = get(windows[0]).len();
    if windows.iter().any(|w| get(w).len() != len) || !len.is_multiple_of(3 * c) {
        return Err(Error::Structural("windows in a batch must share one solver grid".into()));
    }
    let steps = len / (3 * c);
    let b = windows.len();
    (0..steps)
        .map(|j| {
            let mk = |k: usize| {
                let mut data = Vec::with_capacity(b * c);
                for w in windows {
                    let off = (j * 3 + k) * c;
                    data.extend_from_slice(&get(w)[off..off + c]);
                }
                Tensor::from_vec(b, c, data)
            };
            Ok([mk(0)?, mk(1)?, mk(2)?])
        })
        .collect()
}

impl<S: Scalar> Batch<S> {
    pub fn from_windows(windows: &[&PreparedWindow<S>]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Structural("empty batch".into()))?;
        let b = windows.len();
        let horizon = first.targets.len();
        let c_enc = first.init.len();
        let mut init = Vec::with_capacity(b * c_enc);
        for w in windows {
            if w.init.len() != c_enc || w.targets.len() != horizon {
                return Err(Error::Structural("windows in a batch must share shapes".into()));
            }
            init.extend_from_slice(&w.init);
        }
        let stack = |get: &dyn Fn(&PreparedWindow<S>) -> &[S]| {
            let mut data = Vec::with_capacity(b * horizon);
            for k in 0..horizon {
                for w in windows {
                    data.push(get(w)[k]);
                }
            }
            Tensor::from_vec(horizon * b, 1, data)
        };
        Ok(Batch {
            size: b,
            horizon,
            init: Tensor::from_vec(b, c_enc, init)?,
            enc_ctrl: step_controls(windows, |w| &w.enc_deriv, c_enc)?,
            dec_ctrl: step_controls(windows, |w| &w.dec_deriv, DECODER_CHANNELS)?,
            targets: stack(&|w| &w.targets)?,
            target_mask: stack(&|w| &w.target_mask)?,
            grid_mask: stack(&|w| &w.grid_mask)?,
            dn: stack(&|w| &w.dn)?,
            lambda_true: stack(&|w| &w.lambda_true)?,
        })
    }
}

/// Tape handles produced by one batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub z_origin: Var,
    /// Latent state at each integer horizon, `B × latent`.
    pub states: Vec<Var>,
    /// `H·B × 1`, horizon-major.
    pub y_hat: Option<Var>,
    pub lambda_hat: Option<Var>,
}

/// One classical Runge–Kutta step of `dz = F(z)·dX` with control derivatives
/// `d` at the step's start, midpoint and end.
pub fn rk4_step<S: Scalar>(tape: &mut Tape<S>, field: &BoundMlp, z: Var, h: S, d: &[Tensor<S>; 3]) -> Result<Var> {
    let half = h / S::of(2.0);
    let f1 = field.forward(tape, z)?;
    let k1 = tape.contract(f1, d[0].clone())?;
    let z2 = tape.axpy(z, k1, half)?;
    let f2 = field.forward(tape, z2)?;
    let k2 = tape.contract(f2, d[1].clone())?;
    let z3 = tape.axpy(z, k2, half)?;
    let f3 = field.forward(tape, z3)?;
    let k3 = tape.contract(f3, d[1].clone())?;
    let z4 = tape.axpy(z, k3, h)?;
    let f4 = field.forward(tape, z4)?;
    let k4 = tape.contract(f4, d[2].clone())?;
    let sixth = h / S::of(6.0);
    let third = h / S::of(3.0);
    let mut out = tape.axpy(z, k1, sixth)?;
    out = tape.axpy(out, k2, third)?;
    out = tape.axpy(out, k3, third)?;
    tape.axpy(out, k4, sixth)
}

fn all_zero<S: Scalar>(d: &[Tensor<S>; 3]) -> bool {
    d.iter().all(|t| t.data().iter().all(|v| *v == S::zero()))
}

/// Integrates `dz = F(z)·X'(s) ds` from `t0` to `t1` with fixed step `h`
/// (the last step is shortened to land on `t1`).
pub fn cde_integrate<S: Scalar>(
    tape: &mut Tape<S>,
    field: &BoundMlp,
    z0: Var,
    t0: f64,
    t1: f64,
    h: f64,
    control: &dyn Fn(f64) -> Tensor<S>,
) -> Result<Var> {
    if !(t1 >= t0) || !(h > 0.0) {
        return Err(Error::Domain(format!("cannot integrate from {t0} to {t1} with step {h}")));
    }
    let mut z = z0;
    let mut s = t0;
    while t1 - s > 1e-12 * (1.0 + t1.abs()) {
        let step = h.min(t1 - s);
        let d = [control(s), control(s + step / 2.0), control(s + step)];
        if !all_zero(&d) {
            z = rk4_step(tape, field, z, S::of(step), &d)?;
        }
        s += step;
    }
    Ok(z)
}

impl<S: Scalar> CdeModel<S> {
    pub fn new(config: ModelConfig, heads: Heads, n_static: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c_enc = encoder_channels(&config, n_static);
        let d = config.latent_dim;
        let embed = Mlp::new(&mut params, Block::Embed, c_enc, config.encoder_hidden, 1, d, Activation::Identity, &mut rng);
        let enc_field = Mlp::new(
            &mut params,
            Block::EncoderField,
            d,
            config.encoder_hidden,
            config.encoder_layers,
            d * c_enc,
            Activation::Tanh,
            &mut rng,
        );
        let dec_field = Mlp::new(
            &mut params,
            Block::DecoderField,
            d,
            config.decoder_hidden,
            config.decoder_layers,
            d * DECODER_CHANNELS,
            Activation::Tanh,
            &mut rng,
        );
        let y_head = heads.outcome().then(|| {
            Mlp::new(&mut params, Block::OutcomeHead, d, config.map_hidden, config.map_layers, 1, Activation::Identity, &mut rng)
        });
        let lambda_head = heads.intensity().then(|| {
            Mlp::new(&mut params, Block::IntensityHead, d, config.map_hidden, config.map_layers, 1, Activation::Sigmoid, &mut rng)
        });
        Ok(CdeModel {
            config,
            heads,
            n_static,
            seed,
            nets: Networks {
                embed,
                enc_field,
                dec_field,
                y_head,
                lambda_head,
            },
            params,
        })
    }

    /// Rebuilds the architecture around stored parameter values; `seed` only
    /// records the initialisation the values descend from.
    pub fn with_params(config: ModelConfig, heads: Heads, n_static: usize, seed: u64, params: ParamStore<S>) -> Result<Self> {
        let mut model = Self::new(config, heads, n_static, seed)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn heads(&self) -> Heads {
        self.heads
    }

    pub fn n_static(&self) -> usize {
        self.n_static
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn encoder_channels(&self) -> usize {
        self.nets.embed.in_dim()
    }

    /// Batched encode, decode and heads on `tape`.
    pub fn forward(&self, tape: &mut Tape<S>, batch: &Batch<S>, routing: Routing) -> Result<Forward> {
        if batch.init.cols() != self.encoder_channels() {
            return Err(Error::Structural(format!(
                "batch has {} encoder channels, model expects {}",
                batch.init.cols(),
                self.encoder_channels()
            )));
        }
        let h = S::of(self.config.solver_step);
        let steps_per_day = (1.0 / self.config.solver_step).round() as usize;
        if batch.dec_ctrl.len() != batch.horizon * steps_per_day {
            return Err(Error::Structural("decoder grid does not match the solver step".into()));
        }
        let embed = self.nets.embed.bind(tape, &self.params);
        let enc = self.nets.enc_field.bind(tape, &self.params);
        let dec = self.nets.dec_field.bind(tape, &self.params);
        let x0 = tape.constant(batch.init.clone());
        let mut z = embed.forward(tape, x0)?;
        for d in &batch.enc_ctrl {
            if !all_zero(d) {
                z = rk4_step(tape, &enc, z, h, d)?;
            }
        }
        let z_origin = z;
        let mut states = Vec::with_capacity(batch.horizon);
        for (j, d) in batch.dec_ctrl.iter().enumerate() {
            if !all_zero(d) {
                z = rk4_step(tape, &dec, z, h, d)?;
            }
            if (j + 1) % steps_per_day == 0 {
                states.push(z);
            }
        }
        let stacked = tape.concat_rows(&states)?;
        let y_hat = match &self.nets.y_head {
            Some(m) => Some(m.bind(tape, &self.params).forward(tape, stacked)?),
            None => None,
        };
        let lambda_hat = match &self.nets.lambda_head {
            Some(m) => {
                let input = match routing {
                    Routing::Joint => stacked,
                    Routing::DetachIntensity => tape.stop_grad(stacked),
                };
                Some(m.bind(tape, &self.params).forward(tape, input)?)
            }
            None => None,
        };
        Ok(Forward {
            z_origin,
            states,
            y_hat,
            lambda_hat,
        })
    }

    /// `z(t)` from `z(t0) = g(X(t0))` along an encoder control path.
    pub fn encode(&self, path: &ControlPath<S>, t0: f64, t: f64) -> Result<Vec<S>> {
        if path.n_channels() != self.encoder_channels() {
            return Err(Error::Structural("control path channel count does not match the model".into()));
        }
        let mut tape = Tape::new();
        let embed = self.nets.embed.bind(&mut tape, &self.params);
        let field = self.nets.enc_field.bind(&mut tape, &self.params);
        let x0 = tape.constant(Tensor::row(path.value(S::of(t0))));
        let z0 = embed.forward(&mut tape, x0)?;
        let control = |s: f64| Tensor::row(path.derivative(S::of(s)));
        let z = cde_integrate(&mut tape, &field, z0, t0, t, self.config.solver_step, &control)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// `z_t(t + τ)` from `z` along a decoder control path starting at `t`.
    pub fn decode(&self, z: &[S], plan: &ControlPath<S>, t: f64, tau: f64) -> Result<Vec<S>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("horizon {tau} must be positive")));
        }
        if plan.n_channels() != DECODER_CHANNELS || z.len() != self.config.latent_dim {
            return Err(Error::Structural("decoder input shapes do not match the model".into()));
        }
        let mut tape = Tape::new();
        let field = self.nets.dec_field.bind(&mut tape, &self.params);
        let z0 = tape.constant(Tensor::row(z.to_vec()));
        let control = |s: f64| Tensor::row(plan.derivative(S::of(s)));
        let out = cde_integrate(&mut tape, &field, z0, t, t + tau, self.config.solver_step, &control)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Normalized outcome and intensity for one latent state; a head the
    /// model does not carry yields `None`.
    pub fn apply_heads(&self, z: &[S]) -> Result<(Option<S>, Option<S>)> {
        let run = |m: &Option<Mlp>| -> Result<Option<S>> {
            match m {
                Some(m) => Ok(Some(crate::gradcore::mlp_forward(&self.params, m, z)?[0])),
                None => Ok(None),
            }
        };
        Ok((run(&self.nets.y_head)?, run(&self.nets.lambda_head)?))
    }

    /// Bound networks for custom tape computations (tests, gradient checks).
    pub fn bind_fields(&self, tape: &mut Tape<S>) -> (BoundMlp, BoundMlp, BoundMlp) {
        (
            self.nets.embed.bind(tape, &self.params),
            self.nets.enc_field.bind(tape, &self.params),
            self.nets.dec_field.bind(tape, &self.params),
        )
    }
}
