use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Block, ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    fn apply<S: Scalar>(self, tape: &mut Tape<S>, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Fully connected stack: `hidden_layers` tanh layers of width `hidden`, then
/// an affine output layer followed by `output` activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    in_dim: usize,
    out_dim: usize,
    output: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        block: Block,
        in_dim: usize,
        hidden: usize,
        hidden_layers: usize,
        out_dim: usize,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat_n(hidden, hidden_layers));
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut init = |r, c| {
                    let data = (0..r * c)
                        .map(|_| S::of(rng.gen_range(-bound..bound)))
                        .collect();
                    Tensor::from_vec(r, c, data).expect("sized")
                };
                let wt = init(w[0], w[1]);
                let bs = init(1, w[1]);
                (
                    store.add(format!("{block}.w{i}"), block, wt),
                    store.add(format!("{block}.b{i}"), block, bs),
                )
            })
            .collect();
        Mlp {
            layers,
            in_dim,
            out_dim,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    /// `(weight, bias)` parameter ids per layer, input side first.
    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> BoundMlp {
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| (tape.param(store, w), tape.param(store, b)))
                .collect(),
            in_dim: self.in_dim,
            output: self.output,
        }
    }
}

/// An [`Mlp`] whose parameters are already on a tape, reusable across many calls.
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    in_dim: usize,
    output: Activation,
}

impl BoundMlp {
    /// Applies the network to each row of `x` (`B × in_dim`).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.in_dim {
            return Err(Error::Structural(format!(
                "mlp expects {} inputs, got {}",
                self.in_dim,
                tape.value(x).cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            let aff = tape.add_bias(lin, b)?;
            h = if i == last {
                self.output.apply(tape, aff)
            } else {
                tape.tanh(aff)
            };
        }
        Ok(h)
    }
}

/// Single-vector forward pass.
pub fn mlp_forward<S: Scalar>(store: &ParamStore<S>, mlp: &Mlp, input: &[S]) -> Result<Vec<S>> {
    let mut tape = Tape::new();
    let bound = mlp.bind(&mut tape, store);
    let x = tape.constant(Tensor::row(input.to_vec()));
    let y = bound.forward(&mut tape, x)?;
    Ok(tape.value(y).data().to_vec())
}
