use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// The five networks of an encoder/decoder CDE forecaster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    /// Embedding `g` of the first observation into the latent space.
    Embed,
    /// Encoder vector field `f_θ`.
    EncoderField,
    /// Decoder vector field `f_φ`.
    DecoderField,
    /// Outcome map `f_ψ^y`.
    OutcomeHead,
    /// Intensity map `f_ψ^λ`.
    IntensityHead,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Embed,
        Block::EncoderField,
        Block::DecoderField,
        Block::OutcomeHead,
        Block::IntensityHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Embed => "g",
            Block::EncoderField => "f_theta",
            Block::DecoderField => "f_phi",
            Block::OutcomeHead => "psi_y",
            Block::IntensityHead => "psi_lambda",
        }
    }

    pub fn from_name(s: &str) -> Option<Block> {
        Block::ALL.into_iter().find(|b| b.name() == s)
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub block: Block,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub(crate) m: Tensor<S>,
    pub(crate) v: Tensor<S>,
}

/// Learnable parameters with matching gradient accumulators and Adam moments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    pub(crate) step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, block: Block, value: Tensor<S>) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            block,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn blocks(&self) -> Vec<Block> {
        let mut b: Vec<Block> = self.params.iter().map(|p| p.block).collect();
        b.sort();
        b.dedup();
        b
    }

    pub fn has_block(&self, block: Block) -> bool {
        self.params.iter().any(|p| p.block == block)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
        }
    }

    /// Clears gradients, Adam moments and the step counter, keeping values.
    pub fn reset_optimizer(&mut self) {
        for p in &mut self.params {
            p.grad.fill(S::zero());
            p.m.fill(S::zero());
            p.v.fill(S::zero());
        }
        self.step = 0;
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor<S>) {
        self.params[id.0].grad.axpy_in_place(S::one(), g);
    }

    /// Largest absolute gradient entry within `block`; `0` when absent.
    pub fn block_grad_max_abs(&self, block: Block) -> S {
        self.params
            .iter()
            .filter(|p| p.block == block)
            .flat_map(|p| p.grad.data().iter())
            .fold(S::zero(), |acc, g| acc.max(g.abs()))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values flattened in registration order.
    pub fn flat_values(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<S> {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Structural(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copy parameter values (not optimizer state) from a structurally identical store.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.params.len() != other.params.len()
            || self
                .params
                .iter()
                .zip(&other.params)
                .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
        {
            return Err(Error::Structural("parameter layouts differ".into()));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value = b.value.clone();
        }
        Ok(())
    }
}
