use super::params::{Block, ParamStore};
use crate::scalar::Scalar;

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: S::of(lr),
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            eps: S::of(1e-8),
        }
    }

    /// Updates every parameter from its accumulated gradient.
    pub fn step(&self, store: &mut ParamStore<S>) {
        self.step_filtered(store, |_| true);
    }

    /// Updates only parameters belonging to `blocks`; others keep values and moments.
    pub fn step_blocks(&self, store: &mut ParamStore<S>, blocks: &[Block]) {
        self.step_filtered(store, |b| blocks.contains(&b));
    }

    fn step_filtered(&self, store: &mut ParamStore<S>, keep: impl Fn(Block) -> bool) {
        store.step += 1;
        let t = store.step as i32;
        let bc1 = S::one() - self.beta1.powi(t);
        let bc2 = S::one() - self.beta2.powi(t);
        let step_size = self.lr / bc1;
        for p in store.params_mut().iter_mut().filter(|p| keep(p.block)) {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (S::one() - self.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (S::one() - self.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((x, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *x -= step_size * mi / ((vi / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::tensor::Tensor;

    fn one_param(v: f64) -> (ParamStore<f64>, crate::gradcore::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Block::Embed, Tensor::scalar(v));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = one_param(1.25);
        Adam::new(5e-4).step(&mut s);
        assert_eq!(s.value(id).data(), &[1.25]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // m̂ = 1, v̂ = 1  ⇒  Δ = −lr · 1 / (1 + 1e-8)
        let (mut s, id) = one_param(0.0);
        s.accumulate_grad(id, &Tensor::scalar(1.0));
        Adam::new(5e-4).step(&mut s);
        let expected = -5e-4 / (1.0 + 1e-8);
        assert!((s.value(id).get(0, 0) - expected).abs() < 1e-18);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let (mut a, ia) = one_param(0.7);
        let (mut b, _) = one_param(0.7);
        for s in [&mut a, &mut b] {
            s.accumulate_grad(ia, &Tensor::scalar(-0.3));
            Adam::new(1e-2).step(s);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn frozen_blocks_do_not_move() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Block::Embed, Tensor::scalar(1.0));
        let b = s.add("b", Block::IntensityHead, Tensor::scalar(1.0));
        s.accumulate_grad(a, &Tensor::scalar(1.0));
        s.accumulate_grad(b, &Tensor::scalar(1.0));
        Adam::new(0.1).step_blocks(&mut s, &[Block::IntensityHead]);
        assert_eq!(s.value(a).get(0, 0), 1.0);
        assert!(s.value(b).get(0, 0) < 1.0);
    }
}
