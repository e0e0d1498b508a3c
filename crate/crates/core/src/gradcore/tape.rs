//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the nodes in reverse insertion order, which is a reverse topological order
//! because inputs always precede their consumers.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_into, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{sigmoid, tanh, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a + s * b`
    Axpy(usize, usize, S),
    Scale(usize, S),
    Tanh(usize),
    Sigmoid(usize),
    /// Row-wise product of a `d × c` matrix field with a constant control vector.
    Contract {
        field: usize,
        control: Tensor<S>,
    },
    StopGrad,
    ConcatRows(Vec<usize>),
    SumAll(usize),
    /// `Σ coef · (pred − target)²`
    WeightedSq {
        pred: usize,
        target: Tensor<S>,
        coef: Tensor<S>,
    },
    /// `Σ coef · BCE(clamp(prob), target)`
    Bce {
        prob: usize,
        target: Tensor<S>,
        coef: Tensor<S>,
        lo: S,
        hi: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every node reachable from a backward root.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Constant input; gradients are computed for it but never stored anywhere.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Bind a stored parameter; gradients flow back into `store` on [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
        Error::Structural(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    /// Adds a `1 × n` bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Self::shape_err("add_bias", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        let n = av.cols();
        let b = bv.data();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (x, &y) in row.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddBias(a.0, bias.0)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Self::shape_err(what, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// `a + s · b`
    pub fn axpy(&mut self, a: Var, b: Var, s: S) -> Result<Var> {
        self.same_shape("axpy", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + s * y);
        Ok(self.push(out, Op::Axpy(a.0, b.0, s)))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    /// Treats each row of `field` (`B × d·c`) as a `d × c` matrix and multiplies
    /// it with the matching row of the constant `control` (`B × c`).
    pub fn contract(&mut self, field: Var, control: Tensor<S>) -> Result<Var> {
        let fv = self.value(field);
        let (b, dc) = fv.shape();
        let c = control.cols();
        if control.rows() != b || c == 0 || dc % c != 0 {
            return Err(Self::shape_err("contract", fv.shape(), control.shape()));
        }
        let d = dc / c;
        let mut out = Tensor::zeros(b, d);
        for r in 0..b {
            let f = fv.row_slice(r);
            let x = control.row_slice(r);
            for i in 0..d {
                let mut acc = S::zero();
                for j in 0..c {
                    acc += f[i * c + j] * x[j];
                }
                out.set(r, i, acc);
            }
        }
        Ok(self.push(out, Op::Contract { field: field.0, control }))
    }

    /// Identity in the forward pass; blocks all gradient flow backwards.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGrad)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Structural("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Self::shape_err("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    /// `Σ coef · (pred − target)²`, a scalar.
    pub fn weighted_sq(&mut self, pred: Var, target: Tensor<S>, coef: Tensor<S>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || pv.shape() != coef.shape() {
            return Err(Self::shape_err("weighted_sq", pv.shape(), target.shape()));
        }
        let mut acc = S::zero();
        for ((&p, &t), &c) in pv.data().iter().zip(target.data()).zip(coef.data()) {
            if c != S::zero() {
                acc += c * (p - t) * (p - t);
            }
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::WeightedSq {
                pred: pred.0,
                target,
                coef,
            },
        ))
    }

    /// `Σ coef · −[t·ln p + (1−t)·ln(1−p)]` with `p` clamped into `[lo, hi]`.
    pub fn bce(&mut self, prob: Var, target: Tensor<S>, coef: Tensor<S>, lo: S, hi: S) -> Result<Var> {
        let pv = self.value(prob);
        if pv.shape() != target.shape() || pv.shape() != coef.shape() {
            return Err(Self::shape_err("bce", pv.shape(), target.shape()));
        }
        let mut acc = S::zero();
        for ((&p, &t), &c) in pv.data().iter().zip(target.data()).zip(coef.data()) {
            let p = p.max(lo).min(hi);
            acc -= c * (t * p.ln() + (S::one() - t) * (S::one() - p).ln());
        }
        Ok(self.push(
            Tensor::scalar(acc),
            Op::Bce {
                prob: prob.0,
                target,
                coef,
                lo,
                hi,
            },
        ))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).shape() != (1, 1) {
            return Err(Error::Structural(format!(
                "backward root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(S::one()));

        fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], i: usize, g: Tensor<S>) {
            match &mut grads[i] {
                Some(existing) => existing.axpy_in_place(S::one(), &g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::StopGrad => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm_into(&g, false, bv, true, S::zero(), &mut ga);
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm_into(av, true, &g, false, S::zero(), &mut gb);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddBias(a, bias) => {
                    let n = g.cols();
                    let mut gb = Tensor::zeros(1, n);
                    for row in g.data().chunks_exact(n) {
                        for (s, &x) in gb.data_mut().iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[*b].value, |x, y| x * y);
                    let gb = g.zip_map(&self.nodes[*a].value, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Axpy(a, b, s) => {
                    let s = *s;
                    acc(&mut grads, *b, g.map(|x| x * s));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * (S::one() - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (S::one() - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Contract { field, control } => {
                    let fv = &self.nodes[*field].value;
                    let (b, dc) = fv.shape();
                    let c = control.cols();
                    let d = dc / c;
                    let mut gf = Tensor::zeros(b, dc);
                    let gfd = gf.data_mut();
                    for r in 0..b {
                        let x = control.row_slice(r);
                        let gr = g.row_slice(r);
                        for i in 0..d {
                            for j in 0..c {
                                gfd[r * dc + i * c + j] = gr[i] * x[j];
                            }
                        }
                    }
                    acc(&mut grads, *field, gf);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let rows = self.nodes[p].value.rows();
                        let slice = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(&mut grads, p, Tensor::from_vec(rows, cols, slice)?);
                        off += rows;
                    }
                }
                Op::SumAll(a) => {
                    let av = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::filled(av.rows(), av.cols(), g.get(0, 0)));
                }
                Op::WeightedSq { pred, target, coef } => {
                    let pv = &self.nodes[*pred].value;
                    let two = S::one() + S::one();
                    let go = g.get(0, 0);
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for (k, x) in gp.data_mut().iter_mut().enumerate() {
                        let c = coef.data()[k];
                        if c != S::zero() {
                            *x = go * two * c * (pv.data()[k] - target.data()[k]);
                        }
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::Bce {
                    prob,
                    target,
                    coef,
                    lo,
                    hi,
                } => {
                    let pv = &self.nodes[*prob].value;
                    let go = g.get(0, 0);
                    let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                    for (k, x) in gp.data_mut().iter_mut().enumerate() {
                        let p = pv.data()[k];
                        if p > *lo && p < *hi {
                            let t = target.data()[k];
                            *x = go * coef.data()[k] * (-t / p + (S::one() - t) / (S::one() - p));
                        }
                    }
                    acc(&mut grads, *prob, gp);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds every parameter adjoint into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore<S>) -> Result<()> {
        let grads = self.backward(root)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::params::Block;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(
            "w",
            Block::Embed,
            Tensor::from_vec(2, 2, vec![0.3, -1.0, 2.0, 5.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum_all(w);
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0; 4]);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Block::Embed, Tensor::scalar(2.0));
        let b = store.add("b", Block::IntensityHead, Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let sb = tape.stop_grad(vb);
        let prod = tape.mul(va, sb).unwrap();
        tape.backward_into(prod, &mut store).unwrap();
        assert_eq!(store.grad(a).data(), &[3.0]);
        assert_eq!(store.grad(b).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::zeros(2, 1));
        assert!(matches!(tape.backward(v), Err(Error::Structural(_))));
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Block::Embed, Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let v = tape.param(&store, x);
        let sq = tape.mul(v, v).unwrap();
        let y = tape.axpy(sq, v, 2.0).unwrap();
        tape.backward_into(y, &mut store).unwrap();
        // d/dx (x² + 2x) = 2x + 2
        assert_eq!(store.grad(x).data(), &[8.0]);
    }
}
