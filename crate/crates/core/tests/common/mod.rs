#![allow(dead_code)]

use cdeforecast::cdeflow::{
    build_control_path, prepare_window, Batch, CdeModel, ControlPath, Heads, Interpolation, ModelConfig, PreparedWindow,
    Routing,
};
use cdeforecast::datastore::{generate_dataset, windows, DataConfig, Dataset, PlanArm, Split};
use cdeforecast::gradcore::{Activation, Block, Mlp, ParamStore, Tape, Tensor};
use cdeforecast::objectives::{batch_losses, tape_ce, tape_wmse, Weighting};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn small_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        encoder_hidden: 3,
        decoder_hidden: 3,
        map_hidden: 3,
        solver_step: 0.5,
        ..ModelConfig::default()
    }
}

pub fn small_dataset(seed: u64, gamma: f64) -> Dataset {
    let mut c = DataConfig {
        n_train: 3,
        n_val: 0,
        n_test: 2,
        seed,
        ..Default::default()
    };
    c.intensity.gamma = gamma;
    generate_dataset(&c).expect("dataset")
}

/// A few random training windows of a small dataset, prepared for `cfg`.
pub fn random_windows(seed: u64, n: usize, cfg: &ModelConfig) -> (Dataset, Vec<PreparedWindow<f64>>) {
    let ds = small_dataset(seed, 4.0);
    let norm = ds.normalization();
    let all: Vec<_> = windows(&ds, Split::Train, PlanArm::Factual).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = (0..n)
        .map(|_| prepare_window(&all[rng.gen_range(0..all.len())], &norm, cfg).expect("window"))
        .collect();
    (ds, picked)
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn store_loss_and_grad(
    store: &mut ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> cdeforecast::gradcore::Var,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let root = build(&mut tape, store);
    store.zero_grads();
    tape.backward_into(root, store).unwrap();
    (tape.value(root).data()[0], store.flat_grads())
}

fn fd_over_store(
    store: &ParamStore<f64>,
    build: &dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> cdeforecast::gradcore::Var,
) -> Vec<f64> {
    let x = store.flat_values();
    let mut probe = store.clone();
    fd_grad(
        |p| {
            probe.set_flat_values(p).unwrap();
            let mut tape = Tape::new();
            let root = build(&mut tape, &probe);
            tape.value(root).data()[0]
        },
        &x,
        1e-6,
    )
}

/// MLP with a random output activation under a weighted squared loss.
pub fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let act = [Activation::Tanh, Activation::Sigmoid, Activation::Identity][rng.gen_range(0..3)];
    let (i, h, o) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4));
    let mlp = Mlp::new(&mut store, Block::Embed, i, h, rng.gen_range(1..3), o, act, &mut rng);
    let x = random_tensor(&mut rng, 4, i, -2.0, 2.0);
    let t = random_tensor(&mut rng, 4, o, -1.0, 1.0);
    let c = random_tensor(&mut rng, 4, o, 0.1, 2.0);
    let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let b = mlp.bind(tape, s);
        let xin = tape.constant(x.clone());
        let y = b.forward(tape, xin).unwrap();
        tape.weighted_sq(y, t.clone(), c.clone()).unwrap()
    };
    let (_, g) = store_loss_and_grad(&mut store, &build);
    rel_err(&g, &fd_over_store(&store, &build))
}

/// Spline derivative against central differences of the spline value,
/// sampled strictly inside knot intervals.
pub fn spline_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..8);
    let mut t = 0.0;
    let knots: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|_| {
            t += rng.gen_range(0.5..2.0);
            (t, vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
        })
        .collect();
    let path: ControlPath<f64> = build_control_path(&knots, Interpolation::Cubic).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for w in knots.windows(2) {
        for _ in 0..3 {
            let s = w[0].0 + rng.gen_range(0.05..0.95) * (w[1].0 - w[0].0);
            analytic.extend(path.derivative(s));
            let h = 1e-6;
            let up = path.value(s + h);
            let down = path.value(s - h);
            numeric.extend(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)));
        }
    }
    rel_err(&analytic, &numeric)
}

/// Full encoder → decoder → both maps on a batch, differentiated jointly
/// through the outcome and intensity losses.
pub fn cde_gradient_error(seed: u64) -> f64 {
    let cfg = small_model_config();
    let (ds, data) = random_windows(seed, 3, &cfg);
    let model = CdeModel::<f64>::new(cfg.clone(), Heads::Both, ds.n_static(), seed).unwrap();
    let members: Vec<&PreparedWindow<f64>> = data.iter().collect();
    let mut batch = Batch::from_windows(&members).unwrap();
    // mark every horizon as an outcome target so the y map sees gradient
    batch.target_mask = batch.grid_mask.clone();
    let n_static = ds.n_static();
    let build = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
        let probe = CdeModel::with_params(cfg.clone(), Heads::Both, n_static, 0, s.clone()).unwrap();
        let fwd = probe.forward(tape, &batch, Routing::Joint).unwrap();
        let l = batch_losses(tape, &fwd, &batch, &Weighting::Unweighted, 0.5, 1e-3).unwrap();
        tape.add(l.outcome.unwrap(), l.intensity.unwrap()).unwrap()
    };
    let mut store = model.params().clone();
    let (_, g) = store_loss_and_grad(&mut store, &build);
    rel_err(&g, &fd_over_store(&store, &build))
}

/// Weighted squared error and cross-entropy with respect to their inputs.
pub fn loss_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..12);
    let pred = random_tensor(&mut rng, n, 1, -1.0, 1.0);
    let prob = random_tensor(&mut rng, n, 1, 0.05, 0.95);
    let target = random_tensor(&mut rng, n, 1, -1.0, 1.0);
    let mask = Tensor::from_vec(n, 1, (0..n).map(|i| if i == 0 || rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect()).unwrap();
    let weights = random_tensor(&mut rng, n, 1, 1.0, 20.0);
    let dn = Tensor::from_vec(n, 1, (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
    let grid = Tensor::filled(n, 1, 1.0);
    let eval = |p: &[f64], q: &[f64], grad: bool| -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::from_vec(n, 1, p.to_vec()).unwrap());
        let qv = tape.constant(Tensor::from_vec(n, 1, q.to_vec()).unwrap());
        let (w, _) = tape_wmse(&mut tape, pv, &target, &mask, Some(&weights)).unwrap();
        let c = tape_ce(&mut tape, qv, &dn, &grid).unwrap();
        let root = tape.add(w, c).unwrap();
        let v = tape.value(root).data()[0];
        if !grad {
            return (v, vec![]);
        }
        let g = tape.backward(root).unwrap();
        let mut out = g.wrt(pv).unwrap().data().to_vec();
        out.extend_from_slice(g.wrt(qv).unwrap().data());
        (v, out)
    };
    let (_, analytic) = eval(pred.data(), prob.data(), true);
    let mut x = pred.data().to_vec();
    x.extend_from_slice(prob.data());
    let numeric = fd_grad(|z| eval(&z[..n], &z[n..], false).0, &x, 1e-6);
    rel_err(&analytic, &numeric)
}

/// Largest absolute gradient per block after a backward pass from `which`
/// (`true` = outcome loss, `false` = intensity loss) of a multitask batch.
pub fn routed_block_grads(seed: u64, outcome: bool) -> Vec<(Block, f64)> {
    let cfg = small_model_config();
    let (ds, data) = random_windows(seed, 4, &cfg);
    let mut model = CdeModel::new(cfg, Heads::Both, ds.n_static(), seed).unwrap();
    let members: Vec<&PreparedWindow<f64>> = data.iter().collect();
    let mut batch = Batch::from_windows(&members).unwrap();
    // a batch without outcome targets would make every outcome gradient vanish trivially
    batch.target_mask = batch.grid_mask.clone();
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &batch, Routing::DetachIntensity).unwrap();
    let l = batch_losses(&mut tape, &fwd, &batch, &Weighting::OwnIntensity, 0.8, 1e-3).unwrap();
    let root = if outcome { l.outcome.unwrap() } else { l.intensity.unwrap() };
    model.params_mut().zero_grads();
    tape.backward_into(root, model.params_mut()).unwrap();
    Block::ALL
        .iter()
        .map(|&b| (b, model.params().block_grad_max_abs(b)))
        .collect()
}

/// Weighted outcome loss of a multitask batch with the model's own detached
/// weights versus the same weights supplied as constants. Returns the largest
/// gradient gap over all parameters and whether nudging every intensity-map
/// parameter leaves the constant-weight loss bit-identical.
pub fn weight_detach_check(seed: u64) -> (f64, bool) {
    let cfg = small_model_config();
    let (ds, data) = random_windows(seed, 4, &cfg);
    let model = CdeModel::new(cfg.clone(), Heads::Both, ds.n_static(), seed).unwrap();
    let members: Vec<&PreparedWindow<f64>> = data.iter().collect();
    let batch = Batch::from_windows(&members).unwrap();
    let c_min = 1e-3;
    let grads = |store: &ParamStore<f64>, w: &Weighting<f64>| -> (f64, Vec<f64>, Tensor<f64>) {
        let mut m = CdeModel::with_params(cfg.clone(), Heads::Both, ds.n_static(), seed, store.clone()).unwrap();
        let mut tape = Tape::new();
        let fwd = m.forward(&mut tape, &batch, Routing::DetachIntensity).unwrap();
        let l = batch_losses(&mut tape, &fwd, &batch, w, 0.8, c_min).unwrap();
        let root = l.outcome.unwrap();
        m.params_mut().zero_grads();
        tape.backward_into(root, m.params_mut()).unwrap();
        let lam = tape.value(fwd.lambda_hat.unwrap()).clone();
        (tape.value(root).data()[0], m.params().flat_grads(), lam)
    };
    let (_, g_own, lam) = grads(model.params(), &Weighting::OwnIntensity);
    let w = Tensor::from_vec(lam.rows(), 1, cdeforecast::objectives::make_weights(lam.data(), c_min)).unwrap();
    let fixed = Weighting::Fixed(w);
    let (base, g_fixed, _) = grads(model.params(), &fixed);
    let gap = g_own.iter().zip(&g_fixed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut nudged = model.params().clone();
    let ids: Vec<_> = nudged
        .iter()
        .filter(|(_, p)| p.block == Block::IntensityHead)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        nudged.value_mut(id).data_mut().iter_mut().for_each(|x| *x += 0.1);
    }
    let (moved, _, _) = grads(&nudged, &fixed);
    (gap, moved == base)
}
