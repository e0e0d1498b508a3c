mod common;

use cdeforecast::gradcore::Block;
use common::*;

const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn check(name: &str, f: fn(u64) -> f64) {
    for seed in 0..INSTANCES {
        let e = f(seed);
        assert!(e < TOL, "{name} instance {seed}: relative error {e:e}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    check("mlp", mlp_gradient_error);
}

#[test]
fn spline_derivatives_match_finite_differences() {
    check("spline", spline_gradient_error);
}

#[test]
fn cde_unroll_gradients_match_finite_differences() {
    check("cde", cde_gradient_error);
}

#[test]
fn loss_gradients_match_finite_differences() {
    check("losses", loss_gradient_error);
}

#[test]
fn intensity_loss_only_reaches_intensity_map() {
    for seed in 0..5 {
        for (b, g) in routed_block_grads(seed, false) {
            if b == Block::IntensityHead {
                assert!(g > 0.0);
            } else {
                assert_eq!(g, 0.0, "{b} received intensity gradient");
            }
        }
    }
}

#[test]
fn outcome_loss_never_reaches_intensity_map() {
    for seed in 0..5 {
        for (b, g) in routed_block_grads(seed, true) {
            if b == Block::IntensityHead {
                assert_eq!(g, 0.0);
            } else {
                assert!(g > 0.0, "{b} received no outcome gradient");
            }
        }
    }
}
