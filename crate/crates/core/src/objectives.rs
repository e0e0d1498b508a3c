//! Outcome, weighted-outcome and intensity losses, plus their tape versions.
//!
//! All reductions are means. Outcome losses average over observed terms only,
//! the intensity loss over every valid `(t, τ)` grid term.

use serde::{Deserialize, Serialize};

use crate::cdeflow::{Batch, Forward};
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::scalar::Scalar;

/// Numerical clamp applied to predicted intensities inside logarithms.
pub const LAMBDA_CLAMP: f64 = 1e-7;
/// Default lower truncation of predicted intensities before inversion.
pub const DEFAULT_C_MIN: f64 = 0.001;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub wmse: f64,
    pub ce: f64,
    pub mt: f64,
    pub n_target_terms: usize,
    pub mean_weight: f64,
}

fn check_len(n: usize, others: &[usize]) -> Result<()> {
    if others.iter().any(|&m| m != n) {
        return Err(Error::Structural(format!("loss inputs have mismatched lengths {n} vs {others:?}")));
    }
    Ok(())
}

pub fn loss_mse<S: Scalar>(preds: &[S], targets: &[S], mask: &[S]) -> Result<S> {
    let ones = vec![S::one(); preds.len()];
    loss_wmse(preds, targets, mask, &ones)
}

/// `1 / max(λ̂, c_min)`. The result is plain data, so nothing flows back into λ̂.
pub fn make_weights<S: Scalar>(lambda_hat: &[S], c_min: S) -> Vec<S> {
    lambda_hat.iter().map(|&l| S::one() / l.max(c_min)).collect()
}

pub fn loss_wmse<S: Scalar>(preds: &[S], targets: &[S], mask: &[S], weights: &[S]) -> Result<S> {
    check_len(preds.len(), &[targets.len(), mask.len(), weights.len()])?;
    let mut acc = S::zero();
    let mut n = S::zero();
    for i in 0..preds.len() {
        if mask[i] != S::zero() {
            let e = preds[i] - targets[i];
            acc += weights[i] * e * e;
            n += S::one();
        }
    }
    Ok(if n == S::zero() { S::zero() } else { acc / n })
}

pub fn loss_ce<S: Scalar>(lambda_hat: &[S], dn: &[S]) -> Result<S> {
    check_len(lambda_hat.len(), &[dn.len()])?;
    if lambda_hat.is_empty() {
        return Ok(S::zero());
    }
    let (lo, hi) = (S::of(LAMBDA_CLAMP), S::of(1.0 - LAMBDA_CLAMP));
    let mut acc = S::zero();
    for (&p, &t) in lambda_hat.iter().zip(dn) {
        let p = p.max(lo).min(hi);
        acc -= t * p.ln() + (S::one() - t) * (S::one() - p).ln();
    }
    Ok(acc / S::of(lambda_hat.len() as f64))
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha must lie strictly inside (0, 1), got {alpha}")));
    }
    Ok(())
}

pub fn loss_multitask<S: Scalar>(wmse: S, ce: S, alpha: f64) -> Result<S> {
    check_alpha(alpha)?;
    Ok((S::one() - S::of(alpha)) * wmse + S::of(alpha) * ce)
}

/// Masked-mean weighted squared error on the tape. Weights enter as constants.
pub fn tape_wmse<S: Scalar>(
    tape: &mut Tape<S>,
    pred: Var,
    targets: &Tensor<S>,
    mask: &Tensor<S>,
    weights: Option<&Tensor<S>>,
) -> Result<(Var, usize)> {
    let n = mask.data().iter().filter(|&&m| m != S::zero()).count();
    let scale = if n == 0 { S::zero() } else { S::one() / S::of(n as f64) };
    let coef = match weights {
        Some(w) => mask.zip_map(w, |m, w| m * w * scale),
        None => mask.map(|m| m * scale),
    };
    Ok((tape.weighted_sq(pred, targets.clone(), coef)?, n))
}

/// Mean binary cross-entropy over the terms where `grid_mask` is one.
pub fn tape_ce<S: Scalar>(tape: &mut Tape<S>, lambda: Var, dn: &Tensor<S>, grid_mask: &Tensor<S>) -> Result<Var> {
    let n = grid_mask.data().iter().filter(|&&m| m != S::zero()).count();
    let scale = if n == 0 { S::zero() } else { S::one() / S::of(n as f64) };
    let coef = grid_mask.map(|m| m * scale);
    tape.bce(lambda, dn.clone(), coef, S::of(LAMBDA_CLAMP), S::of(1.0 - LAMBDA_CLAMP))
}

/// Source of the inverse-intensity weights in the outcome loss.
#[derive(Clone, Debug)]
pub enum Weighting<S> {
    /// Plain MSE.
    Unweighted,
    /// Weights from the model's own intensity head, detached.
    OwnIntensity,
    /// Externally supplied per-term weights (horizon-major, like the batch).
    Fixed(Tensor<S>),
    /// `1 / λ_true`.
    Oracle,
}

/// Tape nodes for one batch. Summing `outcome` and `intensity` and running a
/// single backward pass gives each parameter block the gradient of exactly the
/// loss it is meant to follow, provided the forward pass detached the
/// intensity map's input.
pub struct BatchLosses {
    pub outcome: Option<Var>,
    pub intensity: Option<Var>,
    pub report: LossReport,
}

pub fn batch_losses<S: Scalar>(
    tape: &mut Tape<S>,
    fwd: &Forward,
    batch: &Batch<S>,
    weighting: &Weighting<S>,
    alpha: f64,
    c_min: f64,
) -> Result<BatchLosses> {
    let weights = match weighting {
        Weighting::Unweighted => None,
        Weighting::OwnIntensity => {
            let l = fwd
                .lambda_hat
                .ok_or_else(|| Error::Structural("own-intensity weighting needs an intensity head".into()))?;
            let v = tape.value(l);
            Some(Tensor::from_vec(v.rows(), v.cols(), make_weights(v.data(), S::of(c_min)))?)
        }
        Weighting::Fixed(w) => Some(w.clone()),
        Weighting::Oracle => Some(batch.lambda_true.map(|l| S::one() / l)),
    };
    let mut report = LossReport::default();
    let outcome = match fwd.y_hat {
        Some(y) => {
            let (v, n) = tape_wmse(tape, y, &batch.targets, &batch.target_mask, weights.as_ref())?;
            report.wmse = tape.value(v).data()[0].as_f64();
            report.n_target_terms = n;
            report.mean_weight = match &weights {
                Some(w) if n > 0 => {
                    let s: f64 = w
                        .data()
                        .iter()
                        .zip(batch.target_mask.data())
                        .filter(|(_, &m)| m != S::zero())
                        .map(|(w, _)| w.as_f64())
                        .sum();
                    s / n as f64
                }
                _ => 1.0,
            };
            Some(v)
        }
        None => None,
    };
    let intensity = match fwd.lambda_hat {
        Some(l) => {
            let v = tape_ce(tape, l, &batch.dn, &batch.grid_mask)?;
            report.ce = tape.value(v).data()[0].as_f64();
            Some(v)
        }
        None => None,
    };
    report.mt = match (outcome, intensity) {
        (Some(_), Some(_)) => loss_multitask(report.wmse, report.ce, alpha)?,
        (Some(_), None) => report.wmse,
        (None, Some(_)) => report.ce,
        (None, None) => return Err(Error::Structural("model has no output head".into())),
    };
    Ok(BatchLosses {
        outcome,
        intensity,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(loss_mse(&[1.0, 3.0, 9.0], &[0.0, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap(), 5.0);
        assert!(loss_mse(&[1.0], &[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(make_weights(&[0.0005, 0.5, 1.0], 0.001), vec![1000.0, 2.0, 1.0]);
    }

    #[test]
    fn wmse_examples() {
        assert_eq!(loss_wmse(&[3.0], &[0.0], &[1.0], &[2.0]).unwrap(), 18.0);
        let p = [0.3, -1.2, 2.0];
        let t = [0.0, 0.5, 1.0];
        let m = [1.0, 1.0, 0.0];
        let mse = loss_mse(&p, &t, &m).unwrap();
        assert_eq!(loss_wmse(&p, &t, &m, &[1.0; 3]).unwrap(), mse);
        let w = make_weights(&[0.5; 3], 0.001);
        assert_abs_diff_eq!(loss_wmse(&p, &t, &m, &w).unwrap(), 2.0 * mse, epsilon = 1e-15);
    }

    #[test]
    fn ce_examples() {
        assert_abs_diff_eq!(loss_ce(&[0.5; 4], &[1.0, 0.0, 1.0, 0.0]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(loss_ce(&[1.0, 0.0], &[1.0, 0.0]).unwrap() < 1e-6);
        assert_abs_diff_eq!(loss_ce(&[0.8, 0.2], &[1.0, 0.0]).unwrap(), 0.223144, epsilon = 1e-6);
    }

    #[test]
    fn multitask_examples() {
        assert_abs_diff_eq!(loss_multitask(1.0, 1.0, 0.8).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(loss_multitask(2.0, 0.0, 0.8).unwrap(), 0.4, epsilon = 1e-15);
        for a in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(loss_multitask(1.0, 1.0, a), Err(Error::Config(_))));
        }
    }

    #[test]
    fn tape_losses_match_slices() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(3, 1, vec![0.3, -1.2, 2.0]).unwrap());
        let t = Tensor::from_vec(3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let m = Tensor::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(3, 1, vec![2.0, 4.0, 8.0]).unwrap();
        let (v, n) = tape_wmse(&mut tape, p, &t, &m, Some(&w)).unwrap();
        assert_eq!(n, 2);
        let expect = loss_wmse(tape.value(p).data(), t.data(), m.data(), w.data()).unwrap();
        assert_abs_diff_eq!(tape.value(v).data()[0], expect, epsilon = 1e-14);

        let l = tape.constant(Tensor::from_vec(3, 1, vec![0.8, 0.2, 0.6]).unwrap());
        let dn = Tensor::from_vec(3, 1, vec![1.0, 0.0, 1.0]).unwrap();
        let g = Tensor::from_vec(3, 1, vec![1.0, 1.0, 0.0]).unwrap();
        let ce = tape_ce(&mut tape, l, &dn, &g).unwrap();
        assert_abs_diff_eq!(tape.value(ce).data()[0], 0.223144, epsilon = 1e-6);
    }

    proptest! {
        #[test]
        fn wmse_bracketed_by_weight_range(
            terms in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0.001f64..1.0, any::<bool>()), 1..40),
        ) {
            let p: Vec<f64> = terms.iter().map(|t| t.0).collect();
            let y: Vec<f64> = terms.iter().map(|t| t.1).collect();
            let m: Vec<f64> = terms.iter().map(|t| f64::from(u8::from(t.3))).collect();
            let w = make_weights(&terms.iter().map(|t| t.2).collect::<Vec<_>>(), 0.001);
            let mse = loss_mse(&p, &y, &m).unwrap();
            let wmse = loss_wmse(&p, &y, &m, &w).unwrap();
            let wmin = w.iter().cloned().fold(f64::INFINITY, f64::min);
            let wmax = w.iter().cloned().fold(0.0, f64::max);
            prop_assert!(mse >= 0.0 && wmse >= 0.0);
            prop_assert!(wmse >= mse * wmin * (1.0 - 1e-12));
            prop_assert!(wmse <= mse * wmax * (1.0 + 1e-12));
        }

        #[test]
        fn ce_nonnegative(l in prop::collection::vec(0.0f64..=1.0, 1..20), seed in any::<u64>()) {
            let dn: Vec<f64> = (0..l.len()).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
            prop_assert!(loss_ce(&l, &dn).unwrap() >= 0.0);
        }
    }
}
