//! Scalar loss primitives recorded on a tape.
//!
//! Batched inputs are `[B, F]`; per-sample sums are averaged over `B`. A
//! 1-D input is one sample.

use crate::autodiff::{Tape, Tensor, Var};
use crate::Result;

/// Probability clamp applied before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

fn batch_size(tape: &Tape, x: Var) -> f64 {
    let shape = tape.shape(x);
    if shape.len() <= 1 {
        1.0
    } else {
        shape[0] as f64
    }
}

/// `KL(N(mu, exp(logvar)) || N(0, I))`, summed over latent dimensions and
/// averaged over the batch.
pub fn kl_diag_gaussian(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.square(mu);
    let var = tape.exp(logvar);
    let t = tape.add(mu2, var)?;
    let t = tape.sub(t, logvar)?;
    let t = tape.add_scalar(t, -1.0);
    let s = tape.sum(t);
    Ok(tape.scale(s, 0.5 / batch_size(tape, mu)))
}

/// Mean of `-[t·ln p + (1-t)·ln(1-p)]` with `p` clamped to
/// `[PROB_CLIP, 1 - PROB_CLIP]`.
pub fn binary_cross_entropy(tape: &mut Tape, p: Var, target: Var) -> Result<Var> {
    let p = tape.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP);
    let log_p = tape.log(p)?;
    let one_minus_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(one_minus_p, 1.0);
    let log_q = tape.log(one_minus_p)?;
    let one_minus_t = tape.neg(target);
    let one_minus_t = tape.add_scalar(one_minus_t, 1.0);
    let a = tape.mul(target, log_p)?;
    let b = tape.mul(one_minus_t, log_q)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

/// Binary cross-entropy of `sigmoid(logit)`, as `softplus(z) - t·z`.
///
/// Equal to [`binary_cross_entropy`] on `sigmoid(z)` wherever the clamp is
/// inactive, and keeps a non-vanishing gradient for confidently wrong
/// logits.
pub fn bce_with_logits(tape: &mut Tape, logit: Var, target: Var) -> Result<Var> {
    let sp = tape.softplus(logit);
    let tz = tape.mul(target, logit)?;
    let l = tape.sub(sp, tz)?;
    Ok(tape.mean(l))
}

/// Per-sample `||a - b||²`, averaged over the batch.
pub fn squared_error(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d);
    let s = tape.sum(d2);
    Ok(tape.scale(s, 1.0 / batch_size(tape, a)))
}

/// Per-sample `||a - b||₁`, averaged over the batch.
pub fn l1_error(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d1 = tape.abs(d);
    let s = tape.sum(d1);
    Ok(tape.scale(s, 1.0 / batch_size(tape, a)))
}

/// Mean over all elements of `(a - b)²`.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d2 = tape.square(d);
    Ok(tape.mean(d2))
}

/// Targets as a `[B, 1]` constant.
pub fn target_column(tape: &mut Tape, targets: &[f64]) -> Var {
    tape.constant(
        Tensor::new(vec![targets.len(), 1], targets.to_vec()).expect("column sized by input"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, grad_check_many};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    fn scalar_kl(mu: &[f64], lv: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::vector(mu.to_vec()));
        let l = tape.constant(Tensor::vector(lv.to_vec()));
        let k = kl_diag_gaussian(&mut tape, m, l).unwrap();
        tape.value(k).item().unwrap()
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(scalar_kl(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((scalar_kl(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_and_gradients_check() {
        for seed in 0..10 {
            let mu = random(&[3, 4], seed, -2.0, 2.0);
            let lv = random(&[3, 4], seed + 100, -2.0, 2.0);
            let r = grad_check_many(
                |t, v| kl_diag_gaussian(t, v[0], v[1]),
                &[mu.clone(), lv.clone()],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "seed {seed}: {}", r.max_rel_error);
            let mut tape = Tape::new();
            let (m, l) = (tape.constant(mu), tape.constant(lv));
            let k = kl_diag_gaussian(&mut tape, m, l).unwrap();
            assert!(tape.value(k).item().unwrap() >= 0.0);
        }
    }

    fn bce_value(p: &[f64], t: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::vector(p.to_vec()));
        let tv = tape.constant(Tensor::vector(t.to_vec()));
        let l = binary_cross_entropy(&mut tape, pv, tv).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn bce_half_is_ln2() {
        assert!((bce_value(&[0.5], &[0.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_value(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-15);
        let near = bce_value(&[1.0 - PROB_CLIP], &[1.0]);
        assert!(near > 0.0 && (near - PROB_CLIP).abs() < 1e-12, "{near}");
        // fully certain input is clamped, never ln(0)
        assert!(bce_value(&[1.0], &[0.0]).is_finite());
    }

    #[test]
    fn bce_batch_mean_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..32).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..32).map(|_| rng.random_range(0..2) as f64).collect();
        let expected: f64 = p
            .iter()
            .zip(&t)
            .map(|(p, t)| -(t * p.ln() + (1.0 - t) * (1.0 - p).ln()))
            .sum::<f64>()
            / 32.0;
        assert!((bce_value(&p, &t) - expected).abs() < 1e-14);
    }

    #[test]
    fn bce_with_logits_agrees_with_probability_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z: Vec<f64> = (0..16).map(|_| rng.random_range(-6.0..6.0)).collect();
        let t: Vec<f64> = (0..16).map(|_| rng.random_range(0..2) as f64).collect();
        let p: Vec<f64> = z.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::vector(z));
        let tv = tape.constant(Tensor::vector(t.clone()));
        let l = bce_with_logits(&mut tape, zv, tv).unwrap();
        let from_logits = tape.value(l).item().unwrap();
        assert!((from_logits - bce_value(&p, &t)).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_check() {
        for seed in 0..10 {
            let a = random(&[4, 5], seed, -1.0, 1.0);
            let b = random(&[4, 5], seed + 50, -1.0, 1.0);
            for f in [squared_error, mse] {
                let r =
                    grad_check_many(|t, v| f(t, v[0], v[1]), &[a.clone(), b.clone()], 1e-5, 1e-4)
                        .unwrap();
                assert!(r.passed);
            }
            // L1 checked away from the kink
            let mut shifted = b.clone();
            for (s, x) in shifted.data_mut().iter_mut().zip(a.data()) {
                if (x - *s).abs() < 0.1 {
                    *s = x - 0.3;
                }
            }
            let r = grad_check_many(
                |t, v| l1_error(t, v[0], v[1]),
                &[a.clone(), shifted],
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed);

            let p = random(&[8], seed, 0.05, 0.95);
            let tgt = Tensor::vector((0..8).map(|i| (i % 2) as f64).collect());
            let r = grad_check(
                |t, pv| {
                    let tv = t.constant(tgt.clone());
                    binary_cross_entropy(t, pv, tv)
                },
                &p,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed);
            let z = random(&[8], seed + 7, -4.0, 4.0);
            let r = grad_check(
                |t, zv| {
                    let tv = t.constant(tgt.clone());
                    bce_with_logits(t, zv, tv)
                },
                &z,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed);
        }
    }
}
