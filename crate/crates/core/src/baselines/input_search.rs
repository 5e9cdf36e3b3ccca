use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::models::{label_of, BinaryPredictor, CfResult};
use crate::nn::{loss, AdamState, ParamStore};
use crate::{Error, Result};

const RESTART_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSearchConfig {
    /// Weight of `||x - x'||²` against the cross-entropy towards `1 - y`.
    pub proximity_weight: f64,
    /// Adam learning rate on `x'`.
    pub step_size: f64,
    pub max_iterations: usize,
    /// Once flipped, stop when the objective changes by less than this.
    pub tolerance: f64,
    /// Greedily revert coordinates after the search.
    pub sparsify: bool,
    /// While still unflipped, the proximity weight is halved every this
    /// many iterations. Zero keeps it fixed.
    pub backoff_every: usize,
    /// Further attempts from `x` plus Gaussian noise when a search ends on
    /// the original side, as happens where every ReLU unit is inactive and
    /// the gradient vanishes.
    pub restarts: usize,
    /// Standard deviation of the restart noise, in model input units.
    pub restart_noise: f64,
}

impl Default for InputSearchConfig {
    fn default() -> Self {
        Self {
            proximity_weight: 0.5,
            step_size: 0.05,
            max_iterations: 1000,
            tolerance: 1e-6,
            sparsify: true,
            backoff_every: 100,
            restarts: 4,
            restart_noise: 1.0,
        }
    }
}

impl InputSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0)
            || self.max_iterations == 0
            || !(self.proximity_weight >= 0.0)
            || !(self.restart_noise >= 0.0)
        {
            return Err(Error::Config(format!(
                "invalid input search settings {self:?}"
            )));
        }
        Ok(())
    }
}

/// Gradient search in feature space starting from `x`, explaining away
/// from the predictor's own label.
pub fn cf_input_search(
    predictor: &BinaryPredictor,
    x: &[f64],
    cfg: &InputSearchConfig,
) -> Result<CfResult> {
    cf_input_search_from(predictor, x, None, cfg)
}

/// As [`cf_input_search`], with the class to move away from given
/// explicitly. When the predictor already assigns `x` to `1 - y` the input
/// is returned unchanged.
pub fn cf_input_search_from(
    predictor: &BinaryPredictor,
    x: &[f64],
    y: Option<u8>,
    cfg: &InputSearchConfig,
) -> Result<CfResult> {
    cfg.validate()?;
    let start = Instant::now();
    let p = predictor.proba_row(x)?;
    let y = y.unwrap_or_else(|| label_of(p));
    let target = 1 - y;
    if label_of(p) == target {
        return Ok(CfResult::new(
            x.to_vec(),
            x.to_vec(),
            y,
            p,
            p,
            start.elapsed().as_secs_f64(),
            0,
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mut iterations = 0;
    let mut x_cf = x.to_vec();
    for attempt in 0..=cfg.restarts {
        let from: Vec<f64> = if attempt == 0 {
            x.to_vec()
        } else {
            x.iter()
                .map(|v| v + cfg.restart_noise * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let (found, steps) = descend(predictor, x, &from, target, cfg)?;
        iterations += steps;
        let flipped = label_of(predictor.proba_row(&found)?) == target;
        if attempt == 0 || flipped {
            x_cf = found;
        }
        if flipped {
            break;
        }
    }
    let mut p_cf = predictor.proba_row(&x_cf)?;
    if cfg.sparsify && label_of(p_cf) == target {
        let (sparse, steps) = sparsify_greedy_to(predictor, x, &x_cf, target)?;
        iterations += steps;
        x_cf = sparse;
        p_cf = predictor.proba_row(&x_cf)?;
    }
    Ok(CfResult::new(
        x.to_vec(),
        x_cf,
        y,
        p,
        p_cf,
        start.elapsed().as_secs_f64(),
        iterations,
    ))
}

/// Adam on `x'` from `from`, with the proximity term measured to `x`.
/// Returns the final point and the iterations used.
fn descend(
    predictor: &BinaryPredictor,
    x: &[f64],
    from: &[f64],
    target: u8,
    cfg: &InputSearchConfig,
) -> Result<(Vec<f64>, usize)> {
    let d = x.len();
    let origin = Tensor::new(vec![1, d], x.to_vec())?;
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::new(vec![1, d], from.to_vec())?);
    let mut adam = AdamState::new(&store, cfg.step_size);
    let mut previous: Option<f64> = None;
    let mut iterations = 0;
    let mut weight = cfg.proximity_weight;
    let mut flipped = false;
    // most recent iterate on the target side
    let mut last_flipped: Option<Vec<f64>> = None;
    while iterations < cfg.max_iterations {
        if !flipped
            && cfg.backoff_every > 0
            && iterations > 0
            && iterations % cfg.backoff_every == 0
        {
            weight *= 0.5;
            previous = None;
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let xv = bound.var(id);
        let x0 = tape.constant(origin.clone());
        let t = loss::target_column(&mut tape, &[f64::from(target)]);
        let z = predictor.logits_frozen(&mut tape, xv)?;
        let ce = loss::bce_with_logits(&mut tape, z, t)?;
        let prox = loss::squared_error(&mut tape, xv, x0)?;
        let prox = tape.scale(prox, weight);
        let objective = tape.add(ce, prox)?;
        let value = tape.value(objective).data()[0];
        flipped = label_of(crate::autodiff::sigmoid(tape.value(z).data()[0])) == target;
        if flipped {
            last_flipped = Some(store.get(id).data().to_vec());
        }
        if flipped && previous.is_some_and(|prev: f64| (prev - value).abs() < cfg.tolerance) {
            break;
        }
        previous = Some(value);
        tape.backward(objective)?;
        let grads = store.grads(&tape, &bound);
        adam.step(&mut store, &grads)?;
        iterations += 1;
    }
    let mut x_cf = store.get(id).data().to_vec();
    if label_of(predictor.proba_row(&x_cf)?) != target {
        if let Some(v) = last_flipped {
            x_cf = v;
        }
    }
    Ok((x_cf, iterations))
}

/// Repeatedly reverts to `x` the single changed coordinate whose reversion
/// moves the predictor's logit least while keeping `x_cf` in the class it
/// is in, until no coordinate can be reverted. Returns the sparser point
/// and the number of reversions.
pub fn sparsify_greedy(
    predictor: &BinaryPredictor,
    x: &[f64],
    x_cf: &[f64],
) -> Result<(Vec<f64>, usize)> {
    let target = label_of(predictor.proba_row(x_cf)?);
    sparsify_greedy_to(predictor, x, x_cf, target)
}

fn sparsify_greedy_to(
    predictor: &BinaryPredictor,
    x: &[f64],
    x_cf: &[f64],
    target: u8,
) -> Result<(Vec<f64>, usize)> {
    if x.len() != x_cf.len() {
        return Err(Error::Data("x and x_cf differ in length".into()));
    }
    let mut current = x_cf.to_vec();
    let mut steps = 0;
    loop {
        let changed: Vec<usize> = (0..x.len()).filter(|&i| current[i] != x[i]).collect();
        if changed.is_empty() {
            break;
        }
        let base = predictor.predict_logits(&Tensor::new(vec![1, x.len()], current.clone())?)?[0];
        let mut rows = Vec::with_capacity(changed.len() * x.len());
        for &i in &changed {
            let mut candidate = current.clone();
            candidate[i] = x[i];
            rows.extend(candidate);
        }
        let logits = predictor.predict_logits(&Tensor::new(vec![changed.len(), x.len()], rows)?)?;
        let best = changed
            .iter()
            .zip(&logits)
            .filter(|(_, &z)| label_of(crate::autodiff::sigmoid(z)) == target)
            .min_by(|a, b| (a.1 - base).abs().total_cmp(&(b.1 - base).abs()));
        match best {
            Some((&i, _)) => {
                current[i] = x[i];
                steps += 1;
            }
            None => break,
        }
    }
    Ok((current, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{PredictorArch, PredictorSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn already_flipped_input_is_returned() {
        let p = BinaryPredictor::linear(&[1.0, 0.0], 0.0).unwrap();
        let r =
            cf_input_search_from(&p, &[2.0, 1.0], Some(0), &InputSearchConfig::default()).unwrap();
        assert_eq!(r.x_cf, r.x);
        assert!(r.valid);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn larger_proximity_weight_approaches_boundary_projection() {
        let w = [1.5, -0.5];
        let b = 0.3;
        let p = BinaryPredictor::linear(&w, b).unwrap();
        let norm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            // a point 0.3 from the boundary on the negative side
            let t: f64 = rng.random_range(-2.0..2.0);
            let on = [
                t * 0.5 / norm - b * w[0] / (norm * norm),
                t * 1.5 / norm - b * w[1] / (norm * norm),
            ];
            let x = [on[0] - 0.3 * w[0] / norm, on[1] - 0.3 * w[1] / norm];
            let s = (w[0] * x[0] + w[1] * x[1] + b) / (norm * norm);
            let proj = [x[0] - s * w[0], x[1] - s * w[1]];
            let mut last = f64::INFINITY;
            for weight in [0.2, 0.5, 1.0] {
                let cfg = InputSearchConfig {
                    proximity_weight: weight,
                    step_size: 0.01,
                    max_iterations: 20000,
                    tolerance: 1e-12,
                    sparsify: false,
                    backoff_every: 0,
                    restarts: 0,
                    restart_noise: 0.0,
                };
                let r = cf_input_search(&p, &x, &cfg).unwrap();
                assert!(r.valid, "{r:?}");
                let off = [r.x_cf[0] - proj[0], r.x_cf[1] - proj[1]];
                // movement is along w only
                let across = (off[0] * w[1] - off[1] * w[0]).abs() / norm;
                assert!(
                    across < 1e-4,
                    "{across} off the normal line at weight {weight}"
                );
                let dist = (off[0] * off[0] + off[1] * off[1]).sqrt();
                assert!(dist < last, "{dist} not below {last}");
                last = dist;
            }
            assert!(last < 0.3);
        }
    }

    #[test]
    fn greedy_reverts_the_redundant_coordinate() {
        // only the first coordinate matters for the flip
        let p = BinaryPredictor::linear(&[2.0, 0.1], -1.0).unwrap();
        let x = [0.0, 0.0];
        let x_cf = [1.0, 0.5];
        let (s, steps) = sparsify_greedy(&p, &x, &x_cf).unwrap();
        // brute force over the four revert subsets
        let mut best: Option<(usize, [f64; 2])> = None;
        for mask in 0..4u8 {
            let c = [
                if mask & 1 != 0 { x[0] } else { x_cf[0] },
                if mask & 2 != 0 { x[1] } else { x_cf[1] },
            ];
            let valid = p.proba_row(&c).unwrap() >= 0.5;
            let changed = (c[0] != x[0]) as usize + (c[1] != x[1]) as usize;
            if valid && best.is_none_or(|(n, _)| changed < n) {
                best = Some((changed, c));
            }
        }
        assert_eq!(s, best.unwrap().1.to_vec());
        assert_eq!(s[1], 0.0);
        assert_eq!(steps, 1);
        let (again, none) = sparsify_greedy(&p, &x, &s).unwrap();
        assert_eq!(again, s);
        assert_eq!(none, 0);
    }

    #[test]
    fn greedy_preserves_validity_and_never_adds_changes() {
        let p = BinaryPredictor::new(PredictorSpec {
            input_dim: 5,
            arch: PredictorArch::Mlp { hidden: vec![8] },
            init_seed: 4,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 100 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x_cf: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let target = label_of(p.proba_row(&x_cf).unwrap());
            if label_of(p.proba_row(&x).unwrap()) == target {
                continue;
            }
            let (s, _) = sparsify_greedy(&p, &x, &x_cf).unwrap();
            assert_eq!(label_of(p.proba_row(&s).unwrap()), target);
            let count = |v: &[f64]| v.iter().zip(&x).filter(|(a, b)| a != b).count();
            assert!(count(&s) <= count(&x_cf));
            checked += 1;
        }
    }

    #[test]
    fn budget_exhaustion_is_invalid() {
        let p = BinaryPredictor::linear(&[0.0, 0.0], 1.0).unwrap();
        let cfg = InputSearchConfig {
            max_iterations: 20,
            ..Default::default()
        };
        let r = cf_input_search(&p, &[0.5, 0.5], &cfg).unwrap();
        assert!(!r.valid);
        assert_eq!(r.iterations, 20 * (cfg.restarts + 1));
        assert_eq!(r.x_cf, r.x);
    }

    #[test]
    fn backoff_reaches_points_a_fixed_weight_cannot() {
        // far from a shallow boundary the fixed-weight optimum stays put
        let p = BinaryPredictor::linear(&[0.2, 0.0], 0.0).unwrap();
        let x = [-3.0, 1.0];
        let fixed = InputSearchConfig {
            backoff_every: 0,
            ..Default::default()
        };
        assert!(!cf_input_search(&p, &x, &fixed).unwrap().valid);
        let r = cf_input_search(&p, &x, &InputSearchConfig::default()).unwrap();
        assert!(r.valid, "{r:?}");
        // the irrelevant coordinate is left alone
        assert_eq!(r.x_cf[1], 1.0);
    }
}
