use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, Layout};
use crate::models::{label_of, BinaryPredictor, CfResult};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Return the nearest unlike neighbour itself.
    Whole,
    /// Copy a growing window of time steps (all channels) from the
    /// neighbour into `x` until the predictor flips.
    GrownSegment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NunConfig {
    pub mode: SegmentMode,
}

impl Default for NunConfig {
    fn default() -> Self {
        Self {
            mode: SegmentMode::Whole,
        }
    }
}

/// Nearest training row (Euclidean) that the predictor assigns to `1 - y`.
/// Training rows are classified on every call; nothing is cached between
/// queries.
pub fn nearest_unlike_neighbor(
    train: &Dataset,
    predictor: &BinaryPredictor,
    x: &[f64],
) -> Result<(usize, u8)> {
    if x.len() != train.dim() {
        return Err(Error::Data(format!(
            "query has {} features, training data {}",
            x.len(),
            train.dim()
        )));
    }
    let y = label_of(predictor.proba_row(x)?);
    let labels = predictor.predict_labels(train.features())?;
    let best = (0..train.len())
        .filter(|&i| labels[i] == 1 - y)
        .map(|i| {
            let d: f64 = train
                .features()
                .row(i)
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            (i, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1));
    match best {
        Some((i, _)) => Ok((i, y)),
        None => Err(Error::NoUnlikeNeighbor),
    }
}

/// Counterfactual by nearest-unlike-neighbour substitution. Segment mode
/// needs a time-series layout; the window is centred on the step where
/// the summed absolute channel difference is largest and grows one step at
/// a time, falling back to the whole neighbour.
pub fn cf_nun(
    train: &Dataset,
    predictor: &BinaryPredictor,
    x: &[f64],
    cfg: &NunConfig,
) -> Result<CfResult> {
    let start = Instant::now();
    let p = predictor.proba_row(x)?;
    let (idx, y) = nearest_unlike_neighbor(train, predictor, x)?;
    let nun = train.features().row(idx);
    let (x_cf, p_cf, iterations) = match cfg.mode {
        SegmentMode::Whole => (nun.to_vec(), predictor.proba_row(nun)?, 0),
        SegmentMode::GrownSegment => {
            let (channels, steps) = match train.layout() {
                Layout::TimeSeries { channels, steps } => (channels.len(), *steps),
                other => {
                    return Err(Error::Config(format!(
                        "segment substitution needs a time-series layout, got {other:?}"
                    )))
                }
            };
            grow_segment(predictor, x, nun, channels, steps, 1 - y)?
        }
    };
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

/// Rows are channel-major: value of channel `c` at step `t` sits at
/// `c * steps + t`.
fn grow_segment(
    predictor: &BinaryPredictor,
    x: &[f64],
    nun: &[f64],
    channels: usize,
    steps: usize,
    target: u8,
) -> Result<(Vec<f64>, f64, usize)> {
    let gap: Vec<f64> = (0..steps)
        .map(|t| {
            (0..channels)
                .map(|c| (nun[c * steps + t] - x[c * steps + t]).abs())
                .sum()
        })
        .collect();
    let center = (0..steps)
        .max_by(|&a, &b| gap[a].total_cmp(&gap[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let (mut lo, mut hi) = (center, center + 1);
    let mut iterations = 0;
    loop {
        let candidate = splice(x, nun, channels, steps, lo, hi);
        let p = predictor.proba_row(&candidate)?;
        iterations += 1;
        if label_of(p) == target || (lo == 0 && hi == steps) {
            return Ok((candidate, p, iterations));
        }
        // grow on both sides, spilling over when one side hits the edge
        for _ in 0..2 {
            if lo > 0 && (hi == steps || center - lo <= hi - 1 - center) {
                lo -= 1;
            } else if hi < steps {
                hi += 1;
            }
        }
    }
}

/// `x` with steps `lo..hi` of every channel taken from `nun`.
pub fn splice(
    x: &[f64],
    nun: &[f64],
    channels: usize,
    steps: usize,
    lo: usize,
    hi: usize,
) -> Vec<f64> {
    let mut out = x.to_vec();
    for c in 0..channels {
        let r = c * steps + lo..c * steps + hi;
        out[r.clone()].copy_from_slice(&nun[r]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn tabular(rows: Vec<f64>, d: usize) -> Dataset {
        let n = rows.len() / d;
        Dataset::new(
            Tensor::new(vec![n, d], rows).unwrap(),
            vec![0; n],
            (0..d).map(|i| format!("f{i}")).collect(),
            Layout::Tabular,
        )
        .unwrap()
    }

    #[test]
    fn three_point_brute_force() {
        // class 1 iff x0 > 0
        let p = BinaryPredictor::linear(&[10.0, 0.0], 0.0).unwrap();
        let train = tabular(vec![1.0, 3.0, 2.0, 0.5, -1.0, 0.0], 2);
        let x = [-0.5, 0.2];
        let mut best = (usize::MAX, f64::INFINITY);
        for i in 0..3 {
            let r = train.features().row(i);
            if p.proba_row(r).unwrap() >= 0.5 {
                let d = (r[0] - x[0]).powi(2) + (r[1] - x[1]).powi(2);
                if d < best.1 {
                    best = (i, d);
                }
            }
        }
        let (idx, y) = nearest_unlike_neighbor(&train, &p, &x).unwrap();
        assert_eq!((idx, y), (best.0, 0));
        assert_eq!(idx, 1);
        let r = cf_nun(&train, &p, &x, &NunConfig::default()).unwrap();
        assert!(r.valid);
        assert_eq!(r.x_cf, train.features().row(1));
    }

    #[test]
    fn missing_unlike_class_is_an_error() {
        let p = BinaryPredictor::linear(&[10.0, 0.0], 0.0).unwrap();
        let train = tabular(vec![-1.0, 3.0, -2.0, 0.5], 2);
        assert!(matches!(
            nearest_unlike_neighbor(&train, &p, &[-1.0, 0.0]),
            Err(Error::NoUnlikeNeighbor)
        ));
    }

    #[test]
    fn grown_segment_is_nun_inside_and_x_outside() {
        let (channels, steps) = (2, 10);
        // the predictor sums channel 0 over steps 4..7
        let mut w = vec![0.0; channels * steps];
        for t in 4..7 {
            w[t] = 1.0;
        }
        let p = BinaryPredictor::linear(&w, -1.5).unwrap();
        let x = vec![0.0; channels * steps];
        let mut nun_row = vec![0.0; channels * steps];
        for (i, v) in nun_row.iter_mut().enumerate() {
            *v = 0.1 * (i % steps) as f64 + 0.3;
        }
        nun_row[5] = 3.0;
        let train = Dataset::new(
            Tensor::new(vec![1, channels * steps], nun_row.clone()).unwrap(),
            vec![1],
            (0..channels * steps).map(|i| format!("f{i}")).collect(),
            Layout::TimeSeries {
                channels: vec!["a".into(), "b".into()],
                steps,
            },
        )
        .unwrap();
        let r = cf_nun(
            &train,
            &p,
            &x,
            &NunConfig {
                mode: SegmentMode::GrownSegment,
            },
        )
        .unwrap();
        assert!(r.valid);
        let inside: Vec<usize> = (0..steps).filter(|&t| r.x_cf[t] != x[t]).collect();
        let (lo, hi) = (inside[0], inside[inside.len() - 1] + 1);
        assert!(lo <= 5 && hi > 5);
        assert_eq!(r.x_cf, splice(&x, &nun_row, channels, steps, lo, hi));
        assert!(hi - lo < steps);
    }
}
