use serde::{Deserialize, Serialize};

use super::kde::KdeModel;
use crate::models::CfResult;
use crate::stats;
use crate::{Error, Result};

/// Default threshold, as a fraction of the feature's standard deviation,
/// above which a feature counts as changed.
pub const CHANGED_FRACTION: f64 = 0.1;

/// Mean squared difference.
pub fn proximity_mse(x: &[f64], x_cf: &[f64]) -> f64 {
    assert_eq!(x.len(), x_cf.len(), "proximity of unequal vectors");
    if x.is_empty() {
        return 0.0;
    }
    x.iter()
        .zip(x_cf)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

/// `(changed_count, axis_alignment)` with the default threshold.
pub fn sparsity_stats(x: &[f64], x_cf: &[f64], stds: &[f64]) -> (usize, f64) {
    sparsity_stats_at(x, x_cf, stds, CHANGED_FRACTION)
}

/// Count of `|delta_i| > fraction * std_i` and `max|delta| / sum|delta|`
/// (1 when nothing moved).
pub fn sparsity_stats_at(x: &[f64], x_cf: &[f64], stds: &[f64], fraction: f64) -> (usize, f64) {
    let deltas: Vec<f64> = x_cf.iter().zip(x).map(|(a, b)| (a - b).abs()).collect();
    let changed = deltas
        .iter()
        .zip(stds)
        .filter(|(d, s)| **d > fraction * **s)
        .count();
    let total: f64 = deltas.iter().sum();
    let alignment = if total == 0.0 {
        1.0
    } else {
        deltas.iter().copied().fold(0.0, f64::max) / total
    };
    (changed, alignment)
}

/// Counterfactuals of one method, one per test query, in query order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: String,
    pub results: Vec<CfResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n: usize,
    pub validity: f64,
    pub kde_mean: f64,
    pub kde_median: f64,
    /// Fraction of queries where this method's log-likelihood is at least
    /// the reference method's.
    pub win_rate: f64,
    pub reference: String,
    pub proximity: f64,
    pub changed_mean: f64,
    pub alignment_mean: f64,
    pub seconds_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub reports: Vec<EvalReport>,
    /// `head_to_head[a][b]`: fraction of queries with `l_a >= l_b`.
    pub head_to_head: Vec<Vec<f64>>,
    pub methods: Vec<String>,
    /// Per-method, per-query KDE log-likelihoods.
    pub loglik: Vec<Vec<f64>>,
}

/// Evaluates every method on the same queries. `reference` names the
/// method the win rate is measured against; when absent the first method
/// is used.
pub fn compare_methods(
    methods: &[MethodResults],
    kde: &KdeModel,
    stds: &[f64],
    changed_fraction: f64,
    reference: &str,
) -> Result<Comparison> {
    let first = methods
        .first()
        .ok_or_else(|| Error::Eval("no methods to compare".into()))?;
    for m in methods {
        let same = m.results.len() == first.results.len()
            && m.results
                .iter()
                .zip(&first.results)
                .all(|(a, b)| a.x == b.x);
        if !same {
            return Err(Error::Eval(format!(
                "method {} was run on different queries than {}",
                m.method, first.method
            )));
        }
    }
    if first.results.is_empty() {
        return Err(Error::Eval("no queries to compare".into()));
    }
    let loglik: Vec<Vec<f64>> = methods
        .iter()
        .map(|m| m.results.iter().map(|r| kde.loglik(&r.x_cf)).collect())
        .collect();
    let n = first.results.len();
    let wins =
        |a: &[f64], b: &[f64]| a.iter().zip(b).filter(|(x, y)| x >= y).count() as f64 / n as f64;
    let head_to_head: Vec<Vec<f64>> = loglik
        .iter()
        .map(|a| loglik.iter().map(|b| wins(a, b)).collect())
        .collect();
    let ref_idx = methods
        .iter()
        .position(|m| m.method == reference)
        .unwrap_or(0);
    let reports = methods
        .iter()
        .zip(&loglik)
        .enumerate()
        .map(|(k, (m, ll))| {
            let sparsity: Vec<(usize, f64)> = m
                .results
                .iter()
                .map(|r| sparsity_stats_at(&r.x, &r.x_cf, stds, changed_fraction))
                .collect();
            let mean_of = |f: &dyn Fn(&CfResult) -> f64| {
                stats::mean(&m.results.iter().map(f).collect::<Vec<_>>())
            };
            EvalReport {
                method: m.method.clone(),
                n,
                validity: mean_of(&|r| f64::from(u8::from(r.valid))),
                kde_mean: stats::mean(ll),
                kde_median: stats::median(ll),
                win_rate: head_to_head[k][ref_idx],
                reference: methods[ref_idx].method.clone(),
                proximity: mean_of(&|r| proximity_mse(&r.x, &r.x_cf)),
                changed_mean: stats::mean(&sparsity.iter().map(|s| s.0 as f64).collect::<Vec<_>>()),
                alignment_mean: stats::mean(&sparsity.iter().map(|s| s.1).collect::<Vec<_>>()),
                seconds_mean: mean_of(&|r| r.seconds),
            }
        })
        .collect();
    Ok(Comparison {
        reports,
        head_to_head,
        methods: methods.iter().map(|m| m.method.clone()).collect(),
        loglik,
    })
}
