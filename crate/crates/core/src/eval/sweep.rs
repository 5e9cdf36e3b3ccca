use serde::{Deserialize, Serialize};

use super::kde::KdeModel;
use super::metrics::MethodResults;
use super::probe::latent_probe;
use crate::autodiff::Tensor;
use crate::config::RunConfig;
use crate::models::{generate_cf, BinaryPredictor};
use crate::nn::LossWeights;
use crate::pipeline::{fit_vae, Prepared};
use crate::stats;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_cf: f64,
    pub validity: f64,
    pub kde_mean: f64,
    pub probe_accuracy: f64,
    pub proximity: f64,
    /// Set when training at this weight failed; the numbers are then NaN.
    pub error: Option<String>,
    /// Test latent means on their top two principal components.
    #[serde(skip)]
    pub projection: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// False when a grid point failed and the sweep stopped there.
    pub complete: bool,
}

impl SweepResult {
    fn column(&self, f: impl Fn(&SweepRow) -> f64) -> (Vec<f64>, Vec<f64>) {
        self.rows
            .iter()
            .filter(|r| r.error.is_none() && r.lambda_cf > 0.0)
            .map(|r| (r.lambda_cf.ln(), f(r)))
            .unzip()
    }

    /// Spearman correlation of validity with `log lambda_cf`.
    pub fn validity_trend(&self) -> f64 {
        let (l, v) = self.column(|r| r.validity);
        stats::spearman(&l, &v)
    }

    pub fn plausibility_trend(&self) -> f64 {
        let (l, v) = self.column(|r| r.kde_mean);
        stats::spearman(&l, &v)
    }

    pub fn separation_trend(&self) -> f64 {
        let (l, v) = self.column(|r| r.probe_accuracy);
        stats::spearman(&l, &v)
    }
}

/// One CF-VAE per grid weight with the sparsity term switched off. Each
/// point reports validity and mean KDE log-likelihood on the query set and
/// the held-out accuracy of a latent probe on the predictor's labels.
pub fn run_lambda_sweep(
    cfg: &RunConfig,
    data: &Prepared,
    predictor: &BinaryPredictor,
) -> Result<SweepResult> {
    let mut cfg = cfg.clone();
    cfg.vae.lambda_s_auto = false;
    let queries = data.queries(cfg.eval.max_test);
    let kde = KdeModel::fit(data.train.features())?;
    let train_y = predictor.predict_labels(data.train.features())?;
    let test_y = predictor.predict_labels(data.test.features())?;
    let mut rows = Vec::with_capacity(cfg.eval.sweep_grid.len());
    for &lambda_cf in &cfg.eval.sweep_grid {
        let weights = LossWeights {
            lambda_cf,
            lambda_s: 0.0,
            ..cfg.vae.weights
        };
        let row = fit_vae(&cfg, data, Some(predictor), weights).and_then(|(model, _)| {
            let results = queries
                .iter()
                .map(|x| generate_cf(&model, predictor, x))
                .collect::<Result<Vec<_>>>()?;
            let results = MethodResults {
                method: "cfvae".into(),
                results,
            };
            let probe = latent_probe(
                &model,
                data.train.features(),
                &train_y,
                data.test.features(),
                &test_y,
            )?;
            let r = &results.results;
            Ok(SweepRow {
                lambda_cf,
                validity: stats::mean(
                    &r.iter()
                        .map(|c| f64::from(u8::from(c.valid)))
                        .collect::<Vec<_>>(),
                ),
                kde_mean: stats::mean(&r.iter().map(|c| kde.loglik(&c.x_cf)).collect::<Vec<_>>()),
                probe_accuracy: probe.accuracy,
                proximity: stats::mean(
                    &r.iter()
                        .map(|c| super::metrics::proximity_mse(&c.x, &c.x_cf))
                        .collect::<Vec<_>>(),
                ),
                error: None,
                projection: Some(probe.projection),
            })
        });
        match row {
            Ok(row) => rows.push(row),
            Err(e) => {
                rows.push(SweepRow {
                    lambda_cf,
                    validity: f64::NAN,
                    kde_mean: f64::NAN,
                    probe_accuracy: f64::NAN,
                    proximity: f64::NAN,
                    error: Some(e.to_string()),
                    projection: None,
                });
                return Ok(SweepResult {
                    rows,
                    complete: false,
                });
            }
        }
    }
    Ok(SweepResult {
        rows,
        complete: true,
    })
}
