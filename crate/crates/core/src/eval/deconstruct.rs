use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::metrics::sparsity_stats_at;
use crate::autodiff::Tensor;
use crate::config::{seeds, RunConfig};
use crate::models::{epoch_rng, generate_cf, BinaryPredictor, CfResult};
use crate::nn::LossWeights;
use crate::pipeline::{fit_vae, Prepared};
use crate::stats;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    CeOnly,
    CeRecon,
    CeReconKl,
    Full,
}

impl LossVariant {
    pub const ALL: [LossVariant; 4] = [
        LossVariant::CeOnly,
        LossVariant::CeRecon,
        LossVariant::CeReconKl,
        LossVariant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::CeOnly => "ce_only",
            LossVariant::CeRecon => "ce_recon",
            LossVariant::CeReconKl => "ce_recon_kl",
            LossVariant::Full => "full",
        }
    }

    /// Term weights with every active coefficient equal to 1.
    pub fn weights(self) -> LossWeights {
        let (w_recon, w_kl, lambda_s) = match self {
            LossVariant::CeOnly => (0.0, 0.0, 0.0),
            LossVariant::CeRecon => (1.0, 0.0, 0.0),
            LossVariant::CeReconKl => (1.0, 1.0, 0.0),
            LossVariant::Full => (1.0, 1.0, 1.0),
        };
        LossWeights {
            w_recon,
            w_kl,
            lambda_cf: 1.0,
            lambda_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantStats {
    pub variant: LossVariant,
    pub validity: f64,
    /// Fraction of counterfactuals outside the training bounding box.
    pub bbox_outside: f64,
    /// Mean Euclidean norm of `x_cf - x`.
    pub displacement: f64,
    /// Mean `|p_cf - 0.5|`.
    pub margin: f64,
    pub alignment: f64,
    /// `(x, x_cf)` pairs in raw feature units, one row per sampled query.
    pub arrows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeconstructionReport {
    pub variants: Vec<VariantStats>,
    /// Query indices the arrows were drawn from.
    pub arrow_queries: Vec<usize>,
}

impl DeconstructionReport {
    pub fn get(&self, v: LossVariant) -> Option<&VariantStats> {
        self.variants.iter().find(|s| s.variant == v)
    }
}

/// Per-column `(min, max)` of the rows of `x`.
pub fn bounding_box(x: &Tensor) -> Vec<(f64, f64)> {
    let d = x.shape()[1];
    (0..d)
        .map(|j| {
            (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                let v = x.row(i)[j];
                (lo.min(v), hi.max(v))
            })
        })
        .collect()
}

fn outside(bbox: &[(f64, f64)], v: &[f64]) -> bool {
    v.iter().zip(bbox).any(|(x, (lo, hi))| x < lo || x > hi)
}

/// Summary of one variant's counterfactuals.
pub fn variant_stats(
    variant: LossVariant,
    results: &[CfResult],
    bbox: &[(f64, f64)],
    stds: &[f64],
    changed_fraction: f64,
) -> VariantStats {
    let mean =
        |f: &dyn Fn(&CfResult) -> f64| stats::mean(&results.iter().map(f).collect::<Vec<_>>());
    VariantStats {
        variant,
        validity: mean(&|r| f64::from(u8::from(r.valid))),
        bbox_outside: mean(&|r| f64::from(u8::from(outside(bbox, &r.x_cf)))),
        displacement: mean(&|r| r.deltas.iter().map(|d| d * d).sum::<f64>().sqrt()),
        margin: mean(&|r| (r.p_cf - 0.5).abs()),
        alignment: mean(&|r| sparsity_stats_at(&r.x, &r.x_cf, stds, changed_fraction).1),
        arrows: Vec::new(),
    }
}

/// Trains one counterfactual VAE per loss variant with identical seeds and
/// architecture, and summarises each on the same queries.
pub fn run_deconstruction(
    cfg: &RunConfig,
    data: &Prepared,
    predictor: &BinaryPredictor,
) -> Result<DeconstructionReport> {
    let mut cfg = cfg.clone();
    cfg.vae.lambda_s_auto = false;
    let queries = data.queries(cfg.eval.max_test);
    if queries.len() < cfg.eval.arrows {
        return Err(Error::Eval(format!(
            "{} queries cannot supply {} arrows",
            queries.len(),
            cfg.eval.arrows
        )));
    }
    let mut rng = epoch_rng(cfg.seed.wrapping_add(seeds::ARROWS), 0);
    let mut arrow_queries = sample(&mut rng, queries.len(), cfg.eval.arrows).into_vec();
    arrow_queries.sort_unstable();
    let bbox = bounding_box(data.train.features());
    let stds = data.feature_stds();
    let mut variants = Vec::with_capacity(4);
    for variant in LossVariant::ALL {
        let (model, _) = fit_vae(&cfg, data, Some(predictor), variant.weights())?;
        let results = queries
            .iter()
            .map(|x| generate_cf(&model, predictor, x))
            .collect::<Result<Vec<_>>>()?;
        let mut s = variant_stats(variant, &results, &bbox, &stds, cfg.eval.changed_fraction);
        let pick = |f: fn(&CfResult) -> &Vec<f64>| -> Result<Tensor> {
            let d = data.dim();
            let rows = arrow_queries
                .iter()
                .flat_map(|&i| f(&results[i]).iter().copied())
                .collect();
            data.normalization
                .invert(&Tensor::new(vec![arrow_queries.len(), d], rows)?)
        };
        let from = pick(|r| &r.x)?;
        let to = pick(|r| &r.x_cf)?;
        s.arrows = (0..arrow_queries.len())
            .map(|i| from.row(i).iter().chain(to.row(i)).copied().collect())
            .collect();
        variants.push(s);
    }
    Ok(DeconstructionReport {
        variants,
        arrow_queries,
    })
}
