//! End-to-end steps shared by the command line, the experiments and the
//! tests: data preparation, model fitting and running the counterfactual
//! methods on a common query set.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::baselines::{cf_input_search, cf_latent_search, cf_nun};
use crate::config::RunConfig;
use crate::datasets::{generate, split, Dataset, DatasetMeta, Layout, Normalization, Splits};
use crate::eval::MethodResults;
use crate::models::{
    generate_cf, train_predictor, train_vae, BinaryPredictor, CfVae, PredictorMetrics, TrainState,
};
use crate::nn::LossWeights;
use crate::{Error, Result};

/// Normalized splits plus the metadata they came with.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
    pub meta: DatasetMeta,
}

impl Prepared {
    pub fn new(splits: &Splits, meta: DatasetMeta) -> Result<Self> {
        let (train, val, test) = splits.normalized()?;
        Ok(Self {
            train,
            val,
            test,
            normalization: splits.normalization.clone(),
            meta,
        })
    }

    pub fn layout(&self) -> &Layout {
        self.train.layout()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Population standard deviation of each normalized training column.
    pub fn feature_stds(&self) -> Vec<f64> {
        let x = self.train.features();
        let n = x.rows() as f64;
        (0..self.dim())
            .map(|j| {
                let col: Vec<f64> = (0..x.rows()).map(|i| x.row(i)[j]).collect();
                let m = col.iter().sum::<f64>() / n;
                let s = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// Columns the generating rule depends on. For time series a relevant
    /// channel contributes all of its steps.
    pub fn relevant_columns(&self) -> Vec<usize> {
        let relevant = &self.meta.relevant_features;
        self.train
            .feature_names()
            .iter()
            .enumerate()
            .filter(|(_, name)| {
                let base = name.split('@').next().unwrap_or(name);
                relevant.iter().any(|r| r == *name || r == base)
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// The first `max` normalized test rows.
    pub fn queries(&self, max: usize) -> Vec<Vec<f64>> {
        let n = self.test.len().min(max);
        (0..n)
            .map(|i| self.test.features().row(i).to_vec())
            .collect()
    }
}

/// Generates and splits the task's data with the run seed.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Splits, DatasetMeta)> {
    let g = generate(cfg.task, cfg.data.n, cfg.seed)?;
    let spec = cfg.split_spec();
    let splits = split(&g.dataset, &spec)?;
    let meta = DatasetMeta::new(
        cfg.task,
        cfg.seed,
        g.generator,
        g.relevant_features,
        spec,
        &splits,
    );
    Ok((splits, meta))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (splits, meta) = generate_splits(cfg)?;
    Prepared::new(&splits, meta)
}

/// Trains and freezes the predictor; metrics are measured on the test
/// split.
pub fn fit_predictor(
    cfg: &RunConfig,
    data: &Prepared,
) -> Result<(BinaryPredictor, PredictorMetrics)> {
    let mut model = cfg.build_predictor(data.layout(), data.dim())?;
    let metrics = train_predictor(&mut model, &data.train, &data.test, &cfg.predictor_train())?;
    Ok((model, metrics))
}

/// Trains a VAE on the normalized training split: against `predictor` with
/// `weights`, or as a vanilla VAE when no predictor is given.
pub fn fit_vae(
    cfg: &RunConfig,
    data: &Prepared,
    predictor: Option<&BinaryPredictor>,
    weights: LossWeights,
) -> Result<(CfVae, TrainState)> {
    let mut model = cfg.build_vae(data.layout(), data.dim(), data.normalization.clone())?;
    let state = train_vae(
        &mut model,
        &data.train,
        predictor,
        &cfg.vae_train(weights),
        None,
        None,
    )?;
    Ok((model, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cfvae,
    InputSearch,
    LatentSearch,
    Nun,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Cfvae,
        Method::InputSearch,
        Method::LatentSearch,
        Method::Nun,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cfvae => "cfvae",
            Method::InputSearch => "input_search",
            Method::LatentSearch => "latent_search",
            Method::Nun => "nun",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method {s:?}; expected cfvae, input_search, latent_search or nun"
                ))
            })
    }
}

/// Models a comparison may draw on.
pub struct MethodContext<'a> {
    pub cfg: &'a RunConfig,
    pub train: &'a Dataset,
    pub predictor: &'a BinaryPredictor,
    pub cfvae: Option<&'a CfVae>,
    pub vanilla: Option<&'a CfVae>,
}

/// Runs one method on every query.
pub fn run_method(
    method: Method,
    ctx: &MethodContext<'_>,
    queries: &[Vec<f64>],
) -> Result<MethodResults> {
    let missing = |what: &str| Error::Config(format!("method {method} needs a {what}"));
    let results = match method {
        Method::Cfvae => {
            let model = ctx.cfvae.ok_or_else(|| missing("trained CF-VAE"))?;
            queries
                .iter()
                .map(|x| generate_cf(model, ctx.predictor, x))
                .collect::<Result<Vec<_>>>()?
        }
        Method::InputSearch => queries
            .iter()
            .map(|x| cf_input_search(ctx.predictor, x, &ctx.cfg.input_search))
            .collect::<Result<Vec<_>>>()?,
        Method::LatentSearch => {
            let vae = ctx.vanilla.ok_or_else(|| missing("vanilla VAE"))?;
            queries
                .iter()
                .map(|x| cf_latent_search(vae, ctx.predictor, x, &ctx.cfg.latent_search))
                .collect::<Result<Vec<_>>>()?
        }
        Method::Nun => queries
            .iter()
            .map(|x| cf_nun(ctx.train, ctx.predictor, x, &ctx.cfg.nun))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(MethodResults {
        method: method.name().to_string(),
        results,
    })
}

/// Rows of `results` stacked into a tensor of counterfactuals.
pub fn counterfactual_matrix(results: &MethodResults) -> Result<Tensor> {
    let d = results.results.first().map_or(0, |r| r.x_cf.len());
    let data = results
        .results
        .iter()
        .flat_map(|r| r.x_cf.iter().copied())
        .collect();
    Ok(Tensor::new(vec![results.results.len(), d], data)?)
}
