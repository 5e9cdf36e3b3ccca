//! Train-and-measure checks on the two-moons preset.

use cfvae_core::baselines::cf_latent_search;
use cfvae_core::config::RunConfig;
use cfvae_core::datasets::Task;
use cfvae_core::eval::{latent_probe, proximity_mse, KdeModel};
use cfvae_core::models::{generate_cf, BinaryPredictor, CfResult, CfVae, SampleMode};
use cfvae_core::nn::LossWeights;
use cfvae_core::pipeline::{fit_predictor, fit_vae, prepare, Prepared};
use cfvae_core::stats::{mean, quantile};

struct Moons {
    cfg: RunConfig,
    data: Prepared,
    predictor: BinaryPredictor,
    accuracy: f64,
}

fn moons() -> Moons {
    let cfg = RunConfig::preset(Task::Moons2d);
    let data = prepare(&cfg).unwrap();
    let (predictor, metrics) = fit_predictor(&cfg, &data).unwrap();
    Moons {
        cfg,
        data,
        predictor,
        accuracy: metrics.accuracy,
    }
}

fn weights(cfg: &RunConfig, lambda_cf: f64) -> LossWeights {
    LossWeights {
        lambda_cf,
        lambda_s: 0.0,
        ..cfg.vae.weights
    }
}

fn vanilla(m: &Moons) -> CfVae {
    fit_vae(&m.cfg, &m.data, None, weights(&m.cfg, 0.0))
        .unwrap()
        .0
}

#[test]
fn classifier_separates_the_moons() {
    let m = moons();
    assert!(m.accuracy >= 0.95, "test accuracy {}", m.accuracy);
}

#[test]
fn vanilla_vae_reconstructs_held_out_points() {
    let m = moons();
    let vae = vanilla(&m);
    let test = m.data.test.features();
    let (recon, _) = vae.vae_forward(test, SampleMode::Deterministic).unwrap();
    let mse = mean(
        &(0..test.rows())
            .map(|i| proximity_mse(test.row(i), recon.row(i)))
            .collect::<Vec<_>>(),
    );
    assert!(mse < 0.05, "held-out reconstruction mse {mse}");
}

#[test]
fn without_the_counterfactual_term_reconstructions_keep_their_class() {
    let m = moons();
    let (model, _) = fit_vae(&m.cfg, &m.data, Some(&m.predictor), weights(&m.cfg, 0.0)).unwrap();
    let queries = m.data.queries(m.cfg.eval.max_test);
    let flips = queries
        .iter()
        .filter(|x| generate_cf(&model, &m.predictor, x).unwrap().valid)
        .count() as f64
        / queries.len() as f64;
    assert!(
        flips <= 0.05,
        "validity without the counterfactual term {flips}"
    );
}

fn latent_search(m: &Moons) -> Vec<CfResult> {
    let vae = vanilla(m);
    m.data
        .queries(m.cfg.eval.max_test)
        .iter()
        .map(|x| cf_latent_search(&vae, &m.predictor, x, &m.cfg.latent_search).unwrap())
        .collect()
}

#[test]
fn latent_search_mostly_flips() {
    let found = latent_search(&moons());
    let valid = found.iter().filter(|r| r.valid).count() as f64 / found.len() as f64;
    assert!(valid > 0.5, "latent search validity {valid}");
}

#[test]
#[ignore = "unmet: 18 of 300 counterfactuals fall below the training 5th percentile; 12 of the 300 test queries themselves do"]
fn latent_search_stays_on_the_manifold() {
    let m = moons();
    let kde = KdeModel::fit(m.data.train.features()).unwrap();
    let floor = quantile(&kde.loglik_rows(m.data.train.features()), 0.05);
    let below = latent_search(&m)
        .iter()
        .filter(|r| kde.loglik(&r.x_cf) <= floor)
        .count();
    assert_eq!(
        below, 0,
        "{below} counterfactuals fall below the training 5th percentile {floor:.3}"
    );
}

#[test]
fn counterfactual_training_separates_the_latent_classes() {
    let m = moons();
    let train = m.data.train.features();
    let test = m.data.test.features();
    let train_y = m.predictor.predict_labels(train).unwrap();
    let test_y = m.predictor.predict_labels(test).unwrap();
    let (cf, _) = fit_vae(&m.cfg, &m.data, Some(&m.predictor), weights(&m.cfg, 1e3)).unwrap();
    let plain = latent_probe(&vanilla(&m), train, &train_y, test, &test_y).unwrap();
    let trained = latent_probe(&cf, train, &train_y, test, &test_y).unwrap();
    assert!(
        plain.accuracy < trained.accuracy,
        "probe accuracy vanilla {} vs lambda_cf 1e3 {}",
        plain.accuracy,
        trained.accuracy
    );
}
