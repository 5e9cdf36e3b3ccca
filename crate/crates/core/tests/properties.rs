//! Invariants that must hold for arbitrary inputs.

use cfvae_core::autodiff::{Tape, Tensor};
use cfvae_core::baselines::sparsify_greedy;
use cfvae_core::config::{set_path, RunConfig};
use cfvae_core::datasets::{
    beats_from_row, gen_ppg, generate, Normalization, PpgBeat, PpgConfig, Rhythm, Task,
};
use cfvae_core::eval::{sparsity_stats_at, KdeModel};
use cfvae_core::models::{
    cfvae_loss, BinaryPredictor, CfResult, CfVae, EncoderArch, OutputHead, PredictorArch,
    PredictorSpec, VaeSpec,
};
use cfvae_core::nn::{
    loss, LossWeights, MultiHeadSelfAttention, Optimizer, OptimizerKind, ParamStore,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn mlp_predictor(input_dim: usize, seed: u64) -> BinaryPredictor {
    BinaryPredictor::new(PredictorSpec {
        input_dim,
        arch: PredictorArch::Mlp { hidden: vec![6] },
        init_seed: seed,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_accumulate_across_uses(seed in 0u64..1000, rows in 1usize..5, cols in 1usize..5) {
        let x = random(&[rows, cols], seed, 2.0);
        let grad_of = |both: bool, first: bool| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let sq = t.square(v);
            let f = t.sum(sq);
            let sg = t.sigmoid(v);
            let g = t.sum(sg);
            let root = if both { t.add(f, g).unwrap() } else if first { f } else { g };
            t.backward(root).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let joint = grad_of(true, false);
        let f = grad_of(false, true);
        let g = grad_of(false, false);
        for ((j, a), b) in joint.iter().zip(&f).zip(&g) {
            prop_assert!((j - (a + b)).abs() <= 1e-12 * (1.0 + j.abs()));
        }
    }

    #[test]
    fn backward_is_bitwise_repeatable(seed in 0u64..1000) {
        let a = random(&[3, 4], seed, 1.0);
        let b = random(&[4, 2], seed + 1, 1.0);
        let run = || {
            let mut t = Tape::new();
            let va = t.leaf(a.clone(), true);
            let vb = t.leaf(b.clone(), true);
            let m = t.matmul(va, vb).unwrap();
            let s = t.softmax(m).unwrap();
            let l = t.log(s).unwrap();
            let root = t.sum(l);
            t.backward(root).unwrap();
            (t.value(root).data().to_vec(), t.grad(va).unwrap().to_vec(), t.grad(vb).unwrap().to_vec())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn kl_is_non_negative(seed in 0u64..1000, rows in 1usize..6, dim in 1usize..5) {
        let mu = random(&[rows, dim], seed, 4.0);
        let logvar = random(&[rows, dim], seed + 7, 6.0);
        let mut t = Tape::new();
        let m = t.constant(mu);
        let v = t.constant(logvar);
        let kl = loss::kl_diag_gaussian(&mut t, m, v).unwrap();
        prop_assert!(t.value(kl).data()[0] >= 0.0);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, steps in 1usize..7, heads in 1usize..4) {
        let dim = 2 * heads;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = MultiHeadSelfAttention::new(&mut store, "a", dim, heads, &mut rng).unwrap();
        let mut t = Tape::new();
        let bound = store.bind(&mut t, false);
        let x = t.constant(random(&[2, steps, dim], seed, 3.0));
        let (_, weights) = att.forward_with_weights(&mut t, &bound, x).unwrap();
        prop_assert_eq!(weights.len(), heads);
        for w in weights {
            for row in t.value(w).data().chunks(steps) {
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn reported_total_is_the_weighted_sum_of_its_terms(
        seed in 0u64..200,
        w_recon in 0.0f64..3.0,
        w_kl in 0.0f64..3.0,
        lambda_cf in 0.0f64..10.0,
        lambda_s in 0.0f64..3.0,
    ) {
        let vae = CfVae::new(
            VaeSpec {
                input_dim: 3,
                latent_dim: 2,
                encoder: EncoderArch::Mlp { hidden: vec![5] },
                decoder_hidden: vec![5],
                head: OutputHead::Linear,
                init_seed: seed,
            },
            Normalization::identity(3),
        )
        .unwrap();
        let p = mlp_predictor(3, seed + 1);
        let x = random(&[6, 3], seed + 2, 1.5);
        let y = p.predict_labels(&x).unwrap();
        let eps = random(&[6, 2], seed + 3, 1.0);
        let w = LossWeights { w_recon, w_kl, lambda_cf, lambda_s };
        let got = cfvae_loss(&vae, &p, &x, &y, &w, Some(&eps)).unwrap();
        prop_assert_eq!(got.total, got.terms.weighted_sum(&w));
        prop_assert!(got.terms.kl >= 0.0 && got.terms.recon >= 0.0 && got.terms.sparsity >= 0.0);
    }

    #[test]
    fn validity_means_the_threshold_label_flipped(p_cf in 0.0f64..=1.0, y in 0u8..=1) {
        let r = CfResult::new(vec![0.0], vec![1.0], y, 0.5, p_cf, 0.0, 0);
        prop_assert_eq!(r.valid, u8::from(p_cf >= 0.5) != y);
    }

    #[test]
    fn sparsify_keeps_the_label_and_never_adds_changes(seed in 0u64..300) {
        let p = mlp_predictor(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x_cf: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = u8::from(p.proba_row(&x_cf).unwrap() >= 0.5);
        let (sparse, _) = sparsify_greedy(&p, &x, &x_cf).unwrap();
        prop_assert_eq!(u8::from(p.proba_row(&sparse).unwrap() >= 0.5), label);
        let stds = [1.0; 4];
        let before = sparsity_stats_at(&x, &x_cf, &stds, 0.1).0;
        let after = sparsity_stats_at(&x, &sparse, &stds, 0.1).0;
        prop_assert!(after <= before);
        for j in 0..4 {
            prop_assert!(sparse[j] == x[j] || sparse[j] == x_cf[j]);
        }
    }

    #[test]
    fn alignment_lies_in_the_unit_interval(seed in 0u64..1000, d in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x_cf: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (changed, alignment) = sparsity_stats_at(&x, &x_cf, &vec![1.0; d], 0.1);
        prop_assert!(changed <= d);
        prop_assert!(alignment >= 1.0 / d as f64 - 1e-12 && alignment <= 1.0);
    }

    #[test]
    fn kde_matches_a_direct_product_kernel_sum(seed in 0u64..1000, n in 1usize..200, d in 1usize..4) {
        let pts = random(&[n, d], seed, 2.0);
        let kde = KdeModel::fit(&pts).unwrap();
        let q = random(&[1, d], seed + 5, 2.5);
        let h = kde.bandwidth();
        let density: f64 = (0..n)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let u = (q.data()[j] - pts.row(i)[j]) / h[j];
                        (-0.5 * u * u).exp() / (h[j] * (2.0 * std::f64::consts::PI).sqrt())
                    })
                    .product::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        let got = kde.loglik(q.data());
        prop_assert!((got - density.ln()).abs() <= 1e-10 * (1.0 + got.abs()), "{} vs {}", got, density.ln());
    }

    #[test]
    fn ppg_beats_satisfy_their_constraints(seed in 0u64..500, beats in 3usize..9, reset in any::<bool>()) {
        let rhythm = if reset { Rhythm::Reset } else { Rhythm::Regular };
        let rec = gen_ppg(&PpgConfig::default(), beats, rhythm, seed).unwrap();
        prop_assert_eq!(rec.beats.len(), beats);
        prop_assert!(rec.beats.iter().all(PpgBeat::is_valid));
        prop_assert!(rec.waveform.iter().all(|v| v.is_finite()));
        prop_assert_eq!(rec.premature.is_some(), reset);
        let row: Vec<f64> = (0..7).flat_map(|i| rec.beats.iter().map(move |b| b.params()[i])).collect();
        prop_assert_eq!(beats_from_row(&row, beats), rec.beats);
    }

    #[test]
    fn set_path_round_trips_through_the_effective_config(seed in 0u64..(i64::MAX as u64), n in 10usize..100_000) {
        let cfg = RunConfig::layered(
            Task::Moons2d,
            None,
            &[format!("seed={seed}"), format!("data.n={n}")],
        )
        .unwrap();
        prop_assert_eq!(cfg.seed, seed);
        prop_assert_eq!(cfg.data.n, n);
        let mut table: toml::Table = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        set_path(&mut table, "vae.latent_dim=3").unwrap();
        let back: RunConfig = table.try_into().unwrap();
        prop_assert_eq!(back.vae.latent_dim, 3);
        prop_assert_eq!(back.seed, seed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generators_are_pure_in_their_seed(seed in 0u64..10_000, task_ix in 0usize..4) {
        let task = [Task::Moons2d, Task::VitalsSi, Task::VitalsTs, Task::Ppg][task_ix];
        let a = generate(task, 40, seed).unwrap();
        let b = generate(task, 40, seed).unwrap();
        prop_assert_eq!(a.dataset.features(), b.dataset.features());
        prop_assert_eq!(a.dataset.labels(), b.dataset.labels());
        prop_assert_eq!(a.relevant_features, b.relevant_features);
    }
}

#[test]
fn adam_decreases_a_fixed_batch_loss_monotonically() {
    for seed in 0..3u64 {
        let x = random(&[64, 3], seed, 2.0);
        let targets: Vec<f64> = (0..64)
            .map(|i| f64::from(u8::from(x.row(i)[0] + 0.5 * x.row(i)[1] > 0.0)))
            .collect();
        let mut store = ParamStore::new();
        let w = store.add("w", random(&[3, 1], seed + 10, 0.5));
        let b = store.add("b", Tensor::zeros(&[1]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, &store, 1e-3);
        let mut previous = f64::INFINITY;
        for step in 0..50 {
            let mut t = Tape::new();
            let bound = store.bind(&mut t, true);
            let xv = t.constant(x.clone());
            let z = t.matmul(xv, bound.var(w)).unwrap();
            let bb = t.broadcast_to(bound.var(b), &[64, 1]).unwrap();
            let logits = t.add(z, bb).unwrap();
            let target = loss::target_column(&mut t, &targets);
            let l = loss::bce_with_logits(&mut t, logits, target).unwrap();
            let value = t.value(l).data()[0];
            assert!(
                value <= previous,
                "seed {seed} step {step}: {value} > {previous}"
            );
            previous = value;
            t.backward(l).unwrap();
            let grads = store.grads(&t, &bound);
            opt.step(&mut store, &grads).unwrap();
        }
    }
}
