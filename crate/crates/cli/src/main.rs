//! `cfvae`: generate data, train predictors and counterfactual VAEs, and run
//! the comparison, sweep and deconstruction experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cfvae_core::config::RunConfig;
use cfvae_core::datasets::{read_dataset_dir, write_dataset_dir, Task};
use cfvae_core::eval::{self, report, KdeModel};
use cfvae_core::models::{
    generate_cf, load_predictor, load_vae, save_predictor, save_vae, train_vae, BinaryPredictor,
    CfVae,
};
use cfvae_core::pipeline::{self, Method, MethodContext, Prepared};

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "cfvae", version, about = "Counterfactual VAE experiments")]
struct Cli {
    /// Root for outputs when `--out` is not given.
    #[arg(long, env = "CFVAE_OUT_ROOT", default_value = "runs", global = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file layered over the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set vae.train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, split and write a synthetic dataset.
    GenData {
        task: Task,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the black-box predictor on a dataset directory.
    TrainPredictor {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a counterfactual VAE against a frozen predictor.
    TrainCfvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        /// Train without the counterfactual and sparsity terms.
        #[arg(long)]
        vanilla: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs of this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate counterfactual methods on the test split.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "cfvae,input_search,latent_search,nun"
        )]
        methods: Vec<Method>,
        /// CF-VAE checkpoint, needed by `cfvae`.
        #[arg(long)]
        cfvae: Option<PathBuf>,
        /// Vanilla VAE checkpoint, needed by `latent_search`.
        #[arg(long)]
        vanilla: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one CF-VAE per counterfactual weight in the sweep grid.
    SweepLambda {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the four loss variants on the 2-D data.
    Deconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            let line: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .filter(|l| !l.is_empty())
                .collect();
            eprintln!("{}", line.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let root = cli.out_root;
    match cli.command {
        Command::GenData { task, n, common } => gen_data(&root, task, n, &common),
        Command::TrainPredictor { data, common } => train_predictor(&root, &data, &common),
        Command::TrainCfvae {
            data,
            predictor,
            vanilla,
            resume,
            stop_after,
            common,
        } => train_cfvae(
            &root,
            &data,
            &predictor,
            vanilla,
            resume.as_deref(),
            stop_after,
            &common,
        ),
        Command::Compare {
            data,
            predictor,
            methods,
            cfvae,
            vanilla,
            common,
        } => compare(
            &root,
            &data,
            &predictor,
            &methods,
            cfvae.as_deref(),
            vanilla.as_deref(),
            &common,
        ),
        Command::SweepLambda {
            data,
            predictor,
            common,
        } => sweep(&root, &data, &predictor, &common),
        Command::Deconstruct {
            data,
            predictor,
            common,
        } => deconstruct(&root, &data, &predictor, &common),
    }
}

fn effective_config(base: RunConfig, common: &Common, extra: &[String]) -> Result<RunConfig> {
    let file = match &common.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut sets = common.sets.clone();
    sets.extend(extra.iter().cloned());
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    Ok(RunConfig::layered_over(base, file.as_deref(), &sets)?)
}

fn output_dir(root: &Path, common: &Common, cfg: &RunConfig, leaf: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(p) => p.clone(),
        None => root
            .join(format!("{}-seed{}", cfg.task, cfg.seed))
            .join(leaf),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)
        .with_context(|| format!("writing config into {}", dir.display()))?;
    Ok(dir)
}

struct Loaded {
    cfg: RunConfig,
    data: Prepared,
    out: PathBuf,
}

/// Reads a dataset directory and builds the run config on top of the
/// dataset's task and seed.
fn load(root: &Path, data_dir: &Path, common: &Common, leaf: &str) -> Result<Loaded> {
    let (splits, meta) = read_dataset_dir(data_dir)
        .with_context(|| format!("loading data from {}", data_dir.display()))?;
    let mut base = RunConfig::preset(meta.task);
    base.seed = meta.seed;
    base.data.n = meta.n;
    base.data.split = meta.split;
    let cfg = effective_config(base, common, &[])?;
    let data = Prepared::new(&splits, meta)?;
    let out = output_dir(root, common, &cfg, leaf)?;
    Ok(Loaded { cfg, data, out })
}

fn predictor_for(path: &Path, data: &Prepared) -> Result<BinaryPredictor> {
    let (p, _) =
        load_predictor(path).with_context(|| format!("loading predictor {}", path.display()))?;
    ensure!(
        p.input_dim() == data.dim(),
        "predictor expects {} features, data has {}",
        p.input_dim(),
        data.dim()
    );
    Ok(p)
}

fn vae_for(path: &Path, predictor: &BinaryPredictor, data: &Prepared) -> Result<CfVae> {
    let loaded =
        load_vae(path, Some(predictor)).with_context(|| format!("loading {}", path.display()))?;
    ensure!(
        loaded.model.normalization() == &data.normalization,
        "{} was trained on a different dataset",
        path.display()
    );
    Ok(loaded.model)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn gen_data(root: &Path, task: Task, n: Option<usize>, common: &Common) -> Result<()> {
    let extra: Vec<String> = n.map(|n| format!("data.n={n}")).into_iter().collect();
    let cfg = effective_config(RunConfig::preset(task), common, &extra)?;
    let (splits, meta) = pipeline::generate_splits(&cfg)?;
    let out = output_dir(root, common, &cfg, "data")?;
    write_dataset_dir(&out, &splits, &meta)?;
    println!(
        "{task}: {} train, {} val, {} test rows -> {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn train_predictor(root: &Path, data_dir: &Path, common: &Common) -> Result<()> {
    let Loaded { cfg, data, out } = load(root, data_dir, common, "predictor")?;
    let (model, metrics) = pipeline::fit_predictor(&cfg, &data)?;
    let metrics = serde_json::to_value(&metrics)?;
    save_predictor(&out.join("predictor.ckpt"), &model, &metrics)?;
    write_json(
        &out.join("metrics.json"),
        &json!({"fingerprint": model.fingerprint(), "test": metrics}),
    )?;
    let losses = metrics["epoch_losses"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let mut trace = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        trace.push_str(&format!("{i},{l}\n"));
    }
    fs::write(out.join("trace.csv"), trace).context("writing trace")?;
    println!(
        "predictor: test accuracy {:.4}, auc {:.4} -> {}",
        metrics["accuracy"].as_f64().unwrap_or(f64::NAN),
        metrics["auc"].as_f64().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_cfvae(
    root: &Path,
    data_dir: &Path,
    predictor_path: &Path,
    vanilla: bool,
    resume: Option<&Path>,
    stop_after: Option<usize>,
    common: &Common,
) -> Result<()> {
    let leaf = if vanilla { "vanilla" } else { "cfvae" };
    let Loaded { cfg, data, out } = load(root, data_dir, common, leaf)?;
    let predictor = predictor_for(predictor_path, &data)?;
    let (mut model, mut state) = match resume {
        Some(path) => {
            let loaded = load_vae(path, Some(&predictor))
                .with_context(|| format!("resuming from {}", path.display()))?;
            ensure!(
                loaded.state.is_some(),
                "{} holds no training state",
                path.display()
            );
            (loaded.model, loaded.state)
        }
        None => (
            cfg.build_vae(data.layout(), data.dim(), data.normalization.clone())?,
            None,
        ),
    };
    let train_cfg = cfg.vae_train(cfg.vae.weights);
    let against = (!vanilla).then_some(&predictor);
    let ckpt = out.join("vae.ckpt");
    let budget = stop_after.unwrap_or(usize::MAX);
    let mut ran = 0;
    // one epoch per call so a failure leaves the last good epoch on disk
    while ran < budget && state.as_ref().map_or(0, |s| s.epoch) < train_cfg.train.epochs {
        let epoch = state.as_ref().map_or(0, |s| s.epoch);
        let next = train_vae(
            &mut model,
            &data.train,
            against,
            &train_cfg,
            state.take(),
            Some(1),
        )
        .with_context(|| {
            format!(
                "training epoch {epoch}; last good checkpoint is {}",
                ckpt.display()
            )
        })?;
        save_vae(&ckpt, &model, Some(&next), &json!({}))?;
        state = Some(next);
        ran += 1;
    }
    let state = match state {
        Some(s) => s,
        None => bail!(
            "no epochs to run (vae.train.epochs = {})",
            train_cfg.train.epochs
        ),
    };
    let validity = if vanilla {
        None
    } else {
        let queries = data.queries(cfg.eval.max_test);
        let valid = queries
            .iter()
            .map(|x| generate_cf(&model, &predictor, x).map(|r| f64::from(u8::from(r.valid))))
            .collect::<cfvae_core::Result<Vec<_>>>()?;
        Some(valid.iter().sum::<f64>() / valid.len().max(1) as f64)
    };
    let metrics = json!({
        "epochs_completed": state.epoch,
        "epochs_configured": train_cfg.train.epochs,
        "weights": state.weights,
        "predictor_fingerprint": model.predictor_fingerprint(),
        "final": state.trace.last(),
        "test_validity": validity,
    });
    save_vae(&ckpt, &model, Some(&state), &metrics)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    report::write_trace(&out.join("trace.csv"), &state.trace)?;
    let last = state.trace.last().expect("at least one epoch");
    println!(
        "{leaf}: epoch {}/{}, recon {:.4}, kl {:.4}, cf {:.4}, sparsity {:.4}{} -> {}",
        state.epoch,
        train_cfg.train.epochs,
        last.recon,
        last.kl,
        last.cf,
        last.sparsity,
        validity
            .map(|v| format!(", test validity {v:.3}"))
            .unwrap_or_default(),
        out.display()
    );
    Ok(())
}

fn compare(
    root: &Path,
    data_dir: &Path,
    predictor_path: &Path,
    methods: &[Method],
    cfvae: Option<&Path>,
    vanilla: Option<&Path>,
    common: &Common,
) -> Result<()> {
    ensure!(!methods.is_empty(), "no methods requested");
    let Loaded { cfg, data, out } = load(root, data_dir, common, "compare")?;
    let predictor = predictor_for(predictor_path, &data)?;
    let checkpoint =
        |needed: bool, path: Option<&Path>, flag: &str, method: &str| -> Result<Option<CfVae>> {
            if !needed {
                return Ok(None);
            }
            match path {
                Some(p) => Ok(Some(vae_for(p, &predictor, &data)?)),
                None => bail!("method {method} needs a checkpoint via --{flag}"),
            }
        };
    let cf_model = checkpoint(methods.contains(&Method::Cfvae), cfvae, "cfvae", "cfvae")?;
    let vanilla_model = checkpoint(
        methods.contains(&Method::LatentSearch),
        vanilla,
        "vanilla",
        "latent_search",
    )?;
    let ctx = MethodContext {
        cfg: &cfg,
        train: &data.train,
        predictor: &predictor,
        cfvae: cf_model.as_ref(),
        vanilla: vanilla_model.as_ref(),
    };
    let queries = data.queries(cfg.eval.max_test);
    let results = methods
        .iter()
        .map(|&m| pipeline::run_method(m, &ctx, &queries).with_context(|| format!("running {m}")))
        .collect::<Result<Vec<_>>>()?;
    let kde = KdeModel::fit(data.train.features())?;
    let cmp = eval::compare_methods(
        &results,
        &kde,
        &data.feature_stds(),
        cfg.eval.changed_fraction,
        Method::Cfvae.name(),
    )?;
    report::write_comparison(&out, &cmp, cfg.eval.changed_fraction)?;
    for r in &results {
        report::write_counterfactuals(
            &out.join(format!("counterfactuals_{}.csv", r.method)),
            r,
            &data.normalization,
            data.train.feature_names(),
        )?;
    }
    let mut header: Vec<&str> = report::COMPARE_HEADER.to_vec();
    header.push("seconds_mean");
    let rows: Vec<Vec<String>> = report::compare_rows(&cmp)
        .into_iter()
        .zip(&cmp.reports)
        .map(|(mut row, r)| {
            row.push(format!("{:.3e}", r.seconds_mean));
            row
        })
        .collect();
    for note in report::eval_notes(cfg.eval.changed_fraction) {
        println!("# {}={}", note.0, note.1);
    }
    print!("{}", report::render_table(&header, &rows));
    println!("-> {}", out.display());
    Ok(())
}

fn sweep(root: &Path, data_dir: &Path, predictor_path: &Path, common: &Common) -> Result<()> {
    let Loaded { cfg, data, out } = load(root, data_dir, common, "sweep")?;
    let predictor = predictor_for(predictor_path, &data)?;
    let result = eval::run_lambda_sweep(&cfg, &data, &predictor)?;
    report::write_sweep(&out, &result, cfg.eval.changed_fraction)?;
    print!(
        "{}",
        report::render_table(&report::SWEEP_HEADER, &report::sweep_rows(&result))
    );
    println!(
        "spearman vs log lambda: validity {:.3}, kde {:.3}, probe {:.3} -> {}",
        result.validity_trend(),
        result.plausibility_trend(),
        result.separation_trend(),
        out.display()
    );
    if !result.complete {
        let failed = result
            .rows
            .last()
            .and_then(|r| r.error.clone())
            .unwrap_or_default();
        bail!("sweep stopped early, partial results written: {failed}");
    }
    Ok(())
}

fn deconstruct(root: &Path, data_dir: &Path, predictor_path: &Path, common: &Common) -> Result<()> {
    let Loaded { cfg, data, out } = load(root, data_dir, common, "deconstruct")?;
    ensure!(
        cfg.task == Task::Moons2d,
        "deconstruct runs on moons2d data, got {}",
        cfg.task
    );
    let predictor = predictor_for(predictor_path, &data)?;
    let rep = eval::run_deconstruction(&cfg, &data, &predictor)?;
    report::write_deconstruction(&out, &rep, cfg.eval.changed_fraction)?;
    print!(
        "{}",
        report::render_table(
            &report::DECONSTRUCTION_HEADER,
            &report::deconstruction_rows(&rep)
        )
    );
    println!("-> {}", out.display());
    Ok(())
}
