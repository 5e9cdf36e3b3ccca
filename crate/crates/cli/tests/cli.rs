use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "--set",
    "predictor.arch.hidden=[16, 16]",
    "--set",
    "predictor.train.epochs=3",
    "--set",
    "vae.train.epochs=3",
    "--set",
    "vae.encoder.hidden=[16]",
    "--set",
    "eval.max_test=30",
];

fn cfvae(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfvae"))
        .args(args)
        .env("CFVAE_OUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(root: &Path, args: &[&str]) -> String {
    let out = cfvae(root, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(root: &Path, args: &[&str]) -> (i32, String) {
    let out = cfvae(root, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(
        err.trim_end().lines().count(),
        1,
        "diagnostic is not one line: {err}"
    );
    (out.status.code().unwrap(), err)
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(String::from)
        .collect()
}

struct Moons {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: String,
    predictor: String,
}

fn moons() -> Moons {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    ok(
        &root,
        &["gen-data", "moons2d", "--n", "300", "--seed", "11"],
    );
    let run = root.join("moons2d-seed11");
    let data = run.join("data").display().to_string();
    let mut args = vec!["train-predictor", "--data", &data];
    args.extend(TINY);
    ok(&root, &args);
    let predictor = run.join("predictor/predictor.ckpt").display().to_string();
    Moons {
        _dir: dir,
        root,
        data,
        predictor,
    }
}

#[test]
fn gen_data_is_deterministic_and_records_its_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for root in [a.path(), b.path()] {
        ok(root, &["gen-data", "moons2d", "--n", "4000", "--seed", "5"]);
    }
    let da = a.path().join("moons2d-seed5/data");
    let db = b.path().join("moons2d-seed5/data");
    for f in [
        "train.csv",
        "val.csv",
        "test.csv",
        "meta.json",
        "config.toml",
    ] {
        assert_eq!(
            fs::read(da.join(f)).unwrap(),
            fs::read(db.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(da.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 5);
    assert_eq!(meta["n"], 4000);
}

#[test]
fn explicit_out_and_invalid_requests() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("elsewhere");
    let out_s = out.display().to_string();
    ok(
        dir.path(),
        &["gen-data", "ppg", "--n", "50", "--out", &out_s],
    );
    assert!(out.join("meta.json").exists());
    assert!(out.join("config.toml").exists());

    let (code, err) = fails(dir.path(), &["gen-data", "moons2d", "--n", "1"]);
    assert_eq!(code, 1);
    assert!(err.contains("split"), "{err}");
    let (code, _) = fails(dir.path(), &["gen-data", "spirals"]);
    assert_eq!(code, 2);
    let (code, err) = fails(dir.path(), &["train-cfvae", "--data", &out_s]);
    assert_eq!(code, 2);
    assert!(err.contains("--predictor"), "{err}");
    let (_, err) = fails(dir.path(), &["gen-data", "moons2d", "--set", "vae.bogus=1"]);
    assert!(err.contains("bogus"), "{err}");
}

#[test]
fn flags_override_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.toml");
    fs::write(&file, "seed = 3\n[data]\nn = 120\n[vae]\nlatent_dim = 5\n").unwrap();
    let file_s = file.display().to_string();
    ok(
        dir.path(),
        &[
            "gen-data",
            "moons2d",
            "--config",
            &file_s,
            "--set",
            "data.n=90",
        ],
    );
    let cfg = fs::read_to_string(dir.path().join("moons2d-seed3/data/config.toml")).unwrap();
    assert!(cfg.contains("n = 90"), "{cfg}");
    assert!(cfg.contains("latent_dim = 5"), "{cfg}");
    ok(
        dir.path(),
        &["gen-data", "moons2d", "--config", &file_s, "--seed", "4"],
    );
    let meta = fs::read_to_string(dir.path().join("moons2d-seed4/data/meta.json")).unwrap();
    assert!(meta.contains("\"n\": 120"));
}

#[test]
fn train_resume_compare_pipeline() {
    let m = moons();
    let run = m.root.join("moons2d-seed11");
    let pred_metrics = fs::read_to_string(run.join("predictor/metrics.json")).unwrap();
    assert!(pred_metrics.contains("auc"));

    let base = [
        "train-cfvae",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
    ];
    let mut full: Vec<&str> = base.to_vec();
    full.extend(TINY);
    ok(&m.root, &full);
    let trace = fs::read_to_string(run.join("cfvae/trace.csv")).unwrap();
    assert!(trace.starts_with("epoch,recon,kl,cf,sparsity,total,lambda_s\n"));
    assert_eq!(data_rows(&run.join("cfvae/trace.csv")).len(), 3);
    let uninterrupted = fs::read_to_string(run.join("cfvae/metrics.json")).unwrap();

    // interrupted after one epoch, then resumed into a separate directory
    let part = m.root.join("part").display().to_string();
    let mut first = full.clone();
    first.extend(["--stop-after", "1", "--out", &part]);
    ok(&m.root, &first);
    assert_eq!(data_rows(&m.root.join("part/trace.csv")).len(), 1);
    let ckpt = m.root.join("part/vae.ckpt").display().to_string();
    let resumed = m.root.join("resumed").display().to_string();
    let mut second = full.clone();
    second.extend(["--resume", &ckpt, "--out", &resumed]);
    ok(&m.root, &second);
    assert_eq!(
        fs::read_to_string(m.root.join("resumed/metrics.json")).unwrap(),
        uninterrupted
    );
    assert_eq!(
        fs::read_to_string(m.root.join("resumed/trace.csv")).unwrap(),
        fs::read_to_string(run.join("cfvae/trace.csv")).unwrap()
    );

    let mut vanilla = full.clone();
    vanilla.push("--vanilla");
    ok(&m.root, &vanilla);

    let cf = run.join("cfvae/vae.ckpt").display().to_string();
    let va = run.join("vanilla/vae.ckpt").display().to_string();
    let mut cmp = vec![
        "compare",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
        "--cfvae",
        &cf,
        "--vanilla",
        &va,
    ];
    cmp.extend(TINY);
    let stdout = ok(&m.root, &cmp);
    assert!(stdout.contains("latent_search"));
    let compare_csv = fs::read_to_string(run.join("compare/compare.csv")).unwrap();
    assert!(compare_csv.contains("# kde_bandwidth=scott"));
    assert!(compare_csv.contains("# changed_threshold=0.1"));
    assert_eq!(data_rows(&run.join("compare/compare.csv")).len(), 4);
    assert_eq!(
        data_rows(&run.join("compare/counterfactuals_nun.csv")).len(),
        30
    );
    assert!(run.join("compare/config.toml").exists());
    ok(&m.root, &cmp);
    assert_eq!(
        fs::read_to_string(run.join("compare/compare.csv")).unwrap(),
        compare_csv
    );

    // one method only is a degenerate but valid report
    let mut single = vec![
        "compare",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
        "--methods",
        "nun",
    ];
    single.extend(TINY);
    ok(&m.root, &single);
    let rows = data_rows(&run.join("compare/compare.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("nun,30,1,"), "{}", rows[0]);

    let missing = [
        "compare",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
        "--methods",
        "cfvae",
    ];
    let (_, err) = fails(&m.root, &missing);
    assert!(err.contains("--cfvae"), "{err}");
}

#[test]
fn resume_against_another_predictor_is_refused() {
    let m = moons();
    let mut args = vec![
        "train-cfvae",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
        "--stop-after",
        "1",
    ];
    args.extend(TINY);
    ok(&m.root, &args);
    let other = m.root.join("other").display().to_string();
    let mut retrain = vec![
        "train-predictor",
        "--data",
        &m.data,
        "--seed",
        "12",
        "--out",
        &other,
    ];
    retrain.extend(TINY);
    ok(&m.root, &retrain);
    let other_ckpt = m.root.join("other/predictor.ckpt").display().to_string();
    let ckpt = m
        .root
        .join("moons2d-seed11/cfvae/vae.ckpt")
        .display()
        .to_string();
    let mut resume = vec![
        "train-cfvae",
        "--data",
        &m.data,
        "--predictor",
        &other_ckpt,
        "--resume",
        &ckpt,
    ];
    resume.extend(TINY);
    let (_, err) = fails(&m.root, &resume);
    assert!(err.contains("predictor"), "{err}");
}

#[test]
fn sweep_and_deconstruct_shapes() {
    let m = moons();
    let run = m.root.join("moons2d-seed11");
    let mut sweep = vec![
        "sweep-lambda",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
    ];
    sweep.extend(TINY);
    ok(&m.root, &sweep);
    let rows = data_rows(&run.join("sweep/sweep.csv"));
    assert_eq!(rows.len(), 6);
    assert!(rows[5].starts_with("100000,"));
    for i in 0..6 {
        let pca = run.join(format!("sweep/pca_{i}.csv"));
        let text = fs::read_to_string(&pca).unwrap();
        assert!(text.lines().any(|l| l == "pc1,pc2"));
    }

    let mut dec = vec![
        "deconstruct",
        "--data",
        &m.data,
        "--predictor",
        &m.predictor,
    ];
    dec.extend(TINY);
    ok(&m.root, &dec);
    let dir = run.join("deconstruct");
    let variants = data_rows(&dir.join("deconstruction.csv"));
    assert_eq!(variants.len(), 4);
    for v in ["ce_only", "ce_recon", "ce_recon_kl", "full"] {
        let path = dir.join(format!("arrows_{v}.csv"));
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.lines().any(|l| l == "x1,x2,xcf1,xcf2"));
        let rows = data_rows(&path);
        assert_eq!(rows.len(), 20);
        assert!(rows.iter().all(|r| r.split(',').count() == 4));
    }
    assert!(dir.join("config.toml").exists());
}

#[test]
fn deconstruct_needs_moons() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &["gen-data", "vitals_si", "--n", "200", "--seed", "2"],
    );
    let data = dir
        .path()
        .join("vitals_si-seed2/data")
        .display()
        .to_string();
    let mut args = vec!["train-predictor", "--data", &data];
    args.extend(TINY);
    ok(dir.path(), &args);
    let pred = dir
        .path()
        .join("vitals_si-seed2/predictor/predictor.ckpt")
        .display()
        .to_string();
    let (_, err) = fails(
        dir.path(),
        &["deconstruct", "--data", &data, "--predictor", &pred],
    );
    assert!(err.contains("moons2d"), "{err}");
}
