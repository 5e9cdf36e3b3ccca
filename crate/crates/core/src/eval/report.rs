//! Comma-separated report files and aligned text tables.
//!
//! Every CSV starts with `# key=value` comment lines describing how the
//! numbers were computed, followed by a fixed header row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::deconstruct::DeconstructionReport;
use super::kde::BANDWIDTH_RULE;
use super::metrics::{Comparison, MethodResults};
use super::sweep::SweepResult;
use crate::autodiff::Tensor;
use crate::datasets::Normalization;
use crate::models::EpochTrace;
use crate::{Error, Result};

pub const COMPARE_HEADER: [&str; 10] = [
    "method",
    "n",
    "validity",
    "kde_mean",
    "kde_median",
    "win_rate",
    "reference",
    "proximity_mse",
    "changed_mean",
    "alignment_mean",
];
pub const TIMING_HEADER: [&str; 3] = ["method", "n", "seconds_mean"];
pub const SWEEP_HEADER: [&str; 6] = [
    "lambda_cf",
    "validity",
    "kde_mean",
    "probe_accuracy",
    "proximity_mse",
    "error",
];
pub const DECONSTRUCTION_HEADER: [&str; 6] = [
    "variant",
    "validity",
    "bbox_outside",
    "displacement",
    "margin",
    "alignment",
];
pub const TRACE_HEADER: [&str; 7] = [
    "epoch", "recon", "kl", "cf", "sparsity", "total", "lambda_s",
];

fn csv_writer(path: &Path, notes: &[(&str, String)]) -> Result<csv::Writer<File>> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for (k, v) in notes {
        writeln!(file, "# {k}={v}").map_err(|e| Error::io(path, e))?;
    }
    Ok(csv::Writer::from_writer(file))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Notes shared by every evaluation file.
pub fn eval_notes(changed_fraction: f64) -> Vec<(&'static str, String)> {
    vec![
        ("kde", "gaussian product kernel".to_string()),
        ("kde_bandwidth", BANDWIDTH_RULE.to_string()),
        (
            "changed_threshold",
            format!("{changed_fraction} * training std"),
        ),
        (
            "win_rate",
            "fraction of queries with loglik >= reference loglik".to_string(),
        ),
    ]
}

pub fn compare_rows(c: &Comparison) -> Vec<Vec<String>> {
    c.reports
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                r.n.to_string(),
                num(r.validity),
                num(r.kde_mean),
                num(r.kde_median),
                num(r.win_rate),
                r.reference.clone(),
                num(r.proximity),
                num(r.changed_mean),
                num(r.alignment_mean),
            ]
        })
        .collect()
}

/// Writes `compare.csv` and `head_to_head.csv` into `dir`. Wall-clock
/// times go to `timing.csv` so the other two depend on the seed alone.
pub fn write_comparison(dir: &Path, c: &Comparison, changed_fraction: f64) -> Result<()> {
    let notes = eval_notes(changed_fraction);
    let mut w = csv_writer(&dir.join("compare.csv"), &notes)?;
    w.write_record(COMPARE_HEADER)?;
    for row in compare_rows(c) {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv_writer(&dir.join("head_to_head.csv"), &notes)?;
    w.write_record(std::iter::once("method").chain(c.methods.iter().map(String::as_str)))?;
    for (m, row) in c.methods.iter().zip(&c.head_to_head) {
        w.write_record(std::iter::once(m.clone()).chain(row.iter().map(|v| num(*v))))?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    let mut w = csv_writer(
        &dir.join("timing.csv"),
        &[("timing", "wall-clock seconds per counterfactual".into())],
    )?;
    w.write_record(TIMING_HEADER)?;
    for r in &c.reports {
        w.write_record([r.method.clone(), r.n.to_string(), num(r.seconds_mean)])?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

pub fn sweep_rows(s: &SweepResult) -> Vec<Vec<String>> {
    s.rows
        .iter()
        .map(|r| {
            vec![
                num(r.lambda_cf),
                num(r.validity),
                num(r.kde_mean),
                num(r.probe_accuracy),
                num(r.proximity),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

/// Writes `sweep.csv` into `dir`.
pub fn write_sweep(dir: &Path, s: &SweepResult, changed_fraction: f64) -> Result<()> {
    let mut notes = eval_notes(changed_fraction);
    notes.push(("lambda_s", "0".into()));
    notes.push(("complete", s.complete.to_string()));
    notes.push(("spearman_validity_loglambda", num(s.validity_trend())));
    notes.push(("spearman_kde_loglambda", num(s.plausibility_trend())));
    notes.push(("spearman_probe_loglambda", num(s.separation_trend())));
    let mut w = csv_writer(&dir.join("sweep.csv"), &notes)?;
    w.write_record(SWEEP_HEADER)?;
    for row in sweep_rows(s) {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    for (i, row) in s.rows.iter().enumerate() {
        if let Some(p) = &row.projection {
            write_projection(
                &dir.join(format!("pca_{i}.csv")),
                p,
                &[("lambda_cf", num(row.lambda_cf))],
            )?;
        }
    }
    Ok(())
}

pub fn deconstruction_rows(r: &DeconstructionReport) -> Vec<Vec<String>> {
    r.variants
        .iter()
        .map(|v| {
            vec![
                v.variant.name().to_string(),
                num(v.validity),
                num(v.bbox_outside),
                num(v.displacement),
                num(v.margin),
                num(v.alignment),
            ]
        })
        .collect()
}

/// Writes `deconstruction.csv` and one `arrows_<variant>.csv` per variant.
pub fn write_deconstruction(
    dir: &Path,
    r: &DeconstructionReport,
    changed_fraction: f64,
) -> Result<()> {
    let notes = eval_notes(changed_fraction);
    let mut w = csv_writer(&dir.join("deconstruction.csv"), &notes)?;
    w.write_record(DECONSTRUCTION_HEADER)?;
    for row in deconstruction_rows(r) {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(dir, e))?;
    for v in &r.variants {
        let d = v.arrows.first().map_or(0, |a| a.len() / 2);
        let header: Vec<String> = (1..=d)
            .map(|j| format!("x{j}"))
            .chain((1..=d).map(|j| format!("xcf{j}")))
            .collect();
        let path = dir.join(format!("arrows_{}.csv", v.variant.name()));
        let mut w = csv_writer(&path, &[("units", "raw features".into())])?;
        w.write_record(&header)?;
        for a in &v.arrows {
            w.write_record(a.iter().map(|x| num(*x)))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Per-query counterfactuals in raw feature units, one row per query.
pub fn write_counterfactuals(
    path: &Path,
    results: &MethodResults,
    normalization: &Normalization,
    feature_names: &[String],
) -> Result<()> {
    let mut w = csv_writer(
        path,
        &[
            ("method", results.method.clone()),
            ("units", "raw features".into()),
        ],
    )?;
    let header: Vec<String> = ["query".to_string()]
        .into_iter()
        .chain(feature_names.iter().map(|n| format!("x:{n}")))
        .chain(feature_names.iter().map(|n| format!("xcf:{n}")))
        .chain(["y", "p", "p_cf", "valid", "iterations"].map(String::from))
        .collect();
    w.write_record(&header)?;
    let d = feature_names.len();
    for (i, r) in results.results.iter().enumerate() {
        let raw = normalization.invert(&Tensor::new(
            vec![2, d],
            r.x.iter().chain(&r.x_cf).copied().collect(),
        )?)?;
        let row: Vec<String> = [i.to_string()]
            .into_iter()
            .chain(raw.data().iter().map(|v| num(*v)))
            .chain([
                r.y.to_string(),
                num(r.p),
                num(r.p_cf),
                u8::from(r.valid).to_string(),
                r.iterations.to_string(),
            ])
            .collect();
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Two-column `pc1,pc2` file.
pub fn write_projection(path: &Path, projection: &Tensor, extra: &[(&str, String)]) -> Result<()> {
    let mut notes = vec![(
        "projection",
        "top two principal components of test latent means".to_string(),
    )];
    notes.extend(extra.iter().cloned());
    let mut w = csv_writer(path, &notes)?;
    w.write_record(["pc1", "pc2"])?;
    for i in 0..projection.rows() {
        w.write_record(projection.row(i).iter().map(|x| num(*x)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace(path: &Path, trace: &[EpochTrace]) -> Result<()> {
    let mut w = csv_writer(path, &[])?;
    w.write_record(TRACE_HEADER)?;
    for t in trace {
        w.write_record([
            t.epoch.to_string(),
            num(t.recon),
            num(t.kl),
            num(t.cf),
            num(t.sparsity),
            num(t.total),
            num(t.lambda_s),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Left-aligned text table with two spaces between columns.
pub fn render_table<S: AsRef<str>>(header: &[S], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.as_ref().len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.iter().map(AsRef::as_ref).collect());
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
