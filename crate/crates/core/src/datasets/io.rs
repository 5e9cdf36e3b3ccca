use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Layout, Normalization, SplitSpec, Splits, Task};
use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];
pub const META_FILE: &str = "meta.json";

/// Sidecar describing a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub task: Task,
    pub seed: u64,
    pub n: usize,
    pub generator: serde_json::Value,
    pub layout: Layout,
    pub feature_names: Vec<String>,
    /// Features, or channels for time series, that set the label.
    pub relevant_features: Vec<String>,
    pub split: SplitSpec,
    pub normalization: Normalization,
    pub normalization_rule: String,
}

impl DatasetMeta {
    pub fn new(
        task: Task,
        seed: u64,
        generator: serde_json::Value,
        relevant_features: Vec<String>,
        split: SplitSpec,
        splits: &Splits,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            task,
            seed,
            n: splits.train.len() + splits.val.len() + splits.test.len(),
            generator,
            layout: splits.train.layout().clone(),
            feature_names: splits.train.feature_names().to_vec(),
            relevant_features,
            split,
            normalization: splits.normalization.clone(),
            normalization_rule: match splits.train.layout() {
                Layout::TimeSeries { .. } => "train split, per channel pooled over time",
                _ => "train split, per column",
            }
            .into(),
        }
    }
}

fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = data.feature_names().iter().map(String::as_str).collect();
    header.push("label");
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..data.len() {
        rec.clear();
        rec.extend(data.features().row(i).iter().map(|v| v.to_string()));
        rec.push(data.labels()[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let f = meta.feature_names.len();
    let expected = meta
        .feature_names
        .iter()
        .map(String::as_str)
        .chain(["label"]);
    if header.len() != f + 1 || !header.iter().eq(expected) {
        return Err(Error::Data(format!(
            "{}: header does not match meta.json feature names",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad =
            |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 1));
        for field in rec.iter().take(f) {
            data.push(field.parse::<f64>().map_err(|_| bad("number"))?);
        }
        labels.push(rec[f].parse::<u8>().map_err(|_| bad("label"))?);
    }
    Dataset::new(
        Tensor::new(vec![labels.len(), f], data)?,
        labels,
        meta.feature_names.clone(),
        meta.layout.clone(),
    )
}

/// Writes raw (unnormalized) `train.csv`, `val.csv`, `test.csv` and
/// `meta.json` into `dir`, creating it if needed.
pub fn write_dataset_dir(dir: &Path, splits: &Splits, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (file, part) in SPLIT_FILES
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        write_csv(&dir.join(file), part)?;
    }
    let path = dir.join(META_FILE);
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_dataset_dir(dir: &Path) -> Result<(Splits, DatasetMeta)> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: format version {} (this build reads {FORMAT_VERSION})",
            path.display(),
            meta.format_version
        )));
    }
    let mut parts = Vec::with_capacity(3);
    for file in SPLIT_FILES {
        parts.push(read_csv(&dir.join(file), &meta)?);
    }
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    let splits = Splits {
        indices: [Vec::new(), Vec::new(), Vec::new()],
        normalization: meta.normalization.clone(),
        train,
        val,
        test,
    };
    Ok((splits, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate, split};

    #[test]
    fn round_trip_preserves_values_exactly() {
        let dir = tempfile::tempdir().unwrap();
        for task in Task::ALL {
            let g = generate(task, 60, 4).unwrap();
            let spec = SplitSpec::default();
            let s = split(&g.dataset, &spec).unwrap();
            let meta = DatasetMeta::new(task, 4, g.generator, g.relevant_features, spec, &s);
            let sub = dir.path().join(task.name());
            write_dataset_dir(&sub, &s, &meta).unwrap();
            let (back, meta2) = read_dataset_dir(&sub).unwrap();
            assert_eq!(meta, meta2);
            assert_eq!(back.train, s.train);
            assert_eq!(back.test, s.test);
            assert_eq!(back.normalization, s.normalization);
        }
    }

    #[test]
    fn header_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = generate(Task::Moons2d, 40, 0).unwrap();
        let spec = SplitSpec::default();
        let s = split(&g.dataset, &spec).unwrap();
        let mut meta = DatasetMeta::new(Task::Moons2d, 0, g.generator, vec![], spec, &s);
        write_dataset_dir(dir.path(), &s, &meta).unwrap();
        meta.feature_names[0] = "other".into();
        fs::write(
            dir.path().join(META_FILE),
            serde_json::to_string(&meta).unwrap(),
        )
        .unwrap();
        assert!(read_dataset_dir(dir.path()).is_err());
    }
}
