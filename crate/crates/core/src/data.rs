//! Dataset ingestion: UEA `.ts` files, UCR `.tsv` files, a synthetic
//! frequency-class generator, and per-channel normalization.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::TimeSeriesBatch;
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Mat;

/// Summary of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub examples: usize,
    pub length: usize,
    pub channels: usize,
    pub classes: usize,
    /// Free-form type tag, e.g. `"HAR"` or `"synthetic"`.
    pub kind: String,
    /// Original label of each class index.
    pub class_names: Vec<String>,
}

/// Train and test splits sharing one label mapping.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: TimeSeriesBatch,
    pub test: TimeSeriesBatch,
    pub meta: DatasetMeta,
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_value(tok: &str, path: &str, line: usize) -> Result<f64> {
    let tok = tok.trim();
    if tok == "?" || tok.eq_ignore_ascii_case("nan") {
        return Err(parse_err(path, line, "missing values are not supported"));
    }
    let v: f64 = tok
        .parse()
        .map_err(|_| parse_err(path, line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

/// Parses the text of a `.ts` file. `path` is used in error messages only.
pub fn parse_ts_str(text: &str, path: &str) -> Result<(TimeSeriesBatch, DatasetMeta)> {
    let mut name = String::from("unnamed");
    let mut labels: Option<Vec<String>> = None;
    let mut dimensions: Option<usize> = None;
    let mut in_data = false;
    let mut samples = Vec::new();
    let mut ys = Vec::new();
    let mut shape: Option<(usize, usize)> = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !in_data {
            if !line.starts_with('@') {
                return Err(parse_err(path, lineno, "expected a header line before @data"));
            }
            let mut parts = line[1..].split_whitespace();
            let tag = parts.next().unwrap_or("").to_ascii_lowercase();
            let rest: Vec<&str> = parts.collect();
            match tag.as_str() {
                "problemname" => name = rest.join(" "),
                "classlabel" => {
                    let enabled = rest.first().map(|s| s.eq_ignore_ascii_case("true"));
                    match enabled {
                        Some(true) if rest.len() > 1 => labels = Some(rest[1..].iter().map(|s| s.to_string()).collect()),
                        Some(true) => return Err(parse_err(path, lineno, "@classLabel true without labels")),
                        _ => return Err(parse_err(path, lineno, "unlabelled datasets are not supported")),
                    }
                }
                "dimensions" => {
                    let d = rest
                        .first()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| parse_err(path, lineno, "@dimensions needs a count"))?;
                    dimensions = Some(d);
                }
                "univariate" => {
                    if rest.first().is_some_and(|s| s.eq_ignore_ascii_case("true")) {
                        dimensions.get_or_insert(1);
                    }
                }
                "data" => {
                    if labels.is_none() {
                        return Err(parse_err(path, lineno, "@data reached without @classLabel"));
                    }
                    in_data = true;
                }
                _ => {}
            }
            continue;
        }
        let class_names = labels.as_ref().expect("checked at @data");
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() < 2 {
            return Err(parse_err(path, lineno, "expected dimension fields followed by a label"));
        }
        let (dims, label) = fields.split_at(fields.len() - 1);
        let label = label[0].trim();
        let y = class_names
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| parse_err(path, lineno, format!("unknown class label {label:?}")))?;
        let series: Vec<Vec<f64>> = dims
            .iter()
            .map(|d| d.split(',').map(|t| parse_value(t, path, lineno)).collect())
            .collect::<Result<_>>()?;
        let c = series.len();
        let l = series[0].len();
        if series.iter().any(|s| s.len() != l) {
            return Err(parse_err(path, lineno, "dimensions have different lengths"));
        }
        if let Some(expect) = dimensions {
            if c != expect {
                return Err(parse_err(path, lineno, format!("expected {expect} dimensions, found {c}")));
            }
        }
        match shape {
            None => shape = Some((l, c)),
            Some(s) if s != (l, c) => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("ragged series: expected length {} x {} dimensions, found {l} x {c}", s.0, s.1),
                ))
            }
            _ => {}
        }
        samples.push(Mat::from_fn(l, c, |t, ch| series[ch][t]));
        ys.push(y);
    }
    if !in_data {
        return Err(parse_err(path, text.lines().count(), "missing @data section"));
    }
    let class_names = labels.expect("checked at @data");
    let (length, channels) = shape.unwrap_or((0, dimensions.unwrap_or(1)));
    let meta = DatasetMeta {
        name,
        examples: samples.len(),
        length,
        channels,
        classes: class_names.len(),
        kind: "ts".into(),
        class_names,
    };
    let batch = TimeSeriesBatch::new(samples, Some(ys), length, channels, meta.classes)?;
    Ok((batch, meta))
}

pub fn parse_ts(path: impl AsRef<Path>) -> Result<(TimeSeriesBatch, DatasetMeta)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_ts_str(&text, &path.display().to_string())
}

/// Serializes a labelled batch in `.ts` format.
pub fn write_ts(batch: &TimeSeriesBatch, meta: &DatasetMeta) -> Result<String> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::InvalidArgument("write_ts needs labels".into()))?;
    if meta.class_names.len() != batch.num_classes() {
        return Err(Error::shape("write_ts class names", batch.num_classes(), meta.class_names.len()));
    }
    let mut out = String::new();
    let _ = writeln!(out, "@problemName {}", meta.name);
    let _ = writeln!(out, "@timeStamps false");
    let _ = writeln!(out, "@missing false");
    let _ = writeln!(out, "@univariate {}", batch.channels() == 1);
    if batch.channels() > 1 {
        let _ = writeln!(out, "@dimensions {}", batch.channels());
    }
    let _ = writeln!(out, "@equalLength true");
    let _ = writeln!(out, "@seriesLength {}", batch.length());
    let _ = writeln!(out, "@classLabel true {}", meta.class_names.join(" "));
    let _ = writeln!(out, "@data");
    for (x, &y) in batch.samples().iter().zip(labels) {
        for c in 0..x.cols() {
            let col: Vec<String> = x.col_vec(c).iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&col.join(","));
            out.push(':');
        }
        out.push_str(&meta.class_names[y]);
        out.push('\n');
    }
    Ok(out)
}

/// Raw rows of a `.tsv` file: label text and values.
fn read_tsv_rows(text: &str, path: &str) -> Result<Vec<(String, Vec<f64>, usize)>> {
    let mut rows = Vec::new();
    let mut width: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut cols = raw.trim_end_matches(['\r', '\n']).split('\t');
        let label = cols.next().unwrap_or("").trim().to_string();
        label
            .parse::<i64>()
            .map_err(|_| parse_err(path, lineno, format!("class label must be an integer, got {label:?}")))?;
        let values: Vec<f64> = cols.map(|t| parse_value(t, path, lineno)).collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(parse_err(path, lineno, "row has a label but no values"));
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("inconsistent column count: expected {} values, found {}", w, values.len()),
                ))
            }
            _ => {}
        }
        rows.push((label, values, lineno));
    }
    Ok(rows)
}

/// Sorted distinct integer labels.
fn tsv_classes<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeMap<i64, String> = labels.map(|l| (l.parse::<i64>().expect("validated"), l.to_string())).collect();
    set.into_values().collect()
}

fn tsv_batch(rows: &[(String, Vec<f64>, usize)], classes: &[String], path: &str) -> Result<TimeSeriesBatch> {
    let length = rows.first().map_or(0, |r| r.1.len());
    let mut samples = Vec::with_capacity(rows.len());
    let mut ys = Vec::with_capacity(rows.len());
    for (label, values, lineno) in rows {
        let y = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| parse_err(path, *lineno, format!("unknown class label {label:?}")))?;
        samples.push(Mat::column(values));
        ys.push(y);
    }
    TimeSeriesBatch::new(samples, Some(ys), length, 1, classes.len())
}

pub fn parse_tsv_str(text: &str, path: &str) -> Result<(TimeSeriesBatch, DatasetMeta)> {
    let rows = read_tsv_rows(text, path)?;
    let classes = tsv_classes(rows.iter().map(|r| r.0.as_str()));
    let batch = tsv_batch(&rows, &classes, path)?;
    let name = Path::new(path)
        .file_stem()
        .map_or_else(|| "unnamed".to_string(), |s| s.to_string_lossy().into_owned());
    let meta = DatasetMeta {
        name,
        examples: batch.len(),
        length: batch.length(),
        channels: 1,
        classes: classes.len(),
        kind: "tsv".into(),
        class_names: classes,
    };
    Ok((batch, meta))
}

pub fn parse_tsv(path: impl AsRef<Path>) -> Result<(TimeSeriesBatch, DatasetMeta)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_tsv_str(&text, &path.display().to_string())
}

/// Serializes a univariate labelled batch in `.tsv` format.
pub fn write_tsv(batch: &TimeSeriesBatch, meta: &DatasetMeta) -> Result<String> {
    if batch.channels() != 1 {
        return Err(Error::InvalidArgument("tsv holds univariate series only".into()));
    }
    let labels = batch
        .labels()
        .ok_or_else(|| Error::InvalidArgument("write_tsv needs labels".into()))?;
    let mut out = String::new();
    for (x, &y) in batch.samples().iter().zip(labels) {
        out.push_str(&meta.class_names[y]);
        for v in x.as_slice() {
            let _ = write!(out, "\t{v:?}");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Configuration of the synthetic frequency-class dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Frequencies (cycles per series) of each class.
    pub frequencies: Vec<Vec<f64>>,
    pub amplitude: f64,
    pub noise: f64,
    pub samples: usize,
    pub length: usize,
    pub channels: usize,
    /// Fraction of samples placed in the training split.
    pub train_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frequencies: vec![vec![2.0], vec![6.0], vec![12.0]],
            amplitude: 1.0,
            noise: 0.1,
            samples: 600,
            length: 128,
            channels: 2,
            train_fraction: 0.8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_empty() {
            return Err(Error::Config("synthetic spec needs at least one class".into()));
        }
        if self.length == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic length and channels must be positive".into()));
        }
        let nyquist = self.length as f64 / 2.0;
        for (k, fs) in self.frequencies.iter().enumerate() {
            if fs.is_empty() {
                return Err(Error::Config(format!("class {k} has no frequencies")));
            }
            if let Some(f) = fs.iter().find(|&&f| !(0.0..nyquist).contains(&f)) {
                return Err(Error::Config(format!(
                    "class {k}: frequency {f} must lie in [0, {nyquist}) for length {}",
                    self.length
                )));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) || !self.amplitude.is_finite() {
            return Err(Error::Config("synthetic noise must be >= 0 and amplitude finite".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("synthetic train_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.frequencies.len()
    }
}

/// Sample `i` belongs to class `i mod classes`; every channel is a sum of
/// the class's sinusoids with independent random phases plus Gaussian noise.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<TimeSeriesBatch> {
    spec.validate()?;
    let k = spec.classes();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let tree = SeedTree::new(seed).child("synth");
    let mut samples = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % k;
        let mut rng = tree.index(i as u64).rng();
        let mut x = Mat::zeros(spec.length, spec.channels);
        for c in 0..spec.channels {
            for &f in &spec.frequencies[y] {
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for t in 0..spec.length {
                    let arg = std::f64::consts::TAU * f * t as f64 / spec.length as f64 + phase;
                    x.row_mut(t)[c] += spec.amplitude * arg.sin();
                }
            }
            if spec.noise > 0.0 {
                for t in 0..spec.length {
                    x.row_mut(t)[c] += noise.sample(&mut rng);
                }
            }
        }
        samples.push(x);
        labels.push(y);
    }
    TimeSeriesBatch::new(samples, Some(labels), spec.length, spec.channels, k)
}

/// Generates the synthetic dataset and splits it by index.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let all = synth_generate(spec, seed)?;
    let n_train = (spec.train_fraction * spec.samples as f64).round() as usize;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let test_idx: Vec<usize> = (n_train..spec.samples).collect();
    let meta = DatasetMeta {
        name: "synthetic".into(),
        examples: spec.samples,
        length: spec.length,
        channels: spec.channels,
        classes: spec.classes(),
        kind: "synthetic".into(),
        class_names: (0..spec.classes()).map(|k| k.to_string()).collect(),
    };
    Ok(Dataset {
        train: all.subset(&train_idx),
        test: all.subset(&test_idx),
        meta,
    })
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels whose deviation falls below this are only centered.
pub const MIN_STD: f64 = 1e-8;

impl NormStats {
    /// Statistics over every sample and timestamp of `batch`.
    pub fn fit(batch: &TimeSeriesBatch) -> Self {
        let c = batch.channels();
        let n = (batch.len() * batch.length()) as f64;
        let mut mean = vec![0.0; c];
        for x in batch.samples() {
            for t in 0..x.rows() {
                for (m, v) in mean.iter_mut().zip(x.row(t)) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1.0));
        let mut var = vec![0.0; c];
        for x in batch.samples() {
            for t in 0..x.rows() {
                for ((s, v), m) in var.iter_mut().zip(x.row(t)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|s| (s / n.max(1.0)).sqrt()).collect();
        Self { mean, std }
    }

    pub fn apply(&self, batch: &TimeSeriesBatch) -> Result<TimeSeriesBatch> {
        if self.mean.len() != batch.channels() {
            return Err(Error::shape("normalize", self.mean.len(), batch.channels()));
        }
        let mut out = batch.clone();
        for x in out.samples_mut() {
            for t in 0..x.rows() {
                for (c, v) in x.row_mut(t).iter_mut().enumerate() {
                    *v -= self.mean[c];
                    if self.std[c] >= MIN_STD {
                        *v /= self.std[c];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Z-scores both splits with training statistics.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = NormStats::fit(&ds.train);
    Ok((
        Dataset {
            train: stats.apply(&ds.train)?,
            test: stats.apply(&ds.test)?,
            meta: ds.meta.clone(),
        },
        stats,
    ))
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Ts { train: PathBuf, test: PathBuf },
    Tsv { train: PathBuf, test: PathBuf },
    Synthetic(SynthSpec),
}

impl DataSource {
    /// Resolves relative file paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        match self {
            DataSource::Ts { train, test } => DataSource::Ts {
                train: fix(train),
                test: fix(test),
            },
            DataSource::Tsv { train, test } => DataSource::Tsv {
                train: fix(train),
                test: fix(test),
            },
            DataSource::Synthetic(s) => DataSource::Synthetic(s.clone()),
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

/// Loads both splits; `.tsv` classes are the union of both files' labels.
pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(spec) => synth_dataset(spec, seed),
        DataSource::Ts { train, test } => {
            let (tr, mut meta) = parse_ts(train)?;
            let (te, test_meta) = parse_ts(test)?;
            if test_meta.class_names != meta.class_names {
                return Err(Error::Config(format!(
                    "{} and {} declare different class labels",
                    train.display(),
                    test.display()
                )));
            }
            if !te.is_empty() && (te.length(), te.channels()) != (tr.length(), tr.channels()) {
                return Err(Error::Config("train and test series shapes differ".into()));
            }
            meta.examples = tr.len() + te.len();
            Ok(Dataset {
                train: tr,
                test: te,
                meta,
            })
        }
        DataSource::Tsv { train, test } => {
            let (tp, sp) = (train.display().to_string(), test.display().to_string());
            let tr_rows = read_tsv_rows(&std::fs::read_to_string(train)?, &tp)?;
            let te_rows = read_tsv_rows(&std::fs::read_to_string(test)?, &sp)?;
            let classes = tsv_classes(tr_rows.iter().chain(&te_rows).map(|r| r.0.as_str()));
            let tr = tsv_batch(&tr_rows, &classes, &tp)?;
            let te = tsv_batch(&te_rows, &classes, &sp)?;
            if !te.is_empty() && te.length() != tr.length() {
                return Err(Error::Config("train and test series lengths differ".into()));
            }
            let meta = DatasetMeta {
                name: train
                    .file_stem()
                    .map_or_else(|| "unnamed".into(), |s| s.to_string_lossy().into_owned()),
                examples: tr.len() + te.len(),
                length: tr.length(),
                channels: 1,
                classes: classes.len(),
                kind: "tsv".into(),
                class_names: classes,
            };
            Ok(Dataset {
                train: tr,
                test: te,
                meta,
            })
        }
    }
}

/// Random labelled dataset with the dimensions of the FingerMovements
/// archive entry: 316 + 100 examples, length 50, 28 channels, 2 classes.
pub fn finger_movements_fixture(seed: u64) -> Result<Dataset> {
    let (n_train, n_test, length, channels) = (316, 100, 50, 28);
    let mut rng = SeedTree::new(seed).child("fm").rng();
    let make = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<TimeSeriesBatch> {
        let samples = (0..n).map(|_| Mat::normal(length, channels, 1.0, rng)).collect();
        let labels = (0..n).map(|i| i % 2).collect();
        TimeSeriesBatch::new(samples, Some(labels), length, channels, 2)
    };
    let train = make(n_train, &mut rng)?;
    let test = make(n_test, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        meta: DatasetMeta {
            name: "FingerMovements".into(),
            examples: n_train + n_test,
            length,
            channels,
            classes: 2,
            kind: "EEG".into(),
            class_names: vec!["left".into(), "right".into()],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{amplitude, dft_forward, FeatureTensor};

    const TWO_LINE: &str = "@problemName tiny\n@univariate true\n@classLabel true a b\n@data\n1,2,3:a\n4,5,6:b\n";

    #[test]
    fn ts_univariate_example() {
        let (b, meta) = parse_ts_str(TWO_LINE, "tiny.ts").unwrap();
        assert_eq!(b.sample(0).as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(b.labels().unwrap(), &[0, 1]);
        assert_eq!((meta.examples, meta.length, meta.channels, meta.classes), (2, 3, 1, 2));
        assert_eq!(meta.name, "tiny");
    }

    #[test]
    fn ts_multivariate_example() {
        let text = "@problemName m\n@dimensions 2\n@classLabel true a b\n@data\n1,2:3,4:b\n";
        let (b, _) = parse_ts_str(text, "m.ts").unwrap();
        assert_eq!(b.sample(0), &Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 4.0]]));
        assert_eq!(b.labels().unwrap(), &[1]);
    }

    #[test]
    fn ts_errors_carry_line_numbers() {
        let cases = [
            ("@classLabel true a b\n1,2:a\n", 2),
            ("@classLabel true a b\n@data\n1,2:a\n1,2,3:a\n", 4),
            ("@classLabel true a b\n@data\n1,2:c\n", 3),
            ("@classLabel true a b\n@data\n1,?:a\n", 3),
            ("@problemName x\n@classLabel true a\n", 2),
        ];
        for (text, line) in cases {
            match parse_ts_str(text, "bad.ts") {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn ts_roundtrip() {
        let ds = synth_dataset(
            &SynthSpec {
                frequencies: vec![vec![1.0], vec![3.0, 5.0]],
                samples: 12,
                length: 16,
                channels: 3,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        let text = write_ts(&ds.train, &ds.meta).unwrap();
        let (back, meta) = parse_ts_str(&text, "rt.ts").unwrap();
        assert_eq!(back, ds.train);
        assert_eq!(meta.class_names, ds.meta.class_names);
    }

    #[test]
    fn tsv_examples() {
        let (b, meta) = parse_tsv_str("2\t0.5\t0.6\n", "x.tsv").unwrap();
        assert_eq!(b.sample(0).as_slice(), &[0.5, 0.6]);
        assert_eq!(meta.class_names, vec!["2"]);
        let (b, meta) = parse_tsv_str("1\t0.1\n-1\t0.2\n1\t0.3\n", "fordb.tsv").unwrap();
        assert_eq!(meta.class_names, vec!["-1", "1"]);
        assert_eq!(b.labels().unwrap(), &[1, 0, 1]);
        assert!(matches!(
            parse_tsv_str("1\t0.1\t0.2\n2\t0.3\n", "r.tsv"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn tsv_roundtrip() {
        let spec = SynthSpec {
            frequencies: vec![vec![1.0], vec![2.0], vec![4.0]],
            samples: 9,
            length: 10,
            channels: 1,
            ..Default::default()
        };
        let ds = synth_dataset(&spec, 1).unwrap();
        let text = write_tsv(&ds.train, &ds.meta).unwrap();
        let (back, _) = parse_tsv_str(&text, "rt.tsv").unwrap();
        assert_eq!(back, ds.train);
    }

    #[test]
    fn pure_sinusoid_peaks_at_its_bins() {
        let spec = SynthSpec {
            frequencies: vec![vec![5.0]],
            noise: 0.0,
            samples: 1,
            length: 64,
            channels: 1,
            ..Default::default()
        };
        let b = synth_generate(&spec, 3).unwrap();
        let a = amplitude(&dft_forward(&FeatureTensor::new(b.sample(0).clone()).unwrap()));
        let col = a.col_vec(0);
        let mut order: Vec<usize> = (0..64).collect();
        order.sort_by(|&i, &j| col[j].total_cmp(&col[i]));
        let mut top = [order[0], order[1]];
        top.sort();
        assert_eq!(top, [5, 59]);
        assert!(col[order[2]] < 1e-9 * col[5]);
    }

    #[test]
    fn synth_edge_cases() {
        let empty = synth_generate(
            &SynthSpec {
                samples: 0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(empty.is_empty());
        let bad = SynthSpec {
            frequencies: vec![vec![64.0]],
            length: 128,
            ..Default::default()
        };
        assert!(synth_generate(&bad, 1).is_err());
        let s = SynthSpec::default();
        assert_eq!(synth_generate(&s, 9).unwrap(), synth_generate(&s, 9).unwrap());
        assert_ne!(synth_generate(&s, 9).unwrap(), synth_generate(&s, 10).unwrap());
    }

    #[test]
    fn normalization_moments() {
        let ds = synth_dataset(&SynthSpec::default(), 2).unwrap();
        let (n, _) = normalize(&ds).unwrap();
        let stats = NormStats::fit(&n.train);
        for c in 0..2 {
            assert!(stats.mean[c].abs() <= 1e-10);
            assert!((stats.std[c] - 1.0).abs() <= 1e-6);
        }
        assert!(n.test.samples().iter().all(|x| x.first_non_finite().is_none()));

        let constant = TimeSeriesBatch::new(vec![Mat::filled(4, 1, 3.0)], None, 4, 1, 1).unwrap();
        let out = NormStats::fit(&constant).apply(&constant).unwrap();
        assert_eq!(out.sample(0).max_abs(), 0.0);
    }

    #[test]
    fn finger_movements_fixture_meta() {
        let ds = finger_movements_fixture(0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (tp, sp) = (dir.path().join("FM_TRAIN.ts"), dir.path().join("FM_TEST.ts"));
        std::fs::write(&tp, write_ts(&ds.train, &ds.meta).unwrap()).unwrap();
        std::fs::write(&sp, write_ts(&ds.test, &ds.meta).unwrap()).unwrap();
        let back = load_dataset(&DataSource::Ts { train: tp, test: sp }, 0).unwrap();
        let m = &back.meta;
        assert_eq!((m.examples, m.length, m.channels, m.classes), (416, 50, 28, 2));
    }
}
