//! Dataset loading, stratified splits and standardization.
//!
//! Tabular data comes from CSV files described by a TOML schema. MNIST comes
//! from big-endian IDX files. Iris is compiled into the crate.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const IRIS_CSV: &str = include_str!("../data/iris.csv");

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("format: {0}")]
    Format(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("class {class} has {count} rows, stratified splitting needs at least 2")]
    Stratify { class: usize, count: usize },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    Fraction(f64),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnKind {
    Numeric,
    /// Two distinct values, encoded 0/1 in sorted order.
    Binary,
    /// One-hot over the sorted distinct values.
    Categorical,
    Label,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

/// Column layout of a CSV file. Columns must appear in the file in the
/// order listed; exactly one column has kind `label`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub name: String,
    pub label: String,
    pub columns: Vec<ColumnSpec>,
}

impl Schema {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let schema: Schema = toml::from_str(text).map_err(|e| DataError::Schema(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&text)
    }

    fn validate(&self) -> Result<()> {
        let labels: Vec<_> = self.columns.iter().filter(|c| c.kind == ColumnKind::Label).collect();
        match labels.as_slice() {
            [one] if one.name == self.label => Ok(()),
            [one] => Err(DataError::Schema(format!(
                "label column is {:?} but schema names {:?}",
                one.name, self.label
            ))),
            _ => Err(DataError::Schema(format!("expected one label column, found {}", labels.len()))),
        }
    }

    fn iris() -> Self {
        let mut columns: Vec<ColumnSpec> = ["sepal_length", "sepal_width", "petal_length", "petal_width"]
            .into_iter()
            .map(|n| ColumnSpec {
                name: n.into(),
                kind: ColumnKind::Numeric,
            })
            .collect();
        columns.push(ColumnSpec {
            name: "species".into(),
            kind: ColumnKind::Label,
        });
        Schema {
            name: "iris".into(),
            label: "species".into(),
            columns,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    /// Empty unless a three-way split was requested.
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Column statistics fitted on the training rows; empty before
    /// standardization.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub split: Split,
    /// Side length for square image datasets.
    pub image_side: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows used to score fitness: the validation split when present,
    /// otherwise the test split.
    pub fn selection_rows(&self) -> &[usize] {
        if self.split.validation.is_empty() {
            &self.split.test
        } else {
            &self.split.validation
        }
    }

    /// Keep a stratified subset of `n` training rows.
    pub fn subsample_train(&mut self, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.split.train = stratified_subset(&self.split.train, &self.labels, self.n_classes, n, &mut rng);
    }

    /// Keep a stratified subset of `n` test rows.
    pub fn subsample_test(&mut self, n: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.split.test = stratified_subset(&self.split.test, &self.labels, self.n_classes, n, &mut rng);
    }
}

/// The 150-row Iris table, unsplit and unstandardized.
pub fn load_iris() -> Dataset {
    parse_csv(IRIS_CSV.as_bytes(), &Schema::iris()).expect("embedded iris table is well formed")
}

/// Read a CSV file whose header matches `schema`.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    parse_csv(&bytes, schema)
}

fn parse_csv(bytes: &[u8], schema: &Schema) -> Result<Dataset> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let header = reader.headers().map_err(|e| DataError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let names: Vec<&str> = header.iter().collect();
    let expected: Vec<&str> = schema.columns.iter().map(|c| c.name.as_str()).collect();
    if names != expected {
        return Err(DataError::Schema(format!("header {names:?} does not match schema {expected:?}")));
    }

    let mut cells: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != schema.columns.len() {
            return Err(DataError::Parse {
                line,
                message: format!("expected {} fields, found {}", schema.columns.len(), rec.len()),
            });
        }
        cells.push(rec.iter().map(str::to_string).collect());
    }
    if cells.is_empty() {
        return Err(DataError::Format("no data rows".into()));
    }

    let mut feature_names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    let mut class_names = Vec::new();
    for (c, spec) in schema.columns.iter().enumerate() {
        let values: Vec<&str> = cells.iter().map(|r| r[c].as_str()).collect();
        match spec.kind {
            ColumnKind::Ignore => {}
            ColumnKind::Numeric => {
                let mut col = Vec::with_capacity(values.len());
                for (r, v) in values.iter().enumerate() {
                    let x: f64 = v.parse().map_err(|_| DataError::Parse {
                        line: r as u64 + 2,
                        message: format!("column {:?}: {v:?} is not a number", spec.name),
                    })?;
                    col.push(x);
                }
                feature_names.push(spec.name.clone());
                columns.push(col);
            }
            ColumnKind::Binary => {
                let levels = sorted_levels(&values);
                if levels.len() > 2 {
                    return Err(DataError::Format(format!(
                        "binary column {:?} has {} distinct values",
                        spec.name,
                        levels.len()
                    )));
                }
                let one = levels.get(1).cloned();
                columns.push(values.iter().map(|v| f64::from(Some(v.to_string()) == one)).collect());
                feature_names.push(spec.name.clone());
            }
            ColumnKind::Categorical => {
                for level in sorted_levels(&values) {
                    columns.push(values.iter().map(|v| f64::from(*v == level)).collect());
                    feature_names.push(format!("{}={level}", spec.name));
                }
            }
            ColumnKind::Label => {
                class_names = sorted_levels(&values);
                let index: BTreeMap<&str, usize> =
                    class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
                labels = values.iter().map(|v| index[v]).collect();
            }
        }
    }
    let n_rows = cells.len();
    let features = (0..n_rows).map(|r| columns.iter().map(|col| col[r]).collect()).collect();
    Ok(Dataset {
        name: schema.name.clone(),
        feature_names,
        n_classes: class_names.len(),
        class_names,
        features,
        labels,
        means: Vec::new(),
        stds: Vec::new(),
        split: Split::default(),
        image_side: None,
    })
}

/// Distinct values, numerically sorted when they all parse as numbers.
fn sorted_levels(values: &[&str]) -> Vec<String> {
    let set: BTreeSet<&str> = values.iter().copied().collect();
    let mut levels: Vec<String> = set.into_iter().map(str::to_string).collect();
    if levels.iter().all(|v| v.parse::<f64>().is_ok()) {
        levels.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    levels
}

/// Stratified train/test split followed by z-scoring fitted on the training
/// rows. Zero-variance columns are centred and left unscaled.
pub fn split_standardize(mut d: Dataset, test_frac: f64, seed: u64) -> Result<Dataset> {
    d.split = stratified_split(&d.labels, d.n_classes, test_frac, seed)?;
    standardize(&mut d);
    Ok(d)
}

/// Stratified three-way split: `val_frac` and `test_frac` are fractions of
/// the whole table.
pub fn split_three_way(mut d: Dataset, val_frac: f64, test_frac: f64, seed: u64) -> Result<Dataset> {
    let outer = stratified_split(&d.labels, d.n_classes, test_frac, seed)?;
    let inner_frac = val_frac / (1.0 - test_frac);
    let train_labels: Vec<usize> = outer.train.iter().map(|&i| d.labels[i]).collect();
    let inner = stratified_split(&train_labels, d.n_classes, inner_frac, seed ^ 0x5eed)?;
    d.split = Split {
        train: inner.train.iter().map(|&k| outer.train[k]).collect(),
        validation: inner.test.iter().map(|&k| outer.train[k]).collect(),
        test: outer.test,
    };
    standardize(&mut d);
    Ok(d)
}

/// Split row indices so every class keeps its share of the test set. The
/// test size is `round(n · test_frac)`, distributed over classes by largest
/// remainder.
pub fn stratified_split(labels: &[usize], n_classes: usize, test_frac: f64, seed: u64) -> Result<Split> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(DataError::Fraction(test_frac));
    }
    let by_class = group_by_class(labels, n_classes);
    for (class, rows) in by_class.iter().enumerate() {
        if rows.len() < 2 {
            return Err(DataError::Stratify {
                class,
                count: rows.len(),
            });
        }
    }
    let total_test = (labels.len() as f64 * test_frac).round() as usize;
    let quotas = allocate(&by_class, total_test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (rows, quota) in by_class.into_iter().zip(quotas) {
        let mut rows = rows;
        rows.shuffle(&mut rng);
        let quota = quota.min(rows.len() - 1).max(1);
        split.test.extend_from_slice(&rows[..quota]);
        split.train.extend_from_slice(&rows[quota..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

fn group_by_class(labels: &[usize], n_classes: usize) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Largest-remainder allocation of `total` over groups proportional to size.
/// Ties go to the lower class index.
fn allocate(groups: &[Vec<usize>], total: usize) -> Vec<usize> {
    let n: usize = groups.iter().map(Vec::len).sum();
    if n == 0 {
        return vec![0; groups.len()];
    }
    let exact: Vec<f64> = groups.iter().map(|g| g.len() as f64 * total as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &k in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if quota[k] < groups[k].len() {
            quota[k] += 1;
            rest -= 1;
        }
    }
    quota
}

/// Stratified random subset of `rows` with `n` members (all of `rows` when
/// `n` is not smaller). The result is sorted.
pub fn stratified_subset(
    rows: &[usize],
    labels: &[usize],
    n_classes: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if n >= rows.len() {
        return rows.to_vec();
    }
    let mut by_class = vec![Vec::new(); n_classes];
    for &r in rows {
        by_class[labels[r]].push(r);
    }
    let quotas = allocate(&by_class, n);
    let mut out = Vec::with_capacity(n);
    for (mut group, q) in by_class.into_iter().zip(quotas) {
        group.shuffle(rng);
        out.extend_from_slice(&group[..q]);
    }
    out.sort_unstable();
    out
}

fn standardize(d: &mut Dataset) {
    let cols = d.n_features();
    let train = &d.split.train;
    let n = train.len() as f64;
    let mut means = vec![0.0; cols];
    for &r in train {
        for (m, v) in means.iter_mut().zip(&d.features[r]) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    let mut stds = vec![0.0; cols];
    for &r in train {
        for ((s, v), m) in stds.iter_mut().zip(&d.features[r]).zip(&means) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut stds {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    for row in &mut d.features {
        for ((v, m), s) in row.iter_mut().zip(&means).zip(&stds) {
            *v = (*v - m) / s;
        }
    }
    d.means = means;
    d.stds = stds;
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Format("truncated IDX header".into()))
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!("image file magic {magic:#010x}, expected 0x00000803")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(DataError::Format(format!(
            "image payload has {} bytes, header implies {}",
            body.len(),
            count * rows * cols
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!("label file magic {magic:#010x}, expected 0x00000801")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(DataError::Format(format!("label payload has {} bytes, header implies {count}", body.len())));
    }
    Ok(body.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistOptions {
    /// Digits to keep, relabelled `0..digits.len()` in this order.
    pub digits: Vec<u8>,
    pub test_frac: f64,
    pub train_subsample: Option<usize>,
    pub test_subsample: Option<usize>,
    pub seed: u64,
}

impl Default for MnistOptions {
    fn default() -> Self {
        Self {
            digits: vec![1, 2, 3],
            test_frac: 0.2,
            train_subsample: None,
            test_subsample: Some(150),
            seed: 0,
        }
    }
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<(IdxImages, Vec<u8>)> {
    let img = parse_idx_images(&fs::read(images).map_err(|e| io_err(images, e))?)?;
    let lbl = parse_idx_labels(&fs::read(labels).map_err(|e| io_err(labels, e))?)?;
    if img.count != lbl.len() {
        return Err(DataError::Format(format!("{} images but {} labels", img.count, lbl.len())));
    }
    Ok((img, lbl))
}

fn filter_digits(img: &IdxImages, lbl: &[u8], digits: &[u8]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let size = img.rows * img.cols;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in lbl.iter().enumerate() {
        if let Some(class) = digits.iter().position(|&d| d == l) {
            let px = &img.pixels[i * size..(i + 1) * size];
            features.push(px.iter().map(|&p| f64::from(p) / 255.0).collect());
            labels.push(class);
        }
    }
    (features, labels)
}

fn mnist_dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, side: usize, digits: &[u8], split: Split) -> Dataset {
    let cols = side * side;
    Dataset {
        name: "mnist".into(),
        feature_names: (0..cols).map(|i| format!("px{i}")).collect(),
        class_names: digits.iter().map(u8::to_string).collect(),
        n_classes: digits.len(),
        features,
        labels,
        means: vec![0.0; cols],
        stds: vec![1.0; cols],
        split,
        image_side: Some(side),
    }
}

/// Load one IDX image/label pair, keep `opts.digits`, scale pixels to
/// `[0, 1]`, split stratified, then subsample train and test.
///
/// Pixels are not z-scored; the recorded statistics are the identity.
pub fn load_mnist_subset(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    opts: &MnistOptions,
) -> Result<Dataset> {
    let (img, lbl) = read_idx_pair(images.as_ref(), labels.as_ref())?;
    if img.rows != img.cols {
        return Err(DataError::Format(format!("images are {}x{}, expected square", img.rows, img.cols)));
    }
    let (features, labels) = filter_digits(&img, &lbl, &opts.digits);
    let split = stratified_split(&labels, opts.digits.len(), opts.test_frac, opts.seed)?;
    let mut d = mnist_dataset(features, labels, img.rows, &opts.digits, split);
    if let Some(n) = opts.train_subsample {
        d.subsample_train(n, opts.seed.wrapping_add(1));
    }
    if let Some(n) = opts.test_subsample {
        d.subsample_test(n, opts.seed.wrapping_add(2));
    }
    Ok(d)
}

/// Load the official train and test IDX pairs, keeping their split.
pub fn load_mnist_pair(
    train: (impl AsRef<Path>, impl AsRef<Path>),
    test: (impl AsRef<Path>, impl AsRef<Path>),
    opts: &MnistOptions,
) -> Result<Dataset> {
    let (tr_img, tr_lbl) = read_idx_pair(train.0.as_ref(), train.1.as_ref())?;
    let (te_img, te_lbl) = read_idx_pair(test.0.as_ref(), test.1.as_ref())?;
    if (tr_img.rows, tr_img.cols) != (te_img.rows, te_img.cols) || tr_img.rows != tr_img.cols {
        return Err(DataError::Format("train and test images must share one square size".into()));
    }
    let (mut features, mut labels) = filter_digits(&tr_img, &tr_lbl, &opts.digits);
    let n_train = features.len();
    let (tf, tl) = filter_digits(&te_img, &te_lbl, &opts.digits);
    features.extend(tf);
    labels.extend(tl);
    let split = Split {
        train: (0..n_train).collect(),
        validation: Vec::new(),
        test: (n_train..labels.len()).collect(),
    };
    let mut d = mnist_dataset(features, labels, tr_img.rows, &opts.digits, split);
    if let Some(n) = opts.train_subsample {
        d.subsample_train(n, opts.seed.wrapping_add(1));
    }
    if let Some(n) = opts.test_subsample {
        d.subsample_test(n, opts.seed.wrapping_add(2));
    }
    Ok(d)
}
