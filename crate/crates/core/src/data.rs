//! Datasets: synthetic Gaussian generation, Dirichlet source/surrogate splits,
//! forget-set selection, and CSV persistence.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Feature matrix (one row per sample) with integer class labels in `[0, class_count)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                actual: labels.len(),
                context: "label count vs feature rows",
            });
        }
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::invalid("dataset needs at least one row and one column"));
        }
        if class_count < 2 {
            return Err(Error::invalid("class_count must be at least 2"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= class_count) {
            return Err(Error::invalid(format!(
                "label {y} of sample {i} is outside [0, {class_count})"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("subset would be empty"));
        }
        let features = self.features.select_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            features,
            labels,
            class_count: self.class_count,
        })
    }

    /// Row-wise concatenation.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
                context: "concatenated feature width",
            });
        }
        let n = self.len() + other.len();
        let mut features = DMatrix::zeros(n, self.dim());
        features.rows_mut(0, self.len()).copy_from(&self.features);
        features.rows_mut(self.len(), other.len()).copy_from(&other.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Self::new(features, labels, self.class_count.max(other.class_count))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// Two zero-mean Gaussian populations sharing one noisy linear labelling rule.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_source: usize,
    pub n_surrogate: usize,
    /// Off-diagonal covariance of the surrogate population.
    pub zeta: f64,
    pub teacher_seed: u64,
    pub data_seed: u64,
    #[serde(default = "default_flip")]
    pub label_flip_prob: f64,
}

fn default_flip() -> f64 {
    0.15
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            n_source: 15000,
            n_surrogate: 15000,
            zeta: 0.02,
            teacher_seed: 0,
            data_seed: 1,
            label_flip_prob: default_flip(),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_source == 0 || self.n_surrogate == 0 {
            return Err(Error::invalid("dim, n_source and n_surrogate must be positive"));
        }
        if !(0.0..1.0).contains(&self.zeta) {
            return Err(Error::invalid(format!(
                "zeta = {} gives a covariance that is not positive definite; need 0 <= zeta < 1",
                self.zeta
            )));
        }
        if !(0.0..0.5).contains(&self.label_flip_prob) {
            return Err(Error::invalid("label_flip_prob must lie in [0, 0.5)"));
        }
        Ok(())
    }
}

/// `(1 - zeta) I + zeta J`: unit diagonal, `zeta` everywhere else.
pub fn surrogate_covariance(dim: usize, zeta: f64) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { zeta })
}

/// Random linear teacher shared by source and surrogate labels.
pub fn teacher(dim: usize, teacher_seed: u64) -> DVector<f64> {
    let mut rng = seed::rng(teacher_seed);
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

const SOURCE_STREAM: u64 = 1;
const SURROGATE_STREAM: u64 = 2;
const SOURCE_FLIP_STREAM: u64 = 3;
const SURROGATE_FLIP_STREAM: u64 = 4;

/// Draws `(source, surrogate)`.
///
/// Source features are `N(0, I)`, surrogate features `N(0, Σζ)` obtained as
/// `L z` with `L` the Cholesky factor of `Σζ` and `z` standard normal. The
/// underlying draws depend only on `data_seed`, so changing `zeta` with fixed
/// seeds moves the surrogate sample smoothly and leaves the source untouched.
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let d = cfg.dim;
    let cov = surrogate_covariance(d, cfg.zeta);
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::invalid("surrogate covariance is not positive definite"))?;
    let w = teacher(d, cfg.teacher_seed);

    let source_x = standard_normal_rows(cfg.n_source, d, cfg.data_seed, SOURCE_STREAM);
    let z = standard_normal_rows(cfg.n_surrogate, d, cfg.data_seed, SURROGATE_STREAM);
    let surrogate_x = z * chol.l().transpose();

    let source_y = teacher_labels(&source_x, &w, cfg.label_flip_prob, cfg.data_seed, SOURCE_FLIP_STREAM);
    let surrogate_y = teacher_labels(
        &surrogate_x,
        &w,
        cfg.label_flip_prob,
        cfg.data_seed,
        SURROGATE_FLIP_STREAM,
    );
    Ok((
        Dataset::new(source_x, source_y, 2)?,
        Dataset::new(surrogate_x, surrogate_y, 2)?,
    ))
}

fn standard_normal_rows(n: usize, d: usize, seed_value: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = seed::rng_stream(seed_value, stream);
    // Fill row by row so that a prefix of rows does not depend on `n`.
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    x
}

fn teacher_labels(x: &DMatrix<f64>, w: &DVector<f64>, flip: f64, seed_value: u64, stream: u64) -> Vec<usize> {
    let mut rng = seed::rng_stream(seed_value, stream);
    let scores = x * w;
    scores
        .iter()
        .map(|&s| {
            let y = usize::from(s > 0.0);
            if rng.random::<f64>() < flip {
                1 - y
            } else {
                y
            }
        })
        .collect()
}

/// Randomly moves `n_holdout` rows out of `ds`; returns `(rest, holdout)`.
pub fn split_holdout(ds: &Dataset, n_holdout: usize, seed_value: u64) -> Result<(Dataset, Dataset)> {
    if n_holdout == 0 || n_holdout >= ds.len() {
        return Err(Error::invalid(format!(
            "holdout of {n_holdout} rows must leave both sides of a {}-row dataset nonempty",
            ds.len()
        )));
    }
    let mut rng = seed::rng(seed_value);
    let mut hold = index::sample(&mut rng, ds.len(), n_holdout).into_vec();
    hold.sort_unstable();
    let rest = complement(ds.len(), &hold);
    Ok((ds.subset(&rest)?, ds.subset(&hold)?))
}

fn complement(n: usize, sorted: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(n - sorted.len());
    let mut k = 0;
    for i in 0..n {
        if k < sorted.len() && sorted[k] == i {
            k += 1;
        } else {
            out.push(i);
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DirichletSplitConfig {
    /// Concentration; smaller values give more skewed per-class splits.
    pub xi: f64,
    pub seed: u64,
}

/// Result of a Dirichlet split, with the source fraction drawn for each class.
#[derive(Debug, Clone)]
pub struct DirichletSplit {
    pub source: Dataset,
    pub surrogate: Dataset,
    pub source_fractions: Vec<f64>,
    pub source_indices: Vec<usize>,
}

const MAX_SPLIT_ATTEMPTS: usize = 100;

/// Per class, draws `(p_src, p_sur) ~ Dirichlet(ξ, ξ)` and sends each sample
/// of that class to the source side with probability `p_src`.
pub fn dirichlet_split(ds: &Dataset, cfg: &DirichletSplitConfig) -> Result<DirichletSplit> {
    if !(cfg.xi > 0.0) || !cfg.xi.is_finite() {
        return Err(Error::invalid("Dirichlet concentration xi must be positive and finite"));
    }
    let counts = ds.class_counts();
    if let Some((c, &k)) = counts.iter().enumerate().find(|(_, &k)| k < 2) {
        return Err(Error::invalid(format!(
            "class {c} has {k} samples; every class needs at least 2 for a split"
        )));
    }
    let dirichlet = Dirichlet::new([cfg.xi, cfg.xi])
        .map_err(|e| Error::invalid(format!("Dirichlet({}, {}): {e}", cfg.xi, cfg.xi)))?;
    let mut rng = seed::rng(cfg.seed);
    for _ in 0..MAX_SPLIT_ATTEMPTS {
        let fractions: Vec<f64> = (0..ds.class_count()).map(|_| dirichlet.sample(&mut rng)[0]).collect();
        let mut src = Vec::new();
        let mut sur = Vec::new();
        for (i, &y) in ds.labels().iter().enumerate() {
            if rng.random::<f64>() < fractions[y] {
                src.push(i);
            } else {
                sur.push(i);
            }
        }
        if !src.is_empty() && !sur.is_empty() {
            return Ok(DirichletSplit {
                source: ds.subset(&src)?,
                surrogate: ds.subset(&sur)?,
                source_fractions: fractions,
                source_indices: src,
            });
        }
    }
    Err(Error::Numerical(format!(
        "Dirichlet split with xi = {} left one side empty in {MAX_SPLIT_ATTEMPTS} attempts ({} samples)",
        cfg.xi,
        ds.len()
    )))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
pub enum ForgetMode {
    RandomFraction { ratio: f64 },
    WholeClass { class: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ForgetSpec {
    pub mode: ForgetMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ForgetSplit {
    pub retain: Dataset,
    pub forget: Dataset,
    /// Sorted row indices of the forget set within the source.
    pub forget_indices: Vec<usize>,
    pub retain_indices: Vec<usize>,
}

pub fn select_forget(source: &Dataset, spec: &ForgetSpec) -> Result<ForgetSplit> {
    let n = source.len();
    let forget_indices: Vec<usize> = match spec.mode {
        ForgetMode::RandomFraction { ratio } => {
            if !(ratio > 0.0 && ratio < 1.0) {
                return Err(Error::invalid(format!("forget ratio {ratio} must lie in (0, 1)")));
            }
            let m = (ratio * n as f64).round() as usize;
            if m == 0 || m >= n {
                return Err(Error::invalid(format!(
                    "forget ratio {ratio} on {n} samples gives m = {m}; need 0 < m < n"
                )));
            }
            let mut rng = seed::rng(spec.seed);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        ForgetMode::WholeClass { class } => {
            let idx: Vec<usize> = (0..n).filter(|&i| source.labels()[i] == class).collect();
            if idx.is_empty() || idx.len() == n {
                return Err(Error::invalid(format!(
                    "removing class {class} selects {} of {n} samples; need a nonempty strict subset",
                    idx.len()
                )));
            }
            idx
        }
    };
    let retain_indices = complement(n, &forget_indices);
    Ok(ForgetSplit {
        retain: source.subset(&retain_indices)?,
        forget: source.subset(&forget_indices)?,
        forget_indices,
        retain_indices,
    })
}

/// Sidecar written next to every dataset file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub d: usize,
    pub n: usize,
    #[serde(rename = "C")]
    pub class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes `f_1,...,f_d,label` rows plus the JSON sidecar.
///
/// Floats use Rust's shortest round-trip formatting, so a reload is bit-exact.
pub fn save_dataset(ds: &Dataset, path: &Path, generator: Option<serde_json::Value>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut record = Vec::with_capacity(ds.dim() + 1);
    for i in 0..ds.len() {
        record.clear();
        record.extend((0..ds.dim()).map(|j| ds.features[(i, j)].to_string()));
        record.push(ds.labels[i].to_string());
        w.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta = DatasetMeta {
        d: ds.dim(),
        n: ds.len(),
        class_count: ds.class_count(),
        generator,
    };
    let meta_file = meta_path(path);
    fs::write(&meta_file, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(meta_file, e))
}

/// Loads a dataset. The class count comes from the sidecar when present,
/// otherwise from the largest label seen.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let class_count = if meta_file.exists() {
        let text = fs::read_to_string(&meta_file).map_err(|e| Error::io(&meta_file, e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)?;
        Some(meta.class_count)
    } else {
        None
    };
    load_dataset_with_classes(path, class_count)
}

pub fn load_dataset_with_classes(path: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let rows = read_numeric_rows(path)?;
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let width = rows
        .first()
        .map(|(_, r)| r.len())
        .ok_or_else(|| parse_err(1, "file has no rows".into()))?;
    if width < 2 {
        return Err(parse_err(rows[0].0, "need at least one feature column and a label".into()));
    }
    let d = width - 1;
    let mut features = DMatrix::zeros(rows.len(), d);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, (line, fields)) in rows.iter().enumerate() {
        if fields.len() != width {
            return Err(parse_err(
                *line,
                format!("expected {width} columns, found {}", fields.len()),
            ));
        }
        for j in 0..d {
            features[(i, j)] = fields[j]
                .parse::<f64>()
                .map_err(|e| parse_err(*line, format!("feature {}: {e}", j + 1)))?;
        }
        let label = fields[d]
            .parse::<usize>()
            .map_err(|e| parse_err(*line, format!("label '{}': {e}", fields[d])))?;
        if let Some(c) = class_count {
            if label >= c {
                return Err(parse_err(*line, format!("label {label} is outside [0, {c})")));
            }
        }
        labels.push(label);
    }
    let c = class_count.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1).max(2);
    Dataset::new(features, labels, c)
}

/// Feature-only matrix file (sample matrices): same layout without a label column.
pub fn save_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let rows = read_numeric_rows(path)?;
    let width = rows.first().map(|(_, r)| r.len()).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "file has no rows".into(),
    })?;
    let mut m = DMatrix::zeros(rows.len(), width);
    for (i, (line, fields)) in rows.iter().enumerate() {
        if fields.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("expected {width} columns, found {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            m[(i, j)] = f.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: *line,
                message: format!("column {}: {e}", j + 1),
            })?;
        }
    }
    Ok(m)
}

fn read_numeric_rows(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}
