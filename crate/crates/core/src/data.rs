//! Datasets: LIBSVM ingestion, synthetic data, splitting and a CSV cache.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Normal, Uniform};

use crate::error::{Error, Result};
use crate::rng::{stream, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Targets in `{0, 1}`.
    Classification,
    /// Real-valued targets.
    Regression,
}

/// Dense `N × D` features with one target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub task: Task,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, targets: DVector<f64>, task: Task) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::config(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::config("dataset contains non-finite values"));
        }
        if task == Task::Classification && targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::UnsupportedLabel(
                "classification targets must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            features,
            targets,
            task,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let features = DMatrix::from_fn(idx.len(), self.d(), |r, c| self.features[(idx[r], c)]);
        let targets = DVector::from_fn(idx.len(), |r, _| self.targets[idx[r]]);
        Dataset {
            features,
            targets,
            task: self.task,
        }
    }
}

/// Parser options. `dim` fixes the number of features before the bias
/// column; by default it is the largest index seen.
#[derive(Debug, Clone, Copy)]
pub struct LibsvmOptions {
    pub task: Task,
    pub dim: Option<usize>,
    pub bias: bool,
}

impl Default for LibsvmOptions {
    fn default() -> Self {
        Self {
            task: Task::Classification,
            dim: None,
            bias: true,
        }
    }
}

struct Row {
    label: f64,
    entries: Vec<(usize, f64)>,
}

fn parse_rows<R: BufRead>(reader: R) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let perr = |detail: String| Error::Parse {
            line: lineno,
            detail,
        };
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(perr(format!("non-finite label {label_tok:?}")));
        }
        let mut entries = Vec::new();
        let mut last = 0usize;
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("expected index:value, got {tok:?}")))?;
            let idx: usize = i
                .parse()
                .map_err(|_| perr(format!("bad feature index {i:?}")))?;
            if idx == 0 {
                return Err(perr("feature indices are 1-based".into()));
            }
            if idx <= last {
                return Err(perr(format!(
                    "feature index {idx} does not increase (previous {last})"
                )));
            }
            let val: f64 = v
                .parse()
                .map_err(|_| perr(format!("bad feature value {v:?}")))?;
            if !val.is_finite() {
                return Err(perr(format!("non-finite feature value {v:?}")));
            }
            last = idx;
            entries.push((idx - 1, val));
        }
        rows.push(Row { label, entries });
    }
    Ok(rows)
}

/// Maps binary labels to `{0, 1}`.
///
/// Labels already within `{-1, +1}` or `{0, 1}` map in the obvious way. Any
/// other pair of distinct values (e.g. the `2`/`4` coding of some LIBSVM
/// files) maps the smaller to 0 and the larger to 1.
fn binary_labels(labels: &[f64]) -> Result<Vec<f64>> {
    let mut distinct: Vec<f64> = labels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let is_subset = |set: &[f64]| distinct.iter().all(|v| set.contains(v));
    let (lo, hi) = if is_subset(&[0.0, 1.0]) {
        (0.0, 1.0)
    } else if is_subset(&[-1.0, 1.0]) {
        (-1.0, 1.0)
    } else if distinct.len() == 2 {
        (distinct[0], distinct[1])
    } else {
        return Err(Error::UnsupportedLabel(format!(
            "expected two classes, found {} distinct labels",
            distinct.len()
        )));
    };
    Ok(labels
        .iter()
        .map(|&y| if y == hi { 1.0 } else { debug_assert_eq!(y, lo); 0.0 })
        .collect())
}

fn assemble(rows: &[Row], dim: usize, opts: &LibsvmOptions, targets: Vec<f64>) -> Result<Dataset> {
    let cols = dim + usize::from(opts.bias);
    let mut features = DMatrix::zeros(rows.len(), cols);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in &row.entries {
            features[(r, c)] = v;
        }
        if opts.bias {
            features[(r, dim)] = 1.0;
        }
    }
    Dataset::new(features, DVector::from_vec(targets), opts.task)
}

fn resolve_dim(rows: &[Row], dim: Option<usize>) -> Result<usize> {
    let seen = rows
        .iter()
        .filter_map(|r| r.entries.last().map(|e| e.0 + 1))
        .max()
        .unwrap_or(0);
    match dim {
        Some(d) if d < seen => Err(Error::config(format!(
            "feature index {seen} exceeds declared dimension {d}"
        ))),
        Some(d) => Ok(d),
        None => Ok(seen),
    }
}

fn map_targets(rows: &[Row], task: Task) -> Result<Vec<f64>> {
    let labels: Vec<f64> = rows.iter().map(|r| r.label).collect();
    match task {
        Task::Classification => binary_labels(&labels),
        Task::Regression => Ok(labels),
    }
}

/// Parses LIBSVM text into a dense dataset with an appended bias column.
pub fn parse_libsvm<R: BufRead>(reader: R, opts: LibsvmOptions) -> Result<Dataset> {
    let rows = parse_rows(reader)?;
    if rows.is_empty() {
        return Err(Error::config("no examples in input"));
    }
    let dim = resolve_dim(&rows, opts.dim)?;
    let targets = map_targets(&rows, opts.task)?;
    assemble(&rows, dim, &opts, targets)
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_libsvm(path: &Path, opts: LibsvmOptions) -> Result<Dataset> {
    parse_libsvm(std::io::BufReader::new(open(path)?), opts)
}

/// Loads a pre-split train/test pair with a shared dimension and label map.
pub fn load_libsvm_pair(train: &Path, test: &Path, opts: LibsvmOptions) -> Result<(Dataset, Dataset)> {
    let read = |p: &Path| -> Result<Vec<Row>> {
        parse_rows(std::io::BufReader::new(open(p)?))
    };
    let tr = read(train)?;
    let te = read(test)?;
    if tr.is_empty() || te.is_empty() {
        return Err(Error::config("empty train or test file"));
    }
    let dim = resolve_dim(&tr, opts.dim)?.max(resolve_dim(&te, opts.dim)?);
    let mut all = map_targets(
        &tr.iter().chain(te.iter()).map(|r| Row { label: r.label, entries: Vec::new() }).collect::<Vec<_>>(),
        opts.task,
    )?;
    let te_targets = all.split_off(tr.len());
    Ok((
        assemble(&tr, dim, &opts, all)?,
        assemble(&te, dim, &opts, te_targets)?,
    ))
}

/// Writes LIBSVM text that [`parse_libsvm`] reads back to the same dataset.
///
/// When `has_bias` is set the last column is omitted. Values use 17
/// significant digits; the last feature index is always written so the
/// dimension survives the round trip.
pub fn write_libsvm<W: Write>(ds: &Dataset, has_bias: bool, mut out: W) -> Result<()> {
    let dim = ds.d() - usize::from(has_bias);
    for r in 0..ds.n() {
        match ds.task {
            Task::Classification => write!(out, "{}", ds.targets[r] as i64)?,
            Task::Regression => write!(out, "{:.16e}", ds.targets[r])?,
        }
        for c in 0..dim {
            let v = ds.features[(r, c)];
            if v != 0.0 || c + 1 == dim {
                write!(out, " {}:{:.16e}", c + 1, v)?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Noisy cubic: `x ~ U[-4, 4]`, `y = x³ + ε`, `ε ~ N(0, 9)`.
///
/// One feature column and no bias column (network models carry their own
/// biases).
pub fn make_cubic_toy(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("cubic toy needs n >= 1"));
    }
    let mut rng = stream(seed, streams::SPLIT);
    let ux = Uniform::new_inclusive(-4.0, 4.0).expect("valid bounds");
    let noise = Normal::new(0.0, 3.0).expect("valid sd");
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: f64 = rng.sample(ux);
        x.push(xi);
        y.push(xi.powi(3) + rng.sample(noise));
    }
    Dataset::new(
        DMatrix::from_column_slice(n, 1, &x),
        DVector::from_vec(y),
        Task::Regression,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub standardize: bool,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.5,
            seed,
            standardize: false,
        }
    }
}

/// Seeded train/test partition.
///
/// The train size is `round(fraction · N)` clamped to `[1, N - 1]`. With
/// `standardize`, each column is shifted and scaled by train statistics
/// (population standard deviation); zero-variance columns, including the
/// bias, are left alone.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::config("train fraction must lie in (0, 1)"));
    }
    if ds.n() < 2 {
        return Err(Error::config("need at least two examples to split"));
    }
    let mut perm: Vec<usize> = (0..ds.n()).collect();
    perm.shuffle(&mut stream(spec.seed, streams::SPLIT));
    let n_train = ((spec.train_fraction * ds.n() as f64).round() as usize).clamp(1, ds.n() - 1);
    let mut train = ds.subset(&perm[..n_train]);
    let mut test = ds.subset(&perm[n_train..]);
    if spec.standardize {
        for c in 0..ds.d() {
            let col = train.features.column(c);
            let mean = col.iter().sum::<f64>() / n_train as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_train as f64;
            let sd = var.sqrt();
            if sd.is_nan() || sd <= 1e-12 * (1.0 + mean.abs()) {
                continue;
            }
            for m in [&mut train.features, &mut test.features] {
                m.column_mut(c).apply(|v| *v = (*v - mean) / sd);
            }
        }
    }
    Ok((train, test))
}

/// Writes `target,x1,...,xD` with a header row.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "target")?;
    for c in 0..ds.d() {
        write!(out, ",x{}", c + 1)?;
    }
    writeln!(out)?;
    for r in 0..ds.n() {
        write!(out, "{:?}", ds.targets[r])?;
        for c in 0..ds.d() {
            write!(out, ",{:?}", ds.features[(r, c)])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path, task: Task) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::Parse {
        line: 1,
        detail: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"target") {
        return Err(Error::Parse {
            line: 1,
            detail: "header must start with `target`".into(),
        });
    }
    let d = cols.len() - 1;
    let mut targets = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::Parse {
                line: i + 2,
                detail: format!("expected {} fields, got {}", d + 1, fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: i + 2,
                detail: format!("bad number {f:?}"),
            })?;
            if j == 0 {
                targets.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = targets.len();
    Dataset::new(
        DMatrix::from_row_slice(n, d, &values),
        DVector::from_vec(targets),
        task,
    )
}
