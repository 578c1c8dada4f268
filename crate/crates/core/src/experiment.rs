//! Experiment runner: config parsing, per-split training, result files and
//! state serialization.
//!
//! A run writes into its output directory:
//!
//! * `config.json`: the effective configuration, including the seed
//! * `trace.csv`: `split,restart,epoch,step,neg_elbo,test_nll`
//! * `runs.csv`: one row of final metrics per split and restart
//! * `summary.json`: mean and standard error over non-diverged runs
//! * `states/`: the final posterior of every run (and reference, if any)
//! * `timings.csv`: wall-clock seconds per run, only when requested
//!
//! Everything except `timings.csv` is a function of the config and seed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_libsvm, load_libsvm_pair, make_cubic_toy, split, Dataset, LibsvmOptions, SplitSpec, Task};
use crate::error::{Error, Result};
use crate::linalg::LowRankDiag;
use crate::metrics::{neg_elbo_per_example, predictive_nll, rmse, symmetric_kl, DenseGaussian, MetricsRecord, Posterior};
use crate::models::{Likelihood, MlpArchitecture, Model, DENSE_LIMIT};
use crate::optim::{DenseGaussianState, GaussianState, OptimizerConfig};
use crate::rng::{derive_seed, stream, streams};
use crate::train::{Method, PosteriorState, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// One LIBSVM file, split randomly per split index.
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
        /// Append a constant-1 feature (default true).
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Fixed train and test files; every split index reuses them.
    LibsvmPair {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Synthetic noisy cubic regression.
    Cubic { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
        likelihood: Likelihood,
    },
}

/// How to train the reference posterior used for the symmetric KL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub method: Method,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
}

fn default_true() -> bool {
    true
}
fn default_fraction() -> f64 {
    0.5
}
fn default_one() -> usize {
    1
}
fn default_eval_mc() -> usize {
    1000
}
fn default_trace_mc() -> usize {
    20
}

/// The JSON experiment description. `optimizer.n_total` is overwritten with
/// the training-set size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub data: DataConfig,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub standardize: bool,
    pub model: ModelConfig,
    pub method: Method,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_one")]
    pub splits: usize,
    #[serde(default = "default_one")]
    pub restarts: usize,
    /// Posterior draws for final metrics.
    #[serde(default = "default_eval_mc")]
    pub eval_mc: usize,
    /// Trace every this many epochs; 0 disables the trace.
    #[serde(default)]
    pub trace_every: usize,
    #[serde(default = "default_trace_mc")]
    pub trace_mc: usize,
    #[serde(default)]
    pub reference: Option<ReferenceConfig>,
    /// Set by the CLI; a seed in the file is only a default.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if self.splits == 0 || self.restarts == 0 || self.eval_mc == 0 || self.trace_mc == 0 {
            return Err(Error::config("splits, restarts, eval_mc and trace_mc must be >= 1"));
        }
        let logistic = matches!(self.model, ModelConfig::Logistic);
        for m in std::iter::once(self.method).chain(self.reference.as_ref().map(|r| r.method)) {
            if m.uses_hessian() && !logistic {
                return Err(Error::config(format!("{} requires the logistic model", m.name())));
            }
        }
        match (&self.data, &self.model) {
            (DataConfig::Cubic { .. }, ModelConfig::Logistic) => {
                return Err(Error::config("cubic data is a regression task"))
            }
            (DataConfig::Cubic { n }, _) if *n < 2 => return Err(Error::config("cubic data needs n >= 2")),
            _ => {}
        }
        if let ModelConfig::Mlp { likelihood, .. } = &self.model {
            let is_reg = matches!(likelihood, Likelihood::Gaussian { .. });
            if is_reg != matches!(self.data, DataConfig::Cubic { .. }) {
                return Err(Error::config("likelihood does not match the dataset task"));
            }
        }
        self.optimizer.validate()?;
        if let Some(r) = &self.reference {
            r.optimizer.validate()?;
        }
        Ok(())
    }

    fn build_model(&self, n_features: usize) -> Result<Model> {
        Ok(match &self.model {
            ModelConfig::Logistic => Model::Logistic,
            ModelConfig::Mlp { hidden, likelihood } => {
                let mut widths = vec![n_features];
                widths.extend(hidden);
                widths.push(1);
                Model::Mlp(MlpArchitecture::new(widths, *likelihood)?)
            }
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

enum Source {
    Pool(Dataset),
    Fixed(Dataset, Dataset),
}

fn load_source(cfg: &ExperimentConfig, base: &Path, seed: u64) -> Result<Source> {
    Ok(match &cfg.data {
        DataConfig::Libsvm { path, dim, bias } => Source::Pool(load_libsvm(
            &resolve(base, path),
            LibsvmOptions { dim: *dim, bias: *bias, ..Default::default() },
        )?),
        DataConfig::LibsvmPair { train, test, dim, bias } => {
            let (a, b) = load_libsvm_pair(
                &resolve(base, train),
                &resolve(base, test),
                LibsvmOptions { dim: *dim, bias: *bias, ..Default::default() },
            )?;
            Source::Fixed(a, b)
        }
        DataConfig::Cubic { n } => Source::Pool(make_cubic_toy(*n, derive_seed(seed, &[u64::MAX]))?),
    })
}

fn split_for(src: &Source, cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<(Dataset, Dataset)> {
    match src {
        Source::Pool(ds) => split(
            ds,
            &SplitSpec {
                train_fraction: cfg.train_fraction,
                seed: derive_seed(seed, &[index as u64]),
                standardize: cfg.standardize,
            },
        ),
        Source::Fixed(a, b) => Ok((a.clone(), b.clone())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub epoch: usize,
    pub step: u64,
    pub neg_elbo: f64,
    pub test_nll: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub split: usize,
    pub restart: usize,
    pub trace: Vec<TracePoint>,
    /// `None` when training failed; `error` then says why.
    pub metrics: Option<MetricsRecord>,
    pub error: Option<String>,
    pub state: Option<PosteriorState>,
    pub reference: Option<PosteriorState>,
    pub diverged: bool,
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a Model,
    train: &'a Dataset,
    test: &'a Dataset,
}

fn train_posterior(
    ctx: &RunContext,
    method: Method,
    opt: &OptimizerConfig,
    epochs: usize,
    run_seed: u64,
    mut on_epoch: impl FnMut(usize, &PosteriorState) -> Result<()>,
) -> Result<PosteriorState> {
    let mean = ctx.model.init_mean(ctx.train.d(), &mut stream(run_seed, streams::INIT))?;
    let mut opt = opt.clone();
    opt.n_total = ctx.train.n();
    let mut trainer = Trainer::new(method, ctx.model, &opt, ctx.train, mean, stream(run_seed, streams::TRAIN))?;
    on_epoch(0, trainer.state())?;
    for e in 1..=epochs {
        trainer.epoch()?;
        on_epoch(e, trainer.state())?;
    }
    Ok(trainer.into_state())
}

fn evaluate<P: Posterior>(
    ctx: &RunContext,
    q: &P,
    n_mc: usize,
    seed: u64,
    stream_id: u64,
) -> Result<(f64, f64)> {
    let lambda = ctx.cfg.optimizer.lambda;
    let neg_elbo = neg_elbo_per_example(q, ctx.model, ctx.train, lambda, n_mc, &mut stream(seed, stream_id))?;
    let nll = predictive_nll(q, ctx.model, ctx.test, n_mc, &mut stream(derive_seed(seed, &[1]), stream_id))?;
    Ok((neg_elbo, nll))
}

fn run_one(ctx: &RunContext, seed: u64, split_index: usize, restart: usize) -> RunResult {
    let cfg = ctx.cfg;
    let run_seed = derive_seed(seed, &[split_index as u64, restart as u64]);
    let mut trace = Vec::new();
    let started = Instant::now();
    let trained = train_posterior(ctx, cfg.method, &cfg.optimizer, cfg.epochs, run_seed, |epoch, state| {
        if cfg.trace_every > 0 && epoch % cfg.trace_every == 0 {
            // The same trace stream at every epoch gives common random
            // numbers along the curve.
            let (neg_elbo, test_nll) = evaluate(ctx, state, cfg.trace_mc, run_seed, streams::TRACE)?;
            trace.push(TracePoint {
                epoch,
                step: state.step(),
                neg_elbo,
                test_nll,
            });
        }
        Ok(())
    });
    let wall_time = started.elapsed().as_secs_f64();
    let mut result = RunResult {
        split: split_index,
        restart,
        trace,
        metrics: None,
        error: None,
        state: None,
        reference: None,
        diverged: false,
    };
    let state = match trained {
        Ok(s) => s,
        Err(e) => {
            result.diverged = matches!(e, Error::Diverged { .. });
            result.error = Some(e.to_string());
            return result;
        }
    };
    let finish = || -> Result<(MetricsRecord, Option<PosteriorState>)> {
        let (neg_elbo, test_nll) = evaluate(ctx, &state, cfg.eval_mc, run_seed, streams::EVAL)?;
        let rmse_v = match ctx.test.task {
            Task::Regression => Some(rmse(
                &state,
                ctx.model,
                ctx.test,
                cfg.eval_mc,
                &mut stream(derive_seed(run_seed, &[2]), streams::EVAL),
            )?),
            Task::Classification => None,
        };
        let mut reference = None;
        let mut skl = None;
        if let Some(r) = &cfg.reference {
            let ref_seed = derive_seed(run_seed, &[u64::MAX]);
            let ref_state = train_posterior(ctx, r.method, &r.optimizer, r.epochs, ref_seed, |_, _| Ok(()))?;
            skl = Some(symmetric_kl(&state.to_dense()?, &ref_state.to_dense()?)?);
            reference = Some(ref_state);
        }
        Ok((
            MetricsRecord {
                neg_elbo_per_example: neg_elbo,
                test_nll,
                symmetric_kl: skl,
                rmse: rmse_v,
                wall_time,
            },
            reference,
        ))
    };
    match finish() {
        Ok((m, reference)) => {
            result.metrics = Some(m);
            result.reference = reference;
        }
        Err(e) => {
            result.diverged = matches!(e, Error::Diverged { .. });
            result.error = Some(e.to_string());
        }
    }
    result.state = Some(state);
    result
}

/// Trains every split and restart; runs execute in parallel but results
/// come back in `(split, restart)` order and do not depend on scheduling.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, seed: u64) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let src = load_source(cfg, base_dir, seed)?;
    let splits: Vec<(Dataset, Dataset)> = (0..cfg.splits)
        .map(|s| split_for(&src, cfg, seed, s))
        .collect::<Result<_>>()?;
    let n_features = splits[0].0.d();
    let model = cfg.build_model(n_features)?;
    let d = model.num_params(n_features)?;
    if cfg.optimizer.rank > d {
        return Err(Error::config(format!("rank {} exceeds dimension {d}", cfg.optimizer.rank)));
    }
    if (cfg.method.is_dense() || cfg.reference.is_some()) && d > DENSE_LIMIT {
        return Err(Error::config(format!("dimension {d} exceeds the dense limit {DENSE_LIMIT}")));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.splits)
        .flat_map(|s| (0..cfg.restarts).map(move |r| (s, r)))
        .collect();
    Ok(jobs
        .par_iter()
        .map(|&(s, r)| {
            let ctx = RunContext {
                cfg,
                model: &model,
                train: &splits[s].0,
                test: &splits[s].1,
            };
            run_one(&ctx, seed, s, r)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            stderr,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    pub runs: usize,
    pub failed: usize,
    pub neg_elbo: Option<Aggregate>,
    pub test_nll: Option<Aggregate>,
    pub symmetric_kl: Option<Aggregate>,
    pub rmse: Option<Aggregate>,
}

pub fn summarize(cfg: &ExperimentConfig, seed: u64, results: &[RunResult]) -> Summary {
    let ok: Vec<&MetricsRecord> = results.iter().filter_map(|r| r.metrics.as_ref()).collect();
    let collect = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| -> Option<Aggregate> {
        Aggregate::of(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
    };
    Summary {
        name: cfg.name.clone(),
        method: cfg.method,
        seed,
        runs: results.len(),
        failed: results.len() - ok.len(),
        neg_elbo: collect(&|m| Some(m.neg_elbo_per_example)),
        test_nll: collect(&|m| Some(m.test_nll)),
        symmetric_kl: collect(&|m| m.symmetric_kl),
        rmse: collect(&|m| m.rmse),
    }
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes all result files into `out`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    seed: u64,
    results: &[RunResult],
    out: &Path,
    timings: bool,
) -> Result<Summary> {
    fs::create_dir_all(out.join("states"))?;
    let mut effective = cfg.clone();
    effective.seed = Some(seed);
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&effective)? + "\n")?;

    let mut trace = String::from("split,restart,epoch,step,neg_elbo,test_nll\n");
    let mut runs = String::from("split,restart,status,neg_elbo,test_nll,symmetric_kl,rmse,error\n");
    let mut times = String::from("split,restart,wall_time\n");
    for r in results {
        for t in &r.trace {
            writeln!(trace, "{},{},{},{},{},{}", r.split, r.restart, t.epoch, t.step, t.neg_elbo, t.test_nll).unwrap();
        }
        let status = if r.diverged {
            "diverged"
        } else if r.metrics.is_some() {
            "ok"
        } else {
            "failed"
        };
        let m = r.metrics.as_ref();
        writeln!(
            runs,
            "{},{},{},{},{},{},{},{}",
            r.split,
            r.restart,
            status,
            opt_num(m.map(|m| m.neg_elbo_per_example)),
            opt_num(m.map(|m| m.test_nll)),
            opt_num(m.and_then(|m| m.symmetric_kl)),
            opt_num(m.and_then(|m| m.rmse)),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"),
        )
        .unwrap();
        if let Some(m) = m {
            writeln!(times, "{},{},{}", r.split, r.restart, m.wall_time).unwrap();
        }
        let stem = format!("split{}_restart{}", r.split, r.restart);
        if let Some(s) = &r.state {
            save_state(s, &out.join("states").join(format!("{stem}.json")))?;
        }
        if let Some(s) = &r.reference {
            save_state(s, &out.join("states").join(format!("{stem}_reference.json")))?;
        }
    }
    fs::write(out.join("trace.csv"), trace)?;
    fs::write(out.join("runs.csv"), runs)?;
    if timings {
        fs::write(out.join("timings.csv"), times)?;
    }
    let summary = summarize(cfg, seed, results);
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

pub const STATE_VERSION: u32 = 1;

/// Serialized posterior. Matrices are flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub version: u32,
    #[serde(flatten)]
    pub body: StateBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateBody {
    /// Precision `U Uᵀ + diag(d)`; `factors` is `dim × rank`.
    LowRankDiag {
        dim: usize,
        rank: usize,
        step: u64,
        mean: Vec<f64>,
        factors: Vec<f64>,
        diag: Vec<f64>,
        momentum: Vec<f64>,
    },
    /// Dense `dim × dim` precision.
    Dense {
        dim: usize,
        step: u64,
        mean: Vec<f64>,
        precision: Vec<f64>,
        momentum: Vec<f64>,
    },
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl StateFile {
    pub fn from_state(s: &PosteriorState) -> Self {
        let body = match s {
            PosteriorState::Structured(g) => StateBody::LowRankDiag {
                dim: g.dim(),
                rank: g.precision.rank(),
                step: g.step,
                mean: g.mean.as_slice().to_vec(),
                factors: row_major(g.precision.factors()),
                diag: g.precision.diag().as_slice().to_vec(),
                momentum: g.momentum.as_slice().to_vec(),
            },
            PosteriorState::Dense(g) => StateBody::Dense {
                dim: g.mean.len(),
                step: g.step,
                mean: g.mean.as_slice().to_vec(),
                precision: row_major(&g.precision),
                momentum: g.momentum.as_slice().to_vec(),
            },
        };
        Self {
            version: STATE_VERSION,
            body,
        }
    }

    pub fn into_state(self) -> Result<PosteriorState> {
        if self.version != STATE_VERSION {
            return Err(Error::config(format!(
                "unsupported state version {} (expected {STATE_VERSION})",
                self.version
            )));
        }
        let len = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::config(format!("state field {what} has {got} entries, expected {want}")))
            }
        };
        Ok(match self.body {
            StateBody::LowRankDiag { dim, rank, step, mean, factors, diag, momentum } => {
                len("mean", mean.len(), dim)?;
                len("factors", factors.len(), dim * rank)?;
                len("diag", diag.len(), dim)?;
                len("momentum", momentum.len(), dim)?;
                PosteriorState::Structured(GaussianState {
                    mean: DVector::from_vec(mean),
                    precision: LowRankDiag::new(DMatrix::from_row_slice(dim, rank, &factors), DVector::from_vec(diag))?,
                    momentum: DVector::from_vec(momentum),
                    step,
                })
            }
            StateBody::Dense { dim, step, mean, precision, momentum } => {
                len("mean", mean.len(), dim)?;
                len("precision", precision.len(), dim * dim)?;
                len("momentum", momentum.len(), dim)?;
                PosteriorState::Dense(DenseGaussianState {
                    mean: DVector::from_vec(mean),
                    precision: DMatrix::from_row_slice(dim, dim, &precision),
                    momentum: DVector::from_vec(momentum),
                    step,
                })
            }
        })
    }
}

pub fn save_state(s: &PosteriorState, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string(&StateFile::from_state(s))? + "\n")?;
    Ok(())
}

pub fn load_state(path: &Path) -> Result<PosteriorState> {
    let f: StateFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    f.into_state()
}

/// Writes `means.csv`, `variances.csv` (`source,index,value`) and
/// `covariance.csv` (`source,row,col,value`, strictly upper triangle) for a
/// trained state and a reference, with `source` in `{state, reference}`.
pub fn dump_covariance(state: &PosteriorState, reference: &PosteriorState, out: &Path) -> Result<()> {
    if state.dim() != reference.dim() {
        return Err(Error::config("state and reference dimensions differ"));
    }
    if state.dim() > DENSE_LIMIT {
        return Err(Error::config(format!("dimension exceeds the dense limit {DENSE_LIMIT}")));
    }
    let pair: [(&str, DenseGaussian); 2] = [("state", state.to_dense()?), ("reference", reference.to_dense()?)];
    fs::create_dir_all(out)?;
    let mut means = String::from("source,index,value\n");
    let mut vars = String::from("source,index,value\n");
    let mut cov = String::from("source,row,col,value\n");
    for (name, g) in &pair {
        let d = g.dim();
        for i in 0..d {
            writeln!(means, "{name},{i},{}", g.mean[i]).unwrap();
            writeln!(vars, "{name},{i},{}", g.covariance[(i, i)]).unwrap();
        }
        for i in 0..d {
            for j in i + 1..d {
                writeln!(cov, "{name},{i},{j},{}", g.covariance[(i, j)]).unwrap();
            }
        }
    }
    fs::write(out.join("means.csv"), means)?;
    fs::write(out.join("variances.csv"), vars)?;
    fs::write(out.join("covariance.csv"), cov)?;
    Ok(())
}
