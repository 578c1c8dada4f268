//! Likelihood models with per-example gradients.
//!
//! Gradients are of `log p(y_i | x_i, θ)` (not its negation), one row per
//! example, never summed over the batch.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};

/// Largest dimension for which dense `D × D` objects are built.
pub const DENSE_LIMIT: usize = 2000;

/// Observation model on the scalar network output `f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    /// `p(y = 1) = σ(f)`.
    BernoulliLogit,
    /// `y ~ N(f, 1/τ)`.
    Gaussian { tau: f64 },
}

impl Likelihood {
    pub fn task(&self) -> Task {
        match self {
            Likelihood::BernoulliLogit => Task::Classification,
            Likelihood::Gaussian { .. } => Task::Regression,
        }
    }

    pub fn log_prob(&self, f: f64, y: f64) -> f64 {
        match *self {
            Likelihood::BernoulliLogit => y * log_sigmoid(f) + (1.0 - y) * log_sigmoid(-f),
            Likelihood::Gaussian { tau } => {
                0.5 * (tau / (2.0 * std::f64::consts::PI)).ln() - 0.5 * tau * (y - f).powi(2)
            }
        }
    }

    /// `∂ log p / ∂f`.
    pub fn dlog_prob(&self, f: f64, y: f64) -> f64 {
        match *self {
            Likelihood::BernoulliLogit => y - sigmoid(f),
            Likelihood::Gaussian { tau } => tau * (y - f),
        }
    }
}

/// `1 / (1 + e^{-z})` without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log σ(z) = -log(1 + e^{-z})` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    -((-z).max(0.0) + (-z.abs()).exp().ln_1p())
}

/// Fully connected rectifier network with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    /// `[input, hidden..., output]`; the output width must be 1.
    pub widths: Vec<usize>,
    pub likelihood: Likelihood,
}

impl MlpArchitecture {
    pub fn new(widths: Vec<usize>, likelihood: Likelihood) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(
                "an MLP needs at least input and output widths, all >= 1",
            ));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::config("only scalar-output networks are supported"));
        }
        if let Likelihood::Gaussian { tau } = likelihood {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config("noise precision must be positive"));
            }
        }
        Ok(Self { widths, likelihood })
    }

    /// `Σ (fan_in + 1) · fan_out`.
    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Offsets of each layer's weight block in θ. Weights are stored
    /// row-major as `fan_out × fan_in`, followed by `fan_out` biases.
    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.widths.len());
        let mut o = 0;
        for w in self.widths.windows(2) {
            offs.push(o);
            o += (w[0] + 1) * w[1];
        }
        offs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Model {
    /// Logistic regression on the raw features (bias column included).
    Logistic,
    Mlp(MlpArchitecture),
}

/// `M × D` matrix whose row `i` is `∇_θ log p(D_i | θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerExampleGrads(pub DMatrix<f64>);

impl PerExampleGrads {
    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    /// `Σ_i g_i`.
    pub fn sum(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.dim());
        for i in 0..self.batch_size() {
            for j in 0..self.dim() {
                s[j] += self.0[(i, j)];
            }
        }
        s
    }
}

/// Per-example negative log-likelihood Hessians of logistic regression in
/// factored form: example `i` contributes `weights[i] · x_i x_iᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHessians {
    pub weights: DVector<f64>,
    pub features: DMatrix<f64>,
}

impl LogisticHessians {
    pub fn dense(&self, i: usize) -> DMatrix<f64> {
        let x = self.features.row(i).transpose();
        &x * x.transpose() * self.weights[i]
    }

    /// `Σ_i w_i x_i x_iᵀ`.
    pub fn dense_sum(&self) -> DMatrix<f64> {
        let d = self.features.ncols();
        let mut h = DMatrix::zeros(d, d);
        for i in 0..self.weights.len() {
            h.ger(self.weights[i], &self.features.row(i).transpose(), &self.features.row(i).transpose(), 1.0);
        }
        h
    }

    /// `Σ_i w_i x_i²` elementwise, the diagonal of [`Self::dense_sum`].
    pub fn diag_sum(&self) -> DVector<f64> {
        let d = self.features.ncols();
        let mut out = DVector::zeros(d);
        for i in 0..self.weights.len() {
            for j in 0..d {
                out[j] += self.weights[i] * self.features[(i, j)].powi(2);
            }
        }
        out
    }
}

impl Model {
    pub fn likelihood(&self) -> Likelihood {
        match self {
            Model::Logistic => Likelihood::BernoulliLogit,
            Model::Mlp(a) => a.likelihood,
        }
    }

    /// Parameter count for data with `n_features` columns.
    pub fn num_params(&self, n_features: usize) -> Result<usize> {
        match self {
            Model::Logistic => Ok(n_features),
            Model::Mlp(a) => {
                if a.widths[0] != n_features {
                    return Err(Error::config(format!(
                        "network input width {} but data has {} features",
                        a.widths[0], n_features
                    )));
                }
                Ok(a.num_params())
            }
        }
    }

    fn check(&self, theta: &DVector<f64>, batch: &Dataset) -> Result<()> {
        let d = self.num_params(batch.d())?;
        if theta.len() != d {
            return Err(Error::config(format!(
                "parameter length {} but model needs {d}",
                theta.len()
            )));
        }
        if batch.task != self.likelihood().task() {
            return Err(Error::config("dataset task does not match the likelihood"));
        }
        Ok(())
    }

    /// Scalar output `f(x_i, θ)` per example (a logit for classification).
    pub fn predict(&self, theta: &DVector<f64>, batch: &Dataset) -> Result<DVector<f64>> {
        self.check(theta, batch)?;
        Ok(match self {
            Model::Logistic => logits(theta, batch),
            Model::Mlp(a) => mlp_forward(a, theta, batch).output,
        })
    }

    /// `log p(y_i | x_i, θ)` per example.
    pub fn log_likelihood(&self, theta: &DVector<f64>, batch: &Dataset) -> Result<DVector<f64>> {
        let f = self.predict(theta, batch)?;
        let lik = self.likelihood();
        Ok(DVector::from_fn(batch.n(), |i, _| lik.log_prob(f[i], batch.targets[i])))
    }

    pub fn per_example_grads(&self, theta: &DVector<f64>, batch: &Dataset) -> Result<PerExampleGrads> {
        self.check(theta, batch)?;
        if batch.n() == 0 {
            return Err(Error::config("empty minibatch"));
        }
        Ok(match self {
            Model::Logistic => logistic_grads(theta, batch),
            Model::Mlp(a) => mlp_grads(a, theta, batch),
        })
    }

    /// Negative log-likelihood Hessians; logistic regression only.
    pub fn logistic_hessians(&self, theta: &DVector<f64>, batch: &Dataset) -> Result<LogisticHessians> {
        if *self != Model::Logistic {
            return Err(Error::config("exact Hessians are only available for logistic regression"));
        }
        self.check(theta, batch)?;
        if batch.d() > DENSE_LIMIT {
            return Err(Error::config(format!(
                "dimension {} exceeds the dense limit {DENSE_LIMIT}",
                batch.d()
            )));
        }
        let f = logits(theta, batch);
        Ok(LogisticHessians {
            weights: f.map(|z| {
                let s = sigmoid(z);
                s * (1.0 - s)
            }),
            features: batch.features.clone(),
        })
    }

    /// Initial variational mean: zeros for logistic regression, fan-in
    /// scaled uniform weights `U[-1/√fan_in, 1/√fan_in]` and zero biases for
    /// networks.
    pub fn init_mean<R: Rng + ?Sized>(&self, n_features: usize, rng: &mut R) -> Result<DVector<f64>> {
        let d = self.num_params(n_features)?;
        let mut theta = DVector::zeros(d);
        if let Model::Mlp(a) = self {
            for (k, off) in a.offsets().into_iter().enumerate() {
                let (fan_in, fan_out) = (a.widths[k], a.widths[k + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                for j in 0..fan_in * fan_out {
                    theta[off + j] = rng.random_range(-bound..=bound);
                }
            }
        }
        Ok(theta)
    }
}

fn logits(theta: &DVector<f64>, batch: &Dataset) -> DVector<f64> {
    DVector::from_fn(batch.n(), |i, _| {
        let mut z = 0.0;
        for j in 0..batch.d() {
            z += batch.features[(i, j)] * theta[j];
        }
        z
    })
}

fn logistic_grads(theta: &DVector<f64>, batch: &Dataset) -> PerExampleGrads {
    let f = logits(theta, batch);
    let mut g = DMatrix::zeros(batch.n(), batch.d());
    for i in 0..batch.n() {
        let r = batch.targets[i] - sigmoid(f[i]);
        for j in 0..batch.d() {
            g[(i, j)] = r * batch.features[(i, j)];
        }
    }
    PerExampleGrads(g)
}

struct Forward {
    /// Per layer `k`, an `M × width_k` matrix of pre-activations.
    pre: Vec<DMatrix<f64>>,
    /// Per layer `k` (0 = input), `M × width_k` activations.
    act: Vec<DMatrix<f64>>,
    output: DVector<f64>,
}

fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Rectifier derivative, taken as 0 at exactly 0.
fn relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn mlp_forward(a: &MlpArchitecture, theta: &DVector<f64>, batch: &Dataset) -> Forward {
    let m = batch.n();
    let layers = a.widths.len() - 1;
    let offs = a.offsets();
    let mut act = vec![batch.features.clone()];
    let mut pre = Vec::with_capacity(layers);
    for k in 0..layers {
        let (fan_in, fan_out) = (a.widths[k], a.widths[k + 1]);
        let w = offs[k];
        let b = w + fan_in * fan_out;
        let prev = &act[k];
        let mut z = DMatrix::zeros(m, fan_out);
        for i in 0..m {
            for j in 0..fan_out {
                let mut s = theta[b + j];
                for l in 0..fan_in {
                    s += theta[w + j * fan_in + l] * prev[(i, l)];
                }
                z[(i, j)] = s;
            }
        }
        let out = if k + 1 < layers { z.map(relu) } else { z.clone() };
        pre.push(z);
        act.push(out);
    }
    let output = act[layers].column(0).into_owned();
    Forward { pre, act, output }
}

fn mlp_grads(a: &MlpArchitecture, theta: &DVector<f64>, batch: &Dataset) -> PerExampleGrads {
    let m = batch.n();
    let layers = a.widths.len() - 1;
    let offs = a.offsets();
    let fw = mlp_forward(a, theta, batch);
    let mut g = DMatrix::zeros(m, theta.len());
    // delta[i, j] = ∂ log p_i / ∂ z_k[i, j] for the current layer k.
    let mut delta = DMatrix::from_fn(m, 1, |i, _| {
        a.likelihood.dlog_prob(fw.output[i], batch.targets[i])
    });
    for k in (0..layers).rev() {
        let (fan_in, fan_out) = (a.widths[k], a.widths[k + 1]);
        let w = offs[k];
        let b = w + fan_in * fan_out;
        let prev = &fw.act[k];
        for i in 0..m {
            for j in 0..fan_out {
                let dj = delta[(i, j)];
                for l in 0..fan_in {
                    g[(i, w + j * fan_in + l)] = dj * prev[(i, l)];
                }
                g[(i, b + j)] = dj;
            }
        }
        if k > 0 {
            let below = &fw.pre[k - 1];
            let mut next = DMatrix::zeros(m, fan_in);
            for i in 0..m {
                for l in 0..fan_in {
                    let mut s = 0.0;
                    for j in 0..fan_out {
                        s += theta[w + j * fan_in + l] * delta[(i, j)];
                    }
                    next[(i, l)] = s * relu_grad(below[(i, l)]);
                }
            }
            delta = next;
        }
    }
    PerExampleGrads(g)
}
