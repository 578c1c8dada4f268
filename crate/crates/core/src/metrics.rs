//! ELBO, Gaussian divergences and predictive metrics.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::linalg::{logdet_and_trace_inverse, standard_normal};
use crate::models::{Model, DENSE_LIMIT};
use crate::optim::{DenseGaussianState, GaussianState};

/// A Gaussian variational posterior that can be sampled and compared to
/// the prior `N(0, λ⁻¹ I)`.
pub trait Posterior: Sync {
    fn mean(&self) -> &DVector<f64>;

    /// `n` independent draws, in order.
    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>>
    where
        Self: Sized;

    /// `KL(q ‖ N(0, λ⁻¹ I))` in closed form.
    fn kl_to_prior(&self, lambda: f64) -> Result<f64>;

    fn to_dense(&self) -> Result<DenseGaussian>;
}

fn prior_kl(lambda: f64, d: usize, trace_cov: f64, mean_sq: f64, logdet_precision: f64) -> f64 {
    let d = d as f64;
    0.5 * (lambda * (trace_cov + mean_sq) - d + logdet_precision - d * lambda.ln())
}

impl Posterior for GaussianState {
    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let factor = self.precision.reduced().sampling_factor()?;
        (0..n)
            .map(|_| {
                let eps = standard_normal(self.dim(), rng);
                Ok(&self.mean + factor.apply(&eps)?)
            })
            .collect()
    }

    fn kl_to_prior(&self, lambda: f64) -> Result<f64> {
        let (logdet, trace_inv) = logdet_and_trace_inverse(&self.precision)?;
        Ok(prior_kl(lambda, self.dim(), trace_inv, self.mean.norm_squared(), logdet))
    }

    fn to_dense(&self) -> Result<DenseGaussian> {
        dense_guard(self.dim())?;
        DenseGaussian::from_precision(self.mean.clone(), &self.precision.to_dense())
    }
}

impl Posterior for DenseGaussianState {
    fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let chol = chol("dense sample", &self.precision)?;
        let l = chol.l();
        (0..n)
            .map(|_| {
                let eps = standard_normal(self.mean.len(), rng);
                let y = l
                    .tr_solve_lower_triangular(&eps)
                    .ok_or_else(|| Error::numeric("dense sample", "singular factor"))?;
                Ok(&self.mean + y)
            })
            .collect()
    }

    fn kl_to_prior(&self, lambda: f64) -> Result<f64> {
        let c = chol("kl_to_prior", &self.precision)?;
        let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = c.inverse().trace();
        Ok(prior_kl(lambda, self.mean.len(), trace, self.mean.norm_squared(), logdet))
    }

    fn to_dense(&self) -> Result<DenseGaussian> {
        DenseGaussian::from_precision(self.mean.clone(), &self.precision)
    }
}

fn dense_guard(d: usize) -> Result<()> {
    if d > DENSE_LIMIT {
        return Err(Error::config(format!(
            "dimension {d} exceeds the dense limit {DENSE_LIMIT}"
        )));
    }
    Ok(())
}

fn chol(op: &'static str, m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::numeric(op, "matrix is not positive definite"))
}

/// `N(mean, covariance)` with a dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::config("covariance shape does not match mean"));
        }
        dense_guard(d)?;
        let scale = covariance.amax().max(1.0);
        if (&covariance - covariance.transpose()).amax() > 1e-10 * scale {
            return Err(Error::numeric("DenseGaussian::new", "covariance is not symmetric"));
        }
        chol("DenseGaussian::new", &covariance)?;
        Ok(Self { mean, covariance })
    }

    /// Inverts a precision matrix, symmetrizing away round-off.
    pub fn from_precision(mean: DVector<f64>, precision: &DMatrix<f64>) -> Result<Self> {
        let inv = chol("DenseGaussian::from_precision", precision)?.inverse();
        let cov = (&inv + inv.transpose()) * 0.5;
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `KL(p ‖ q)` between dense Gaussians.
pub fn gaussian_kl(p: &DenseGaussian, q: &DenseGaussian) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::config("dimension mismatch"));
    }
    let cp = chol("gaussian_kl", &p.covariance)?;
    let cq = chol("gaussian_kl", &q.covariance)?;
    let logdet = |c: &Cholesky<f64, Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = cq.solve(&p.covariance).trace();
    let dm = &q.mean - &p.mean;
    let maha = dm.dot(&cq.solve(&dm));
    Ok(0.5 * (trace + maha - p.dim() as f64 + logdet(&cq) - logdet(&cp)))
}

/// `KL(a ‖ b) + KL(b ‖ a)`.
pub fn symmetric_kl(a: &DenseGaussian, b: &DenseGaussian) -> Result<f64> {
    Ok(gaussian_kl(a, b)? + gaussian_kl(b, a)?)
}

/// Summed log-likelihood of `data` at each of `thetas`.
fn total_log_lik(model: &Model, thetas: &[DVector<f64>], data: &Dataset) -> Result<Vec<f64>> {
    thetas
        .par_iter()
        .map(|t| Ok(model.log_likelihood(t, data)?.iter().sum::<f64>()))
        .collect()
}

/// Monte-Carlo ELBO `E_q[log p(D | θ)] - KL(q ‖ p)` (not normalized).
pub fn elbo_estimate<P: Posterior, R: Rng + ?Sized>(
    q: &P,
    model: &Model,
    data: &Dataset,
    lambda: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::config("n_mc must be >= 1"));
    }
    let thetas = q.draw(n_mc, rng)?;
    let ll = total_log_lik(model, &thetas, data)?;
    let mean_ll = ll.iter().sum::<f64>() / n_mc as f64;
    Ok(mean_ll - q.kl_to_prior(lambda)?)
}

/// `-ELBO / N`.
pub fn neg_elbo_per_example<P: Posterior, R: Rng + ?Sized>(
    q: &P,
    model: &Model,
    data: &Dataset,
    lambda: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    Ok(-elbo_estimate(q, model, data, lambda, n_mc, rng)? / data.n() as f64)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `-(1/N) Σ_j log[(1/S) Σ_s p(y_j | x_j, θ_s)]` with `θ_s ~ q`.
pub fn predictive_nll<P: Posterior, R: Rng + ?Sized>(
    q: &P,
    model: &Model,
    test: &Dataset,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(Error::config("n_mc must be >= 1"));
    }
    let thetas = q.draw(n_mc, rng)?;
    predictive_nll_at(model, &thetas, test)
}

/// Predictive log loss for a fixed set of parameter draws.
pub fn predictive_nll_at(model: &Model, thetas: &[DVector<f64>], test: &Dataset) -> Result<f64> {
    let per_sample: Vec<DVector<f64>> = thetas
        .par_iter()
        .map(|t| model.log_likelihood(t, test))
        .collect::<Result<_>>()?;
    let log_s = (thetas.len() as f64).ln();
    let mut total = 0.0;
    let mut buf = vec![0.0; thetas.len()];
    for j in 0..test.n() {
        for (s, ll) in per_sample.iter().enumerate() {
            buf[s] = ll[j];
        }
        total += log_sum_exp(&buf) - log_s;
    }
    Ok(-total / test.n() as f64)
}

/// RMSE of the Monte-Carlo averaged prediction.
pub fn rmse<P: Posterior, R: Rng + ?Sized>(
    q: &P,
    model: &Model,
    test: &Dataset,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if test.task != Task::Regression {
        return Err(Error::config("RMSE is only defined for regression"));
    }
    if n_mc == 0 {
        return Err(Error::config("n_mc must be >= 1"));
    }
    let thetas = q.draw(n_mc, rng)?;
    let preds: Vec<DVector<f64>> = thetas
        .par_iter()
        .map(|t| model.predict(t, test))
        .collect::<Result<_>>()?;
    let mut avg = DVector::zeros(test.n());
    for p in &preds {
        avg += p;
    }
    avg /= n_mc as f64;
    Ok(rmse_of(&avg, &test.targets))
}

pub fn rmse_of(pred: &DVector<f64>, y: &DVector<f64>) -> f64 {
    ((pred - y).norm_squared() / y.len() as f64).sqrt()
}

/// Final metrics of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub neg_elbo_per_example: f64,
    pub test_nll: f64,
    /// Symmetric KL to a reference posterior, when one was computed.
    pub symmetric_kl: Option<f64>,
    pub rmse: Option<f64>,
    /// Seconds of training; excluded from serialized output so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub wall_time: f64,
}
