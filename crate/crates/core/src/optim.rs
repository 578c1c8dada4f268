//! Natural-gradient updates of a Gaussian posterior approximation.
//!
//! All updates use the positive empirical Fisher `Ĝ = (N/M) Σ g_i g_iᵀ`
//! (or the exact logistic Hessian `Ĥ`), prior `N(0, λ⁻¹ I)` and a mean
//! step preconditioned by the new precision with heavy-ball momentum:
//!
//! ```text
//! ĝ   = -(N/M) Σ g_i + λ μ
//! Δμ  = (new precision)⁻¹ ĝ
//! m   = γ m + Δμ
//! μ  ← μ - α m
//! ```

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag_of_outer, fast_eig, woodbury_solve, LowRankDiag};
use crate::models::{LogisticHessians, PerExampleGrads, DENSE_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Prior precision λ.
    pub lambda: f64,
    /// Rank L of the low-rank factor.
    pub rank: usize,
    /// Minibatch size M.
    pub minibatch: usize,
    /// Mean learning rate α₀.
    pub alpha0: f64,
    /// Precision learning rate β₀.
    pub beta0: f64,
    /// Rates decay as `1 / (1 + t^decay_exponent)` when `decay` is set.
    pub decay: bool,
    pub decay_exponent: f64,
    /// Momentum γ on the mean step.
    pub momentum: f64,
    /// Dataset size N.
    pub n_total: usize,
    /// Posterior draws averaged per gradient evaluation.
    pub mc_samples: usize,
    pub oversample: usize,
    pub power_iters: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            rank: 1,
            minibatch: 32,
            alpha0: 0.05,
            beta0: 0.05,
            decay: true,
            decay_exponent: 0.51,
            momentum: 0.9,
            n_total: 1,
            mc_samples: 12,
            oversample: 2,
            power_iters: 3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive");
        }
        if self.minibatch == 0 || self.n_total == 0 {
            return bad("minibatch and n_total must be >= 1");
        }
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return bad("alpha0 must be positive");
        }
        if !(self.beta0 > 0.0 && self.beta0 <= 1.0) {
            return bad("beta0 must lie in (0, 1]");
        }
        if !(self.decay_exponent >= 0.0 && self.decay_exponent.is_finite()) {
            return bad("decay_exponent must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be >= 1");
        }
        Ok(())
    }

    fn schedule(&self, rate0: f64, t: u64) -> f64 {
        if self.decay {
            lr_schedule(rate0, t, self.decay_exponent)
        } else {
            rate0
        }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        self.schedule(self.alpha0, t)
    }

    pub fn beta(&self, t: u64) -> f64 {
        self.schedule(self.beta0, t)
    }

    fn ef_scale(&self, m: usize) -> f64 {
        self.n_total as f64 / m as f64
    }
}

/// `α₀ / (1 + t^exponent)`.
pub fn lr_schedule(alpha0: f64, t: u64, exponent: f64) -> f64 {
    alpha0 / (1.0 + (t as f64).powf(exponent))
}

/// Posterior `N(mean, precision⁻¹)` with structured precision, plus the
/// momentum buffer and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub precision: LowRankDiag,
    pub momentum: DVector<f64>,
    pub step: u64,
}

impl GaussianState {
    /// Precision `λ I` (zero `D × rank` factor) around `mean`.
    pub fn prior(mean: DVector<f64>, rank: usize, lambda: f64) -> Result<Self> {
        let d = mean.len();
        Ok(Self {
            precision: LowRankDiag::isotropic(d, rank, lambda)?,
            momentum: DVector::zeros(d),
            mean,
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Posterior with a dense precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussianState {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub momentum: DVector<f64>,
    pub step: u64,
}

impl DenseGaussianState {
    pub fn prior(mean: DVector<f64>, lambda: f64) -> Result<Self> {
        let d = mean.len();
        dense_guard(d)?;
        Ok(Self {
            precision: DMatrix::from_diagonal_element(d, d, lambda),
            momentum: DVector::zeros(d),
            mean,
            step: 0,
        })
    }
}

fn dense_guard(d: usize) -> Result<()> {
    if d > DENSE_LIMIT {
        Err(Error::config(format!(
            "dimension {d} exceeds the dense limit {DENSE_LIMIT}"
        )))
    } else {
        Ok(())
    }
}

fn check_grads(dim: usize, grads: &PerExampleGrads) -> Result<()> {
    if grads.dim() != dim {
        return Err(Error::config(format!(
            "gradient width {} does not match dimension {dim}",
            grads.dim()
        )));
    }
    if grads.batch_size() == 0 {
        return Err(Error::config("empty gradient batch"));
    }
    if grads.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("optimizer", "non-finite per-example gradient"));
    }
    Ok(())
}

/// `-(N/M) Σ g_i + λ μ`.
fn regularized_gradient(grads: &PerExampleGrads, mean: &DVector<f64>, cfg: &OptimizerConfig) -> DVector<f64> {
    let scale = cfg.ef_scale(grads.batch_size());
    grads.sum() * (-scale) + mean * cfg.lambda
}

fn momentum_update(
    mean: &DVector<f64>,
    momentum: &DVector<f64>,
    delta: DVector<f64>,
    alpha: f64,
    cfg: &OptimizerConfig,
    step: u64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let buf = momentum * cfg.momentum + delta;
    let new_mean = mean - &buf * alpha;
    if new_mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            step,
            detail: "mean became non-finite".into(),
        });
    }
    Ok((new_mean, buf))
}

fn checked_diag(d: DVector<f64>, step: u64) -> Result<DVector<f64>> {
    if let Some(i) = d.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Diverged {
            step,
            detail: format!("precision diagonal entry {i} is {}", d[i]),
        });
    }
    Ok(d)
}

/// One SLANG step.
///
/// The new precision is the top-`L` eigenpart of
/// `(1-β) U Uᵀ + β Ĝ` plus a diagonal that restores the exact diagonal of
/// `(1-β)(U Uᵀ + D) + β(Ĝ + λ I)`.
pub fn slang_step<R: Rng + ?Sized>(
    state: &GaussianState,
    grads: &PerExampleGrads,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<GaussianState> {
    let d = state.dim();
    check_grads(d, grads)?;
    let t = state.step;
    let beta = cfg.beta(t);
    let alpha = cfg.alpha(t);
    let m = grads.batch_size();
    let rank = state.precision.rank();

    let u_scale = (1.0 - beta).sqrt();
    let g_scale = (beta * cfg.ef_scale(m)).sqrt();
    let mut cols = DMatrix::zeros(d, rank + m);
    for l in 0..rank {
        cols.set_column(l, &(state.precision.factors().column(l) * u_scale));
    }
    for i in 0..m {
        cols.set_column(rank + i, &(grads.0.row(i).transpose() * g_scale));
    }

    let eig = fast_eig(&cols, rank, cfg.oversample, cfg.power_iters, rng)?;
    let mut u_new = eig.vectors;
    for l in 0..rank {
        let s = eig.values[l].sqrt();
        u_new.column_mut(l).scale_mut(s);
    }
    let correction = diag_of_outer(&cols) - diag_of_outer(&u_new);
    let d_new = state.precision.diag() * (1.0 - beta)
        + DVector::from_element(d, beta * cfg.lambda)
        + correction;
    let precision = LowRankDiag::new(u_new, checked_diag(d_new, t)?)?;

    let g_hat = regularized_gradient(grads, &state.mean, cfg);
    let delta = woodbury_solve(&precision, &g_hat)?;
    let (mean, momentum) = momentum_update(&state.mean, &state.momentum, delta, alpha, cfg, t)?;
    Ok(GaussianState {
        mean,
        precision,
        momentum,
        step: t + 1,
    })
}

/// Moving-average variant: the factor tracks the top eigenpart of `Ĝ`
/// alone, `U ← (1-β) U + β Q Λ^{1/2}`, and the diagonal absorbs the
/// remainder `diag(Ĝ) - diag(Q Λ Qᵀ) + λ` at the same rate β.
///
/// Eigenvectors carry an arbitrary sign, so each new column is flipped to
/// agree with the current one before averaging.
pub fn online_eig_step<R: Rng + ?Sized>(
    state: &GaussianState,
    grads: &PerExampleGrads,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<GaussianState> {
    let d = state.dim();
    check_grads(d, grads)?;
    let t = state.step;
    let beta = cfg.beta(t);
    let alpha = cfg.alpha(t);
    let m = grads.batch_size();
    let rank = state.precision.rank();

    let g_scale = cfg.ef_scale(m).sqrt();
    let cols = grads.0.transpose() * g_scale;
    let eig = fast_eig(&cols, rank, cfg.oversample, cfg.power_iters, rng)?;
    let mut qs = eig.vectors;
    for l in 0..rank {
        qs.column_mut(l).scale_mut(eig.values[l].sqrt());
    }
    let u_old = state.precision.factors();
    for l in 0..rank {
        if u_old.column(l).dot(&qs.column(l)) < 0.0 {
            qs.column_mut(l).neg_mut();
        }
    }
    let u_new = u_old * (1.0 - beta) + &qs * beta;
    let residual = diag_of_outer(&cols) - diag_of_outer(&qs);
    let d_new = state.precision.diag() * (1.0 - beta)
        + (residual + DVector::from_element(d, cfg.lambda)) * beta;
    let precision = LowRankDiag::new(u_new, checked_diag(d_new, t)?)?;

    let g_hat = regularized_gradient(grads, &state.mean, cfg);
    let delta = woodbury_solve(&precision, &g_hat)?;
    let (mean, momentum) = momentum_update(&state.mean, &state.momentum, delta, alpha, cfg, t)?;
    Ok(GaussianState {
        mean,
        precision,
        momentum,
        step: t + 1,
    })
}

/// Diagonal-only update `d ← (1-β) d + β (diag(Ĝ or Ĥ) + λ)`.
///
/// Uses `Ĥ` when `hessians` is given, otherwise the empirical Fisher.
pub fn mean_field_step(
    state: &GaussianState,
    grads: &PerExampleGrads,
    hessians: Option<&LogisticHessians>,
    cfg: &OptimizerConfig,
) -> Result<GaussianState> {
    let d = state.dim();
    if state.precision.rank() != 0 {
        return Err(Error::config("mean-field updates need rank 0"));
    }
    check_grads(d, grads)?;
    let t = state.step;
    let beta = cfg.beta(t);
    let m = grads.batch_size();
    let scale = cfg.ef_scale(m);
    let curvature = match hessians {
        Some(h) => h.diag_sum(),
        None => diag_of_outer(&grads.0.transpose()),
    };
    let d_new = state.precision.diag() * (1.0 - beta)
        + (curvature * scale + DVector::from_element(d, cfg.lambda)) * beta;
    let d_new = checked_diag(d_new, t)?;
    let g_hat = regularized_gradient(grads, &state.mean, cfg);
    let delta = g_hat.component_div(&d_new);
    let (mean, momentum) = momentum_update(&state.mean, &state.momentum, delta, cfg.alpha(t), cfg, t)?;
    Ok(GaussianState {
        mean,
        precision: LowRankDiag::diagonal(d_new)?,
        momentum,
        step: t + 1,
    })
}

fn full_step(
    state: &DenseGaussianState,
    grads: &PerExampleGrads,
    curvature: DMatrix<f64>,
    cfg: &OptimizerConfig,
) -> Result<DenseGaussianState> {
    let d = state.mean.len();
    let t = state.step;
    let beta = cfg.beta(t);
    let scale = cfg.ef_scale(grads.batch_size());
    let mut precision = &state.precision * (1.0 - beta) + curvature * (beta * scale);
    for i in 0..d {
        precision[(i, i)] += beta * cfg.lambda;
    }
    let chol = Cholesky::new(precision.clone())
        .ok_or_else(|| Error::numeric("full_step", "precision lost positive definiteness"))?;
    let g_hat = regularized_gradient(grads, &state.mean, cfg);
    let delta = chol.solve(&g_hat);
    let (mean, momentum) = momentum_update(&state.mean, &state.momentum, delta, cfg.alpha(t), cfg, t)?;
    Ok(DenseGaussianState {
        mean,
        precision,
        momentum,
        step: t + 1,
    })
}

/// Dense update with the empirical Fisher:
/// `Σ⁻¹ ← (1-β) Σ⁻¹ + β((N/M) Σ g_i g_iᵀ + λ I)`.
pub fn vogn_full_step(
    state: &DenseGaussianState,
    grads: &PerExampleGrads,
    cfg: &OptimizerConfig,
) -> Result<DenseGaussianState> {
    let d = state.mean.len();
    dense_guard(d)?;
    check_grads(d, grads)?;
    let ef = grads.0.tr_mul(&grads.0);
    full_step(state, grads, ef, cfg)
}

/// Dense update with exact per-example logistic Hessians in place of the
/// empirical Fisher.
pub fn von_full_step(
    state: &DenseGaussianState,
    hessians: &LogisticHessians,
    grads: &PerExampleGrads,
    cfg: &OptimizerConfig,
) -> Result<DenseGaussianState> {
    let d = state.mean.len();
    dense_guard(d)?;
    check_grads(d, grads)?;
    if hessians.features.ncols() != d || hessians.weights.len() != grads.batch_size() {
        return Err(Error::config("Hessian batch does not match gradients"));
    }
    full_step(state, grads, hessians.dense_sum(), cfg)
}
