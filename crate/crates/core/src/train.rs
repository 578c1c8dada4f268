//! Minibatch training loop shared by every method.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{DenseGaussian, Posterior};
use crate::models::{LogisticHessians, Model, PerExampleGrads};
use crate::optim::{
    mean_field_step, online_eig_step, slang_step, von_full_step, vogn_full_step, DenseGaussianState,
    GaussianState, OptimizerConfig,
};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Slang,
    SlangOnlineEig,
    VognFull,
    VonFull,
    MeanFieldEf,
    MeanFieldHessian,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Slang => "slang",
            Method::SlangOnlineEig => "slang-online-eig",
            Method::VognFull => "vogn-full",
            Method::VonFull => "von-full",
            Method::MeanFieldEf => "mean-field-ef",
            Method::MeanFieldHessian => "mean-field-hessian",
        }
    }

    pub fn uses_hessian(self) -> bool {
        matches!(self, Method::VonFull | Method::MeanFieldHessian)
    }

    pub fn is_dense(self) -> bool {
        matches!(self, Method::VognFull | Method::VonFull)
    }
}

/// The posterior held by a trainer: structured for SLANG and mean-field
/// methods, dense for the full-Gaussian baselines.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorState {
    Structured(GaussianState),
    Dense(DenseGaussianState),
}

impl PosteriorState {
    pub fn step(&self) -> u64 {
        match self {
            PosteriorState::Structured(s) => s.step,
            PosteriorState::Dense(s) => s.step,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean().len()
    }
}

impl Posterior for PosteriorState {
    fn mean(&self) -> &DVector<f64> {
        match self {
            PosteriorState::Structured(s) => &s.mean,
            PosteriorState::Dense(s) => &s.mean,
        }
    }

    fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        match self {
            PosteriorState::Structured(s) => s.draw(n, rng),
            PosteriorState::Dense(s) => s.draw(n, rng),
        }
    }

    fn kl_to_prior(&self, lambda: f64) -> Result<f64> {
        match self {
            PosteriorState::Structured(s) => s.kl_to_prior(lambda),
            PosteriorState::Dense(s) => s.kl_to_prior(lambda),
        }
    }

    fn to_dense(&self) -> Result<DenseGaussian> {
        match self {
            PosteriorState::Structured(s) => s.to_dense(),
            PosteriorState::Dense(s) => s.to_dense(),
        }
    }
}

/// Runs one method on one training set.
///
/// Each step draws `mc_samples` parameters from the current posterior,
/// averages the per-example gradients (and Hessian weights) over them, and
/// applies the method's update. An epoch visits a fresh permutation in
/// `floor(N / M)` full minibatches; leftover examples wait for a later
/// epoch.
pub struct Trainer<'a> {
    method: Method,
    model: &'a Model,
    cfg: &'a OptimizerConfig,
    train: &'a Dataset,
    rng: StreamRng,
    state: PosteriorState,
}

impl<'a> Trainer<'a> {
    pub fn new(
        method: Method,
        model: &'a Model,
        cfg: &'a OptimizerConfig,
        train: &'a Dataset,
        initial_mean: DVector<f64>,
        rng: StreamRng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = model.num_params(train.d())?;
        if initial_mean.len() != d {
            return Err(Error::config("initial mean has the wrong length"));
        }
        if method.uses_hessian() && *model != Model::Logistic {
            return Err(Error::config(format!(
                "{} requires the logistic model",
                method.name()
            )));
        }
        if cfg.rank > d {
            return Err(Error::config(format!("rank {} exceeds dimension {d}", cfg.rank)));
        }
        let state = match method {
            Method::Slang | Method::SlangOnlineEig => {
                PosteriorState::Structured(GaussianState::prior(initial_mean, cfg.rank, cfg.lambda)?)
            }
            Method::MeanFieldEf | Method::MeanFieldHessian => {
                PosteriorState::Structured(GaussianState::prior(initial_mean, 0, cfg.lambda)?)
            }
            Method::VognFull | Method::VonFull => {
                PosteriorState::Dense(DenseGaussianState::prior(initial_mean, cfg.lambda)?)
            }
        };
        Ok(Self {
            method,
            model,
            cfg,
            train,
            rng,
            state,
        })
    }

    pub fn state(&self) -> &PosteriorState {
        &self.state
    }

    pub fn into_state(self) -> PosteriorState {
        self.state
    }

    /// Gradients (and Hessians when the method needs them) averaged over
    /// `mc_samples` posterior draws.
    fn averaged_curvature(
        &mut self,
        batch: &Dataset,
    ) -> Result<(PerExampleGrads, Option<LogisticHessians>)> {
        let s = self.cfg.mc_samples;
        let thetas = self.state.draw(s, &mut self.rng)?;
        let mut g = DMatrix::zeros(batch.n(), thetas[0].len());
        let mut w = DVector::zeros(batch.n());
        for theta in &thetas {
            g += self.model.per_example_grads(theta, batch)?.0;
            if self.method.uses_hessian() {
                w += self.model.logistic_hessians(theta, batch)?.weights;
            }
        }
        let inv = 1.0 / s as f64;
        let hess = self.method.uses_hessian().then(|| LogisticHessians {
            weights: w * inv,
            features: batch.features.clone(),
        });
        Ok((PerExampleGrads(g * inv), hess))
    }

    /// One optimizer step on the rows `idx` of the training set.
    pub fn step(&mut self, idx: &[usize]) -> Result<()> {
        let batch = self.train.subset(idx);
        let (grads, hess) = self.averaged_curvature(&batch)?;
        let cfg = self.cfg;
        self.state = match (&self.state, self.method) {
            (PosteriorState::Structured(s), Method::Slang) => {
                PosteriorState::Structured(slang_step(s, &grads, cfg, &mut self.rng)?)
            }
            (PosteriorState::Structured(s), Method::SlangOnlineEig) => {
                PosteriorState::Structured(online_eig_step(s, &grads, cfg, &mut self.rng)?)
            }
            (PosteriorState::Structured(s), Method::MeanFieldEf | Method::MeanFieldHessian) => {
                PosteriorState::Structured(mean_field_step(s, &grads, hess.as_ref(), cfg)?)
            }
            (PosteriorState::Dense(s), Method::VognFull) => {
                PosteriorState::Dense(vogn_full_step(s, &grads, cfg)?)
            }
            (PosteriorState::Dense(s), Method::VonFull) => {
                let h = hess.expect("Hessian methods compute Hessians");
                PosteriorState::Dense(von_full_step(s, &h, &grads, cfg)?)
            }
            _ => unreachable!("state kind is fixed by the method at construction"),
        };
        Ok(())
    }

    pub fn epoch(&mut self) -> Result<()> {
        let n = self.train.n();
        let m = self.cfg.minibatch.min(n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut self.rng);
        for chunk in perm.chunks_exact(m) {
            self.step(chunk)?;
        }
        Ok(())
    }
}
