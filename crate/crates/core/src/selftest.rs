//! Runtime self-check of the structured kernels and updates against dense
//! linear algebra, for use after building on a new machine.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Task};
use crate::error::Result;
use crate::linalg::{fast_eig, logdet_and_trace_inverse, woodbury_solve, LowRankDiag};
use crate::models::Model;
use crate::optim::{slang_step, vogn_full_step, DenseGaussianState, GaussianState, OptimizerConfig};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn gaussian(r: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn random_lowrank(r: &mut StreamRng) -> LowRankDiag {
    let d = r.random_range(2..=50);
    let l = r.random_range(0..=5.min(d));
    let u = gaussian(r, d, l);
    let diag = DVector::from_fn(d, |_, _| r.random_range(0.1..2.0));
    LowRankDiag::new(u, diag).expect("valid by construction")
}

fn rel(err: f64, scale: f64) -> f64 {
    err / scale.max(f64::MIN_POSITIVE)
}

/// Runs every check with `cases` seeded instances each.
pub fn run(seed: u64, cases: usize) -> Result<Vec<Check>> {
    let mut r = stream(seed, 0);
    let mut woodbury = 0.0f64;
    let mut factor = 0.0f64;
    let mut logdet = 0.0f64;
    let mut eig = 0.0f64;
    for _ in 0..cases {
        let a = random_lowrank(&mut r);
        let dense = a.to_dense();
        let d = a.dim();
        let g = DVector::from_fn(d, |_, _| r.sample(StandardNormal));
        let exact = dense.clone().lu().solve(&g).expect("positive definite");
        woodbury = woodbury.max(rel((woodbury_solve(&a, &g)? - &exact).norm(), exact.norm()));

        let sf = a.reduced().sampling_factor()?;
        let mut b = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            b.set_column(j, &sf.apply(&e)?);
        }
        let inv = dense.clone().try_inverse().expect("positive definite");
        factor = factor.max((&b * b.transpose() - &inv).amax());

        let (ld, tr) = logdet_and_trace_inverse(&a)?;
        let ld_dense = dense.clone().cholesky().expect("pd").l().diagonal().map(|v| v.ln()).sum() * 2.0;
        logdet = logdet.max(rel((ld - ld_dense).abs(), ld_dense.abs().max(1.0)));
        logdet = logdet.max(rel((tr - inv.trace()).abs(), inv.trace()));

        let l = a.rank();
        let rank = (l + 3).min(d);
        let cols = gaussian(&mut r, d, rank);
        // An oversample of 3 makes the sketch as wide as the rank, so the
        // range is captured exactly and only round-off remains.
        let pair = fast_eig(&cols, l, 3, 3, &mut r)?;
        let mut want: Vec<f64> = SymmetricEigen::new(&cols * cols.transpose()).eigenvalues.iter().copied().collect();
        want.sort_by(|x, y| y.total_cmp(x));
        for (got, w) in pair.values.iter().zip(&want).take(l) {
            eig = eig.max(rel((got - w).abs(), *w));
        }
    }

    let grad = gradient_check(&mut r, cases)?;
    let full = full_rank_equivalence(&mut r)?;

    Ok(vec![
        Check { name: "woodbury_solve vs dense solve (rel)", cases, worst: woodbury, tolerance: 1e-10 },
        Check { name: "symmetric factor B Bᵀ vs dense inverse", cases, worst: factor, tolerance: 1e-8 },
        Check { name: "logdet and trace vs dense (rel)", cases, worst: logdet, tolerance: 1e-10 },
        Check { name: "fast_eig top-L vs dense eig (rel)", cases, worst: eig, tolerance: 1e-6 },
        Check { name: "logistic gradients vs finite differences (rel)", cases, worst: grad, tolerance: 1e-5 },
        Check { name: "full-rank SLANG vs dense recursion", cases: 1, worst: full, tolerance: 1e-8 },
    ])
}

fn gradient_check(r: &mut StreamRng, cases: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let d = r.random_range(2..=8);
        let x = gaussian(r, 3, d);
        let y = DVector::from_fn(3, |_, _| f64::from(r.random::<bool>()));
        let ds = Dataset::new(x, y, Task::Classification)?;
        let theta = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        let g = Model::Logistic.per_example_grads(&theta, &ds)?;
        for i in 0..3 {
            let row = ds.subset(&[i]);
            for j in 0..d {
                let h = 1e-5;
                let mut tp = theta.clone();
                tp[j] += h;
                let mut tm = theta.clone();
                tm[j] -= h;
                let fd = (Model::Logistic.log_likelihood(&tp, &row)?[0]
                    - Model::Logistic.log_likelihood(&tm, &row)?[0])
                    / (2.0 * h);
                worst = worst.max((g.0[(i, j)] - fd).abs() / (1.0 + fd.abs()));
            }
        }
    }
    Ok(worst)
}

fn full_rank_equivalence(r: &mut StreamRng) -> Result<f64> {
    let d = 10;
    let cfg = OptimizerConfig {
        lambda: 0.7,
        rank: d,
        minibatch: 4,
        n_total: 40,
        ..Default::default()
    };
    let mut s = GaussianState::prior(DVector::zeros(d), d, cfg.lambda)?;
    let mut dense = DenseGaussianState::prior(DVector::zeros(d), cfg.lambda)?;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g = crate::models::PerExampleGrads(gaussian(r, 4, d));
        s = slang_step(&s, &g, &cfg, r)?;
        dense = vogn_full_step(&dense, &g, &cfg)?;
        worst = worst.max((s.precision.to_dense() - &dense.precision).amax());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    #[test]
    fn selftest_passes() {
        for c in super::run(1, 20).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
