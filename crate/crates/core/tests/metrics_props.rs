use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use slang_core::data::{Dataset, Task};
use slang_core::linalg::LowRankDiag;
use slang_core::metrics::{
    elbo_estimate, gaussian_kl, predictive_nll, rmse, symmetric_kl, DenseGaussian, Posterior,
};
use slang_core::models::Model;
use slang_core::optim::GaussianState;
use slang_core::rng::stream;

fn spd(seed: u64, d: usize) -> DMatrix<f64> {
    let mut r = stream(seed, 4);
    let a = DMatrix::from_fn(d, d, |_, _| r.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.3
}

fn structured(seed: u64, d: usize, l: usize) -> GaussianState {
    let mut r = stream(seed, 5);
    let u = DMatrix::from_fn(d, l, |_, _| r.sample::<f64, _>(StandardNormal));
    let diag = DVector::from_fn(d, |_, _| r.random_range(0.2..2.0));
    let mean = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
    GaussianState {
        mean,
        precision: LowRankDiag::new(u, diag).unwrap(),
        momentum: DVector::zeros(d),
        step: 0,
    }
}

fn toy(seed: u64, n: usize, d: usize) -> Dataset {
    let mut r = stream(seed, 6);
    let x = DMatrix::from_fn(n, d, |_, _| r.sample::<f64, _>(StandardNormal));
    let y = DVector::from_fn(n, |i, _| if x[(i, 0)] + r.sample::<f64, _>(StandardNormal) > 0.0 { 1.0 } else { 0.0 });
    Dataset::new(x, y, Task::Classification).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn symmetric_kl_is_nonnegative_and_symmetric(d in 1usize..12, s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = DenseGaussian::new(DVector::from_element(d, 0.3), spd(s1, d)).unwrap();
        let b = DenseGaussian::new(DVector::zeros(d), spd(s2, d)).unwrap();
        let ab = symmetric_kl(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - symmetric_kl(&b, &a).unwrap()).abs() <= 1e-9 * ab.max(1.0));
        prop_assert!(symmetric_kl(&a, &a).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn structured_prior_kl_matches_the_dense_formula(d in 1usize..15, l in 0usize..4, seed in any::<u64>()) {
        let l = l.min(d);
        let q = structured(seed, d, l);
        let lambda = 0.7;
        let prior = DenseGaussian::new(DVector::zeros(d), DMatrix::identity(d, d) / lambda).unwrap();
        let want = gaussian_kl(&q.to_dense().unwrap(), &prior).unwrap();
        let got = q.kl_to_prior(lambda).unwrap();
        prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn gaussian_kl_matches_the_one_dimensional_formula() {
    let p = DenseGaussian::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 2.0)).unwrap();
    let q = DenseGaussian::new(DVector::from_element(1, -0.5), DMatrix::from_element(1, 1, 0.5)).unwrap();
    // KL = ½[σp²/σq² + (μq-μp)²/σq² - 1 + ln(σq²/σp²)]
    let want = 0.5 * (2.0 / 0.5 + 1.5f64.powi(2) / 0.5 - 1.0 + (0.5f64 / 2.0).ln());
    assert!((gaussian_kl(&p, &q).unwrap() - want).abs() < 1e-14);
}

#[test]
fn elbo_at_the_prior_is_the_expected_log_likelihood() {
    let d = 3;
    let ds = toy(1, 30, d);
    let q = GaussianState::prior(DVector::zeros(d), 2, 2.0).unwrap();
    assert!(q.kl_to_prior(2.0).unwrap().abs() < 1e-12);
    let e = elbo_estimate(&q, &Model::Logistic, &ds, 2.0, 4000, &mut stream(3, 0)).unwrap();
    // Independent MC estimate with plain isotropic draws.
    let mut r = stream(9, 0);
    let sd = (0.5f64).sqrt();
    let mut total = 0.0;
    let n = 4000;
    for _ in 0..n {
        let theta = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal) * sd);
        total += Model::Logistic.log_likelihood(&theta, &ds).unwrap().sum();
    }
    let want = total / n as f64;
    assert!((e - want).abs() < 0.02 * want.abs(), "{e} vs {want}");
}

#[test]
fn elbo_spread_shrinks_with_more_samples() {
    let ds = toy(2, 40, 4);
    let q = structured(4, 4, 2);
    let spread = |n_mc: usize| {
        let v: Vec<f64> = (0..40)
            .map(|s| elbo_estimate(&q, &Model::Logistic, &ds, 1.0, n_mc, &mut stream(s, 0)).unwrap())
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let (small, large) = (spread(5), spread(80));
    // Variance scales like 1/n_mc: a 16x ratio, with room for noise.
    assert!(small / large > 6.0, "{small} vs {large}");
}

#[test]
fn predictive_nll_matches_quadrature() {
    // One feature: the logit is θ x with θ ~ N(m, s²), so the predictive is
    // a one-dimensional integral.
    let x = DMatrix::from_column_slice(3, 1, &[0.5, -1.0, 2.0]);
    let y = DVector::from_row_slice(&[1.0, 1.0, 0.0]);
    let ds = Dataset::new(x.clone(), y.clone(), Task::Classification).unwrap();
    let (m, prec) = (0.4, 2.0);
    let q = GaussianState {
        mean: DVector::from_element(1, m),
        precision: LowRankDiag::diagonal(DVector::from_element(1, prec)).unwrap(),
        momentum: DVector::zeros(1),
        step: 0,
    };
    let s = prec.powf(-0.5);
    let mut want = 0.0;
    for i in 0..3 {
        let k = 4000;
        let mut p = 0.0;
        let mut wsum = 0.0;
        for j in 0..=k {
            let z = -8.0 + 16.0 * j as f64 / k as f64;
            let w = (-0.5 * z * z).exp();
            let f = (m + s * z) * x[(i, 0)];
            let sig = 1.0 / (1.0 + (-f).exp());
            p += w * if y[i] == 1.0 { sig } else { 1.0 - sig };
            wsum += w;
        }
        want -= (p / wsum).ln();
    }
    want /= 3.0;
    let got = predictive_nll(&q, &Model::Logistic, &ds, 200_000, &mut stream(5, 0)).unwrap();
    assert!((got - want).abs() < 3e-3, "{got} vs {want}");
}

#[test]
fn rmse_needs_regression() {
    let ds = toy(3, 5, 2);
    let q = GaussianState::prior(DVector::zeros(2), 0, 1.0).unwrap();
    assert!(rmse(&q, &Model::Logistic, &ds, 10, &mut stream(0, 0)).is_err());
}
