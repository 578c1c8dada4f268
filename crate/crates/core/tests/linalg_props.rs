use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use slang_core::linalg::{
    diag_of_outer, fast_eig, logdet_and_trace_inverse, sample, woodbury_solve, LowRankDiag,
};
use slang_core::rng::stream;

fn gaussian(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut r = stream(seed, 7);
    DMatrix::from_fn(rows, cols, |_, _| r.sample(StandardNormal))
}

fn lowrank(seed: u64, d: usize, l: usize) -> LowRankDiag {
    let mut r = stream(seed, 8);
    let u = gaussian(seed, d, l);
    let diag = DVector::from_fn(d, |_, _| r.random_range(0.05..3.0));
    LowRankDiag::new(u, diag).unwrap()
}

fn dims() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=100).prop_flat_map(|d| (Just(d), 0..=d.min(8), any::<u64>()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn woodbury_solve_inverts_the_product((d, l, seed) in dims()) {
        let a = lowrank(seed, d, l);
        let g = gaussian(seed ^ 1, d, 1).column(0).into_owned();
        let x = woodbury_solve(&a, &g).unwrap();
        let back = a.mul_vec(&x);
        prop_assert!((&back - &g).norm() <= 1e-9 * g.norm().max(1.0));
    }

    #[test]
    fn symmetric_factor_squares_to_the_covariance((d, l, seed) in dims()) {
        prop_assume!(d <= 50);
        let a = lowrank(seed, d, l);
        let f = a.sampling_factor().unwrap();
        let mut b = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            b.set_column(j, &f.apply(&e).unwrap());
        }
        let inv = a.to_dense().try_inverse().unwrap();
        prop_assert!((&b * b.transpose() - inv).amax() <= 1e-8);
    }

    #[test]
    fn reduced_keeps_the_matrix((d, l, seed) in dims()) {
        prop_assume!(d <= 40 && l >= 2);
        // Duplicate a column so the factor is rank deficient.
        let mut u = gaussian(seed, d, l);
        let c = u.column(0).into_owned();
        u.set_column(1, &(c * 2.0));
        let a = LowRankDiag::new(u, DVector::from_element(d, 0.5)).unwrap();
        let r = a.reduced();
        prop_assert!(r.rank() < l);
        prop_assert!((r.to_dense() - a.to_dense()).amax() <= 1e-9 * a.to_dense().amax());
        prop_assert!(r.sampling_factor().is_ok());
    }

    #[test]
    fn logdet_and_trace_match_dense((d, l, seed) in dims()) {
        prop_assume!(d <= 60);
        let a = lowrank(seed, d, l);
        let dense = a.to_dense();
        let (ld, tr) = logdet_and_trace_inverse(&a).unwrap();
        let eig = SymmetricEigen::new(dense);
        let ld_ref: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
        let tr_ref: f64 = eig.eigenvalues.iter().map(|v| v.recip()).sum();
        prop_assert!((ld - ld_ref).abs() <= 1e-9 * ld_ref.abs().max(1.0));
        prop_assert!((tr - tr_ref).abs() <= 1e-9 * tr_ref);
    }

    #[test]
    fn fast_eig_is_exact_below_the_sketch_width(
        d in 4usize..60, l in 1usize..6, r_off in 0usize..3, seed in any::<u64>()
    ) {
        // Matrices of rank r <= l are recovered exactly with the default
        // oversample of 2.
        let l = l.min(d);
        let r = l.saturating_sub(r_off).max(1);
        let cols = gaussian(seed, d, r);
        let pair = fast_eig(&cols, l, 2, 3, &mut stream(seed, 9)).unwrap();
        let mut want: Vec<f64> = SymmetricEigen::new(&cols * cols.transpose())
            .eigenvalues.iter().copied().collect();
        want.sort_by(|a, b| b.total_cmp(a));
        for k in 0..l {
            prop_assert!((pair.values[k] - want[k]).abs() <= 1e-8 * want[0]);
        }
        let q = &pair.vectors;
        prop_assert!((q.tr_mul(q) - DMatrix::identity(l, l)).amax() <= 1e-8);
        // Q Λ Qᵀ reproduces C Cᵀ.
        let recon = q * DMatrix::from_diagonal(&pair.values) * q.transpose();
        prop_assert!((recon - &cols * cols.transpose()).amax() <= 1e-8 * want[0]);
    }

    #[test]
    fn fast_eig_is_deterministic_per_seed(d in 3usize..30, seed in any::<u64>()) {
        let cols = gaussian(seed, d, d + 2);
        let a = fast_eig(&cols, 2, 2, 3, &mut stream(seed, 1)).unwrap();
        let b = fast_eig(&cols, 2, 2, 3, &mut stream(seed, 1)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn diag_of_outer_matches_dense(d in 1usize..30, k in 0usize..10, seed in any::<u64>()) {
        let u = gaussian(seed, d, k);
        let dense = &u * u.transpose();
        prop_assert!((diag_of_outer(&u) - dense.diagonal()).amax() <= 1e-12 * dense.amax().max(1.0));
    }
}

#[test]
fn fast_eig_rejects_rank_above_dimension() {
    let cols = gaussian(0, 3, 5);
    assert!(fast_eig(&cols, 4, 2, 3, &mut stream(0, 0)).is_err());
    let empty = fast_eig(&cols, 0, 2, 3, &mut stream(0, 0)).unwrap();
    assert_eq!(empty.values.len(), 0);
}

#[test]
fn degenerate_factor_is_an_error_for_the_raw_kernel() {
    let u = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
    let a = LowRankDiag::new(u, DVector::from_element(3, 1.0)).unwrap();
    assert!(a.sampling_factor().is_err());
}

#[test]
fn sample_covariance_matches_within_five_standard_errors() {
    let d = 4;
    let u = DMatrix::from_column_slice(d, 1, &[1.0, -0.5, 0.3, 0.8]);
    let a = LowRankDiag::new(u, DVector::from_row_slice(&[0.5, 1.0, 2.0, 0.7])).unwrap();
    let sigma = a.to_dense().try_inverse().unwrap();
    let mean = DVector::from_row_slice(&[1.0, -2.0, 0.0, 0.5]);
    let n = 200_000;
    let mut r = stream(11, 0);
    let mut sum = DVector::zeros(d);
    let mut outer = DMatrix::zeros(d, d);
    for _ in 0..n {
        let x = sample(&mean, &a, &mut r).unwrap() - &mean;
        sum += &x;
        outer += &x * x.transpose();
    }
    let nf = n as f64;
    let emp_mean = sum / nf;
    let emp_cov = outer / nf;
    for i in 0..d {
        // Var of the sample mean is Σ_ii / n.
        let se = (sigma[(i, i)] / nf).sqrt();
        assert!(emp_mean[i].abs() <= 5.0 * se, "mean {i}: {}", emp_mean[i]);
        for j in 0..d {
            // Var(x_i x_j) = Σ_ii Σ_jj + Σ_ij² for a zero-mean Gaussian.
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / nf).sqrt();
            assert!(
                (emp_cov[(i, j)] - sigma[(i, j)]).abs() <= 5.0 * se,
                "cov ({i},{j}): {} vs {}",
                emp_cov[(i, j)],
                sigma[(i, j)]
            );
        }
    }
}
