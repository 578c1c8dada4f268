//! Linear algebra for symmetric positive definite matrices of the form
//! `U Uᵀ + diag(d)`.
//!
//! `U` is `D × L` with `L` small. Every routine here touches only `D × L`,
//! `L × L` and length-`D` objects, so solves, sampling, log-determinants and
//! traces cost `O(D L²)` and never materialize a `D × D` matrix (except
//! [`LowRankDiag::to_dense`], which exists for diagnostics and oracles).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A positive definite matrix `U Uᵀ + diag(d)`.
///
/// `factors` is `D × L` (`L = 0` gives a plain diagonal matrix) and every
/// entry of `diag` is finite and strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankDiag {
    factors: DMatrix<f64>,
    diag: DVector<f64>,
}

/// Top eigenpairs of a symmetric positive semi-definite matrix.
///
/// `vectors` has orthonormal columns and `values` is sorted descending with
/// every entry `>= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl LowRankDiag {
    pub fn new(factors: DMatrix<f64>, diag: DVector<f64>) -> Result<Self> {
        if factors.nrows() != diag.len() {
            return Err(Error::config(format!(
                "factor rows {} do not match diagonal length {}",
                factors.nrows(),
                diag.len()
            )));
        }
        if factors.ncols() > diag.len() {
            return Err(Error::config(format!(
                "rank {} exceeds dimension {}",
                factors.ncols(),
                diag.len()
            )));
        }
        if let Some(i) = diag.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::numeric(
                "LowRankDiag::new",
                format!("diagonal entry {i} is {} (must be finite and > 0)", diag[i]),
            ));
        }
        if factors.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("LowRankDiag::new", "non-finite factor entry"));
        }
        Ok(Self { factors, diag })
    }

    /// `diag(d)` with no low-rank part.
    pub fn diagonal(diag: DVector<f64>) -> Result<Self> {
        let dim = diag.len();
        Self::new(DMatrix::zeros(dim, 0), diag)
    }

    /// `λ I` with an all-zero `D × L` factor.
    pub fn isotropic(dim: usize, rank: usize, lambda: f64) -> Result<Self> {
        Self::new(
            DMatrix::zeros(dim, rank),
            DVector::from_element(dim, lambda),
        )
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.factors
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.factors, self.diag)
    }

    /// Dense `U Uᵀ + diag(d)`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = &self.factors * self.factors.transpose();
        for i in 0..self.dim() {
            m[(i, i)] += self.diag[i];
        }
        m
    }

    /// Diagonal of the represented matrix, `diag(U Uᵀ) + d`.
    pub fn full_diagonal(&self) -> DVector<f64> {
        diag_of_outer(&self.factors) + &self.diag
    }

    /// `(U Uᵀ + diag(d)) x`.
    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let ux = self.factors.tr_mul(x);
        &self.factors * ux + self.diag.component_mul(x)
    }

    /// Equivalent representation whose factor has full numerical column rank.
    ///
    /// Directions of `V = diag(d)^{-1/2} U` with squared norm below `1e-12`
    /// are dropped. `I + V Vᵀ` changes by at most that amount, so the
    /// represented matrix is unchanged to working precision. The retained
    /// columns are mutually orthogonal.
    pub fn reduced(&self) -> LowRankDiag {
        const NULL_TOL: f64 = 1e-12;
        if self.rank() == 0 {
            return self.clone();
        }
        let v = scale_rows(&self.factors, &self.diag.map(|d| d.sqrt().recip()));
        let gram = v.tr_mul(&v);
        let eig = SymmetricEigen::new(gram);
        let keep: Vec<usize> = sorted_desc(&eig.eigenvalues)
            .into_iter()
            .filter(|&j| eig.eigenvalues[j] > NULL_TOL)
            .collect();
        let mut factors = DMatrix::zeros(self.dim(), keep.len());
        for (c, &j) in keep.iter().enumerate() {
            factors.set_column(c, &(&self.factors * eig.eigenvectors.column(j)));
        }
        LowRankDiag {
            factors,
            diag: self.diag.clone(),
        }
    }

    /// Precomputes the symmetric factor used by [`symmetric_factor_apply`].
    pub fn sampling_factor(&self) -> Result<SymmetricFactor> {
        SymmetricFactor::new(self)
    }
}

/// Elementwise `Σ_l u[·, l]²`, i.e. `diag(U Uᵀ)`.
pub fn diag_of_outer(u: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(u.nrows());
    for j in 0..u.ncols() {
        for i in 0..u.nrows() {
            let v = u[(i, j)];
            out[i] += v * v;
        }
    }
    out
}

fn scale_rows(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s[i])
}

fn sorted_desc(values: &DVector<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

fn check_finite(op: &'static str, v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op, "non-finite result"))
    }
}

/// Inner `L × L` capacitance matrix `I + Uᵀ D⁻¹ U` and `D⁻¹ U`.
fn capacitance(a: &LowRankDiag) -> (DMatrix<f64>, DMatrix<f64>) {
    let dinv_u = scale_rows(&a.factors, &a.diag.map(f64::recip));
    let mut k = a.factors.tr_mul(&dinv_u);
    for i in 0..a.rank() {
        k[(i, i)] += 1.0;
    }
    (k, dinv_u)
}

/// `(U Uᵀ + diag(d))⁻¹ g` via the Woodbury identity.
pub fn woodbury_solve(a: &LowRankDiag, g: &DVector<f64>) -> Result<DVector<f64>> {
    if g.len() != a.dim() {
        return Err(Error::config(format!(
            "vector length {} does not match dimension {}",
            g.len(),
            a.dim()
        )));
    }
    let dinv_g = g.component_div(&a.diag);
    if a.rank() == 0 {
        check_finite("woodbury_solve", &dinv_g)?;
        return Ok(dinv_g);
    }
    let (k, dinv_u) = capacitance(a);
    let chol = Cholesky::new(k)
        .ok_or_else(|| Error::numeric("woodbury_solve", "I + Uᵀ D⁻¹ U is not positive definite"))?;
    let inner = chol.solve(&a.factors.tr_mul(&dinv_g));
    let y = dinv_g - dinv_u * inner;
    check_finite("woodbury_solve", &y)?;
    Ok(y)
}

/// `log det(U Uᵀ + D)` and `tr((U Uᵀ + D)⁻¹)`.
///
/// Uses the matrix determinant lemma and the Woodbury form of the inverse
/// trace, `tr(D⁻¹) - tr(K⁻¹ Uᵀ D⁻² U)` with `K = I + Uᵀ D⁻¹ U`.
pub fn logdet_and_trace_inverse(a: &LowRankDiag) -> Result<(f64, f64)> {
    let mut logdet = a.diag.iter().map(|d| d.ln()).sum::<f64>();
    let mut trace_inv = a.diag.iter().map(|d| d.recip()).sum::<f64>();
    if a.rank() > 0 {
        let (k, dinv_u) = capacitance(a);
        let chol = Cholesky::new(k).ok_or_else(|| {
            Error::numeric("logdet_and_trace_inverse", "non-positive pivot in I + Uᵀ D⁻¹ U")
        })?;
        let l = chol.l();
        logdet += 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let g2 = dinv_u.tr_mul(&dinv_u);
        let x = chol.solve(&g2);
        trace_inv -= x.trace();
    }
    if !(logdet.is_finite() && trace_inv.is_finite()) {
        return Err(Error::numeric("logdet_and_trace_inverse", "non-finite result"));
    }
    Ok((logdet, trace_inv))
}

/// A linear map `B` with `B Bᵀ = (U Uᵀ + D)⁻¹`.
///
/// With `V = D^{-1/2} U`, `S = Vᵀ V = A Aᵀ` and `B_c Bᵀ_c = I + Aᵀ A`
/// (both Cholesky), the matrix `W = I + V C Vᵀ` with
/// `C = A⁻ᵀ (B_c - I) A⁻¹` satisfies `W Wᵀ = I + V Vᵀ`. The factor is
/// `D^{-1/2} W⁻ᵀ`, applied through Woodbury as
/// `D^{-1/2} (ε - V K Vᵀ ε)` with `K = (C⁻ᵀ + S)⁻¹ = A⁻ᵀ (I - B_c⁻ᵀ) A⁻¹`.
#[derive(Debug, Clone)]
pub struct SymmetricFactor {
    inv_sqrt_diag: DVector<f64>,
    v: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl SymmetricFactor {
    fn new(m: &LowRankDiag) -> Result<Self> {
        let inv_sqrt_diag = m.diag.map(|d| d.sqrt().recip());
        let v = scale_rows(&m.factors, &inv_sqrt_diag);
        let rank = m.rank();
        if rank == 0 {
            return Ok(Self {
                inv_sqrt_diag,
                v,
                a: DMatrix::zeros(0, 0),
                b: DMatrix::zeros(0, 0),
            });
        }
        let s = v.tr_mul(&v);
        let a = Cholesky::new(s)
            .ok_or_else(|| {
                Error::numeric(
                    "symmetric_factor_apply",
                    "Cholesky of Vᵀ V failed (linearly dependent low-rank columns)",
                )
            })?
            .unpack();
        let mut inner = a.tr_mul(&a);
        for i in 0..rank {
            inner[(i, i)] += 1.0;
        }
        let b = Cholesky::new(inner)
            .ok_or_else(|| Error::numeric("symmetric_factor_apply", "Cholesky of I + Aᵀ A failed"))?
            .unpack();
        Ok(Self {
            inv_sqrt_diag,
            v,
            a,
            b,
        })
    }

    pub fn dim(&self) -> usize {
        self.inv_sqrt_diag.len()
    }

    /// Returns `B ε`.
    pub fn apply(&self, eps: &DVector<f64>) -> Result<DVector<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::config(format!(
                "noise length {} does not match dimension {}",
                eps.len(),
                self.dim()
            )));
        }
        if self.v.ncols() == 0 {
            return Ok(eps.component_mul(&self.inv_sqrt_diag));
        }
        let z = self.v.tr_mul(eps);
        let fail = || Error::numeric("symmetric_factor_apply", "singular triangular factor");
        let a1 = self.a.solve_lower_triangular(&z).ok_or_else(fail)?;
        let a2 = &a1 - self.b.tr_solve_lower_triangular(&a1).ok_or_else(fail)?;
        let a3 = self.a.tr_solve_lower_triangular(&a2).ok_or_else(fail)?;
        let y = (eps - &self.v * a3).component_mul(&self.inv_sqrt_diag);
        check_finite("symmetric_factor_apply", &y)?;
        Ok(y)
    }
}

/// `B ε` where `B Bᵀ = (U Uᵀ + D)⁻¹`.
///
/// Fails when the columns of `U` are linearly dependent; see
/// [`LowRankDiag::reduced`] for an equivalent full-rank representation.
pub fn symmetric_factor_apply(a: &LowRankDiag, eps: &DVector<f64>) -> Result<DVector<f64>> {
    a.sampling_factor()?.apply(eps)
}

/// Draws from `N(mean, (U Uᵀ + D)⁻¹)`.
pub fn sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    a: &LowRankDiag,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let eps = standard_normal(a.dim(), rng);
    sample_with_noise(mean, a, &eps)
}

/// `mean + B eps` for caller-supplied noise.
pub fn sample_with_noise(
    mean: &DVector<f64>,
    a: &LowRankDiag,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    if mean.len() != a.dim() {
        return Err(Error::config("mean length does not match dimension"));
    }
    Ok(mean + symmetric_factor_apply(a, eps)?)
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Top-`rank` eigenpairs of `Σ_j c_j c_jᵀ`, where `c_j` are the columns of
/// `columns`, by randomized range finding.
///
/// A Gaussian test matrix of width `rank + oversample` (capped at `D`) is
/// pushed through `power_iters` QR-stabilized power iterations; the small
/// projected matrix is then diagonalized exactly. Weighted sums of outer
/// products are passed as square-root-scaled columns.
///
/// When `rank` exceeds the numerical rank, the surplus eigenvalues are zero
/// and their vectors complete an orthonormal set.
pub fn fast_eig<R: Rng + ?Sized>(
    columns: &DMatrix<f64>,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut R,
) -> Result<EigPair> {
    let dim = columns.nrows();
    if rank > dim {
        return Err(Error::config(format!(
            "requested rank {rank} exceeds dimension {dim}"
        )));
    }
    if rank == 0 {
        return Ok(EigPair {
            vectors: DMatrix::zeros(dim, 0),
            values: DVector::zeros(0),
        });
    }
    if columns.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fast_eig", "non-finite input column"));
    }
    let width = (rank + oversample).min(dim);
    let omega = DMatrix::from_fn(dim, width, |_, _| rng.sample::<f64, _>(StandardNormal));

    // A X = C (Cᵀ X)
    let apply = |x: &DMatrix<f64>| columns * columns.tr_mul(x);
    let mut q = apply(&omega).qr().q();
    for _ in 0..power_iters {
        q = apply(&q).qr().q();
    }

    let ctq = columns.tr_mul(&q);
    let projected = ctq.tr_mul(&ctq);
    let eig = SymmetricEigen::new(projected);
    let order = sorted_desc(&eig.eigenvalues);

    let mut ritz = DMatrix::zeros(dim, rank);
    let mut values = DVector::zeros(rank);
    for (c, &j) in order.iter().take(rank).enumerate() {
        ritz.set_column(c, &(&q * eig.eigenvectors.column(j)));
        values[c] = eig.eigenvalues[j].max(0.0);
    }

    // Re-orthonormalize, keeping each column's orientation.
    let qr = ritz.qr();
    let r = qr.r();
    let mut vectors = qr.q();
    for c in 0..rank {
        if r[(c, c)] < 0.0 {
            vectors.column_mut(c).neg_mut();
        }
    }
    if vectors.iter().any(|v| !v.is_finite()) || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("fast_eig", "non-finite eigenpairs"));
    }
    Ok(EigPair { vectors, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn random_lowrank(dim: usize, rank: usize, seed: u64) -> LowRankDiag {
        let mut rng = stream(seed, 0);
        let u = DMatrix::from_fn(dim, rank, |_, _| rng.sample::<f64, _>(StandardNormal));
        let d = DVector::from_fn(dim, |_, _| 0.5 + rng.random::<f64>());
        LowRankDiag::new(u, d).unwrap()
    }

    #[test]
    fn woodbury_identity_and_scalar_diagonal() {
        let a = LowRankDiag::diagonal(DVector::from_element(3, 1.0)).unwrap();
        let g = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(woodbury_solve(&a, &g).unwrap(), g);

        let a = LowRankDiag::diagonal(DVector::from_element(3, 2.0)).unwrap();
        let g = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        assert_eq!(
            woodbury_solve(&a, &g).unwrap(),
            DVector::from_vec(vec![1.0, 2.0, 3.0])
        );
    }

    #[test]
    fn woodbury_matches_dense_lu() {
        let a = random_lowrank(5, 2, 11);
        let g = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.7, -0.2]);
        let dense = a.to_dense().lu().solve(&g).unwrap();
        let fast = woodbury_solve(&a, &g).unwrap();
        assert!((fast - &dense).norm() <= 1e-10 * dense.norm());
    }

    #[test]
    fn woodbury_rejects_nan_contamination() {
        let mut u = DMatrix::zeros(3, 1);
        u[(0, 0)] = 1.0;
        let a = LowRankDiag {
            factors: u,
            diag: DVector::from_element(3, 1.0),
        };
        let g = DVector::from_vec(vec![f64::NAN, 0.0, 0.0]);
        assert!(matches!(woodbury_solve(&a, &g), Err(Error::Numeric { .. })));
    }

    #[test]
    fn constructor_rejects_invalid_inputs() {
        assert!(LowRankDiag::diagonal(DVector::from_vec(vec![1.0, 0.0])).is_err());
        assert!(LowRankDiag::diagonal(DVector::from_vec(vec![1.0, -2.0])).is_err());
        assert!(LowRankDiag::new(DMatrix::zeros(2, 3), DVector::from_element(2, 1.0)).is_err());
        assert!(LowRankDiag::new(DMatrix::zeros(3, 1), DVector::from_element(2, 1.0)).is_err());
    }

    #[test]
    fn diagonal_factor_is_inverse_sqrt() {
        let a = LowRankDiag::diagonal(DVector::from_element(2, 4.0)).unwrap();
        let y = symmetric_factor_apply(&a, &DVector::from_vec(vec![1.0, -1.0])).unwrap();
        assert_eq!(y, DVector::from_vec(vec![0.5, -0.5]));
    }

    #[test]
    fn dependent_columns_error() {
        let col = DVector::from_vec(vec![1.0, 2.0, 0.5]);
        let mut u = DMatrix::zeros(3, 2);
        u.set_column(0, &col);
        u.set_column(1, &(&col * 2.0));
        let a = LowRankDiag::new(u, DVector::from_element(3, 1.0)).unwrap();
        let err = symmetric_factor_apply(&a, &DVector::from_element(3, 1.0));
        assert!(matches!(err, Err(Error::Numeric { .. })));
        // The reduced representation keeps the same matrix and samples fine.
        let r = a.reduced();
        assert_eq!(r.rank(), 1);
        assert!((r.to_dense() - a.to_dense()).amax() < 1e-12);
        assert!(symmetric_factor_apply(&r, &DVector::from_element(3, 1.0)).is_ok());
    }

    #[test]
    fn zero_factor_reduces_to_diagonal() {
        let a = LowRankDiag::isotropic(4, 3, 2.0).unwrap();
        assert_eq!(a.reduced().rank(), 0);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let a = LowRankDiag::diagonal(DVector::from_element(3, 1.0)).unwrap();
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let s = sample_with_noise(&mean, &a, &DVector::zeros(3)).unwrap();
        assert_eq!(s, mean);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let a = random_lowrank(6, 2, 3);
        let mean = DVector::from_element(6, 0.25);
        let s1 = sample(&mean, &a, &mut stream(99, 0)).unwrap();
        let s2 = sample(&mean, &a, &mut stream(99, 0)).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn logdet_trace_diagonal_cases() {
        let e = std::f64::consts::E;
        let a = LowRankDiag::diagonal(DVector::from_vec(vec![e, e * e])).unwrap();
        let (ld, tr) = logdet_and_trace_inverse(&a).unwrap();
        assert!(close(ld, 3.0, 1e-15));
        assert!(close(tr, 1.0 / e + 1.0 / (e * e), 1e-15));

        let a = LowRankDiag::diagonal(DVector::from_element(7, 1.0)).unwrap();
        assert_eq!(logdet_and_trace_inverse(&a).unwrap(), (0.0, 7.0));
    }

    #[test]
    fn diag_of_outer_hand_cases() {
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(diag_of_outer(&u), DVector::from_vec(vec![5.0, 9.0]));
        assert_eq!(diag_of_outer(&DMatrix::zeros(4, 2)), DVector::zeros(4));
    }

    #[test]
    fn fast_eig_rank_one() {
        let c = DMatrix::from_column_slice(3, 1, &[3.0, 4.0, 0.0]);
        let e = fast_eig(&c, 1, 2, 3, &mut stream(1, 0)).unwrap();
        assert!(close(e.values[0], 25.0, 1e-12));
        let v = e.vectors.column(0);
        let sign = v[0].signum();
        assert!(close(sign * v[0], 0.6, 1e-12));
        assert!(close(sign * v[1], 0.8, 1e-12));
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn fast_eig_orthogonal_columns() {
        let c = DMatrix::from_column_slice(3, 2, &[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]);
        let e = fast_eig(&c, 2, 2, 3, &mut stream(2, 0)).unwrap();
        assert!(close(e.values[0], 9.0, 1e-12));
        assert!(close(e.values[1], 4.0, 1e-12));
        assert!(close(e.vectors[(1, 0)].abs(), 1.0, 1e-12));
        assert!(close(e.vectors[(0, 1)].abs(), 1.0, 1e-12));
    }

    #[test]
    fn fast_eig_pads_rank_deficient_input() {
        let c = DMatrix::from_column_slice(5, 1, &[1.0, 0.0, 2.0, 0.0, 0.0]);
        let e = fast_eig(&c, 3, 2, 3, &mut stream(3, 0)).unwrap();
        assert!(close(e.values[0], 5.0, 1e-12));
        assert!(e.values[1].abs() < 1e-10 && e.values[2].abs() < 1e-10);
        let gram = e.vectors.tr_mul(&e.vectors);
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn fast_eig_zero_rank_is_empty() {
        let c = DMatrix::from_element(4, 2, 1.0);
        let e = fast_eig(&c, 0, 2, 3, &mut stream(4, 0)).unwrap();
        assert_eq!(e.vectors.shape(), (4, 0));
        assert_eq!(e.values.len(), 0);
    }

    #[test]
    fn mul_vec_matches_dense() {
        let a = random_lowrank(6, 3, 5);
        let x = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        assert!((a.mul_vec(&x) - a.to_dense() * &x).amax() < 1e-12);
    }
}
