//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type RMat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;
pub type RVec = DVector<f64>;
pub type CVec = DVector<Complex64>;

pub const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

pub fn to_complex(a: &RMat) -> CMat {
    a.map(|x| Complex64::new(x, 0.0))
}

pub fn re(a: &CMat) -> RMat {
    a.map(|z| z.re)
}

pub fn im(a: &CMat) -> RMat {
    a.map(|z| z.im)
}

pub fn max_abs_im(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.im.abs()))
}

pub fn cmax_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * Complex64::new(0.5, 0.0)
}

fn to_faer(a: &RMat) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn to_faer_c(a: &CMat) -> faer::Mat<Complex64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer<T: nalgebra::Scalar + Copy>(m: faer::MatRef<'_, T>) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Singular value decomposition `a = U diag(s) V*` with `s` in decreasing order.
#[derive(Clone, Debug)]
pub struct Svd<T: nalgebra::Scalar> {
    pub u: DMatrix<T>,
    pub s: RVec,
    pub v: DMatrix<T>,
}

/// Thin real SVD.
pub fn svd(a: &RMat) -> Result<Svd<f64>> {
    let d = to_faer(a).thin_svd().map_err(|e| Error::Solver(format!("SVD failed: {e:?}")))?;
    Ok(Svd {
        u: from_faer(d.U()),
        s: RVec::from_iterator(d.S().dim(), d.S().column_vector().iter().copied()),
        v: from_faer(d.V()),
    })
}

/// Full real SVD (square `U` and `V`).
pub fn svd_full(a: &RMat) -> Result<Svd<f64>> {
    let d = to_faer(a).svd().map_err(|e| Error::Solver(format!("SVD failed: {e:?}")))?;
    Ok(Svd {
        u: from_faer(d.U()),
        s: RVec::from_iterator(d.S().dim(), d.S().column_vector().iter().copied()),
        v: from_faer(d.V()),
    })
}

/// Thin complex SVD.
pub fn csvd(a: &CMat) -> Result<Svd<Complex64>> {
    let d = to_faer_c(a).thin_svd().map_err(|e| Error::Solver(format!("SVD failed: {e:?}")))?;
    Ok(Svd {
        u: from_faer(d.U()),
        s: RVec::from_iterator(d.S().dim(), d.S().column_vector().iter().map(|z| z.re)),
        v: from_faer(d.V()),
    })
}

pub fn singular_values(a: &RMat) -> RVec {
    if a.is_empty() {
        return RVec::zeros(0);
    }
    let s = to_faer(a).singular_values().expect("SVD did not converge");
    RVec::from_vec(s)
}

pub fn csingular_values(a: &CMat) -> RVec {
    if a.is_empty() {
        return RVec::zeros(0);
    }
    let s = to_faer_c(a).singular_values().expect("SVD did not converge");
    RVec::from_vec(s)
}

/// Eigen-decomposition of the symmetric part, eigenvalues ascending.
pub fn sym_eigen(a: &RMat) -> (RVec, RMat) {
    let sym = (a + a.transpose()) * 0.5;
    let e = to_faer(&sym)
        .self_adjoint_eigen(faer::Side::Lower)
        .expect("symmetric eigensolver did not converge");
    let vals = RVec::from_iterator(e.S().dim(), e.S().column_vector().iter().copied());
    (vals, from_faer(e.U()))
}

pub fn sym_eigenvalues(a: &RMat) -> RVec {
    let sym = (a + a.transpose()) * 0.5;
    let v = to_faer(&sym)
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .expect("symmetric eigensolver did not converge");
    RVec::from_vec(v)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn herm_eigenvalues(a: &CMat) -> RVec {
    if a.nrows() == 0 {
        return RVec::zeros(0);
    }
    let h = hermitian_part(a);
    let v = to_faer_c(&h)
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .expect("Hermitian eigensolver did not converge");
    RVec::from_vec(v)
}

/// Lower Cholesky factor of a Hermitian matrix; `None` unless strictly positive definite.
pub fn herm_cholesky(a: &CMat) -> Option<CMat> {
    let n = a.nrows();
    let mut l = CMat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = Complex64::new(djj, 0.0);
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = v / djj;
        }
    }
    Some(l)
}

/// Inverse of a lower-triangular matrix.
pub fn lower_inverse(l: &CMat) -> CMat {
    let n = l.nrows();
    let mut inv = CMat::zeros(n, n);
    for c in 0..n {
        inv[(c, c)] = Complex64::new(1.0, 0.0) / l[(c, c)];
        for i in c + 1..n {
            let mut v = Complex64::new(0.0, 0.0);
            for k in c..i {
                v -= l[(i, k)] * inv[(k, c)];
            }
            inv[(i, c)] = v / l[(i, i)];
        }
    }
    inv
}

/// Eigenvalues of a general real matrix.
pub fn eigenvalues(a: &RMat) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    to_faer(a).eigenvalues().expect("eigensolver did not converge")
}

/// Eigenvalues of a general complex matrix.
pub fn ceigenvalues(a: &CMat) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    to_faer_c(a).eigenvalues().expect("eigensolver did not converge")
}

/// Symmetric PSD square root; eigenvalues in (-1e-10, 0) are clipped to zero.
pub fn psd_sqrt(a: &RMat) -> Result<RMat> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidDimension(format!("{}x{} is not square", n, a.ncols())));
    }
    let (vals, q) = sym_eigen(a);
    let scale = vals.amax().max(1.0);
    let mut d = vals.clone();
    for v in d.iter_mut() {
        if *v < -1e-10 * scale {
            return Err(Error::InvalidArgument(format!("matrix is not PSD (eigenvalue {v:.3e})")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&q * DMatrix::from_diagonal(&d) * q.transpose())
}

pub fn min_sym_eig(a: &RMat) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    sym_eigenvalues(a).min()
}

pub fn max_sym_eig(a: &RMat) -> f64 {
    if a.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym_eigenvalues(a).max()
}

pub fn spectral_abscissa(a: &RMat) -> f64 {
    eigenvalues(a).iter().fold(f64::NEG_INFINITY, |m, z| m.max(z.re))
}

pub fn sigma_max(a: &CMat) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    csingular_values(a).max()
}

fn count_above(s: &RVec, rtol: f64) -> usize {
    let smax = s.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rtol * smax).count()
}

/// Numerical rank with singular values below `rtol * s_max` treated as zero.
pub fn rank(a: &RMat, rtol: f64) -> usize {
    count_above(&singular_values(a), rtol)
}

pub fn complex_rank(a: &CMat, rtol: f64) -> usize {
    count_above(&csingular_values(a), rtol)
}

/// Affine description of the solution set of `a x = b`: `x = x0 + N y`.
pub struct AffineSolution {
    pub x0: RVec,
    pub basis: RMat,
    pub rank: usize,
    pub residual: f64,
}

/// Minimum-norm particular solution and orthonormal null-space basis via a full SVD.
pub fn solve_affine(a: &RMat, b: &RVec, rtol: f64) -> Result<AffineSolution> {
    let (r, c) = a.shape();
    if c == 0 {
        return Ok(AffineSolution {
            x0: RVec::zeros(0),
            basis: RMat::zeros(0, 0),
            rank: 0,
            residual: if r == 0 { 0.0 } else { b.amax() },
        });
    }
    if r == 0 {
        return Ok(AffineSolution { x0: RVec::zeros(c), basis: RMat::identity(c, c), rank: 0, residual: 0.0 });
    }
    let d = svd_full(a)?;
    let rk = count_above(&d.s, rtol);
    let mut x0 = RVec::zeros(c);
    for i in 0..rk {
        let coef = d.u.column(i).dot(b) / d.s[i];
        x0.axpy(coef, &d.v.column(i), 1.0);
    }
    let basis = d.v.columns(rk, c - rk).into_owned();
    let residual = (a * &x0 - b).amax();
    Ok(AffineSolution { x0, basis, rank: rk, residual })
}

/// Minimum-norm least-squares solution of `min ||a x - b||`.
pub fn lstsq(a: &RMat, b: &RVec, rtol: f64) -> Result<RVec> {
    if a.ncols() == 0 {
        return Ok(RVec::zeros(0));
    }
    let d = svd(a)?;
    let rk = count_above(&d.s, rtol);
    let mut x = RVec::zeros(a.ncols());
    for i in 0..rk {
        let coef = d.u.column(i).dot(b) / d.s[i];
        x.axpy(coef, &d.v.column(i), 1.0);
    }
    Ok(x)
}

/// Minimum-norm complex least squares with several right-hand sides; also reports rank deficiency.
pub fn clstsq(a: &CMat, b: &CMat, rtol: f64) -> Result<(CMat, bool)> {
    let d = csvd(a)?;
    let rk = count_above(&d.s, rtol);
    let uhb = d.u.columns(0, rk).adjoint() * b;
    let mut scaled = uhb;
    for i in 0..rk {
        let inv = Complex64::new(1.0 / d.s[i], 0.0);
        for v in scaled.row_mut(i).iter_mut() {
            *v *= inv;
        }
    }
    Ok((d.v.columns(0, rk) * scaled, rk < a.ncols()))
}

fn faer_view(a: &RMat) -> faer::MatRef<'_, f64> {
    faer::MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols())
}

/// `out = alpha * a' b`, or `out += alpha * a' b` when `accumulate` is set.
pub fn gemm_tn(out: &mut RMat, a: &RMat, b: &RMat, alpha: f64, accumulate: bool) {
    assert_eq!(a.nrows(), b.nrows(), "inner dimensions differ");
    assert_eq!(out.shape(), (a.ncols(), b.ncols()), "output shape mismatch");
    let (r, c) = out.shape();
    let dst = faer::MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
    let beta = if accumulate { faer::Accum::Add } else { faer::Accum::Replace };
    faer::linalg::matmul::matmul(dst, beta, faer_view(a).transpose(), faer_view(b), alpha, faer::Par::Seq);
}

/// `out = a[:, ..a_cols]' b`; the leading columns of a column-major matrix are contiguous.
pub fn gemm_tn_cols(out: &mut RMat, a: &RMat, a_cols: usize, b: &RMat) {
    assert!(a_cols <= a.ncols(), "column prefix out of range");
    assert_eq!(a.nrows(), b.nrows(), "inner dimensions differ");
    assert_eq!(out.shape(), (a_cols, b.ncols()), "output shape mismatch");
    let (r, c) = out.shape();
    let lhs = faer::MatRef::from_column_major_slice(&a.as_slice()[..a.nrows() * a_cols], a.nrows(), a_cols);
    let dst = faer::MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
    faer::linalg::matmul::matmul(dst, faer::Accum::Replace, lhs.transpose(), faer_view(b), 1.0, faer::Par::Seq);
}

/// `a * b` through faer.
pub fn gemm(a: &RMat, b: &RMat) -> RMat {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let mut out = RMat::zeros(a.nrows(), b.ncols());
    let (r, c) = out.shape();
    let dst = faer::MatMut::from_column_major_slice_mut(out.as_mut_slice(), r, c);
    faer::linalg::matmul::matmul(dst, faer::Accum::Replace, faer_view(a), faer_view(b), 1.0, faer::Par::Seq);
    out
}

/// Cholesky factor of a symmetric positive definite matrix.
pub struct SpdFactor(faer::linalg::solvers::Llt<f64>);

impl SpdFactor {
    pub fn new(a: &RMat) -> Option<Self> {
        faer_view(a).llt(faer::Side::Lower).ok().map(SpdFactor)
    }

    pub fn solve(&self, b: &RVec) -> RVec {
        use faer::linalg::solvers::Solve;
        let mut x = b.clone();
        let n = x.len();
        self.0
            .solve_in_place(faer::MatMut::from_column_major_slice_mut(x.as_mut_slice(), n, 1));
        x
    }
}

/// Matrix sign function by Newton iteration, determinant-scaled until close to convergence.
pub fn matrix_sign(a: &RMat, max_iter: usize) -> Option<RMat> {
    let n = a.nrows();
    let mut z = a.clone();
    let mut scaled = true;
    let mut polish = 0;
    for _ in 0..max_iter {
        let c = if scaled {
            let det = lu_abs_det_root(&z, n);
            if det.is_finite() && det > 0.0 {
                det
            } else {
                1.0
            }
        } else {
            1.0
        };
        let zi = z.clone().try_inverse()?;
        let next = (&z / c + &zi * c) * 0.5;
        let diff = (&next - &z).norm() / next.norm().max(1.0);
        z = next;
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        if diff < 1e-2 {
            scaled = false;
        }
        if !scaled && diff < 1e-11 {
            polish += 1;
            if polish > 2 {
                break;
            }
        }
    }
    let check = (&z * &z - RMat::identity(n, n)).norm();
    if check < 1e-8 * (n as f64) {
        Some(z)
    } else {
        None
    }
}

fn lu_abs_det_root(z: &RMat, n: usize) -> f64 {
    let lu = z.clone().lu();
    let u = lu.u();
    let mut logdet = 0.0;
    for i in 0..n {
        logdet += u[(i, i)].abs().ln();
    }
    (logdet / n as f64).exp()
}

/// Stabilizing solution of `A'X + XA - X G X + Q = 0` (G, Q symmetric).
pub fn care_sign(a: &RMat, g: &RMat, q: &RMat) -> Option<RMat> {
    let n = a.nrows();
    let mut h = RMat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    // sign of -H: stable invariant subspace of H is the +1 eigenspace of sign(-H)
    let w = matrix_sign(&(-h), 200)?;
    let w11 = w.view((0, 0), (n, n));
    let w12 = w.view((0, n), (n, n));
    let w21 = w.view((n, 0), (n, n));
    let w22 = w.view((n, n), (n, n));
    let eye = RMat::identity(n, n);
    let mut lhs = RMat::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w12);
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w22 - &eye));
    let mut rhs = RMat::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w11 - &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w21));
    let d = svd(&lhs).ok()?;
    if d.s.min() < 1e-12 * d.s.max() {
        return None;
    }
    let x = &d.v * RMat::from_diagonal(&d.s.map(|v| 1.0 / v)) * d.u.transpose() * rhs;
    let x = (&x + x.transpose()) * 0.5;
    let res = a.transpose() * &x + &x * a - &x * g * &x + q;
    let scale = 1.0 + q.norm() + (a.transpose() * &x).norm();
    if res.norm() > 1e-6 * scale {
        return None;
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_sqrt_squares_back() {
        let a = RMat::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let s = psd_sqrt(&a).unwrap();
        assert!((&s * &s - &a).norm() < 1e-12);
    }

    #[test]
    fn psd_sqrt_rejects_indefinite() {
        let a = RMat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_sqrt(&a).is_err());
    }

    #[test]
    fn affine_solution_spans_solution_set() {
        let a = RMat::from_row_slice(2, 4, &[1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
        let b = RVec::from_vec(vec![3.0, 1.0]);
        let sol = solve_affine(&a, &b, 1e-12).unwrap();
        assert_eq!(sol.rank, 2);
        assert_eq!(sol.basis.ncols(), 2);
        assert!((&a * &sol.x0 - &b).amax() < 1e-12);
        assert!((&a * &sol.basis).amax() < 1e-12);
    }

    #[test]
    fn hermitian_cholesky_detects_indefinite() {
        let a = CMat::from_row_slice(2, 2, &[
            Complex64::new(2.0, 0.0),
            Complex64::new(0.5, 0.5),
            Complex64::new(0.5, -0.5),
            Complex64::new(1.0, 0.0),
        ]);
        let l = herm_cholesky(&a).unwrap();
        assert!((&l * l.adjoint() - &a).iter().all(|z| z.norm() < 1e-14));
        let li = lower_inverse(&l);
        assert!((&li * &l - CMat::identity(2, 2)).iter().all(|z| z.norm() < 1e-14));
        assert!(herm_cholesky(&(-a)).is_none());
    }

    #[test]
    fn spd_factor_solves() {
        let n = 230;
        let m = RMat::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let a = &m * m.transpose() + RMat::identity(n, n);
        let b = RVec::from_fn(n, |i, _| i as f64);
        let x = SpdFactor::new(&a).unwrap().solve(&b);
        assert!((&a * x - b).amax() < 1e-8);
        let neg = -a;
        assert!(SpdFactor::new(&neg).is_none());
    }

    #[test]
    fn gemm_helpers_match_nalgebra() {
        let a = RMat::from_fn(7, 5, |i, j| (i as f64 - j as f64).sin());
        let b = RMat::from_fn(7, 4, |i, j| (i * j) as f64 * 0.1 + 1.0);
        let mut out = RMat::from_element(5, 4, 1.0);
        gemm_tn(&mut out, &a, &b, 2.0, true);
        let expected = a.transpose() * &b * 2.0 + RMat::from_element(5, 4, 1.0);
        assert!((out - expected).amax() < 1e-12);
        let c = RMat::from_fn(5, 3, |i, j| (i + 2 * j) as f64);
        assert!((gemm(&a, &c) - &a * &c).amax() < 1e-12);
        let mut head = RMat::zeros(3, 4);
        gemm_tn_cols(&mut head, &a, 3, &b);
        assert!((head - a.columns(0, 3).transpose() * &b).amax() < 1e-12);
    }

    #[test]
    fn care_scalar() {
        // 2x - x^2 + 1 = 0 with a = 1, g = 1, q = 1: x = 1 + sqrt(2)
        let x = care_sign(&RMat::from_element(1, 1, 1.0), &RMat::from_element(1, 1, 1.0), &RMat::from_element(1, 1, 1.0)).unwrap();
        assert!((x[(0, 0)] - (1.0 + 2f64.sqrt())).abs() < 1e-10);
    }

    #[test]
    fn sign_of_diagonal() {
        let a = RMat::from_diagonal(&RVec::from_vec(vec![-3.0, 0.5, 2.0]));
        let s = matrix_sign(&a, 100).unwrap();
        assert!((s - RMat::from_diagonal(&RVec::from_vec(vec![-1.0, 1.0, 1.0]))).amax() < 1e-12);
    }
}
