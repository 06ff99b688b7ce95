//! Independent norm oracles and centralized baselines.

use nalgebra::{Hessenberg, Schur};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{care_sign, eigenvalues, min_sym_eig, sigma_max, spectral_abscissa, to_complex, CMat, RMat, RVec};
use crate::plant::{is_stabilizable, CostWeights, Plant};
use crate::poles::log_grid;

/// Strictly proper `x' = A x + B u`, `y = C x`.
#[derive(Clone, Debug)]
pub struct StateSpace {
    pub a: RMat,
    pub b: RMat,
    pub c: RMat,
}

impl StateSpace {
    pub fn new(a: RMat, b: RMat, c: RMat) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::InvalidDimension(format!(
                "A {}x{}, B {}x{}, C {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols()
            )));
        }
        Ok(StateSpace { a, b, c })
    }

    fn require_hurwitz(&self) -> Result<()> {
        let alpha = spectral_abscissa(&self.a);
        if !(alpha < 0.0) {
            return Err(Error::NotHurwitz(alpha));
        }
        Ok(())
    }
}

pub const KRONECKER_MAX: usize = 40;

/// Solves `A X + X A' + Q = 0`.
pub fn lyapunov(a: &RMat, q: &RMat) -> Result<RMat> {
    let n = a.nrows();
    if n <= KRONECKER_MAX {
        lyapunov_kron(a, q)
    } else {
        lyapunov_schur(a, q)
    }
}

pub fn lyapunov_kron(a: &RMat, q: &RMat) -> Result<RMat> {
    let n = a.nrows();
    let eye = RMat::identity(n, n);
    let big = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = -RVec::from_iterator(n * n, q.iter().copied());
    let x = big
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Domain("Lyapunov operator is singular".into()))?;
    let x = RMat::from_iterator(n, n, x.iter().copied());
    Ok((&x + x.transpose()) * 0.5)
}

/// Complex Schur form `A = U T U*` followed by column back-substitution.
pub fn lyapunov_schur(a: &RMat, q: &RMat) -> Result<RMat> {
    let n = a.nrows();
    let (u, t) = Schur::new(to_complex(a)).unpack();
    let qt = u.adjoint() * to_complex(q) * &u;
    let mut y = CMat::zeros(n, n);
    for j in (0..n).rev() {
        let mut rhs = -qt.column(j).into_owned();
        for k in j + 1..n {
            let c = t[(j, k)].conj();
            if c != Complex64::new(0.0, 0.0) {
                rhs.axpy(-c, &y.column(k), Complex64::new(1.0, 0.0));
            }
        }
        let shift = t[(j, j)].conj();
        // upper-triangular solve of (T + shift I) y_j = rhs
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for k in i + 1..n {
                s -= t[(i, k)] * y[(k, j)];
            }
            let d = t[(i, i)] + shift;
            if d.norm() < 1e-14 * (1.0 + t[(i, i)].norm()) {
                return Err(Error::Domain("Lyapunov operator is singular".into()));
            }
            y[(i, j)] = s / d;
        }
    }
    let x = &u * y * u.adjoint();
    let xr = x.map(|z| z.re);
    let xr = (&xr + xr.transpose()) * 0.5;
    let res = (a * &xr + &xr * a.transpose() + q).norm();
    if !(res <= 1e-8 * (1.0 + q.norm() + 2.0 * a.norm() * xr.norm())) {
        return Err(Error::Solver(format!("Lyapunov residual {res:.3e}")));
    }
    Ok(xr)
}

pub fn h2_norm_ss(sys: &StateSpace) -> Result<f64> {
    sys.require_hurwitz()?;
    if sys.c.nrows() == 0 || sys.b.ncols() == 0 {
        return Ok(0.0);
    }
    let p = lyapunov(&sys.a, &(&sys.b * sys.b.transpose()))?;
    let tr = (&sys.c * p * sys.c.transpose()).trace();
    Ok(tr.max(0.0).sqrt())
}

/// Evaluates `C (sI - A)^{-1} B` at many points through one Hessenberg reduction.
pub struct FrequencyEvaluator {
    h: CMat,
    qb: CMat,
    cq: CMat,
}

impl FrequencyEvaluator {
    pub fn new(sys: &StateSpace) -> Self {
        let hess = Hessenberg::new(sys.a.clone());
        let (q, h) = hess.unpack();
        FrequencyEvaluator {
            h: to_complex(&h),
            qb: to_complex(&(q.transpose() * &sys.b)),
            cq: to_complex(&(&sys.c * q)),
        }
    }

    pub fn eval(&self, s: Complex64) -> CMat {
        let n = self.h.nrows();
        let m = self.qb.ncols();
        // (sI - H) is upper Hessenberg: Gaussian elimination with adjacent-row pivoting
        let mut a = -self.h.clone();
        for i in 0..n {
            a[(i, i)] += s;
        }
        let mut x = self.qb.clone();
        for k in 0..n.saturating_sub(1) {
            if a[(k + 1, k)].norm() > a[(k, k)].norm() {
                a.swap_rows(k, k + 1);
                x.swap_rows(k, k + 1);
            }
            let piv = a[(k, k)];
            if piv.norm() == 0.0 {
                continue;
            }
            let f = a[(k + 1, k)] / piv;
            if f.norm() != 0.0 {
                for j in k..n {
                    let v = a[(k, j)];
                    a[(k + 1, j)] -= f * v;
                }
                for j in 0..m {
                    let v = x[(k, j)];
                    x[(k + 1, j)] -= f * v;
                }
            }
        }
        for j in 0..m {
            for i in (0..n).rev() {
                let mut acc = x[(i, j)];
                for k in i + 1..n {
                    acc -= a[(i, k)] * x[(k, j)];
                }
                x[(i, j)] = acc / a[(i, i)];
            }
        }
        &self.cq * x
    }
}

pub const SWEEP_POINTS: usize = 2000;
pub const SWEEP_LO: f64 = 1e-3;
pub const SWEEP_HI: f64 = 1e3;

/// `omega = 0` followed by the logarithmic sweep grid.
pub fn sweep_grid() -> Vec<f64> {
    let mut w = vec![0.0];
    w.extend(log_grid(SWEEP_LO, SWEEP_HI, SWEEP_POINTS));
    w
}

/// Grid maximum followed by golden-section refinement around the best grid point.
pub fn sweep_peak(f: &dyn Fn(f64) -> f64, grid: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = grid.iter().map(|&w| f(w)).collect();
    let (i, &v) = vals
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    let lo = grid[i.saturating_sub(1)];
    let hi = grid[(i + 1).min(grid.len() - 1)];
    let (wg, vg) = golden_max(f, lo, hi, 60);
    if vg > v {
        (vg, wg)
    } else {
        (v, grid[i])
    }
}

pub fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if (b - a) <= 1e-12 * (1.0 + b.abs()) {
            break;
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HinfNorm {
    /// certified upper bound (the reported norm)
    pub upper: f64,
    /// attained lower bound
    pub lower: f64,
    /// frequency of the lower bound
    pub peak_omega: f64,
    /// maximum over the plain sweep grid
    pub sweep_max: f64,
}

impl HinfNorm {
    pub fn value(&self) -> f64 {
        self.upper
    }
}

/// Frequencies where the Hamiltonian at level `gamma` has imaginary-axis eigenvalues.
pub fn hamiltonian_crossings(sys: &StateSpace, gamma: f64) -> Vec<f64> {
    let n = sys.a.nrows();
    let mut h = RMat::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    h.view_mut((0, n), (n, n)).copy_from(&(&sys.b * sys.b.transpose() / gamma));
    h.view_mut((n, 0), (n, n)).copy_from(&(-(sys.c.transpose() * &sys.c) / gamma));
    h.view_mut((n, n), (n, n)).copy_from(&(-sys.a.transpose()));
    let scale = h.amax().max(1.0);
    let mut w: Vec<f64> = eigenvalues(&h)
        .iter()
        .filter(|z| z.re.abs() <= 1e-7 * scale && z.im >= 0.0)
        .map(|z| z.im)
        .collect();
    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    w.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * (1.0 + b.abs()));
    w
}

/// H-infinity norm: sweep lower bound, then Hamiltonian level tests with midpoint lifting.
pub fn hinf_norm_ss(sys: &StateSpace, tol: f64) -> Result<HinfNorm> {
    sys.require_hurwitz()?;
    if sys.c.nrows() == 0 || sys.b.ncols() == 0 {
        return Ok(HinfNorm { upper: 0.0, lower: 0.0, peak_omega: 0.0, sweep_max: 0.0 });
    }
    let ev = FrequencyEvaluator::new(sys);
    let f = |w: f64| sigma_max(&ev.eval(Complex64::new(0.0, w)));
    let grid = sweep_grid();
    let sweep_max = grid.iter().map(|&w| f(w)).fold(0.0, f64::max);
    let (mut lower, mut peak) = sweep_peak(&f, &grid);
    let mut upper = f64::INFINITY;
    for _ in 0..60 {
        let gamma = lower * (1.0 + 2.0 * tol) + tol;
        let cross = hamiltonian_crossings(sys, gamma);
        if cross.is_empty() {
            upper = gamma;
            break;
        }
        let mut improved = false;
        let mut cand: Vec<f64> = cross.clone();
        for pair in cross.windows(2) {
            cand.push(0.5 * (pair[0] + pair[1]));
        }
        for &w in &cand {
            let (wv, v) = golden_max(&f, (w * 0.9).max(0.0), w * 1.1 + 1e-9, 40);
            let (v, wv) = if f(w) > v { (f(w), w) } else { (v, wv) };
            if v > lower * (1.0 + tol) {
                lower = v;
                peak = wv;
                improved = true;
            }
        }
        if !improved {
            // Every band above gamma is bracketed by crossings, and none of them holds a larger value:
            // the remaining crossings are the near-double eigenvalues of a sharp peak.
            upper = gamma;
            break;
        }
    }
    if !upper.is_finite() {
        return Err(Error::Solver("H-infinity level test did not terminate".into()));
    }
    Ok(HinfNorm { upper, lower: lower.min(upper), peak_omega: peak, sweep_max })
}

#[derive(Clone, Debug)]
pub struct LqrResult {
    /// optimal gain for `u = -K x`
    pub k: RMat,
    pub p: RMat,
    pub h2_cost: f64,
    pub iterations: usize,
    pub residual: f64,
}

fn care_residual(a: &RMat, b: &RMat, q: &RMat, rinv: &RMat, p: &RMat) -> f64 {
    (a.transpose() * p + p * a - p * b * rinv * b.transpose() * p + q).norm()
}

/// Stabilizing gain by the Bass shift method, falling back to a sign-function CARE gain.
pub fn stabilizing_gain(a: &RMat, b: &RMat) -> Result<RMat> {
    let n = a.nrows();
    if spectral_abscissa(a) < 0.0 {
        return Ok(RMat::zeros(b.ncols(), n));
    }
    let beta = a.norm() + 1.0;
    let shifted = a + RMat::identity(n, n) * beta;
    // (A + beta I) Z + Z (A + beta I)' = 2 B B'
    let z = lyapunov(&(-&shifted), &((b * b.transpose()) * 2.0))?;
    if let Some(zi) = z.clone().try_inverse() {
        let k = b.transpose() * zi;
        if spectral_abscissa(&(a - b * &k)) < 0.0 {
            return Ok(k);
        }
    }
    let g = b * b.transpose();
    let x = care_sign(a, &g, &RMat::identity(n, n))
        .ok_or_else(|| Error::Infeasible("no stabilizing gain found".into()))?;
    let k = b.transpose() * x;
    if spectral_abscissa(&(a - b * &k)) < 0.0 {
        Ok(k)
    } else {
        Err(Error::Infeasible("no stabilizing gain found".into()))
    }
}

/// Newton-Kleinman iteration for the LQR Riccati equation.
pub fn lqr(plant: &Plant, weights: &CostWeights) -> Result<LqrResult> {
    weights.check(plant)?;
    if !is_stabilizable(plant) {
        return Err(Error::Infeasible("(A, B) is not stabilizable".into()));
    }
    let (a, b, q) = (&plant.a, &plant.b, &weights.q);
    let rinv = weights
        .r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("R is singular".into()))?;
    // sign-function solution as the starting point, polished by Newton; Bass shift if it fails
    let g = b * &rinv * b.transpose();
    let mut k = match care_sign(a, &g, q) {
        Some(x) if spectral_abscissa(&(a - &g * &x)) < 0.0 => &rinv * b.transpose() * x,
        _ => stabilizing_gain(a, b)?,
    };
    let tol = 1e-9 * q.norm();
    let mut p = RMat::zeros(a.nrows(), a.nrows());
    let mut res = f64::INFINITY;
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let acl = a - b * &k;
        let rhs = q + k.transpose() * &weights.r * &k;
        p = lyapunov(&acl.transpose(), &rhs)?;
        k = &rinv * b.transpose() * &p;
        res = care_residual(a, b, q, &rinv, &p);
        if res <= tol {
            break;
        }
    }
    if res > tol {
        // Newton stalls at rounding level on some problems; accept only if within a loose bound
        if !(res <= 1e-7 * (1.0 + q.norm())) {
            return Err(Error::Solver(format!("Newton-Kleinman stagnated with residual {res:.3e}")));
        }
    }
    let h2_cost = closed_loop_h2(plant, weights, &k)?;
    Ok(LqrResult { k, p, h2_cost, iterations, residual: res })
}

/// Weighted state-feedback closed loop `W [I; -K] (sI - A + BK)^{-1}`.
pub fn closed_loop_system(plant: &Plant, weights: &CostWeights, k: &RMat) -> Result<StateSpace> {
    let n = plant.n();
    let m = plant.m();
    let w = weights.sqrt_block()?;
    let mut c = RMat::zeros(n + m, n);
    c.view_mut((0, 0), (n, n)).copy_from(&RMat::identity(n, n));
    c.view_mut((n, 0), (m, n)).copy_from(&(-k));
    StateSpace::new(&plant.a - &plant.b * k, RMat::identity(n, n), w * c)
}

pub fn closed_loop_h2(plant: &Plant, weights: &CostWeights, k: &RMat) -> Result<f64> {
    h2_norm_ss(&closed_loop_system(plant, weights, k)?)
}

pub fn lqr_baseline(plant: &Plant, weights: &CostWeights) -> Result<(RMat, f64)> {
    let r = lqr(plant, weights)?;
    Ok((r.k, r.h2_cost))
}

/// Stabilizing solution of the full-information H-infinity Riccati equation at level gamma.
pub fn hinf_riccati(plant: &Plant, weights: &CostWeights, gamma: f64) -> Option<RMat> {
    let n = plant.n();
    let rinv = weights.r.clone().try_inverse()?;
    let g = &plant.b * rinv * plant.b.transpose() - RMat::identity(n, n) / (gamma * gamma);
    let x = care_sign(&plant.a, &g, &weights.q)?;
    if min_sym_eig(&x) < -1e-9 * (1.0 + x.amax()) {
        return None;
    }
    if !(spectral_abscissa(&(&plant.a - &g * &x)) < 0.0) {
        return None;
    }
    Some(x)
}

/// Optimal full-information H-infinity level by bisection on Riccati solvability.
pub fn hinf_riccati_gamma(plant: &Plant, weights: &CostWeights, rtol: f64) -> Result<f64> {
    let lq = lqr(plant, weights)?;
    let mut hi = hinf_norm_ss(&closed_loop_system(plant, weights, &lq.k)?, 1e-6)?.upper * 1.01;
    if hinf_riccati(plant, weights, hi).is_none() {
        hi *= 2.0;
        if hinf_riccati(plant, weights, hi).is_none() {
            return Err(Error::Solver("no feasible H-infinity Riccati level found".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > rtol * hi {
        let mid = 0.5 * (lo + hi);
        if mid > 0.0 && hinf_riccati(plant, weights, mid).is_some() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> RMat {
        RMat::from_row_slice(r, c, v)
    }

    #[test]
    fn scalar_h2() {
        let sys = StateSpace::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        assert!((h2_norm_ss(&sys).unwrap() - 0.5f64.sqrt()).abs() < 1e-14);
        let zero = StateSpace::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0])).unwrap();
        assert_eq!(h2_norm_ss(&zero).unwrap(), 0.0);
        let unstable = StateSpace::new(m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        assert!(matches!(h2_norm_ss(&unstable), Err(Error::NotHurwitz(_))));
    }

    #[test]
    fn schur_and_kron_lyapunov_agree() {
        let n = 12;
        let a = RMat::from_fn(n, n, |i, j| if i == j { -2.0 - i as f64 * 0.1 } else { ((i * 5 + j * 3) % 7) as f64 * 0.1 - 0.3 });
        let q = RMat::from_fn(n, n, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let x1 = lyapunov_kron(&a, &q).unwrap();
        let x2 = lyapunov_schur(&a, &q).unwrap();
        assert!((&x1 - &x2).amax() < 1e-10);
        assert!((&a * &x1 + &x1 * a.transpose() + &q).amax() < 1e-10);
    }

    #[test]
    fn hinf_examples() {
        let sys = StateSpace::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let r = hinf_norm_ss(&sys, 1e-8).unwrap();
        assert!((r.value() - 1.0).abs() < 1e-6);
        let sys = StateSpace::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(2, 1, &[1.0, -1.0])).unwrap();
        let r = hinf_norm_ss(&sys, 1e-8).unwrap();
        assert!((r.value() - 2f64.sqrt()).abs() < 1e-6);
        assert!(r.lower <= r.upper && r.sweep_max <= r.upper);
    }

    #[test]
    fn resonant_peak_is_found() {
        // lightly damped oscillator: peak near 1/(2 zeta) at omega ~ 1
        let z = 0.01;
        let sys = StateSpace::new(m(2, 2, &[0.0, 1.0, -1.0, -2.0 * z]), m(2, 1, &[0.0, 1.0]), m(1, 2, &[1.0, 0.0])).unwrap();
        let r = hinf_norm_ss(&sys, 1e-9).unwrap();
        let exact = 1.0 / (2.0 * z * (1.0 - z * z).sqrt());
        assert!((r.value() - exact).abs() / exact < 1e-6);
        assert!((r.peak_omega - (1.0 - 2.0 * z * z).sqrt()).abs() < 1e-3);
        assert!(r.lower > exact * (1.0 - 1e-6));
    }

    #[test]
    fn sharp_peak_between_grid_points() {
        // w0 = 3.3, zeta = 1e-5: the half-power width is far below the sweep spacing
        let (w0, z) = (3.3, 1e-5);
        let sys = StateSpace::new(
            m(2, 2, &[0.0, 1.0, -w0 * w0, -2.0 * z * w0]),
            m(2, 1, &[0.0, 1.0]),
            m(1, 2, &[w0 * w0, 0.0]),
        )
        .unwrap();
        let r = hinf_norm_ss(&sys, 1e-9).unwrap();
        let exact = 1.0 / (2.0 * z * (1.0 - z * z).sqrt());
        assert!(r.sweep_max < 0.5 * exact);
        assert!((r.value() - exact).abs() / exact < 1e-6, "{r:?}");
        assert!((r.peak_omega - w0).abs() < 1e-3 && r.lower <= r.upper);
    }

    #[test]
    fn lqr_scalar() {
        let plant = Plant::from_matrices(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        let w = CostWeights::identity(1, 1, 1.0, 1.0);
        let r = lqr(&plant, &w).unwrap();
        assert!((r.p[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((r.k[(0, 0)] - 1.0).abs() < 1e-10);
        assert!((r.h2_cost - 1.0).abs() < 1e-10);
    }

    #[test]
    fn lqr_stable_zero_q() {
        let plant = Plant::from_matrices(m(2, 2, &[-1.0, 0.3, 0.0, -2.0]), m(2, 1, &[0.0, 1.0])).unwrap();
        let w = CostWeights { q: RMat::zeros(2, 2), r: RMat::identity(1, 1) };
        let r = lqr(&plant, &w).unwrap();
        assert_eq!(r.k.amax(), 0.0);
        assert_eq!(r.h2_cost, 0.0);
    }

    #[test]
    fn riccati_gamma_scalar() {
        // a = 0, b = 1, q = r = 1: X^2 (1/g^2 - 1) + 1 = 0 -> X = 1/sqrt(1 - 1/g^2), feasible for all g > 1
        let plant = Plant::from_matrices(m(1, 1, &[0.0]), m(1, 1, &[1.0])).unwrap();
        let w = CostWeights::identity(1, 1, 1.0, 1.0);
        let g = hinf_riccati_gamma(&plant, &w, 1e-7).unwrap();
        assert!((g - 1.0).abs() < 1e-5);
    }
}
