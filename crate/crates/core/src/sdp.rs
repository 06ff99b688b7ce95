//! Primal-dual interior-point method for block semidefinite programs.
//!
//! The dual form is solved directly:
//!
//! ```text
//! maximize   b'y
//! subject to S = C - sum_i y_i A_i  is positive semidefinite (per Hermitian block)
//! ```
//!
//! with the primal `min <C, X>` s.t. `Re tr(A_i X) = b_i`, `X >= 0`. Search directions use
//! the HKM scaling with a Mehrotra predictor-corrector. Problems supply the operators
//! through [`SdpProblem`] so that structured Schur complements can be formed cheaply.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{herm_cholesky, herm_eigenvalues, hermitian_part, lower_inverse, CMat, RMat, RVec, SpdFactor};

/// Operators of a block SDP in dual form.
pub trait SdpProblem {
    fn num_vars(&self) -> usize;
    fn block_sizes(&self) -> Vec<usize>;
    fn objective(&self) -> RVec;
    /// Constant term `C` of the slack.
    fn constant(&self) -> Vec<CMat>;
    /// `sum_i y_i A_i`.
    fn combine(&self, y: &RVec) -> Vec<CMat>;
    /// `Re tr(A_i Z)` for every variable.
    fn apply(&self, z: &[CMat]) -> RVec;
    /// `M_ij = Re tr(A_i X A_j T)`.
    fn schur(&self, x: &[CMat], t: &[CMat]) -> RMat;
    /// A point with `C - sum y_i A_i` positive definite.
    fn feasible_start(&self) -> Result<RVec>;
}

#[derive(Clone, Copy, Debug)]
pub struct SdpSettings {
    /// relative duality gap target
    pub gap_tol: f64,
    /// primal residual target relative to `1 + ||b||`
    pub feas_tol: f64,
    pub max_iter: usize,
    /// fraction of the distance to the boundary taken per step
    pub step_fraction: f64,
    /// print one progress line per iteration to stderr
    pub trace: bool,
}

impl Default for SdpSettings {
    fn default() -> Self {
        SdpSettings { gap_tol: 1e-9, feas_tol: 1e-8, max_iter: 100, step_fraction: 0.95, trace: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    /// Newton system became too ill-conditioned; the last dual-feasible iterate is returned.
    Stalled,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub y: RVec,
    pub x: Vec<CMat>,
    pub s: Vec<CMat>,
    pub dual_objective: f64,
    pub primal_objective: f64,
    /// `sum tr(X S) / (1 + |b'y|)`
    pub relative_gap: f64,
    pub primal_residual: f64,
    pub status: SdpStatus,
    pub iterations: usize,
}

fn herm(a: &CMat) -> CMat {
    hermitian_part(a)
}

fn re_trace_product(a: &CMat, b: &CMat) -> f64 {
    // Re tr(A B) for square A, B
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            let p = a[(i, k)] * b[(k, i)];
            acc += p.re;
        }
    }
    acc
}

fn chol_inverse(a: &CMat) -> Option<CMat> {
    let li = lower_inverse(&herm_cholesky(a)?);
    Some(herm(&(li.adjoint() * li)))
}

/// Largest `alpha` with `M + alpha D` positive semidefinite (infinity if unbounded).
fn max_step(m: &CMat, d: &CMat) -> Option<f64> {
    let li = lower_inverse(&herm_cholesky(m)?);
    let w = &li * d * li.adjoint();
    let lmin = herm_eigenvalues(&w).min();
    Some(if lmin < 0.0 { -1.0 / lmin } else { f64::INFINITY })
}

fn max_abs_entry(m: &[CMat]) -> f64 {
    m.iter().flat_map(|b| b.iter()).fold(0.0, |acc, z| acc.max(z.norm()))
}

struct Newton {
    factor: SpdFactor,
    scale: RVec,
    m: RMat,
}

impl Newton {
    fn new(m: RMat) -> Option<Self> {
        let n = m.nrows();
        let scale = RVec::from_fn(n, |i, _| {
            let d = m[(i, i)];
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        });
        let scaled = RMat::from_fn(n, n, |i, j| m[(i, j)] * scale[i] * scale[j]);
        for shift in [1e-13, 1e-9] {
            let mut shifted = scaled.clone();
            for i in 0..n {
                shifted[(i, i)] += shift;
            }
            if let Some(factor) = SpdFactor::new(&shifted) {
                return Some(Newton { factor, scale, m });
            }
        }
        None
    }

    fn solve_scaled(&self, r: &RVec) -> RVec {
        let rs = r.component_mul(&self.scale);
        self.factor.solve(&rs).component_mul(&self.scale)
    }

    /// Solve with two steps of iterative refinement against the unshifted matrix.
    fn solve(&self, r: &RVec) -> RVec {
        let mut x = self.solve_scaled(r);
        for _ in 0..2 {
            let res = r - &self.m * &x;
            x += self.solve_scaled(&res);
        }
        x
    }
}

struct Direction {
    dy: RVec,
    dx: Vec<CMat>,
    ds: Vec<CMat>,
}

/// Solves the SDP; the returned iterate is dual feasible (S positive definite) in every status.
pub fn solve(problem: &dyn SdpProblem, settings: &SdpSettings) -> Result<SdpSolution> {
    let sizes = problem.block_sizes();
    let nvars = problem.num_vars();
    let b = problem.objective();
    if b.len() != nvars {
        return Err(Error::InvalidDimension(format!("objective has {} entries for {} variables", b.len(), nvars)));
    }
    let c = problem.constant();
    let total_dim: usize = sizes.iter().sum();
    let mut y = problem.feasible_start()?;
    let ay = problem.combine(&y);
    let mut s: Vec<CMat> = c.iter().zip(&ay).map(|(ck, ak)| herm(&(ck - ak))).collect();
    for sk in &s {
        if herm_cholesky(sk).is_none() {
            return Err(Error::Solver("starting point is not strictly dual feasible".into()));
        }
    }
    let mut x: Vec<CMat> = sizes.iter().map(|&n| CMat::identity(n, n)).collect();
    let c_scale = 1.0 + max_abs_entry(&c);
    let b_scale = 1.0 + b.norm();
    let mut status = SdpStatus::MaxIterations;
    let mut iterations = 0;
    let mut last = (y.clone(), x.clone(), s.clone());

    for it in 0..settings.max_iter {
        iterations = it;
        let ay = problem.combine(&y);
        let rd: Vec<CMat> = (0..c.len()).map(|k| herm(&(&c[k] - &ay[k] - &s[k]))).collect();
        let rp = &b - problem.apply(&x);
        let xs: f64 = x.iter().zip(&s).map(|(xk, sk)| re_trace_product(xk, sk)).sum();
        let mu = xs / total_dim as f64;
        let dual_obj = b.dot(&y);
        let gap = xs / (1.0 + dual_obj.abs());
        let pres = rp.norm() / b_scale;
        let dres = max_abs_entry(&rd) / c_scale;
        if settings.trace {
            eprintln!("sdp {it:3} obj {dual_obj:.10e} gap {gap:.2e} pres {pres:.2e} dres {dres:.2e} mu {mu:.2e}");
        }
        // near the boundary the recomputed slack can lose definiteness to rounding
        let exact: Vec<CMat> = (0..c.len()).map(|k| herm(&(&c[k] - &ay[k]))).collect();
        let strictly_feasible = exact.iter().all(|sk| herm_cholesky(sk).is_some());
        if strictly_feasible {
            last = (y.clone(), x.clone(), s.clone());
        }
        if gap <= settings.gap_tol && pres <= settings.feas_tol && dres <= settings.feas_tol {
            status = SdpStatus::Optimal;
            break;
        }
        let t: Option<Vec<CMat>> = s.iter().map(chol_inverse).collect();
        let Some(t) = t else {
            status = SdpStatus::Stalled;
            break;
        };
        let m = problem.schur(&x, &t);
        let m = (&m + m.transpose()) * 0.5;
        let Some(newton) = Newton::new(m) else {
            status = SdpStatus::Stalled;
            break;
        };
        // X Rd S^-1 is common to both solves
        let xrt: Vec<CMat> = (0..x.len()).map(|k| &x[k] * &rd[k] * &t[k]).collect();
        let axrt = problem.apply(&xrt);
        let direction = |sigma_mu: f64, corr: Option<&[CMat]>| -> Direction {
            let g: Vec<CMat> = (0..x.len())
                .map(|k| {
                    let mut gk = &t[k] * Complex64::new(sigma_mu, 0.0) - &x[k];
                    if let Some(cr) = corr {
                        gk -= &cr[k];
                    }
                    gk
                })
                .collect();
            let rhs = &rp - problem.apply(&g) + &axrt;
            let dy = newton.solve(&rhs);
            let ady = problem.combine(&dy);
            let ds: Vec<CMat> = (0..x.len()).map(|k| herm(&(&rd[k] - &ady[k]))).collect();
            let dx: Vec<CMat> = (0..x.len()).map(|k| herm(&(&g[k] - &x[k] * &ds[k] * &t[k]))).collect();
            Direction { dy, dx, ds }
        };
        let steps = |d: &Direction, frac: f64| -> Option<(f64, f64)> {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for k in 0..x.len() {
                ap = ap.min(max_step(&x[k], &d.dx[k])?);
                ad = ad.min(max_step(&s[k], &d.ds[k])?);
            }
            Some(((frac * ap).min(1.0), (frac * ad).min(1.0)))
        };
        let pred = direction(0.0, None);
        let Some((ap, ad)) = steps(&pred, 0.98) else {
            status = SdpStatus::Stalled;
            break;
        };
        let mut xs_aff = 0.0;
        for k in 0..x.len() {
            let xa = &x[k] + &pred.dx[k] * Complex64::new(ap, 0.0);
            let sa = &s[k] + &pred.ds[k] * Complex64::new(ad, 0.0);
            xs_aff += re_trace_product(&xa, &sa);
        }
        let sigma = (xs_aff / total_dim as f64 / mu).clamp(0.0, 1.0).powi(3);
        let corr: Vec<CMat> = (0..x.len()).map(|k| &pred.dx[k] * &pred.ds[k] * &t[k]).collect();
        let d = direction(sigma * mu, Some(&corr));
        let Some((ap, ad)) = steps(&d, settings.step_fraction) else {
            status = SdpStatus::Stalled;
            break;
        };
        if settings.trace {
            eprintln!("    steps primal {ap:.3e} dual {ad:.3e} sigma {sigma:.3e}");
        }
        for k in 0..x.len() {
            x[k] = herm(&(&x[k] + &d.dx[k] * Complex64::new(ap, 0.0)));
            s[k] = herm(&(&s[k] + &d.ds[k] * Complex64::new(ad, 0.0)));
        }
        y += &d.dy * ad;
        iterations = it + 1;
    }

    // the last iterate whose exact slack C - A*(y) was positive definite
    let (ly, lx, ls) = last;
    if ly != y {
        if status == SdpStatus::Optimal {
            status = SdpStatus::Stalled;
        }
        y = ly;
        x = lx;
        s = ls;
    }
    let ay = problem.combine(&y);
    for k in 0..c.len() {
        let sk = herm(&(&c[k] - &ay[k]));
        if herm_cholesky(&sk).is_none() {
            return Err(Error::Solver("interior-point iterate lost dual feasibility".into()));
        }
        s[k] = sk;
    }
    let xs: f64 = x.iter().zip(&s).map(|(xk, sk)| re_trace_product(xk, sk)).sum();
    let dual_objective = b.dot(&y);
    let primal_objective: f64 = c.iter().zip(&x).map(|(ck, xk)| re_trace_product(ck, xk)).sum();
    let primal_residual = (&b - problem.apply(&x)).norm() / b_scale;
    Ok(SdpSolution {
        y,
        x,
        s,
        dual_objective,
        primal_objective,
        relative_gap: xs / (1.0 + dual_objective.abs()),
        primal_residual,
        status,
        iterations,
    })
}

/// One entry of a real symmetric coefficient matrix: `value (E_rc + E_cr)` off the diagonal,
/// `value E_rr` on it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SymEntry {
    pub block: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Real LMI problem with sparse symmetric coefficient matrices.
#[derive(Clone, Debug)]
pub struct LmiProblem {
    pub sizes: Vec<usize>,
    pub c: Vec<RMat>,
    pub a: Vec<Vec<SymEntry>>,
    pub b: RVec,
    pub start: RVec,
}

impl LmiProblem {
    /// Collects the nonzero upper-triangular entries of a dense symmetric matrix.
    pub fn entries_of(block: usize, m: &RMat, offset: (usize, usize)) -> Vec<SymEntry> {
        let mut out = Vec::new();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                let v = m[(i, j)];
                if v == 0.0 {
                    continue;
                }
                let (r, c) = (i + offset.0, j + offset.1);
                if offset.0 == offset.1 {
                    // diagonal block: keep the upper triangle only
                    if r <= c {
                        out.push(SymEntry { block, row: r, col: c, value: v });
                    }
                } else {
                    out.push(SymEntry { block, row: r.min(c), col: r.max(c), value: v });
                }
            }
        }
        out
    }

    /// Dense real slack `C - sum y_i A_i`.
    pub fn slack(&self, y: &RVec) -> Vec<RMat> {
        let mut out = self.c.clone();
        for (i, terms) in self.a.iter().enumerate() {
            for e in terms {
                out[e.block][(e.row, e.col)] -= y[i] * e.value;
                if e.row != e.col {
                    out[e.block][(e.col, e.row)] -= y[i] * e.value;
                }
            }
        }
        out
    }
}

impl SdpProblem for LmiProblem {
    fn num_vars(&self) -> usize {
        self.a.len()
    }

    fn block_sizes(&self) -> Vec<usize> {
        self.sizes.clone()
    }

    fn objective(&self) -> RVec {
        self.b.clone()
    }

    fn constant(&self) -> Vec<CMat> {
        self.c.iter().map(|m| m.map(|v| Complex64::new(v, 0.0))).collect()
    }

    fn combine(&self, y: &RVec) -> Vec<CMat> {
        let mut out: Vec<CMat> = self.sizes.iter().map(|&n| CMat::zeros(n, n)).collect();
        for (i, terms) in self.a.iter().enumerate() {
            if y[i] == 0.0 {
                continue;
            }
            for e in terms {
                out[e.block][(e.row, e.col)] += y[i] * e.value;
                if e.row != e.col {
                    out[e.block][(e.col, e.row)] += y[i] * e.value;
                }
            }
        }
        out
    }

    fn apply(&self, z: &[CMat]) -> RVec {
        RVec::from_iterator(
            self.a.len(),
            self.a.iter().map(|terms| {
                terms
                    .iter()
                    .map(|e| {
                        let zb = &z[e.block];
                        if e.row == e.col {
                            e.value * zb[(e.row, e.row)].re
                        } else {
                            e.value * (zb[(e.row, e.col)].re + zb[(e.col, e.row)].re)
                        }
                    })
                    .sum::<f64>()
            }),
        )
    }

    fn schur(&self, x: &[CMat], t: &[CMat]) -> RMat {
        let nv = self.a.len();
        let xr: Vec<RMat> = x.iter().map(|m| m.map(|z| z.re)).collect();
        let tr: Vec<RMat> = t.iter().map(|m| m.map(|z| z.re)).collect();
        // variables grouped by block so that X A_j T is formed once per (j, block)
        let mut m = RMat::zeros(nv, nv);
        for j in 0..nv {
            let mut blocks: Vec<usize> = self.a[j].iter().map(|e| e.block).collect();
            blocks.sort_unstable();
            blocks.dedup();
            for &blk in &blocks {
                let n = self.sizes[blk];
                // A_j T restricted to the touched rows
                let mut at = RMat::zeros(n, n);
                let mut touched = vec![false; n];
                for e in self.a[j].iter().filter(|e| e.block == blk) {
                    for col in 0..n {
                        at[(e.row, col)] += e.value * tr[blk][(e.col, col)];
                    }
                    touched[e.row] = true;
                    if e.row != e.col {
                        for col in 0..n {
                            at[(e.col, col)] += e.value * tr[blk][(e.row, col)];
                        }
                        touched[e.col] = true;
                    }
                }
                let mut z = RMat::zeros(n, n);
                for (k, _) in touched.iter().enumerate().filter(|(_, &t)| t) {
                    z.ger(1.0, &xr[blk].column(k), &at.row(k).transpose(), 1.0);
                }
                for (i, terms) in self.a.iter().enumerate().skip(j) {
                    let mut acc = 0.0;
                    for e in terms.iter().filter(|e| e.block == blk) {
                        acc += if e.row == e.col {
                            e.value * z[(e.row, e.row)]
                        } else {
                            e.value * (z[(e.row, e.col)] + z[(e.col, e.row)])
                        };
                    }
                    m[(i, j)] += acc;
                }
            }
        }
        for j in 0..nv {
            for i in 0..j {
                m[(i, j)] = m[(j, i)];
            }
        }
        m
    }

    fn feasible_start(&self) -> Result<RVec> {
        Ok(self.start.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(block: usize, row: usize, col: usize, value: f64) -> SymEntry {
        SymEntry { block, row, col, value }
    }

    #[test]
    fn max_eigenvalue_as_sdp() {
        // minimize t s.t. t I - A >= 0  <=>  maximize -t with S = -A + t I
        let a = RMat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let prob = LmiProblem {
            sizes: vec![2],
            c: vec![-a.clone()],
            a: vec![vec![entry(0, 0, 0, -1.0), entry(0, 1, 1, -1.0)]],
            b: RVec::from_vec(vec![-1.0]),
            start: RVec::from_vec(vec![10.0]),
        };
        let sol = solve(&prob, &SdpSettings::default()).unwrap();
        let expected = (5.0 + 5f64.sqrt()) / 2.0;
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!((sol.y[0] - expected).abs() < 1e-7, "{}", sol.y[0]);
        assert!((sol.primal_objective - sol.dual_objective).abs() < 1e-6);
    }

    #[test]
    fn two_blocks_and_coupled_variables() {
        // maximize y1 + y2 s.t. [[1 - y1, y2], [y2, 1]] >= 0 and 2 - y2 >= 0
        let prob = LmiProblem {
            sizes: vec![2, 1],
            c: vec![RMat::identity(2, 2), RMat::from_element(1, 1, 2.0)],
            a: vec![vec![entry(0, 0, 0, 1.0)], vec![entry(0, 0, 1, -1.0), entry(1, 0, 0, 1.0)]],
            b: RVec::from_vec(vec![1.0, 1.0]),
            start: RVec::from_vec(vec![0.0, 0.0]),
        };
        let sol = solve(&prob, &SdpSettings::default()).unwrap();
        // optimum: 1 - y1 = y2^2 => maximize 1 - y2^2 + y2 => y2 = 1/2, value 5/4
        assert!((sol.dual_objective - 1.25).abs() < 1e-7, "{}", sol.dual_objective);
        assert!((sol.y[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn schur_matches_definition() {
        let prob = LmiProblem {
            sizes: vec![3],
            c: vec![RMat::identity(3, 3)],
            a: vec![
                vec![entry(0, 0, 1, 0.7), entry(0, 2, 2, -1.2)],
                vec![entry(0, 1, 1, 2.0)],
                vec![entry(0, 0, 2, 1.5), entry(0, 0, 0, 0.3)],
            ],
            b: RVec::zeros(3),
            start: RVec::zeros(3),
        };
        let x = RMat::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]);
        let t = RMat::from_row_slice(3, 3, &[1.0, -0.1, 0.2, -0.1, 2.0, 0.4, 0.2, 0.4, 1.2]);
        let xc = vec![x.map(|v| Complex64::new(v, 0.0))];
        let tc = vec![t.map(|v| Complex64::new(v, 0.0))];
        let m = prob.schur(&xc, &tc);
        let dense = |i: usize| {
            let mut y = RVec::zeros(3);
            y[i] = 1.0;
            prob.combine(&y)[0].map(|z| z.re)
        };
        for i in 0..3 {
            for j in 0..3 {
                let expect = (dense(i) * &x * dense(j) * &t).trace();
                assert!((m[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let prob = LmiProblem {
            sizes: vec![1],
            c: vec![RMat::from_element(1, 1, -1.0)],
            a: vec![vec![entry(0, 0, 0, 1.0)]],
            b: RVec::from_vec(vec![1.0]),
            start: RVec::from_vec(vec![0.0]),
        };
        assert!(solve(&prob, &SdpSettings::default()).is_err());
    }
}
