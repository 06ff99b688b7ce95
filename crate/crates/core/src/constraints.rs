//! Response ensembles, sparsity masks and the real-parameterized affine constraint system.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cmax_abs, solve_affine, to_complex, CMat, RMat, RVec};
use crate::plant::Plant;
use crate::poles::PoleSet;

pub const FEASIBILITY_TOL: f64 = 1e-6;
const RANK_RTOL: f64 = 1e-11;

/// Per-pole coefficients of `Phi_x(s) = sum_l Phi_x(l) / (s - p_l)` and likewise `Phi_u`.
#[derive(Clone, Debug)]
pub struct ResponseEnsemble {
    pub poles: PoleSet,
    pub phi_x: Vec<CMat>,
    pub phi_u: Vec<CMat>,
}

impl ResponseEnsemble {
    pub fn n(&self) -> usize {
        self.phi_x[0].nrows()
    }

    pub fn m(&self) -> usize {
        self.phi_u[0].nrows()
    }

    pub fn evaluate(&self, s: Complex64) -> Result<(CMat, CMat)> {
        let (n, m) = (self.n(), self.m());
        let mut x = CMat::zeros(n, n);
        let mut u = CMat::zeros(m, n);
        for (l, p) in self.poles.poles().iter().enumerate() {
            let d = s - p;
            if d.norm() <= 1e-14 * (1.0 + p.norm()) {
                return Err(Error::Domain(format!("sample {s} coincides with pole {p}")));
            }
            let g = Complex64::new(1.0, 0.0) / d;
            x += &self.phi_x[l] * g;
            u += &self.phi_u[l] * g;
        }
        Ok((x, u))
    }

    /// Largest deviation from `Phi(l') = conj(Phi(l))` over conjugate pairs.
    pub fn conjugacy_error(&self) -> f64 {
        let mut e: f64 = 0.0;
        for l in 0..self.poles.len() {
            let k = self.poles.partner(l);
            e = e.max(cmax_abs(&(&self.phi_x[k] - self.phi_x[l].conjugate())));
            e = e.max(cmax_abs(&(&self.phi_u[k] - self.phi_u[l].conjugate())));
        }
        e
    }

    /// Coefficient residuals: `||sum Phi_x(l) - I||` and `max_l ||(p_l I - A)Phi_x(l) - B Phi_u(l)||`.
    pub fn coefficient_residual(&self, plant: &Plant) -> (f64, f64) {
        let n = self.n();
        let ac = to_complex(&plant.a);
        let bc = to_complex(&plant.b);
        let mut sum = CMat::zeros(n, n);
        let mut dyn_res: f64 = 0.0;
        for (l, p) in self.poles.poles().iter().enumerate() {
            sum += &self.phi_x[l];
            let r = (CMat::identity(n, n) * *p - &ac) * &self.phi_x[l] - &bc * &self.phi_u[l];
            dyn_res = dyn_res.max(r.norm());
        }
        ((sum - CMat::identity(n, n)).norm(), dyn_res)
    }

    /// Largest magnitude among entries outside the mask, over all poles.
    pub fn mask_violation(&self, mask: &SparsityMask) -> f64 {
        let mut v: f64 = 0.0;
        for l in 0..self.poles.len() {
            for (z, &keep) in self.phi_x[l].iter().zip(mask.sx.iter()) {
                if !keep {
                    v = v.max(z.norm());
                }
            }
            for (z, &keep) in self.phi_u[l].iter().zip(mask.su.iter()) {
                if !keep {
                    v = v.max(z.norm());
                }
            }
        }
        v
    }

    /// Impulse response `sum_l Phi(l) e^{p_l t} x0`, returned as real (x, u) with the largest imaginary part.
    pub fn impulse_response(&self, x0: &RVec, t: f64) -> (RVec, RVec, f64) {
        let x0c = x0.map(|v| Complex64::new(v, 0.0));
        let mut x = nalgebra::DVector::<Complex64>::zeros(self.n());
        let mut u = nalgebra::DVector::<Complex64>::zeros(self.m());
        for (l, p) in self.poles.poles().iter().enumerate() {
            let e = (p * t).exp();
            x += &self.phi_x[l] * &x0c * e;
            u += &self.phi_u[l] * &x0c * e;
        }
        let imag = x.iter().chain(u.iter()).fold(0.0f64, |m, z| m.max(z.im.abs()));
        (x.map(|z| z.re), u.map(|z| z.re), imag)
    }
}

/// Max over samples of `||(sI - A)Phi_x(s) - B Phi_u(s) - I||_F`.
pub fn residual(ens: &ResponseEnsemble, plant: &Plant, samples: &[Complex64]) -> Result<f64> {
    let n = plant.n();
    if ens.n() != n || ens.m() != plant.m() {
        return Err(Error::InvalidDimension(format!(
            "ensemble is {}x{} but plant has n={} m={}",
            ens.n(),
            ens.m(),
            n,
            plant.m()
        )));
    }
    let ac = to_complex(&plant.a);
    let bc = to_complex(&plant.b);
    let mut worst: f64 = 0.0;
    for &s in samples {
        let (x, u) = ens.evaluate(s)?;
        let r = (CMat::identity(n, n) * s - &ac) * x - &bc * u - CMat::identity(n, n);
        worst = worst.max(r.norm());
    }
    Ok(worst)
}

/// Deterministic pseudo-random samples in the disk `|s| <= radius` avoiding the poles.
pub fn random_samples(count: usize, radius: f64, seed: u64, avoid: &PoleSet) -> Vec<Complex64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let r = radius * rng.gen::<f64>().sqrt();
        let a = rng.gen::<f64>() * std::f64::consts::TAU;
        let s = Complex64::from_polar(r, a);
        if avoid.poles().iter().all(|p| (s - p).norm() > 1e-3) {
            out.push(s);
        }
    }
    out
}

/// Ensemble with repeated poles: `Phi(s) = sum_l sum_j Phi(l, j) / (s - p_l)^j`.
#[derive(Clone, Debug)]
pub struct MultiEnsemble {
    pub poles: Vec<Complex64>,
    pub phi_x: Vec<Vec<CMat>>,
    pub phi_u: Vec<Vec<CMat>>,
}

impl MultiEnsemble {
    pub fn evaluate(&self, s: Complex64) -> Result<(CMat, CMat)> {
        let n = self.phi_x[0][0].nrows();
        let m = self.phi_u[0][0].nrows();
        let mut x = CMat::zeros(n, n);
        let mut u = CMat::zeros(m, n);
        for (l, p) in self.poles.iter().enumerate() {
            let d = s - p;
            if d.norm() <= 1e-14 * (1.0 + p.norm()) {
                return Err(Error::Domain(format!("sample {s} coincides with pole {p}")));
            }
            let mut g = Complex64::new(1.0, 0.0);
            for j in 0..self.phi_x[l].len() {
                g /= d;
                x += &self.phi_x[l][j] * g;
                u += &self.phi_u[l][j] * g;
            }
        }
        Ok((x, u))
    }

    /// Largest residual of the coefficient chain
    /// `sum_l Phi_x(l,1) = I`, `Phi_x(l,j+1) + (p_l I - A)Phi_x(l,j) - B Phi_u(l,j) = 0`,
    /// `(p_l I - A)Phi_x(l,m_l) - B Phi_u(l,m_l) = 0`.
    pub fn chain_residual(&self, plant: &Plant) -> f64 {
        let n = plant.n();
        let ac = to_complex(&plant.a);
        let bc = to_complex(&plant.b);
        let mut sum = CMat::zeros(n, n);
        let mut worst: f64 = 0.0;
        for (l, p) in self.poles.iter().enumerate() {
            let ml = self.phi_x[l].len();
            sum += &self.phi_x[l][0];
            for j in 0..ml {
                let mut r = (CMat::identity(n, n) * *p - &ac) * &self.phi_x[l][j] - &bc * &self.phi_u[l][j];
                if j + 1 < ml {
                    r += &self.phi_x[l][j + 1];
                }
                worst = worst.max(r.norm());
            }
        }
        worst.max((sum - CMat::identity(n, n)).norm())
    }
}

pub fn residual_multi(ens: &MultiEnsemble, plant: &Plant, samples: &[Complex64]) -> Result<(f64, f64)> {
    let n = plant.n();
    let ac = to_complex(&plant.a);
    let bc = to_complex(&plant.b);
    let mut worst: f64 = 0.0;
    for &s in samples {
        let (x, u) = ens.evaluate(s)?;
        let r = (CMat::identity(n, n) * s - &ac) * x - &bc * u - CMat::identity(n, n);
        worst = worst.max(r.norm());
    }
    Ok((worst, ens.chain_residual(plant)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub sx: DMatrix<bool>,
    pub su: DMatrix<bool>,
    pub d: usize,
}

impl SparsityMask {
    pub fn full(n: usize, m: usize) -> Self {
        SparsityMask { sx: DMatrix::from_element(n, n, true), su: DMatrix::from_element(m, n, true), d: usize::MAX }
    }

    pub fn is_full(&self) -> bool {
        self.sx.iter().chain(self.su.iter()).all(|&b| b)
    }
}

fn bool_product(a: &DMatrix<bool>, b: &DMatrix<bool>) -> DMatrix<bool> {
    DMatrix::from_fn(a.nrows(), b.ncols(), |i, j| (0..a.ncols()).any(|k| a[(i, k)] && b[(k, j)]))
}

/// `Sx = supp((supp(A) + I)^d)`, `Su = supp(supp(B)' Sx)`.
pub fn build_supports(plant: &Plant, d: usize) -> Result<SparsityMask> {
    if d == 0 {
        return Err(Error::InvalidArgument("hop distance must be >= 1".into()));
    }
    let n = plant.n();
    let base = DMatrix::from_fn(n, n, |i, j| i == j || plant.a[(i, j)] != 0.0);
    let mut sx = base.clone();
    for _ in 1..d.min(n) {
        let next = bool_product(&sx, &base);
        if next == sx {
            break;
        }
        sx = next;
    }
    let bt = DMatrix::from_fn(plant.m(), n, |i, j| plant.b[(j, i)] != 0.0);
    let su = bool_product(&bt, &sx);
    Ok(SparsityMask { sx, su, d })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    X,
    U,
}

/// One real decision variable: real or imaginary part of `Phi_block(pole)[row, col]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarRef {
    pub pole: usize,
    pub block: Block,
    pub row: usize,
    pub imag: bool,
}

/// Equality system for one column of `[Phi_x; Phi_u]`.
#[derive(Clone, Debug)]
pub struct ColumnSystem {
    pub col: usize,
    pub a_eq: RMat,
    pub b_eq: RVec,
    pub vars: Vec<VarRef>,
}

/// Affine solution set of one column: `z = z0 + N y`.
#[derive(Clone, Debug)]
pub struct ReducedColumn {
    pub z0: RVec,
    pub basis: RMat,
}

#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    pub poles: PoleSet,
    pub n: usize,
    pub m: usize,
    pub columns: Vec<ColumnSystem>,
}

pub fn assemble(plant: &Plant, poles: &PoleSet, mask: Option<&SparsityMask>) -> Result<ConstraintSystem> {
    let (n, m) = (plant.n(), plant.m());
    let full = SparsityMask::full(n, m);
    let mask = mask.unwrap_or(&full);
    if mask.sx.shape() != (n, n) || mask.su.shape() != (m, n) {
        return Err(Error::InvalidDimension("mask does not match plant".into()));
    }
    let reps = poles.representatives();
    let columns = (0..n)
        .map(|j| {
            let mut vars = Vec::new();
            for &l in &reps {
                let parts: &[bool] = if poles.is_real(l) { &[false] } else { &[false, true] };
                for &imag in parts {
                    for i in (0..n).filter(|&i| mask.sx[(i, j)]) {
                        vars.push(VarRef { pole: l, block: Block::X, row: i, imag });
                    }
                    for i in (0..m).filter(|&i| mask.su[(i, j)]) {
                        vars.push(VarRef { pole: l, block: Block::U, row: i, imag });
                    }
                }
            }
            let eq_rows = n + reps.iter().map(|&l| if poles.is_real(l) { n } else { 2 * n }).sum::<usize>();
            let mut a_eq = RMat::zeros(eq_rows, vars.len());
            let mut b_eq = RVec::zeros(eq_rows);
            b_eq[j] = 1.0;
            // row offset of each representative's dynamics block
            let mut offsets = Vec::with_capacity(reps.len());
            let mut off = n;
            for &l in &reps {
                offsets.push(off);
                off += if poles.is_real(l) { n } else { 2 * n };
            }
            for (v, var) in vars.iter().enumerate() {
                let ri = reps.iter().position(|&l| l == var.pole).expect("representative");
                let real = poles.is_real(var.pole);
                let p = poles.poles()[var.pole];
                // sum constraint: a pair contributes 2 Re, a real pole its value
                if var.block == Block::X && !var.imag {
                    a_eq[(var.row, v)] = if real { 1.0 } else { 2.0 };
                }
                // dynamics: (p I - A) x - B u = 0, split into real and imaginary rows
                let o = offsets[ri];
                // coefficient of the complex unknown (1 for real part, j for imaginary part)
                let unit = if var.imag { Complex64::new(0.0, 1.0) } else { Complex64::new(1.0, 0.0) };
                for r in 0..n {
                    let coef = match var.block {
                        Block::X => {
                            let diag = if r == var.row { p } else { Complex64::new(0.0, 0.0) };
                            (diag - plant.a[(r, var.row)]) * unit
                        }
                        Block::U => -plant.b[(r, var.row)] * unit,
                    };
                    a_eq[(o + r, v)] = coef.re;
                    if !real {
                        a_eq[(o + n + r, v)] = coef.im;
                    }
                }
            }
            ColumnSystem { col: j, a_eq, b_eq, vars }
        })
        .collect();
    Ok(ConstraintSystem { poles: poles.clone(), n, m, columns })
}

impl ConstraintSystem {
    pub fn num_vars(&self) -> usize {
        self.columns.iter().map(|c| c.vars.len()).sum()
    }

    /// Block-diagonal equality system over all columns.
    pub fn full_system(&self) -> (RMat, RVec) {
        let rows: usize = self.columns.iter().map(|c| c.a_eq.nrows()).sum();
        let cols = self.num_vars();
        let mut a = RMat::zeros(rows, cols);
        let mut b = RVec::zeros(rows);
        let (mut r0, mut c0) = (0, 0);
        for c in &self.columns {
            a.view_mut((r0, c0), c.a_eq.shape()).copy_from(&c.a_eq);
            b.rows_mut(r0, c.b_eq.len()).copy_from(&c.b_eq);
            r0 += c.a_eq.nrows();
            c0 += c.vars.len();
        }
        (a, b)
    }

    /// Particular solution and null-space basis per column; errors when any column is inconsistent.
    pub fn reduce(&self) -> Result<Vec<ReducedColumn>> {
        self.columns
            .iter()
            .map(|c| {
                let sol = solve_affine(&c.a_eq, &c.b_eq, RANK_RTOL)?;
                let scale = 1.0 + c.a_eq.amax();
                if !(sol.residual <= 1e-9 * scale) {
                    return Err(Error::Infeasible(format!(
                        "column {} constraints are inconsistent (residual {:.3e}); (A, B) may not be stabilizable or the mask is too tight",
                        c.col, sol.residual
                    )));
                }
                Ok(ReducedColumn { z0: sol.x0, basis: sol.basis })
            })
            .collect()
    }

    /// Complex map of one column: stacked `[Phi_x(l)[:, j]; Phi_u(l)[:, j]]` over all poles = `(Pr + j Pi) z`.
    pub fn column_complex_map(&self, j: usize) -> (RMat, RMat) {
        let c = &self.columns[j];
        let h = self.n + self.m;
        let k = self.poles.len();
        let mut pr = RMat::zeros(k * h, c.vars.len());
        let mut pi = RMat::zeros(k * h, c.vars.len());
        for (v, var) in c.vars.iter().enumerate() {
            let row = match var.block {
                Block::X => var.row,
                Block::U => self.n + var.row,
            };
            let l = var.pole;
            let lp = self.poles.partner(l);
            if var.imag {
                pi[(l * h + row, v)] = 1.0;
                pi[(lp * h + row, v)] = -1.0;
            } else {
                pr[(l * h + row, v)] = 1.0;
                if lp != l {
                    pr[(lp * h + row, v)] = 1.0;
                }
            }
        }
        (pr, pi)
    }

    pub fn reconstruct(&self, z: &[RVec]) -> Result<ResponseEnsemble> {
        if z.len() != self.columns.len() {
            return Err(Error::InvalidDimension("one vector per column required".into()));
        }
        let k = self.poles.len();
        let mut phi_x = vec![CMat::zeros(self.n, self.n); k];
        let mut phi_u = vec![CMat::zeros(self.m, self.n); k];
        for (c, zc) in self.columns.iter().zip(z) {
            if zc.len() != c.vars.len() {
                return Err(Error::InvalidDimension(format!("column {} expects {} variables", c.col, c.vars.len())));
            }
            for (var, &val) in c.vars.iter().zip(zc.iter()) {
                let target = match var.block {
                    Block::X => &mut phi_x[var.pole][(var.row, c.col)],
                    Block::U => &mut phi_u[var.pole][(var.row, c.col)],
                };
                if var.imag {
                    target.im = val;
                } else {
                    target.re = val;
                }
            }
        }
        for l in 0..k {
            let lp = self.poles.partner(l);
            if lp < l {
                phi_x[l] = phi_x[lp].conjugate();
                phi_u[l] = phi_u[lp].conjugate();
            }
        }
        Ok(ResponseEnsemble { poles: self.poles.clone(), phi_x, phi_u })
    }
}

#[derive(Serialize, Deserialize)]
struct EnsembleDoc {
    poles: Vec<[f64; 2]>,
    #[serde(rename = "PhiX")]
    phi_x: Vec<Vec<Vec<[f64; 2]>>>,
    #[serde(rename = "PhiU")]
    phi_u: Vec<Vec<Vec<[f64; 2]>>>,
}

pub(crate) fn cmat_rows(m: &CMat) -> Vec<Vec<[f64; 2]>> {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|z| [z.re, z.im]).collect()).collect()
}

pub(crate) fn cmat_from_rows(rows: &[Vec<[f64; 2]>]) -> Result<CMat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(Error::InvalidDimension("ragged matrix rows".into()));
    }
    Ok(CMat::from_fn(r, c, |i, j| Complex64::new(rows[i][j][0], rows[i][j][1])))
}

impl ResponseEnsemble {
    pub fn to_json_value(&self) -> serde_json::Value {
        let doc = EnsembleDoc {
            poles: self.poles.to_pairs(),
            phi_x: self.phi_x.iter().map(cmat_rows).collect(),
            phi_u: self.phi_u.iter().map(cmat_rows).collect(),
        };
        serde_json::to_value(doc).expect("ensemble serializes")
    }

    pub fn from_json_value(v: &serde_json::Value) -> Result<Self> {
        let doc: EnsembleDoc = serde_json::from_value(v.clone())?;
        let input: Vec<Complex64> = doc.poles.iter().map(|p| Complex64::new(p[0], p[1])).collect();
        let (poles, perm) = PoleSet::with_permutation(&input)?;
        if doc.phi_x.len() != input.len() || doc.phi_u.len() != input.len() {
            return Err(Error::InvalidDimension("one coefficient per pole required".into()));
        }
        let phi_x = perm.iter().map(|&i| cmat_from_rows(&doc.phi_x[i])).collect::<Result<Vec<_>>>()?;
        let phi_u = perm.iter().map(|&i| cmat_from_rows(&doc.phi_u[i])).collect::<Result<Vec<_>>>()?;
        let n = phi_x[0].nrows();
        if phi_x.iter().any(|x| x.shape() != (n, n)) || phi_u.iter().any(|u| u.ncols() != n || u.nrows() != phi_u[0].nrows()) {
            return Err(Error::InvalidDimension("inconsistent coefficient shapes".into()));
        }
        Ok(ResponseEnsemble { poles, phi_x, phi_u })
    }
}
