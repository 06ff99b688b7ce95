//! H-infinity synthesis over the bounded-real (KYP) inequality.
//!
//! The weighted response `Psi(s) = sum_l Psi(l) / (s - p_l)` has the stacked modal
//! realization `(diag(p_l) (x) I, 1 (x) I, [Psi(0) ... Psi(K-1)])`. A unitary change of
//! coordinates makes it real, after which the KYP lemma gives an LMI in `(X, gamma)` that
//! is affine in the ensemble once `X` is fixed. Small problems solve the joint LMI directly;
//! larger ones use an exchange method on frequency-sampled norm constraints and certify the
//! final level with the Hamiltonian test and a Riccati-based KYP certificate.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::analysis::{golden_max, hamiltonian_crossings, hinf_norm_ss, lyapunov, sweep_grid, StateSpace};
use crate::constraints::{assemble, ConstraintSystem, ReducedColumn, ResponseEnsemble, SparsityMask};
use crate::error::{Error, Result};
use crate::h2::{check_inputs, psi_coefficients, verification_residual, Objective, SynthesisResult};
use crate::linalg::{
    care_sign, cmax_abs, eigenvalues, gemm_tn_cols, max_abs_im, max_sym_eig, min_sym_eig, sigma_max, singular_values,
    spectral_abscissa, CMat, CVec, RMat, RVec,
};
use crate::plant::{CostWeights, Plant};
use crate::poles::{log_grid, spiral_poles, PoleSet};
use crate::sdp::{self, LmiProblem, SdpProblem, SdpSettings, SymEntry};

const REALNESS_TOL: f64 = 1e-12;

/// Complex modal realization of the weighted closed-loop response.
#[derive(Clone, Debug)]
pub struct StackedRealization {
    pub a: CMat,
    pub b: CMat,
    pub c: CMat,
}

impl StackedRealization {
    pub fn new(ens: &ResponseEnsemble, w: &RMat) -> Self {
        let psi = psi_coefficients(ens, w);
        let n = ens.n();
        let h = w.nrows();
        let k = psi.len();
        let mut a = CMat::zeros(n * k, n * k);
        let mut b = CMat::zeros(n * k, n);
        let mut c = CMat::zeros(h, n * k);
        for (l, (p, ps)) in ens.poles.poles().iter().zip(&psi).enumerate() {
            for i in 0..n {
                a[(l * n + i, l * n + i)] = *p;
                b[(l * n + i, i)] = Complex64::new(1.0, 0.0);
            }
            c.view_mut((0, l * n), (h, n)).copy_from(ps);
        }
        StackedRealization { a, b, c }
    }

    /// `C (sI - A)^-1 B`, using the diagonal state matrix.
    pub fn eval(&self, s: Complex64) -> CMat {
        let mut cs = self.c.clone();
        for (j, mut col) in cs.column_iter_mut().enumerate() {
            col /= s - self.a[(j, j)];
        }
        cs * &self.b
    }
}

/// Unitary `T` making the stacked realization real, with the resulting `A~` and `B~`.
#[derive(Clone, Debug)]
pub struct RealTransform {
    pub t: CMat,
    pub a: RMat,
    pub b: RMat,
    /// largest imaginary part discarded from `T* A T` and `T* B`
    pub imag_residual: f64,
}

/// `T` is block diagonal: `U (x) I_n` on each conjugate pair, `I_n` on each real pole.
pub fn transform_matrix(poles: &PoleSet, n: usize) -> CMat {
    let k = poles.len();
    let mut t = CMat::zeros(n * k, n * k);
    let u_same = Complex64::new(0.5, 0.5);
    let u_cross = Complex64::new(0.5, -0.5);
    for l in 0..k {
        let lp = poles.partner(l);
        if lp == l {
            for i in 0..n {
                t[(l * n + i, l * n + i)] = Complex64::new(1.0, 0.0);
            }
        } else if lp > l {
            for i in 0..n {
                let (r0, r1) = (l * n + i, lp * n + i);
                t[(r0, r0)] = u_same;
                t[(r0, r1)] = u_cross;
                t[(r1, r0)] = u_cross;
                t[(r1, r1)] = u_same;
            }
        }
    }
    t
}

/// Real state matrix in closed form: `[[a, b], [-b, a]] (x) I` per pair, `p I` per real pole.
pub fn real_state_matrix(poles: &PoleSet, n: usize) -> RMat {
    let k = poles.len();
    let mut a = RMat::zeros(n * k, n * k);
    for l in 0..k {
        let p = poles.poles()[l];
        let lp = poles.partner(l);
        if lp == l {
            for i in 0..n {
                a[(l * n + i, l * n + i)] = p.re;
            }
        } else if lp > l {
            for i in 0..n {
                let (r0, r1) = (l * n + i, lp * n + i);
                a[(r0, r0)] = p.re;
                a[(r1, r1)] = p.re;
                a[(r0, r1)] = p.im;
                a[(r1, r0)] = -p.im;
            }
        }
    }
    a
}

pub fn real_input_matrix(k: usize, n: usize) -> RMat {
    let mut b = RMat::zeros(n * k, n);
    for l in 0..k {
        for i in 0..n {
            b[(l * n + i, i)] = 1.0;
        }
    }
    b
}

fn check_pair_layout(poles: &PoleSet) -> Result<()> {
    for l in 0..poles.len() {
        let lp = poles.partner(l);
        if lp != l && lp.abs_diff(l) != 1 {
            return Err(Error::InvalidArgument(format!("pole {l} is not adjacent to its conjugate")));
        }
    }
    Ok(())
}

pub fn real_transform(poles: &PoleSet, n: usize) -> Result<RealTransform> {
    check_pair_layout(poles)?;
    let k = poles.len();
    let t = transform_matrix(poles, n);
    let mut acal = CMat::zeros(n * k, n * k);
    for (l, p) in poles.poles().iter().enumerate() {
        for i in 0..n {
            acal[(l * n + i, l * n + i)] = *p;
        }
    }
    let bcal = real_input_matrix(k, n).map(|v| Complex64::new(v, 0.0));
    let ta = t.adjoint() * acal * &t;
    let tb = t.adjoint() * bcal;
    let imag_residual = max_abs_im(&ta).max(max_abs_im(&tb));
    let scale = 1.0 + cmax_abs(&ta);
    if imag_residual > REALNESS_TOL * scale {
        return Err(Error::Domain(format!("transformed realization is not real (imaginary part {imag_residual:.3e})")));
    }
    let a = ta.map(|z| z.re);
    let b = tb.map(|z| z.re);
    Ok(RealTransform { t, a, b, imag_residual })
}

impl RealTransform {
    /// `C T` for a stacked output matrix, checked for realness.
    pub fn output(&self, c: &CMat) -> Result<RMat> {
        let ct = c * &self.t;
        let im = max_abs_im(&ct);
        if im > REALNESS_TOL * (1.0 + cmax_abs(&ct)) {
            return Err(Error::Domain(format!("transformed output map is not real (imaginary part {im:.3e})")));
        }
        Ok(ct.map(|z| z.re))
    }
}

/// Adds the real output columns of one state column `j`, given its stacked
/// per-pole coefficients `v` (length `K h`).
fn add_real_output(poles: &PoleSet, n: usize, h: usize, j: usize, v: &[Complex64], out: &mut RMat) {
    for l in 0..poles.len() {
        let lp = poles.partner(l);
        if lp < l {
            continue;
        }
        for r in 0..h {
            let z = v[l * h + r];
            if lp == l {
                out[(r, l * n + j)] += z.re;
            } else {
                out[(r, l * n + j)] += z.re - z.im;
                out[(r, lp * n + j)] += z.re + z.im;
            }
        }
    }
}

/// Real output matrix `C~` from the per-pole coefficients in closed form.
pub fn real_output_map(poles: &PoleSet, psi: &[CMat]) -> RMat {
    let n = psi[0].ncols();
    let h = psi[0].nrows();
    let mut out = RMat::zeros(h, n * poles.len());
    for j in 0..n {
        let v: Vec<Complex64> = psi.iter().flat_map(|p| p.column(j).iter().copied().collect::<Vec<_>>()).collect();
        add_real_output(poles, n, h, j, &v, &mut out);
    }
    out
}

/// Real stacked realization of the weighted response of an ensemble.
pub fn real_realization(ens: &ResponseEnsemble, w: &RMat) -> Result<StateSpace> {
    check_pair_layout(&ens.poles)?;
    let n = ens.n();
    let psi = psi_coefficients(ens, w);
    StateSpace::new(
        real_state_matrix(&ens.poles, n),
        real_input_matrix(ens.poles.len(), n),
        real_output_map(&ens.poles, &psi),
    )
}

/// The bounded-real matrix `[[A'X + XA, XB, C'], [B'X, -g I, 0], [C, 0, -g I]]`.
pub fn kyp_lmi(a: &RMat, b: &RMat, c: &RMat, x: &RMat, gamma: f64) -> RMat {
    let ns = a.nrows();
    let nb = b.ncols();
    let nc = c.nrows();
    let dim = ns + nb + nc;
    let mut l = RMat::zeros(dim, dim);
    l.view_mut((0, 0), (ns, ns)).copy_from(&(a.transpose() * x + x * a));
    let xb = x * b;
    l.view_mut((0, ns), (ns, nb)).copy_from(&xb);
    l.view_mut((ns, 0), (nb, ns)).copy_from(&xb.transpose());
    l.view_mut((0, ns + nb), (ns, nc)).copy_from(&c.transpose());
    l.view_mut((ns + nb, 0), (nc, ns)).copy_from(c);
    for i in ns..dim {
        l[(i, i)] = -gamma;
    }
    l
}

/// Strictness margin `1e-7 (1 + ||A||)`.
pub fn kyp_epsilon(a: &RMat) -> f64 {
    let norm = if a.is_empty() { 0.0 } else { singular_values(a).max() };
    1e-7 * (1.0 + norm)
}

#[derive(Clone, Debug)]
pub struct KypCertificate {
    pub gamma: f64,
    pub x: RMat,
    /// `-lambda_max` of the bounded-real matrix
    pub lmi_margin: f64,
    pub x_min_eig: f64,
}

#[derive(Clone, Debug)]
pub struct KypCheck {
    pub feasible: bool,
    pub certificate: Option<KypCertificate>,
    pub diagnostic: String,
}

fn check_kyp_dims(a: &RMat, b: &RMat, c: &RMat) -> Result<()> {
    let ns = a.nrows();
    if a.ncols() != ns || b.nrows() != ns || c.ncols() != ns {
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
    Ok(())
}

fn certificate_from(a: &RMat, b: &RMat, c: &RMat, x: RMat, gamma: f64) -> KypCertificate {
    let lmi_margin = -max_sym_eig(&kyp_lmi(a, b, c, &x, gamma));
    let x_min_eig = min_sym_eig(&x);
    KypCertificate { gamma, x, lmi_margin, x_min_eig }
}

/// Certificate with margin `mu = 2 eps` from one Riccati equation.
///
/// With `g' = gamma - mu`, the stabilizing solution of
/// `A'X + XA + XBB'X/g' + C'C/g' + k I = 0` (`k >= mu`) makes the Schur complement of
/// `L(X, gamma) + mu I` equal to `(mu - k) I`, so the margin is at least `mu`. For the
/// normal `A~`, `k = 4 mu max|Re lambda|` keeps `X >= 2 mu I` as well.
fn riccati_certificate(a: &RMat, b: &RMat, c: &RMat, gamma: f64) -> Option<KypCertificate> {
    let ns = a.nrows();
    let eps = kyp_epsilon(a);
    let mu = 2.0 * eps;
    if gamma <= mu {
        return None;
    }
    let rate = eigenvalues(a).iter().fold(0.0f64, |acc, z| acc.max(z.re.abs()));
    let kappa = mu * (4.0 * rate).max(1.0);
    let gp = gamma - mu;
    let g = -(b * b.transpose()) / gp;
    let q = c.transpose() * c / gp + RMat::identity(ns, ns) * kappa;
    let x = care_sign(a, &g, &q)?;
    let cert = certificate_from(a, b, c, x, gamma);
    (cert.lmi_margin >= eps && cert.x_min_eig >= eps).then_some(cert)
}

/// Largest `n K` for which certificates come from the margin-maximizing SDP.
pub const KYP_SDP_MAX_STATES: usize = 40;

/// Block-0 and block-1 coefficients of the upper-triangular entries of `X`.
fn x_variable_entries(a: &RMat, b: &RMat) -> (Vec<(usize, usize)>, Vec<Vec<SymEntry>>) {
    let nk = a.nrows();
    let nb = b.ncols();
    let at = a.transpose();
    let mut pairs = Vec::with_capacity(nk * (nk + 1) / 2);
    let mut entries = Vec::with_capacity(nk * (nk + 1) / 2);
    for q in 0..nk {
        for p in 0..=q {
            pairs.push((p, q));
            let mut e = RMat::zeros(nk, nk);
            e[(p, q)] = 1.0;
            e[(q, p)] = 1.0;
            let mut m = RMat::zeros(nk + nb, nk + nb);
            m.view_mut((0, 0), (nk, nk)).copy_from(&(&at * &e + &e * a));
            let eb = &e * b;
            m.view_mut((0, nk), (nk, nb)).copy_from(&eb);
            m.view_mut((nk, 0), (nb, nk)).copy_from(&eb.transpose());
            let mut ent = LmiProblem::entries_of(0, &m, (0, 0));
            ent.push(SymEntry { block: 1, row: p, col: q, value: -1.0 });
            entries.push(ent);
        }
    }
    (pairs, entries)
}

fn x_from_entries(nk: usize, pairs: &[(usize, usize)], values: &[f64]) -> RMat {
    let mut x = RMat::zeros(nk, nk);
    for (&(p, q), &v) in pairs.iter().zip(values) {
        x[(p, q)] = v;
        x[(q, p)] = v;
    }
    x
}

/// Positive definite `X` with `A'X + XA = -c I`, `c` large enough for `X >= 2 eps I`.
fn lyapunov_start(a: &RMat, eps: f64) -> Result<RMat> {
    let nk = a.nrows();
    let x1 = lyapunov(&a.transpose(), &RMat::identity(nk, nk))?;
    let x1 = (&x1 + x1.transpose()) * 0.5;
    let lmin = min_sym_eig(&x1);
    if !(lmin > 0.0) {
        return Err(Error::Solver("Lyapunov start is not positive definite".into()));
    }
    Ok(x1 * (2.0 * eps / lmin).max(1.0))
}

/// `X` maximizing the margin `mu` in `L(X, gamma) <= -mu I`, `X >= mu I`.
fn margin_certificate(a: &RMat, b: &RMat, c: &RMat, gamma: f64) -> Result<KypCertificate> {
    let nk = a.nrows();
    let nb = b.ncols();
    let nc = c.nrows();
    let n1 = nk + nb + nc;
    let (pairs, mut entries) = x_variable_entries(a, b);
    let nx = pairs.len();
    let mut mu_entries: Vec<SymEntry> = (0..n1).map(|i| SymEntry { block: 0, row: i, col: i, value: 1.0 }).collect();
    mu_entries.extend((0..nk).map(|i| SymEntry { block: 1, row: i, col: i, value: 1.0 }));
    entries.push(mu_entries);
    let l0 = kyp_lmi(a, b, c, &RMat::zeros(nk, nk), gamma);
    let mut bvec = RVec::zeros(nx + 1);
    bvec[nx] = 1.0;
    let x0 = lyapunov_start(a, kyp_epsilon(a))?;
    let mu0 = (-max_sym_eig(&kyp_lmi(a, b, c, &x0, gamma))).min(min_sym_eig(&x0)) - 1.0;
    let mut start = RVec::zeros(nx + 1);
    for (i, &(p, q)) in pairs.iter().enumerate() {
        start[i] = x0[(p, q)];
    }
    start[nx] = mu0;
    let problem = LmiProblem { sizes: vec![n1, nk], c: vec![-l0, RMat::zeros(nk, nk)], a: entries, b: bvec, start };
    let settings = SdpSettings { gap_tol: 1e-11, feas_tol: 1e-9, max_iter: 150, ..SdpSettings::default() };
    let sol = sdp::solve(&problem, &settings)?;
    let x = x_from_entries(nk, &pairs, &sol.y.as_slice()[..nx]);
    Ok(certificate_from(a, b, c, x, gamma))
}

/// Best available certificate at `gamma`: the margin SDP for small states, Riccati otherwise.
fn find_certificate(a: &RMat, b: &RMat, c: &RMat, gamma: f64) -> Result<Option<KypCertificate>> {
    let eps = kyp_epsilon(a);
    if a.nrows() <= KYP_SDP_MAX_STATES {
        let cert = margin_certificate(a, b, c, gamma)?;
        Ok((cert.lmi_margin >= eps && cert.x_min_eig >= eps).then_some(cert))
    } else {
        Ok(riccati_certificate(a, b, c, gamma))
    }
}

/// Strict feasibility of the bounded-real LMI at level `gamma`.
///
/// Rejects non-Hurwitz `A` and levels crossed by the Hamiltonian spectrum, then
/// constructs an explicit `X` and checks the LMI eigenvalues.
pub fn kyp_check(a: &RMat, b: &RMat, c: &RMat, gamma: f64) -> Result<KypCheck> {
    check_kyp_dims(a, b, c)?;
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let alpha = spectral_abscissa(a);
    if !(alpha < 0.0) {
        return Ok(KypCheck {
            feasible: false,
            certificate: None,
            diagnostic: format!("A is not Hurwitz (spectral abscissa {alpha:.3e}); no positive definite X exists"),
        });
    }
    let sys = StateSpace::new(a.clone(), b.clone(), c.clone())?;
    let crossings = hamiltonian_crossings(&sys, gamma);
    if !crossings.is_empty() {
        return Ok(KypCheck {
            feasible: false,
            certificate: None,
            diagnostic: format!("norm reaches gamma = {gamma:.6e} near omega = {:.4e}", crossings[0]),
        });
    }
    match find_certificate(a, b, c, gamma)? {
        Some(cert) => Ok(KypCheck { feasible: true, certificate: Some(cert), diagnostic: "certified".into() }),
        None => Ok(KypCheck {
            feasible: false,
            certificate: None,
            diagnostic: format!("no certificate with margin {:.1e} at gamma = {gamma:.6e}", kyp_epsilon(a)),
        }),
    }
}

/// Smallest certified level by bisection on [`kyp_check`].
pub fn kyp_bisection(a: &RMat, b: &RMat, c: &RMat, rtol: f64) -> Result<f64> {
    let mut hi = 1.0;
    let mut tries = 0;
    while !kyp_check(a, b, c, hi)?.feasible {
        hi *= 2.0;
        tries += 1;
        if tries > 60 {
            return Err(Error::Infeasible("no feasible KYP level found".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > rtol * hi {
        let mid = 0.5 * (lo + hi);
        if kyp_check(a, b, c, mid)?.feasible {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HinfMethod {
    /// joint KYP LMI when the stacked state is small, frequency cuts otherwise
    Auto,
    JointKyp,
    FrequencyCut,
}

#[derive(Clone, Debug)]
pub struct HinfOptions {
    pub method: HinfMethod,
    /// largest `n K` handled by the joint LMI under `Auto`
    pub joint_max_states: usize,
    /// relative tolerance between the sampled level and the swept peak
    pub exchange_tol: f64,
    pub max_rounds: usize,
    pub cuts_per_round: usize,
    pub sdp: SdpSettings,
}

impl Default for HinfOptions {
    fn default() -> Self {
        HinfOptions {
            method: HinfMethod::Auto,
            joint_max_states: 24,
            exchange_tol: 1e-5,
            max_rounds: 40,
            cuts_per_round: 4,
            sdp: SdpSettings { gap_tol: 1e-8, ..SdpSettings::default() },
        }
    }
}

/// Affine map from the reduced variables to the weighted per-pole coefficients.
struct Parametrization {
    sys: ConstraintSystem,
    reduced: Vec<ReducedColumn>,
    /// per column: `W (Pr + j Pi) z0` stacked over poles
    v0: Vec<CVec>,
    /// per column: `W (Pr + j Pi) N`
    vb: Vec<CMat>,
    offsets: Vec<usize>,
    col_of: Vec<usize>,
    nv: usize,
    h: usize,
}

impl Parametrization {
    fn new(plant: &Plant, weights: &CostWeights, poles: &PoleSet, mask: Option<&SparsityMask>) -> Result<Self> {
        let sys = assemble(plant, poles, mask)?;
        let reduced = sys.reduce()?;
        let w = weights.sqrt_block()?;
        let h = w.nrows();
        let k = poles.len();
        let wc = w.map(|v| Complex64::new(v, 0.0));
        let mut v0 = Vec::new();
        let mut vb = Vec::new();
        let mut offsets = Vec::new();
        let mut col_of = Vec::new();
        let mut nv = 0;
        for (j, red) in reduced.iter().enumerate() {
            let (pr, pi) = sys.column_complex_map(j);
            let mut wp = CMat::zeros(k * h, pr.ncols());
            let pc = CMat::from_fn(pr.nrows(), pr.ncols(), |r, c| Complex64::new(pr[(r, c)], pi[(r, c)]));
            for l in 0..k {
                wp.view_mut((l * h, 0), (h, pr.ncols())).copy_from(&(&wc * pc.rows(l * h, h)));
            }
            let z0 = red.z0.map(|v| Complex64::new(v, 0.0));
            let basis = red.basis.map(|v| Complex64::new(v, 0.0));
            v0.push(&wp * z0);
            vb.push(&wp * basis);
            offsets.push(nv);
            col_of.extend(std::iter::repeat(j).take(red.basis.ncols()));
            nv += red.basis.ncols();
        }
        Ok(Parametrization { sys, reduced, v0, vb, offsets, col_of, nv, h })
    }

    fn n(&self) -> usize {
        self.sys.n
    }

    fn poles(&self) -> &PoleSet {
        &self.sys.poles
    }

    fn column_vars<'a>(&self, y: &'a RVec, j: usize) -> nalgebra::DVectorView<'a, f64> {
        y.rows(self.offsets[j], self.vb[j].ncols())
    }

    fn coefficients(&self, y: &RVec) -> Vec<CMat> {
        let (n, h, k) = (self.n(), self.h, self.poles().len());
        let mut psi = vec![CMat::zeros(h, n); k];
        for j in 0..n {
            let yc = self.column_vars(y, j).map(|v| Complex64::new(v, 0.0));
            let col = &self.v0[j] + &self.vb[j] * yc;
            for l in 0..k {
                psi[l].column_mut(j).copy_from(&col.rows(l * h, h));
            }
        }
        psi
    }

    fn ensemble(&self, y: &RVec) -> Result<ResponseEnsemble> {
        let zs: Vec<RVec> = (0..self.n())
            .map(|j| &self.reduced[j].z0 + &self.reduced[j].basis * self.column_vars(y, j))
            .collect();
        self.sys.reconstruct(&zs)
    }

    fn resolvent(&self, omega: f64) -> Vec<Complex64> {
        let s = Complex64::new(0.0, omega);
        self.poles().poles().iter().map(|p| Complex64::new(1.0, 0.0) / (s - p)).collect()
    }

    /// `g0(omega)` (h x n) and `psi(omega)` (h x nv).
    fn frequency_data(&self, omega: f64) -> (CMat, CMat) {
        let r = self.resolvent(omega);
        let (n, h) = (self.n(), self.h);
        let mut g0 = CMat::zeros(h, n);
        let mut psi = CMat::zeros(h, self.nv);
        for j in 0..n {
            let d = self.vb[j].ncols();
            for (l, rl) in r.iter().enumerate() {
                for i in 0..h {
                    g0[(i, j)] += rl * self.v0[j][l * h + i];
                }
                for t in 0..d {
                    for i in 0..h {
                        psi[(i, self.offsets[j] + t)] += rl * self.vb[j][(l * h + i, t)];
                    }
                }
            }
        }
        (g0, psi)
    }
}

fn transfer_at(poles: &PoleSet, psi: &[CMat], omega: f64) -> CMat {
    let s = Complex64::new(0.0, omega);
    let mut g = CMat::zeros(psi[0].nrows(), psi[0].ncols());
    for (p, ps) in poles.poles().iter().zip(psi) {
        g += ps * (Complex64::new(1.0, 0.0) / (s - p));
    }
    g
}

/// Solution of the bounded-real synthesis before certification.
struct Optimum {
    y: RVec,
    certificate: Option<KypCertificate>,
    gap: f64,
}

fn joint_kyp(param: &Parametrization, rt: &RealTransform, settings: &SdpSettings) -> Result<Optimum> {
    let poles = param.poles();
    let (n, h) = (param.n(), param.h);
    let nk = rt.a.nrows();
    let n1 = nk + n + h;
    let eps = kyp_epsilon(&rt.a);
    let nx = nk * (nk + 1) / 2;
    let nvars = param.nv + nx + 1;

    let c0 = real_output_map(poles, &param.coefficients(&RVec::zeros(param.nv)));
    let mut cblk = RMat::identity(n1, n1) * -eps;
    for r in 0..h {
        for c in 0..nk {
            cblk[(nk + n + r, c)] -= c0[(r, c)];
            cblk[(c, nk + n + r)] -= c0[(r, c)];
        }
    }
    let cx = RMat::identity(nk, nk) * -eps;

    let mut a: Vec<Vec<SymEntry>> = Vec::with_capacity(nvars);
    for j in 0..n {
        for t in 0..param.vb[j].ncols() {
            let mut ct = RMat::zeros(h, nk);
            let v: Vec<Complex64> = param.vb[j].column(t).iter().copied().collect();
            add_real_output(poles, n, h, j, &v, &mut ct);
            a.push(LmiProblem::entries_of(0, &ct, (nk + n, 0)));
        }
    }
    let (pairs, x_entries) = x_variable_entries(&rt.a, &rt.b);
    a.extend(x_entries);
    a.push((nk..n1).map(|i| SymEntry { block: 0, row: i, col: i, value: -1.0 }).collect());

    let mut b = RVec::zeros(nvars);
    b[nvars - 1] = -1.0;

    // dual-feasible start: X from a Lyapunov equation, gamma from a Schur-complement bound
    let x0 = lyapunov_start(&rt.a, eps)?;
    let xb = (&x0 * &rt.b).norm();
    // top-left block of the slack is c I with c >= 1
    let c_top = -max_sym_eig(&(rt.a.transpose() * &x0 + &x0 * &rt.a));
    let gamma0 = 4.0 * (xb * xb + c0.norm_squared()) / c_top + 1.0;
    let mut start = RVec::zeros(nvars);
    for (i, &(p, q)) in pairs.iter().enumerate() {
        start[param.nv + i] = x0[(p, q)];
    }
    start[nvars - 1] = gamma0;

    let problem = LmiProblem { sizes: vec![n1, nk], c: vec![cblk, cx], a, b, start };
    let sol = sdp::solve(&problem, settings)?;
    let y = sol.y.rows(0, param.nv).into_owned();
    let x = x_from_entries(nk, &pairs, &sol.y.as_slice()[param.nv..param.nv + nx]);
    let gamma = sol.y[nvars - 1];
    let ctil = real_output_map(poles, &param.coefficients(&y));
    let cert = certificate_from(&rt.a, &rt.b, &ctil, x, gamma);
    let certificate = (cert.lmi_margin > 0.0 && cert.x_min_eig > 0.0).then_some(cert);
    Ok(Optimum { y, certificate, gap: sol.relative_gap })
}

/// One sampled frequency of the exchange method.
struct Cut {
    g0: CMat,
    psi: CMat,
    /// `[Re psi; Im psi]`
    stacked: RMat,
}

/// `min gamma` subject to `[[gamma I, Psi_k(y)], [Psi_k(y)*, gamma I]] >= 0` at every cut.
struct FrequencyCut<'a> {
    param: &'a Parametrization,
    cuts: Vec<Cut>,
    start: RVec,
}

impl<'a> FrequencyCut<'a> {
    fn new(param: &'a Parametrization, omegas: &[f64], y0: &RVec) -> Self {
        let h = param.h;
        let cuts: Vec<Cut> = omegas
            .iter()
            .map(|&w| {
                let (g0, psi) = param.frequency_data(w);
                let mut stacked = RMat::zeros(2 * h, param.nv);
                stacked.rows_mut(0, h).copy_from(&psi.map(|z| z.re));
                stacked.rows_mut(h, h).copy_from(&psi.map(|z| z.im));
                Cut { g0, psi, stacked }
            })
            .collect();
        let mut prob = FrequencyCut { param, cuts, start: RVec::zeros(param.nv + 1) };
        let peak = prob.cuts.iter().map(|c| sigma_max(&(&c.g0 + prob.delta(c, y0)))).fold(0.0, f64::max);
        prob.start.rows_mut(0, param.nv).copy_from(y0);
        prob.start[param.nv] = 1.0 + 2.0 * peak;
        prob
    }

    /// `Psi_k(y) - g0`: column `j` collects the variables of state column `j`.
    fn delta(&self, cut: &Cut, y: &RVec) -> CMat {
        let p = self.param;
        let mut d = CMat::zeros(p.h, p.n());
        for (a, &c) in p.col_of.iter().enumerate() {
            if y[a] != 0.0 {
                let mut col = d.column_mut(c);
                col.axpy(Complex64::new(y[a], 0.0), &cut.psi.column(a), Complex64::new(1.0, 0.0));
            }
        }
        d
    }

    fn dim(&self) -> usize {
        self.param.h + self.param.n()
    }
}

impl SdpProblem for FrequencyCut<'_> {
    fn num_vars(&self) -> usize {
        self.param.nv + 1
    }

    fn block_sizes(&self) -> Vec<usize> {
        vec![self.dim(); self.cuts.len()]
    }

    fn objective(&self) -> RVec {
        let mut b = RVec::zeros(self.num_vars());
        b[self.param.nv] = -1.0;
        b
    }

    fn constant(&self) -> Vec<CMat> {
        let (h, n) = (self.param.h, self.param.n());
        self.cuts
            .iter()
            .map(|c| {
                let mut m = CMat::zeros(h + n, h + n);
                m.view_mut((0, h), (h, n)).copy_from(&c.g0);
                m.view_mut((h, 0), (n, h)).copy_from(&c.g0.adjoint());
                m
            })
            .collect()
    }

    fn combine(&self, y: &RVec) -> Vec<CMat> {
        let (h, n) = (self.param.h, self.param.n());
        let gamma = y[self.param.nv];
        self.cuts
            .iter()
            .map(|c| {
                let d = self.delta(c, y);
                let mut m = CMat::zeros(h + n, h + n);
                m.view_mut((0, h), (h, n)).copy_from(&(-&d));
                m.view_mut((h, 0), (n, h)).copy_from(&(-d.adjoint()));
                for i in 0..h + n {
                    m[(i, i)] = Complex64::new(-gamma, 0.0);
                }
                m
            })
            .collect()
    }

    fn apply(&self, z: &[CMat]) -> RVec {
        let p = self.param;
        let h = p.h;
        let mut out = RVec::zeros(p.nv + 1);
        for (c, zk) in self.cuts.iter().zip(z) {
            for (a, &ca) in p.col_of.iter().enumerate() {
                // Re tr(A_a Z) for a general (not necessarily Hermitian) Z
                let mut acc = Complex64::new(0.0, 0.0);
                for r in 0..h {
                    acc += zk[(h + ca, r)] * c.psi[(r, a)] + c.psi[(r, a)].conj() * zk[(r, h + ca)];
                }
                out[a] -= acc.re;
            }
            out[p.nv] -= zk.diagonal().iter().map(|v| v.re).sum::<f64>();
        }
        out
    }

    fn schur(&self, x: &[CMat], t: &[CMat]) -> RMat {
        let p = self.param;
        let (h, n, nv) = (p.h, p.n(), p.nv);
        let col_of = &p.col_of;
        let mut m = RMat::zeros(nv + 1, nv + 1);
        for ((cut, xk), tk) in self.cuts.iter().zip(x).zip(t) {
            let psi = &cut.psi;
            let x11 = xk.view((0, 0), (h, h));
            let t11 = tk.view((0, 0), (h, h));
            let x22 = xk.view((h, h), (n, n));
            let t22 = tk.view((h, h), (n, n));
            let u = xk.view((h, 0), (n, h)) * psi;
            let v = tk.view((h, 0), (n, h)) * psi;
            let zt = t11 * psi;
            let zx = x11 * psi;
            for j in 0..n {
                let s = p.offsets[j];
                let d = p.vb[j].ncols();
                if d == 0 {
                    continue;
                }
                let rows = s + d;
                // right operands producing Re/Im of psi_a* T11 psi_b and psi_a* X11 psi_b
                let mut rhs = RMat::zeros(2 * h, 4 * d);
                for bi in 0..d {
                    for r in 0..h {
                        let (ztv, zxv) = (zt[(r, s + bi)], zx[(r, s + bi)]);
                        rhs[(r, bi)] = ztv.re;
                        rhs[(h + r, bi)] = ztv.im;
                        rhs[(r, d + bi)] = ztv.im;
                        rhs[(h + r, d + bi)] = -ztv.re;
                        rhs[(r, 2 * d + bi)] = zxv.re;
                        rhs[(h + r, 2 * d + bi)] = zxv.im;
                        rhs[(r, 3 * d + bi)] = zxv.im;
                        rhs[(h + r, 3 * d + bi)] = -zxv.re;
                    }
                }
                let mut prod = RMat::zeros(rows, 4 * d);
                gemm_tn_cols(&mut prod, &cut.stacked, rows, &rhs);
                for bi in 0..d {
                    let b = s + bi;
                    for a in 0..rows {
                        let ca = col_of[a];
                        let (xw, tw) = (x22[(ca, j)], t22[(ca, j)]);
                        let quad = xw.re * prod[(a, bi)]
                            + xw.im * prod[(a, d + bi)]
                            + tw.re * prod[(a, 2 * d + bi)]
                            + tw.im * prod[(a, 3 * d + bi)];
                        let cross = (u[(ca, b)] * v[(j, a)]).re + (u[(j, a)] * v[(ca, b)]).re;
                        m[(a, b)] += quad + cross;
                    }
                }
            }
            let xt = xk * tk;
            let tx = tk * xk;
            for (a, &ca) in col_of.iter().enumerate() {
                let mut acc = 0.0;
                for r in 0..h {
                    acc += (xt[(h + ca, r)] * psi[(r, a)]).re + (tx[(h + ca, r)] * psi[(r, a)]).re;
                }
                m[(a, nv)] += acc;
            }
            m[(nv, nv)] += xt.diagonal().iter().map(|v| v.re).sum::<f64>();
        }
        for b in 0..=nv {
            for a in b + 1..=nv {
                m[(a, b)] = m[(b, a)];
            }
        }
        m
    }

    fn feasible_start(&self) -> Result<RVec> {
        Ok(self.start.clone())
    }
}

/// Local maxima of `f` over the grid, refined by golden section, largest first.
fn local_peaks(f: &dyn Fn(f64) -> f64, grid: &[f64]) -> Vec<(f64, f64)> {
    let vals: Vec<f64> = grid.iter().map(|&w| f(w)).collect();
    let last = grid.len() - 1;
    let mut peaks = Vec::new();
    for i in 0..grid.len() {
        let left = if i == 0 { f64::NEG_INFINITY } else { vals[i - 1] };
        let right = if i == last { f64::NEG_INFINITY } else { vals[i + 1] };
        if vals[i] >= left && vals[i] >= right {
            let (w, v) = if i == 0 {
                (grid[0], vals[0])
            } else {
                golden_max(f, grid[i - 1], grid[(i + 1).min(last)], 60)
            };
            peaks.push(if v > vals[i] { (w, v) } else { (grid[i], vals[i]) });
        }
    }
    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    peaks
}

fn initial_frequencies() -> Vec<f64> {
    let mut w = vec![0.0];
    w.extend(log_grid(0.05, 20.0, 8));
    w
}

fn frequency_cut(param: &Parametrization, rt: &RealTransform, opts: &HinfOptions) -> Result<Optimum> {
    let poles = param.poles();
    let mut y = RVec::zeros(param.nv);
    if param.nv == 0 {
        return Ok(Optimum { y, certificate: None, gap: 0.0 });
    }
    let grid = sweep_grid();
    let mut omegas = initial_frequencies();
    let mut gap = f64::NAN;
    for _ in 0..opts.max_rounds {
        let problem = FrequencyCut::new(param, &omegas, &y);
        let sol = sdp::solve(&problem, &opts.sdp)?;
        y = sol.y.rows(0, param.nv).into_owned();
        gap = sol.relative_gap;
        let level = sol.y[param.nv];
        let psi = param.coefficients(&y);
        let f = |w: f64| sigma_max(&transfer_at(poles, &psi, w));
        let threshold = level * (1.0 + opts.exchange_tol);
        let mut candidates: Vec<f64> =
            local_peaks(&f, &grid).into_iter().filter(|&(_, v)| v > threshold).map(|(w, _)| w).collect();
        if candidates.is_empty() {
            let sys = StateSpace::new(rt.a.clone(), rt.b.clone(), real_output_map(poles, &psi))?;
            let norm = hinf_norm_ss(&sys, 1e-9)?;
            if norm.upper <= threshold {
                return Ok(Optimum { y, certificate: None, gap });
            }
            candidates.push(norm.peak_omega);
        }
        if opts.sdp.trace {
            eprintln!(
                "exchange: {} cuts, level {level:.10e}, {} iterations, {} violations at {:?}",
                omegas.len(),
                sol.iterations,
                candidates.len(),
                candidates.iter().take(4).map(|&w| (w, f(w))).collect::<Vec<_>>()
            );
        }
        let mut added = 0;
        for w in candidates {
            if added == opts.cuts_per_round {
                break;
            }
            if omegas.iter().all(|&o| (o - w).abs() > 1e-9 * (1.0 + w)) {
                omegas.push(w);
                added += 1;
            }
        }
        if added == 0 {
            if opts.sdp.trace {
                let worst = omegas.iter().map(|&w| (w, f(w))).fold((0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a });
                eprintln!("exchange stalled: status {:?}, worst sampled {:?}, level {level}, gap {gap:e}", sol.status, worst);
            }
            // the violated peak is already sampled: the level is as good as the solver allows
            break;
        }
    }
    Ok(Optimum { y, certificate: None, gap })
}

/// Certificate at the smallest level slightly above `norm` that admits one.
fn certify(a: &RMat, b: &RMat, c: &RMat, norm: f64) -> Result<KypCertificate> {
    let mut rel = 1e-7;
    for _ in 0..30 {
        if let Some(cert) = riccati_certificate(a, b, c, norm * (1.0 + rel) + 1e-12) {
            return Ok(cert);
        }
        rel *= 2.0;
    }
    Err(Error::Solver(format!("no KYP certificate found near gamma = {norm:.6e}")))
}

/// H-infinity-optimal ensemble over the given poles and mask.
pub fn synth_hinf(
    plant: &Plant,
    weights: &CostWeights,
    poles: &PoleSet,
    mask: Option<&SparsityMask>,
    opts: &HinfOptions,
) -> Result<SynthesisResult> {
    let t0 = Instant::now();
    check_inputs(plant, weights)?;
    let param = Parametrization::new(plant, weights, poles, mask)?;
    let rt = real_transform(poles, plant.n())?;
    let method = match opts.method {
        HinfMethod::Auto if rt.a.nrows() <= opts.joint_max_states => HinfMethod::JointKyp,
        HinfMethod::Auto => HinfMethod::FrequencyCut,
        m => m,
    };
    let opt = match method {
        HinfMethod::JointKyp => joint_kyp(&param, &rt, &opts.sdp)?,
        _ => frequency_cut(&param, &rt, opts)?,
    };
    let ctil = real_output_map(poles, &param.coefficients(&opt.y));
    let sys = StateSpace::new(rt.a.clone(), rt.b.clone(), ctil.clone())?;
    let norm = hinf_norm_ss(&sys, 1e-9)?.upper;
    let cert = match opt.certificate {
        Some(c) if c.lmi_margin >= kyp_epsilon(&rt.a) && c.gamma >= norm => c,
        _ => certify(&rt.a, &rt.b, &ctil, norm)?,
    };
    let ensemble = param.ensemble(&opt.y)?;
    let residual = verification_residual(&ensemble, plant)?;
    Ok(SynthesisResult {
        objective: Objective::Hinf,
        ensemble,
        norm,
        normalized_cost: None,
        residual,
        solve_ms: t0.elapsed().as_secs_f64() * 1e3,
        gamma: Some(cert.gamma),
        lmi_margin: Some(cert.lmi_margin),
        x_min_eig: Some(cert.x_min_eig),
        kkt_residual: Some(opt.gap),
    })
}

pub const BASELINE_POLES: usize = 16;

#[derive(Clone, Debug)]
pub struct HinfBaseline {
    /// achieved norm of the centralized design
    pub gamma: f64,
    /// optimal full-information level from the Riccati bisection, when it converged
    pub riccati_gamma: Option<f64>,
    pub result: SynthesisResult,
}

impl HinfBaseline {
    /// `gamma / riccati_gamma - 1`.
    pub fn riccati_gap(&self) -> Option<f64> {
        self.riccati_gamma.map(|g| self.gamma / g - 1.0)
    }
}

/// Centralized `K = 16` spiral design, cross-checked against the Riccati level.
pub fn hinf_baseline(plant: &Plant, weights: &CostWeights, opts: &HinfOptions) -> Result<HinfBaseline> {
    let poles = spiral_poles(BASELINE_POLES)?;
    let result = synth_hinf(plant, weights, &poles, None, opts)?;
    let riccati_gamma = crate::analysis::hinf_riccati_gamma(plant, weights, 1e-8).ok();
    Ok(HinfBaseline { gamma: result.norm, riccati_gamma, result })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::make_chain;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar() -> (Plant, CostWeights) {
        let plant = Plant::from_matrices(RMat::zeros(1, 1), RMat::identity(1, 1)).unwrap();
        (plant, CostWeights::identity(1, 1, 1.0, 1.0))
    }

    #[test]
    fn transform_is_unitary_and_real() {
        let poles = PoleSet::new(&[c(-1.0, 2.0), c(-1.0, -2.0), c(-0.5, 0.0)]).unwrap();
        let rt = real_transform(&poles, 2).unwrap();
        let eye = CMat::identity(6, 6);
        assert!(cmax_abs(&(rt.t.adjoint() * &rt.t - eye)) < 1e-15);
        assert!((&rt.a - real_state_matrix(&poles, 2)).amax() < 1e-15);
        assert!((&rt.b - real_input_matrix(3, 2)).amax() < 1e-15);
        assert_eq!(rt.a[(0, 2)], 2.0);
        assert_eq!(rt.a[(2, 0)], -2.0);
    }

    #[test]
    fn scalar_kyp_levels() {
        let a = RMat::from_element(1, 1, -1.0);
        let b = RMat::identity(1, 1);
        let cm = RMat::identity(1, 1);
        let yes = kyp_check(&a, &b, &cm, 1.1).unwrap();
        assert!(yes.feasible, "{}", yes.diagnostic);
        assert!(yes.certificate.unwrap().lmi_margin > 0.0);
        assert!(!kyp_check(&a, &b, &cm, 0.9).unwrap().feasible);
        let unstable = kyp_check(&RMat::from_element(1, 1, 1.0), &b, &cm, 10.0).unwrap();
        assert!(!unstable.feasible && unstable.diagnostic.contains("Hurwitz"));
        let g = kyp_bisection(&a, &b, &cm, 1e-6).unwrap();
        assert!((g - 1.0).abs() < 1e-5, "{g}");
    }

    #[test]
    fn scalar_single_pole_level() {
        // x' = u with one pole at -1: Phi_x = 1/(s+1), Phi_u = -1/(s+1), norm sqrt(2)
        let (plant, weights) = scalar();
        let poles = PoleSet::new(&[c(-1.0, 0.0)]).unwrap();
        for method in [HinfMethod::JointKyp, HinfMethod::FrequencyCut] {
            let opts = HinfOptions { method, ..HinfOptions::default() };
            let r = synth_hinf(&plant, &weights, &poles, None, &opts).unwrap();
            assert!((r.norm - 2f64.sqrt()).abs() < 1e-6, "{method:?}: {}", r.norm);
            let g = r.gamma.unwrap();
            assert!(g >= r.norm && (g - r.norm) / r.norm < 1e-3);
            assert!(r.lmi_margin.unwrap() > 0.0 && r.x_min_eig.unwrap() > 0.0);
        }
    }

    #[test]
    fn joint_and_frequency_cut_agree() {
        let plant = make_chain(3, 1.0, 0.5, 1.0).unwrap();
        let weights = CostWeights::identity(3, 3, 1.0, 1.0);
        let poles = spiral_poles(4).unwrap();
        let joint = synth_hinf(&plant, &weights, &poles, None, &HinfOptions { method: HinfMethod::JointKyp, ..Default::default() })
            .unwrap();
        let cut = synth_hinf(&plant, &weights, &poles, None, &HinfOptions { method: HinfMethod::FrequencyCut, ..Default::default() })
            .unwrap();
        assert!((joint.norm - cut.norm).abs() < 1e-4 * joint.norm, "{} vs {}", joint.norm, cut.norm);
        assert!(joint.residual < 1e-9);
    }

    #[test]
    fn frequency_cut_schur_matches_definition() {
        let plant = make_chain(2, 0.5, 0.3, 1.0).unwrap();
        let weights = CostWeights::identity(2, 2, 1.0, 2.0);
        let poles = spiral_poles(2).unwrap();
        let param = Parametrization::new(&plant, &weights, &poles, None).unwrap();
        let prob = FrequencyCut::new(&param, &[0.0, 0.7], &RVec::zeros(param.nv));
        let dim = prob.dim();
        let herm = |seed: usize| {
            let g = CMat::from_fn(dim, dim, |i, j| c(((i * 7 + j * 3 + seed) as f64).sin(), ((i + 2 * j * seed) as f64).cos()));
            &g * g.adjoint() + CMat::identity(dim, dim)
        };
        let xs = vec![herm(1), herm(2)];
        let ts = vec![herm(3), herm(4)];
        let m = prob.schur(&xs, &ts);
        let nvars = prob.num_vars();
        let basis = |i: usize| {
            let mut e = RVec::zeros(nvars);
            e[i] = 1.0;
            prob.combine(&e)
        };
        for i in 0..nvars {
            let ai = basis(i);
            for j in 0..nvars {
                let aj = basis(j);
                let mut expected = 0.0;
                for k in 0..2 {
                    expected += (&ai[k] * &xs[k] * &aj[k] * &ts[k]).trace().re;
                }
                assert!((m[(i, j)] - expected).abs() < 1e-9 * (1.0 + expected.abs()), "({i},{j})");
            }
            let z: Vec<CMat> = xs.clone();
            let applied = prob.apply(&z)[i];
            let direct: f64 = (0..2).map(|k| (&ai[k] * &z[k]).trace().re).sum();
            assert!((applied - direct).abs() < 1e-9 * (1.0 + direct.abs()));
        }
    }

    #[test]
    fn stacked_eval_matches_partial_fractions() {
        let (plant, weights) = scalar();
        let poles = spiral_poles(2).unwrap();
        let r = crate::h2::synth_h2(&plant, &weights, &poles, None).unwrap();
        let w = weights.sqrt_block().unwrap();
        let st = StackedRealization::new(&r.ensemble, &w);
        let psi = psi_coefficients(&r.ensemble, &w);
        let direct = transfer_at(&poles, &psi, 0.3);
        assert!(cmax_abs(&(st.eval(c(0.0, 0.3)) - direct)) < 1e-13);
        let rt = real_transform(&poles, 1).unwrap();
        let ct = rt.output(&st.c).unwrap();
        assert!((ct - real_output_map(&poles, &psi)).amax() < 1e-13);
    }
}
