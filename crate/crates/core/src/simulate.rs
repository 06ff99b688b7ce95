//! Controller realization, closed-loop simulation and internal stability.
//!
//! The controller closes the loop `v = y + (I - s Phi_x) v`, `u = s Phi_u v` with the strictly proper
//! and biproper partial-fraction forms
//!
//! ```text
//! I - s Phi_x(s) = -sum_l p_l Phi_x(l) / (s - p_l)
//! s Phi_u(s)     =  sum_l Phi_u(l) + sum_l p_l Phi_u(l) / (s - p_l)
//! ```
//!
//! Because `s Phi_x(s)` vanishes at `s = 0`, the closed v-loop has `n` modes at the origin. They are
//! spanned by `A~^{-1} B~` and lie in the kernel of the output map, so they never reach `u`; the exported
//! realization removes them and keeps the remaining `n (K - 1)` states.

use num_complex::Complex64;
use serde::Serialize;

use crate::constraints::{ResponseEnsemble, FEASIBILITY_TOL};
use crate::error::{Error, Result};
use crate::h2::verification_residual;
use crate::hinf::{real_input_matrix, real_output_map, real_state_matrix};
use crate::linalg::{spectral_abscissa, to_complex, CMat, RMat, RVec};
use crate::plant::Plant;

/// Real state-space controller `xi' = Ak xi + Bk y`, `u = Ck xi + Dk y` with `y = x`.
#[derive(Clone, Debug)]
pub struct ControllerRealization {
    pub ak: RMat,
    pub bk: RMat,
    pub ck: RMat,
    pub dk: RMat,
    /// Number of origin modes of the v-loop that were removed.
    pub removed_modes: usize,
}

impl ControllerRealization {
    pub fn order(&self) -> usize {
        self.ak.nrows()
    }

    /// `K(s) = Ck (sI - Ak)^{-1} Bk + Dk`.
    pub fn transfer(&self, s: Complex64) -> Result<CMat> {
        let mut k = to_complex(&self.dk);
        if self.order() > 0 {
            let r = self.order();
            let lhs = CMat::identity(r, r) * s - to_complex(&self.ak);
            let sol = lhs
                .lu()
                .solve(&to_complex(&self.bk))
                .ok_or_else(|| Error::Domain(format!("sample {s} is a controller pole")))?;
            k += to_complex(&self.ck) * sol;
        }
        Ok(k)
    }
}

fn check_sum(ens: &ResponseEnsemble) -> Result<()> {
    let n = ens.n();
    let mut sum = CMat::zeros(n, n);
    for p in &ens.phi_x {
        sum += p;
    }
    let err = (sum - CMat::identity(n, n)).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if err > FEASIBILITY_TOL {
        return Err(Error::Residual { residual: err, tol: FEASIBILITY_TOL });
    }
    Ok(())
}

/// The v-loop realization in real modal coordinates, before removing the origin modes.
pub fn v_loop_realization(ens: &ResponseEnsemble) -> Result<ControllerRealization> {
    check_sum(ens)?;
    let n = ens.n();
    let k = ens.poles.len();
    let poles = ens.poles.poles();
    let cx_coef: Vec<CMat> = ens.phi_x.iter().zip(poles).map(|(f, p)| f * (-p)).collect();
    let cu_coef: Vec<CMat> = ens.phi_u.iter().zip(poles).map(|(f, p)| f * *p).collect();
    let a = real_state_matrix(&ens.poles, n);
    let b = real_input_matrix(k, n);
    let cx = real_output_map(&ens.poles, &cx_coef);
    let cu = real_output_map(&ens.poles, &cu_coef);
    let mut du = CMat::zeros(ens.m(), n);
    for f in &ens.phi_u {
        du += f;
    }
    let du: RMat = du.map(|z| z.re);
    let ak = &a + &b * &cx;
    let ck = &cu + &du * &cx;
    Ok(ControllerRealization { ak, bk: b, ck, dk: du, removed_modes: 0 })
}

/// Removes the `n` origin modes spanned by `A~^{-1} B~`, which are unobservable from `u`.
fn remove_origin_modes(ens: &ResponseEnsemble, full: ControllerRealization) -> Result<ControllerRealization> {
    let n = ens.n();
    let nk = full.order();
    let a = real_state_matrix(&ens.poles, n);
    let b = real_input_matrix(ens.poles.len(), n);
    let null = a
        .clone()
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Domain("modal state matrix is singular (pole at the origin)".into()))?;
    let qr = null.qr();
    let (q, _) = (qr.q(), qr.r());
    // Orthonormal complement of the null directions.
    let mut basis = RMat::zeros(nk, nk);
    basis.columns_mut(0, n).copy_from(&q);
    let mut filled = n;
    for e in 0..nk {
        if filled == nk {
            break;
        }
        let mut v = RVec::zeros(nk);
        v[e] = 1.0;
        for _ in 0..2 {
            let proj = basis.columns(0, filled).transpose() * &v;
            v -= basis.columns(0, filled) * proj;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.column_mut(filled).copy_from(&(v / norm));
            filled += 1;
        }
    }
    let v = basis.columns(n, nk - n).into_owned();
    Ok(ControllerRealization {
        ak: v.transpose() * &full.ak * &v,
        bk: v.transpose() * &full.bk,
        ck: &full.ck * &v,
        dk: full.dk,
        removed_modes: n,
    })
}

/// Realizes the controller without checking plant feasibility.
pub fn realize_controller_unchecked(ens: &ResponseEnsemble) -> Result<ControllerRealization> {
    let full = v_loop_realization(ens)?;
    remove_origin_modes(ens, full)
}

/// Realizes `K = Phi_u Phi_x^{-1}`; refuses ensembles whose residual exceeds `1e-6`.
pub fn realize_controller(plant: &Plant, ens: &ResponseEnsemble) -> Result<ControllerRealization> {
    let residual = verification_residual(ens, plant)?;
    if !(residual <= FEASIBILITY_TOL) {
        return Err(Error::Residual { residual, tol: FEASIBILITY_TOL });
    }
    realize_controller_unchecked(ens)
}

/// Augmented closed-loop matrix on `[x; xi]`.
pub fn closed_loop_matrix(plant: &Plant, ctrl: &ControllerRealization) -> Result<RMat> {
    let (n, r) = (plant.n(), ctrl.order());
    if ctrl.dk.nrows() != plant.m() || ctrl.dk.ncols() != n || ctrl.bk.ncols() != n || ctrl.ck.nrows() != plant.m() {
        return Err(Error::InvalidDimension("controller does not match the plant".into()));
    }
    let mut acl = RMat::zeros(n + r, n + r);
    acl.view_mut((0, 0), (n, n)).copy_from(&(&plant.a + &plant.b * &ctrl.dk));
    if r > 0 {
        acl.view_mut((0, n), (n, r)).copy_from(&(&plant.b * &ctrl.ck));
        acl.view_mut((n, 0), (r, n)).copy_from(&ctrl.bk);
        acl.view_mut((n, n), (r, r)).copy_from(&ctrl.ak);
    }
    Ok(acl)
}

/// Disturbance entering through the `w` channel.
#[derive(Clone, Debug)]
pub enum Disturbance {
    Zero,
    /// `w(t) = w0 delta(t)`, equivalent to adding `w0` to the initial state.
    Impulse(RVec),
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub t: Vec<f64>,
    /// One row per time sample.
    pub x: RMat,
    pub u: RMat,
    /// Largest `|x_i(t)|` over the horizon for every state.
    pub state_peaks: Vec<f64>,
    /// Largest state peak within each subsystem.
    pub subsystem_peaks: Vec<f64>,
    pub unstable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimSummary {
    pub containment_max_leak: f64,
    pub settling_time_2pct: Option<f64>,
}

impl SimResult {
    /// Largest peak among states not marked as allowed.
    pub fn containment_max_leak(&self, allowed: &[bool]) -> f64 {
        self.state_peaks
            .iter()
            .zip(allowed)
            .filter(|(_, &ok)| !ok)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max)
    }

    /// First time after which `||x||_inf` stays within 2% of its peak; `None` if never.
    pub fn settling_time_2pct(&self) -> Option<f64> {
        let norms: Vec<f64> = self.x.row_iter().map(|r| r.amax()).collect();
        let peak = norms.iter().copied().fold(0.0, f64::max);
        if peak == 0.0 {
            return self.t.first().copied();
        }
        let bound = 0.02 * peak;
        if norms.last().map_or(true, |&v| v > bound) {
            return None;
        }
        let last_bad = norms.iter().rposition(|&v| v > bound);
        Some(match last_bad {
            Some(k) => self.t[k + 1],
            None => self.t[0],
        })
    }

    pub fn summary(&self, allowed: &[bool]) -> SimSummary {
        SimSummary {
            containment_max_leak: self.containment_max_leak(allowed),
            settling_time_2pct: self.settling_time_2pct(),
        }
    }

    pub fn to_csv(&self) -> String {
        let (n, m) = (self.x.ncols(), self.u.ncols());
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 1..=m {
            out.push_str(&format!(",u{i}"));
        }
        out.push('\n');
        for (k, t) in self.t.iter().enumerate() {
            out.push_str(&format!("{t:.6}"));
            for v in self.x.row(k).iter().chain(self.u.row(k).iter()) {
                out.push_str(&format!(",{v:.12e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Exact LTI propagation on the grid `0, dt, .., t_end` via the matrix exponential of the closed loop.
pub fn simulate_closed_loop(
    plant: &Plant,
    ctrl: &ControllerRealization,
    x0: &RVec,
    w: &Disturbance,
    t_end: f64,
    dt: f64,
) -> Result<SimResult> {
    if !(dt > 0.0) || !(t_end >= 0.0) || !t_end.is_finite() {
        return Err(Error::InvalidArgument(format!("need dt > 0 and finite t_end >= 0, got dt={dt}, t_end={t_end}")));
    }
    let n = plant.n();
    if x0.len() != n {
        return Err(Error::InvalidDimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let acl = closed_loop_matrix(plant, ctrl)?;
    let r = ctrl.order();
    let steps = (t_end / dt).round() as usize;
    let phi = (&acl * dt).exp();

    let mut z = RVec::zeros(n + r);
    z.rows_mut(0, n).copy_from(x0);
    if let Disturbance::Impulse(w0) = w {
        if w0.len() != n {
            return Err(Error::InvalidDimension(format!("impulse has length {}, expected {n}", w0.len())));
        }
        let mut head = z.rows_mut(0, n);
        head += w0;
    }

    let m = plant.m();
    let mut t = Vec::with_capacity(steps + 1);
    let mut xs = RMat::zeros(steps + 1, n);
    let mut us = RMat::zeros(steps + 1, m);
    let mut out_map = RMat::zeros(m, n + r);
    out_map.columns_mut(0, n).copy_from(&ctrl.dk);
    if r > 0 {
        out_map.columns_mut(n, r).copy_from(&ctrl.ck);
    }
    for k in 0..=steps {
        t.push(k as f64 * dt);
        xs.row_mut(k).copy_from(&z.rows(0, n).transpose());
        us.row_mut(k).copy_from(&(&out_map * &z).transpose());
        if k < steps {
            z = &phi * &z;
        }
    }

    let state_peaks: Vec<f64> = xs.column_iter().map(|c| c.amax()).collect();
    let count = plant.state_subsystems.iter().copied().max().map_or(0, |v| v + 1);
    let mut subsystem_peaks = vec![0.0f64; count];
    for (i, &s) in plant.state_subsystems.iter().enumerate() {
        subsystem_peaks[s] = subsystem_peaks[s].max(state_peaks[i]);
    }
    Ok(SimResult { t, x: xs, u: us, state_peaks, subsystem_peaks, unstable: !(spectral_abscissa(&acl) < 0.0) })
}

/// States reachable from the support of `x0` through the support of `Phi_x`.
pub fn reachable_states(ens: &ResponseEnsemble, x0: &RVec) -> Vec<bool> {
    let n = ens.n();
    (0..n)
        .map(|i| {
            (0..n).any(|j| x0[j] != 0.0 && ens.phi_x.iter().any(|f| f[(i, j)].norm() > 0.0))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub stable: bool,
    pub spectral_abscissa: f64,
    /// Peak and final 2-norm of the impulse responses from the `delta_y` and `delta_u` ports.
    pub impulse_peak: f64,
    pub impulse_final: f64,
}

/// Spectral abscissa of the augmented loop and boundedness of the responses to impulses at `delta_y`, `delta_u`.
pub fn internal_stability_check(plant: &Plant, ctrl: &ControllerRealization) -> Result<StabilityReport> {
    let acl = closed_loop_matrix(plant, ctrl)?;
    let (n, m, r) = (plant.n(), plant.m(), ctrl.order());
    let alpha = spectral_abscissa(&acl);

    // Perturbations: y = x + delta_y feeds both Dk and Bk; u gets + delta_u.
    let mut bp = RMat::zeros(n + r, n + m);
    bp.view_mut((0, 0), (n, n)).copy_from(&(&plant.b * &ctrl.dk));
    if r > 0 {
        bp.view_mut((n, 0), (r, n)).copy_from(&ctrl.bk);
    }
    bp.view_mut((0, n), (n, m)).copy_from(&plant.b);

    let horizon = if alpha < 0.0 { (40.0 / -alpha).min(1e4) } else { 100.0 };
    let samples = 400;
    let step = (&acl * (horizon / samples as f64)).exp();
    let mut resp = bp.clone();
    let mut peak = resp.norm();
    for _ in 0..samples {
        resp = &step * &resp;
        peak = peak.max(resp.norm());
    }
    let last = resp.norm();
    let bounded = peak.is_finite() && last <= 1e-3 * peak.max(1.0);
    Ok(StabilityReport { stable: alpha < 0.0 && bounded, spectral_abscissa: alpha, impulse_peak: peak, impulse_final: last })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poles::PoleSet;

    fn scalar_ensemble() -> (Plant, ResponseEnsemble) {
        let plant = Plant::from_matrices(RMat::zeros(1, 1), RMat::identity(1, 1)).unwrap();
        let poles = PoleSet::new(&[Complex64::new(-1.0, 0.0)]).unwrap();
        let ens = ResponseEnsemble {
            poles,
            phi_x: vec![CMat::identity(1, 1)],
            phi_u: vec![CMat::from_element(1, 1, Complex64::new(-1.0, 0.0))],
        };
        (plant, ens)
    }

    #[test]
    fn scalar_example_is_static() {
        let (plant, ens) = scalar_ensemble();
        let k = realize_controller(&plant, &ens).unwrap();
        assert_eq!(k.order(), 0);
        assert!((k.dk[(0, 0)] + 1.0).abs() < 1e-14);
        let full = v_loop_realization(&ens).unwrap();
        assert!(full.ak.amax() < 1e-14 && full.ck.amax() < 1e-14);
    }

    #[test]
    fn identity_input_example() {
        let a = RMat::from_row_slice(2, 2, &[0.3, 1.0, -0.5, 0.1]);
        let plant = Plant::from_matrices(a.clone(), RMat::identity(2, 2)).unwrap();
        let p = -2.0;
        let ens = ResponseEnsemble {
            poles: PoleSet::new(&[Complex64::new(p, 0.0)]).unwrap(),
            phi_x: vec![CMat::identity(2, 2)],
            phi_u: vec![to_complex(&(RMat::identity(2, 2) * p - &a))],
        };
        let k = realize_controller(&plant, &ens).unwrap();
        assert_eq!(k.order(), 0);
        assert!((&k.dk - (RMat::identity(2, 2) * p - &a)).amax() < 1e-13);
        let acl = closed_loop_matrix(&plant, &k).unwrap();
        assert!((acl - RMat::identity(2, 2) * p).amax() < 1e-13);
        assert!(internal_stability_check(&plant, &k).unwrap().stable);
    }

    #[test]
    fn zero_input_gives_zero_trajectory() {
        let (plant, ens) = scalar_ensemble();
        let k = realize_controller(&plant, &ens).unwrap();
        let sim = simulate_closed_loop(&plant, &k, &RVec::zeros(1), &Disturbance::Zero, 2.0, 0.1).unwrap();
        assert_eq!(sim.t.len(), 21);
        assert_eq!(sim.x.nrows(), 21);
        assert!(sim.x.amax() == 0.0 && sim.u.amax() == 0.0);
    }

    #[test]
    fn csv_header_and_rows() {
        let (plant, ens) = scalar_ensemble();
        let k = realize_controller(&plant, &ens).unwrap();
        let sim = simulate_closed_loop(&plant, &k, &RVec::from_element(1, 1.0), &Disturbance::Zero, 1.0, 0.5).unwrap();
        let csv = sim.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,u1");
        assert_eq!(lines.len(), 4);
        let x_end: f64 = lines[3].split(',').nth(1).unwrap().parse().unwrap();
        assert!((x_end - (-1.0f64).exp()).abs() < 1e-10);
        assert!(sim.settling_time_2pct().is_none());
    }

    #[test]
    fn infeasible_ensemble_is_refused() {
        let (plant, mut ens) = scalar_ensemble();
        ens.phi_u[0] *= Complex64::new(2.0, 0.0);
        assert!(matches!(realize_controller(&plant, &ens), Err(Error::Residual { .. })));
    }
}
