//! Stable pole sets from the Archimedes spiral, the bilinear map, and covering diagnostics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::h2::gram_of;
use crate::linalg::{clstsq, sigma_max, CMat};

const PAIR_TOL: f64 = 1e-12;
const MIN_SEPARATION: f64 = 1e-8;
const SEPARATION_NUDGE: f64 = 1e-6;

/// Conjugate-closed set of distinct strictly stable poles.
///
/// Ordering: conjugate pairs first (representative then partner), then real poles.
#[derive(Clone, Debug, PartialEq)]
pub struct PoleSet {
    poles: Vec<Complex64>,
    partner: Vec<usize>,
}

impl PoleSet {
    /// Validates, pairs and reorders. Returns the set and `perm` with `set[i] = input[perm[i]]`.
    pub fn with_permutation(input: &[Complex64]) -> Result<(Self, Vec<usize>)> {
        if input.is_empty() {
            return Err(Error::InvalidArgument("empty pole set".into()));
        }
        for p in input {
            if !(p.re < 0.0) || !p.re.is_finite() || !p.im.is_finite() {
                return Err(Error::InvalidArgument(format!("pole {p} is not strictly stable")));
            }
        }
        for i in 0..input.len() {
            for j in 0..i {
                if (input[i] - input[j]).norm() < MIN_SEPARATION {
                    return Err(Error::InvalidArgument(format!("poles {} and {} coincide", input[j], input[i])));
                }
            }
        }
        let mut used = vec![false; input.len()];
        let mut perm = Vec::with_capacity(input.len());
        let mut reals = Vec::new();
        for i in 0..input.len() {
            if used[i] {
                continue;
            }
            let p = input[i];
            if p.im.abs() <= PAIR_TOL * (1.0 + p.norm()) {
                used[i] = true;
                reals.push(i);
                continue;
            }
            let tol = 1e-9 * (1.0 + p.norm());
            let j = (0..input.len())
                .find(|&j| j != i && !used[j] && (input[j] - p.conj()).norm() <= tol)
                .ok_or_else(|| Error::InvalidArgument(format!("pole {p} has no conjugate partner")))?;
            used[i] = true;
            used[j] = true;
            perm.push(i);
            perm.push(j);
        }
        perm.extend(reals);
        let mut poles: Vec<Complex64> = perm.iter().map(|&i| input[i]).collect();
        let mut partner: Vec<usize> = (0..poles.len()).collect();
        let mut k = 0;
        while k < poles.len() && poles[k].im.abs() > PAIR_TOL * (1.0 + poles[k].norm()) {
            partner[k] = k + 1;
            partner[k + 1] = k;
            poles[k + 1] = poles[k].conj();
            k += 2;
        }
        for p in poles.iter_mut().skip(k) {
            p.im = 0.0;
        }
        Ok((PoleSet { poles, partner }, perm))
    }

    pub fn new(input: &[Complex64]) -> Result<Self> {
        Ok(Self::with_permutation(input)?.0)
    }

    pub fn poles(&self) -> &[Complex64] {
        &self.poles
    }

    pub fn len(&self) -> usize {
        self.poles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poles.is_empty()
    }

    pub fn partner(&self, l: usize) -> usize {
        self.partner[l]
    }

    pub fn is_real(&self, l: usize) -> bool {
        self.partner[l] == l
    }

    pub fn num_pairs(&self) -> usize {
        self.poles.iter().enumerate().filter(|&(l, _)| self.partner[l] > l).count()
    }

    /// Indices of one representative per conjugate class, pairs first.
    pub fn representatives(&self) -> Vec<usize> {
        (0..self.len()).filter(|&l| self.partner[l] >= l).collect()
    }

    pub fn to_pairs(&self) -> Vec<[f64; 2]> {
        self.poles.iter().map(|p| [p.re, p.im]).collect()
    }

    pub fn from_pairs(pairs: &[[f64; 2]]) -> Result<Self> {
        let v: Vec<Complex64> = pairs.iter().map(|p| Complex64::new(p[0], p[1])).collect();
        PoleSet::new(&v)
    }
}

impl Serialize for PoleSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_pairs().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoleSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        PoleSet::from_pairs(&pairs).map_err(serde::de::Error::custom)
    }
}

pub fn bilinear(z: Complex64) -> Result<Complex64> {
    if (z + 1.0).norm() == 0.0 {
        return Err(Error::Domain("bilinear map undefined at z = -1".into()));
    }
    Ok((z - 1.0) / (z + 1.0))
}

pub fn inv_bilinear(p: Complex64) -> Result<Complex64> {
    if (p - 1.0).norm() == 0.0 {
        return Err(Error::Domain("inverse bilinear map undefined at p = 1".into()));
    }
    Ok((1.0 + p) / (1.0 - p))
}

/// Spiral points `r_k e^{+-j theta_k}`, `k = 1..K/2`, listed as (z_k, conj z_k) pairs.
pub fn spiral_points(k_total: usize, spiral_m: f64) -> Result<Vec<Complex64>> {
    if k_total < 2 || k_total % 2 != 0 {
        return Err(Error::InvalidArgument(format!("pole count must be even and >= 2, got {k_total}")));
    }
    if !(spiral_m > -2.0) {
        return Err(Error::InvalidArgument(format!("spiral_m must exceed -2, got {spiral_m}")));
    }
    let mut z = Vec::with_capacity(k_total);
    for k in 1..=k_total / 2 {
        let kf = k as f64;
        let theta = 2.0 * (std::f64::consts::PI * kf).sqrt();
        let r = (2.0 * kf / (spiral_m + 2.0)).sqrt();
        let zk = Complex64::from_polar(r, theta);
        z.push(zk);
        z.push(zk.conj());
    }
    Ok(z)
}

/// `K` spiral poles with radius normalization `m = K`.
pub fn spiral_poles(k_total: usize) -> Result<PoleSet> {
    spiral_poles_with_m(k_total, k_total as f64)
}

pub fn spiral_poles_with_m(k_total: usize, spiral_m: f64) -> Result<PoleSet> {
    let mut z = spiral_points(k_total, spiral_m)?;
    if let Some(bad) = z.iter().find(|v| v.norm() >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "spiral point {bad} lies outside the unit disk (spiral_m = {spiral_m})"
        )));
    }
    let mut p: Vec<Complex64> = z.iter().map(|&v| bilinear(v)).collect::<Result<_>>()?;
    // nudge near-coincident poles apart, keeping conjugate pairs intact
    for i in (0..p.len()).step_by(2) {
        for _ in 0..8 {
            let clash = (0..i).any(|j| (p[i] - p[j]).norm() < MIN_SEPARATION)
                || (p[i] - p[i + 1]).norm() < MIN_SEPARATION;
            if !clash {
                break;
            }
            let zi = z[i] * (1.0 - SEPARATION_NUDGE / z[i].norm().max(1e-3));
            z[i] = zi;
            z[i + 1] = zi.conj();
            p[i] = bilinear(zi)?;
            p[i + 1] = p[i].conj();
        }
    }
    PoleSet::new(&p)
}

#[derive(Clone, Debug)]
pub struct CoveringReport {
    pub distance: f64,
    /// index into the candidate list of the nearest candidate for each target
    pub nearest: Vec<usize>,
}

pub fn covering_distance(candidates: &[Complex64], targets: &[Complex64]) -> Result<CoveringReport> {
    if candidates.is_empty() || targets.is_empty() {
        return Err(Error::InvalidArgument("covering distance needs nonempty sets".into()));
    }
    let mut distance: f64 = 0.0;
    let mut nearest = Vec::with_capacity(targets.len());
    for t in targets {
        let (idx, d) = candidates
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (c - t).norm()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        nearest.push(idx);
        distance = distance.max(d);
    }
    Ok(CoveringReport { distance, nearest })
}

/// Polar grid on the closed disk: `rings` radii from 0 to `radius`, `spokes` angles each.
pub fn disk_grid(radius: f64, rings: usize, spokes: usize) -> Vec<Complex64> {
    let mut pts = Vec::with_capacity(rings * spokes);
    for i in 0..rings {
        let r = if rings > 1 { radius * i as f64 / (rings - 1) as f64 } else { radius };
        for j in 0..spokes {
            let a = 2.0 * std::f64::consts::PI * j as f64 / spokes as f64;
            pts.push(Complex64::from_polar(r, a));
        }
    }
    pts
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipschitzConstants {
    pub c1: f64,
    pub c2: f64,
    pub c4: f64,
    pub c5: f64,
}

pub fn lipschitz_constants(targets: &[Complex64]) -> Result<LipschitzConstants> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("no target poles".into()));
    }
    if let Some(q) = targets.iter().find(|q| !(q.re < 0.0)) {
        return Err(Error::InvalidArgument(format!("target {q} is not in the open left half plane")));
    }
    let c4 = targets.iter().map(|q| (1.0 - q).norm()).fold(0.0, f64::max);
    let c5 = 1.0 + targets.iter().map(|q| q.norm()).fold(f64::INFINITY, f64::min);
    Ok(LipschitzConstants {
        c1: 2.0 * c5 / (c4 * (c4 + c5)),
        c2: c4 * (c5 + c4) / 2.0,
        c4,
        c5,
    })
}

/// Strictly proper target `sum_q R_q / (s - q)` with conjugate-closed poles.
#[derive(Clone, Debug)]
pub struct PoleResidueTf {
    pub poles: Vec<Complex64>,
    pub residues: Vec<CMat>,
}

impl PoleResidueTf {
    pub fn eval(&self, s: Complex64) -> CMat {
        let (r, c) = self.residues[0].shape();
        let mut out = CMat::zeros(r, c);
        for (q, rq) in self.poles.iter().zip(&self.residues) {
            out += rq * (1.0 / (s - q));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SpaFit {
    pub coefficients: Vec<CMat>,
    pub h2_error: f64,
    pub hinf_error: f64,
    pub rank_deficient: bool,
}

/// Log-spaced frequencies on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1).max(1) as f64))
        .collect()
}

/// Least-squares fit of `sum_p G_p / (s - p)` to the target on `+-j omega`, trapezoid weighted.
pub fn spa_fit(target: &PoleResidueTf, poles: &PoleSet, omegas: &[f64]) -> Result<SpaFit> {
    if target.poles.is_empty() || target.poles.len() != target.residues.len() {
        return Err(Error::InvalidArgument("target needs matching poles and residues".into()));
    }
    if target.poles.iter().any(|q| !(q.re < 0.0)) {
        return Err(Error::InvalidArgument("target must be stable".into()));
    }
    let mut w: Vec<f64> = omegas.iter().rev().map(|v| -v).chain(omegas.iter().copied()).collect();
    w.dedup();
    let nw = w.len();
    let weights: Vec<f64> = (0..nw)
        .map(|i| {
            let lo = if i == 0 { w[0] } else { w[i - 1] };
            let hi = if i + 1 == nw { w[nw - 1] } else { w[i + 1] };
            ((hi - lo) / 2.0).max(0.0).sqrt()
        })
        .collect();
    let k = poles.len();
    let (rows, cols) = target.residues[0].shape();
    let mut phi = CMat::zeros(nw, k);
    let mut rhs = CMat::zeros(nw, rows * cols);
    for (i, &om) in w.iter().enumerate() {
        let s = Complex64::new(0.0, om);
        for (l, p) in poles.poles().iter().enumerate() {
            phi[(i, l)] = weights[i] / (s - p);
        }
        let t = target.eval(s);
        for r in 0..rows {
            for c in 0..cols {
                rhs[(i, r * cols + c)] = t[(r, c)] * weights[i];
            }
        }
    }
    let (g, rank_deficient) = clstsq(&phi, &rhs, 1e-12)?;
    let coefficients: Vec<CMat> = (0..k)
        .map(|l| CMat::from_fn(rows, cols, |r, c| g[(l, r * cols + c)]))
        .collect();
    // exact H2 error of the mismatch over the merged pole list
    let mut all_p: Vec<Complex64> = Vec::new();
    let mut all_c: Vec<CMat> = Vec::new();
    for (q, rq) in target.poles.iter().zip(&target.residues) {
        all_p.push(*q);
        all_c.push(rq.clone());
    }
    for (p, gp) in poles.poles().iter().zip(&coefficients) {
        if let Some(i) = all_p.iter().position(|q| (q - p).norm() < 1e-12) {
            all_c[i] -= gp;
        } else {
            all_p.push(*p);
            all_c.push(-gp);
        }
    }
    let m = gram_of(&all_p);
    let mut h2sq = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let eta: Vec<Complex64> = all_c.iter().map(|x| x[(r, c)]).collect();
            for (a, ea) in eta.iter().enumerate() {
                for (b, eb) in eta.iter().enumerate() {
                    h2sq += (ea.conj() * m[(a, b)] * eb).re;
                }
            }
        }
    }
    let mut hinf: f64 = 0.0;
    for &om in omegas.iter() {
        let s = Complex64::new(0.0, om);
        let mut e = target.eval(s);
        for (p, gp) in poles.poles().iter().zip(&coefficients) {
            e -= gp * (1.0 / (s - p));
        }
        hinf = hinf.max(sigma_max(&e));
    }
    Ok(SpaFit { coefficients, h2_error: h2sq.max(0.0).sqrt(), hinf_error: hinf, rank_deficient })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn spiral_k2_value() {
        let p = spiral_poles(2).unwrap();
        // independent evaluation of the spiral formula followed by the bilinear map
        let theta = 2.0 * std::f64::consts::PI.sqrt();
        let r = 0.5f64.sqrt();
        let z = c(r * theta.cos(), r * theta.sin());
        let expect = (z - 1.0) / (z + 1.0);
        assert!((p.poles()[0] - expect).norm() < 1e-14);
        assert!((p.poles()[0] - c(-2.509, -2.785)).norm() < 2e-3);
        assert_eq!(p.poles()[1], p.poles()[0].conj());
        assert_eq!(p.partner(0), 1);
    }

    #[test]
    fn spiral_k10_radius() {
        let z = spiral_points(10, 10.0).unwrap();
        let rmax = z.iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!((rmax - (10.0f64 / 12.0).sqrt()).abs() < 1e-14);
        let p = spiral_poles(10).unwrap();
        assert_eq!(p.len(), 10);
        assert_eq!(p.num_pairs(), 5);
    }

    #[test]
    fn spiral_rejects_odd_and_bad_m() {
        assert!(spiral_poles(3).is_err());
        assert!(spiral_poles(0).is_err());
        assert!(spiral_poles_with_m(8, 4.0).is_err());
    }

    #[test]
    fn bilinear_examples() {
        assert_eq!(bilinear(c(0.0, 0.0)).unwrap(), c(-1.0, 0.0));
        assert!((bilinear(c(0.5, 0.0)).unwrap() - c(-1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((bilinear(c(0.0, 1.0)).unwrap() - c(0.0, 1.0)).norm() < 1e-15);
        assert!(bilinear(c(-1.0, 0.0)).is_err());
        assert!(inv_bilinear(c(1.0, 0.0)).is_err());
    }

    #[test]
    fn covering_examples() {
        let t = [c(1.0, 2.0)];
        assert_eq!(covering_distance(&t, &t).unwrap().distance, 0.0);
        let r = covering_distance(&[c(-1.0, 0.0)], &[c(-1.0, 1.0), c(-1.0, -1.0)]).unwrap();
        assert!((r.distance - 1.0).abs() < 1e-15);
        assert!(covering_distance(&[], &t).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let l = lipschitz_constants(&[c(-1.0, 0.0)]).unwrap();
        assert_eq!((l.c1, l.c2, l.c4, l.c5), (0.5, 4.0, 2.0, 2.0));
        let l = lipschitz_constants(&[c(-1.0, 1.0), c(-1.0, -1.0)]).unwrap();
        assert!((l.c4 - 5f64.sqrt()).abs() < 1e-15);
        assert!((l.c5 - (1.0 + 2f64.sqrt())).abs() < 1e-15);
        assert!((l.c1 * l.c2 - l.c5).abs() < 1e-12);
        assert!(lipschitz_constants(&[c(0.0, 1.0)]).is_err());
    }

    #[test]
    fn poleset_validation() {
        assert!(PoleSet::new(&[c(-1.0, 1.0)]).is_err());
        assert!(PoleSet::new(&[c(1.0, 0.0)]).is_err());
        assert!(PoleSet::new(&[c(-1.0, 0.0), c(-1.0, 0.0)]).is_err());
        let (p, perm) = PoleSet::with_permutation(&[c(-3.0, 0.0), c(-1.0, 1.0), c(-1.0, -1.0)]).unwrap();
        assert_eq!(perm, vec![1, 2, 0]);
        assert!(p.is_real(2));
        assert_eq!(p.representatives(), vec![0, 2]);
    }

    #[test]
    fn spa_exact_representation() {
        let target = PoleResidueTf { poles: vec![c(-1.0, 0.0)], residues: vec![CMat::from_element(1, 1, c(1.0, 0.0))] };
        let poles = PoleSet::new(&[c(-1.0, 0.0)]).unwrap();
        let fit = spa_fit(&target, &poles, &log_grid(1e-3, 1e3, 400)).unwrap();
        assert!((fit.coefficients[0][(0, 0)] - 1.0).norm() < 1e-10);
        assert!(fit.h2_error < 1e-8);
    }

    #[test]
    fn spa_scalar_mismatch_matches_closed_form() {
        // weighted least squares of 1/(s+1) by g/(s+2): g = <phi, t> / <phi, phi>
        let target = PoleResidueTf { poles: vec![c(-1.0, 0.0)], residues: vec![CMat::from_element(1, 1, c(1.0, 0.0))] };
        let poles = PoleSet::new(&[c(-2.0, 0.0)]).unwrap();
        let om = log_grid(1e-3, 1e3, 800);
        let fit = spa_fit(&target, &poles, &om).unwrap();
        let mut w: Vec<f64> = om.iter().rev().map(|v| -v).chain(om.iter().copied()).collect();
        w.dedup();
        let (mut num, mut den) = (c(0.0, 0.0), 0.0);
        for i in 0..w.len() {
            let lo = if i == 0 { w[0] } else { w[i - 1] };
            let hi = if i + 1 == w.len() { w[w.len() - 1] } else { w[i + 1] };
            let wt = (hi - lo) / 2.0;
            let s = c(0.0, w[i]);
            let phi = 1.0 / (s + 2.0);
            num += phi.conj() * (1.0 / (s + 1.0)) * wt;
            den += phi.norm_sqr() * wt;
        }
        assert!((fit.coefficients[0][(0, 0)] - num / den).norm() < 1e-9);
        assert!(fit.h2_error > 0.0);
    }
}
