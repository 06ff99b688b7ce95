//! H2 synthesis through the residue Gram matrix.

use std::time::Instant;

use num_complex::Complex64;
use serde_json::json;

use crate::constraints::{
    assemble, random_samples, residual, ConstraintSystem, ReducedColumn, ResponseEnsemble, SparsityMask,
};
use crate::error::{Error, Result};
use crate::linalg::{herm_cholesky, lstsq, CMat, RMat, RVec};
use crate::plant::{is_stabilizable, CostWeights, Plant};
use crate::poles::PoleSet;

/// `M_lk = 1 / (-conj(p_l) - p_k)`.
pub fn gram_of(poles: &[Complex64]) -> CMat {
    let k = poles.len();
    CMat::from_fn(k, k, |l, j| Complex64::new(1.0, 0.0) / (-poles[l].conj() - poles[j]))
}

#[derive(Clone, Debug)]
pub struct ResidueGram {
    pub m: CMat,
}

pub fn residue_gram(poles: &PoleSet) -> Result<ResidueGram> {
    let m = gram_of(poles.poles());
    if herm_cholesky(&m).is_none() {
        return Err(Error::InvalidArgument("residue Gram matrix is not positive definite".into()));
    }
    Ok(ResidueGram { m })
}

/// Weighted output coefficients `Psi(l) = W [Phi_x(l); Phi_u(l)]`.
pub fn psi_coefficients(ens: &ResponseEnsemble, w: &RMat) -> Vec<CMat> {
    let (n, m) = (ens.n(), ens.m());
    let wc = w.map(|v| Complex64::new(v, 0.0));
    ens.phi_x
        .iter()
        .zip(&ens.phi_u)
        .map(|(x, u)| {
            let mut stacked = CMat::zeros(n + m, n);
            stacked.rows_mut(0, n).copy_from(x);
            stacked.rows_mut(n, m).copy_from(u);
            &wc * stacked
        })
        .collect()
}

/// `sqrt(sum_{l,k} M_lk <Psi(l), Psi(k)>)`.
pub fn h2_norm_of_coefficients(poles: &[Complex64], psi: &[CMat]) -> f64 {
    let m = gram_of(poles);
    let mut acc = 0.0;
    for l in 0..psi.len() {
        for k in 0..psi.len() {
            let inner: Complex64 = psi[l].iter().zip(psi[k].iter()).map(|(a, b)| a.conj() * b).sum();
            acc += (m[(l, k)] * inner).re;
        }
    }
    acc.max(0.0).sqrt()
}

pub fn h2_norm(ens: &ResponseEnsemble, weights: &CostWeights) -> Result<f64> {
    let w = weights.sqrt_block()?;
    if w.nrows() != ens.n() + ens.m() {
        return Err(Error::InvalidDimension("weights do not match ensemble".into()));
    }
    Ok(h2_norm_of_coefficients(ens.poles.poles(), &psi_coefficients(ens, &w)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    H2,
    Hinf,
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub objective: Objective,
    pub ensemble: ResponseEnsemble,
    pub norm: f64,
    pub normalized_cost: Option<f64>,
    pub residual: f64,
    pub solve_ms: f64,
    pub gamma: Option<f64>,
    pub lmi_margin: Option<f64>,
    pub x_min_eig: Option<f64>,
    /// largest stationarity / primal residual of the reduced least-squares solve
    pub kkt_residual: Option<f64>,
}

impl SynthesisResult {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "objective": self.objective,
            "poles": self.ensemble.poles.to_pairs(),
            "norm": self.norm,
            "normalized_cost": self.normalized_cost,
            "residual": self.residual,
            "solve_ms": self.solve_ms,
        });
        let e = self.ensemble.to_json_value();
        v["PhiX"] = e["PhiX"].clone();
        v["PhiU"] = e["PhiU"].clone();
        if self.objective == Objective::Hinf {
            v["gamma"] = json!(self.gamma);
            v["lmi_margin"] = json!(self.lmi_margin);
            v["X_min_eig"] = json!(self.x_min_eig);
        }
        v
    }
}

pub const RESIDUAL_SAMPLES: usize = 100;
pub const RESIDUAL_RADIUS: f64 = 10.0;
const LSTSQ_RTOL: f64 = 1e-12;

pub fn verification_residual(ens: &ResponseEnsemble, plant: &Plant) -> Result<f64> {
    let samples = random_samples(RESIDUAL_SAMPLES, RESIDUAL_RADIUS, 0x5eed, &ens.poles);
    residual(ens, plant, &samples)
}

/// Real factor `F` with `z' F' F z` equal to the column's weighted H2 cost.
pub(crate) fn column_cost_factor(sys: &ConstraintSystem, lower: &CMat, w: &RMat, j: usize) -> RMat {
    let (pr, pi) = sys.column_complex_map(j);
    let h = sys.n + sys.m;
    let k = sys.poles.len();
    let nv = pr.ncols();
    // W applied per pole block
    let mut wr = RMat::zeros(k * h, nv);
    let mut wi = RMat::zeros(k * h, nv);
    for l in 0..k {
        wr.rows_mut(l * h, h).copy_from(&(w * pr.rows(l * h, h)));
        wi.rows_mut(l * h, h).copy_from(&(w * pi.rows(l * h, h)));
    }
    // (L^* kron I) applied to (wr + j wi)
    let mut f = RMat::zeros(2 * k * h, nv);
    for l in 0..k {
        let mut br = RMat::zeros(h, nv);
        let mut bi = RMat::zeros(h, nv);
        for q in l..k {
            let c = lower[(q, l)].conj();
            if c.norm() == 0.0 {
                continue;
            }
            br += wr.rows(q * h, h) * c.re - wi.rows(q * h, h) * c.im;
            bi += wr.rows(q * h, h) * c.im + wi.rows(q * h, h) * c.re;
        }
        f.rows_mut(l * h, h).copy_from(&br);
        f.rows_mut((k + l) * h, h).copy_from(&bi);
    }
    f
}

pub(crate) fn gram_cholesky(poles: &PoleSet) -> Result<CMat> {
    let gram = residue_gram(poles)?;
    Ok(herm_cholesky(&gram.m).expect("checked in residue_gram"))
}

struct ColumnOptimum {
    z: RVec,
    cost_sq: f64,
    kkt: f64,
}

fn solve_column(sys: &ConstraintSystem, red: &ReducedColumn, lower: &CMat, w: &RMat, j: usize) -> Result<ColumnOptimum> {
    let f = column_cost_factor(sys, lower, w, j);
    let fz0 = &f * &red.z0;
    let z = if red.basis.ncols() == 0 {
        red.z0.clone()
    } else {
        let fn_ = &f * &red.basis;
        let y = lstsq(&fn_, &(-&fz0), LSTSQ_RTOL)?;
        &red.z0 + &red.basis * y
    };
    let fz = &f * &z;
    let cost_sq = fz.norm_squared();
    let col = &sys.columns[j];
    let primal = (&col.a_eq * &z - &col.b_eq).amax();
    let stat = if red.basis.ncols() == 0 {
        0.0
    } else {
        (red.basis.transpose() * (f.transpose() * &fz)).amax() / (1.0 + f.norm() * f.norm() * z.norm())
    };
    Ok(ColumnOptimum { z, cost_sq, kkt: primal.max(stat) })
}

pub(crate) fn check_inputs(plant: &Plant, weights: &CostWeights) -> Result<()> {
    weights.check(plant)?;
    if !is_stabilizable(plant) {
        return Err(Error::Infeasible("(A, B) is not stabilizable".into()));
    }
    Ok(())
}

/// Column-separable H2-optimal ensemble over the given poles and mask.
pub fn synth_h2(plant: &Plant, weights: &CostWeights, poles: &PoleSet, mask: Option<&SparsityMask>) -> Result<SynthesisResult> {
    let t0 = Instant::now();
    check_inputs(plant, weights)?;
    let sys = assemble(plant, poles, mask)?;
    let reduced = sys.reduce()?;
    let lower = gram_cholesky(poles)?;
    let w = weights.sqrt_block()?;
    let mut zs = Vec::with_capacity(plant.n());
    let mut total = 0.0;
    let mut kkt: f64 = 0.0;
    for j in 0..plant.n() {
        let opt = solve_column(&sys, &reduced[j], &lower, &w, j)?;
        total += opt.cost_sq;
        kkt = kkt.max(opt.kkt);
        zs.push(opt.z);
    }
    let ensemble = sys.reconstruct(&zs)?;
    let res = verification_residual(&ensemble, plant)?;
    Ok(SynthesisResult {
        objective: Objective::H2,
        ensemble,
        norm: total.max(0.0).sqrt(),
        normalized_cost: None,
        residual: res,
        solve_ms: t0.elapsed().as_secs_f64() * 1e3,
        gamma: None,
        lmi_margin: None,
        x_min_eig: None,
        kkt_residual: Some(kkt),
    })
}

/// Columns of one block of subsystems; the other columns of the ensemble are zero.
#[derive(Clone, Debug)]
pub struct PartialEnsemble {
    pub columns: Vec<usize>,
    pub ensemble: ResponseEnsemble,
    pub cost_sq: f64,
}

pub fn synth_h2_column(
    plant: &Plant,
    weights: &CostWeights,
    poles: &PoleSet,
    mask: Option<&SparsityMask>,
    subsystems: &[usize],
) -> Result<PartialEnsemble> {
    check_inputs(plant, weights)?;
    let columns: Vec<usize> = (0..plant.n()).filter(|&j| subsystems.contains(&plant.state_subsystems[j])).collect();
    let sys = assemble(plant, poles, mask)?;
    let lower = gram_cholesky(poles)?;
    let w = weights.sqrt_block()?;
    let mut zs: Vec<RVec> = sys.columns.iter().map(|c| RVec::zeros(c.vars.len())).collect();
    let mut cost_sq = 0.0;
    for &j in &columns {
        let sub = ConstraintSystem { poles: sys.poles.clone(), n: sys.n, m: sys.m, columns: vec![sys.columns[j].clone()] };
        let red = sub.reduce()?.remove(0);
        let opt = solve_column(&sys, &red, &lower, &w, j)?;
        cost_sq += opt.cost_sq;
        zs[j] = opt.z;
    }
    let ensemble = sys.reconstruct(&zs)?;
    Ok(PartialEnsemble { columns, ensemble, cost_sq })
}

/// Sum of partial ensembles over a partition of the columns.
pub fn merge_columns(parts: &[PartialEnsemble]) -> Result<ResponseEnsemble> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("no parts to merge".into()))?;
    let mut out = first.ensemble.clone();
    for p in &parts[1..] {
        for l in 0..out.poles.len() {
            for &j in &p.columns {
                out.phi_x[l].set_column(j, &p.ensemble.phi_x[l].column(j));
                out.phi_u[l].set_column(j, &p.ensemble.phi_u[l].column(j));
            }
        }
    }
    Ok(out)
}
