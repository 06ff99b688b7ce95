//! Independent checks on a stored response ensemble.

use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ctsls::analysis::{h2_norm_ss, hinf_norm_ss};
use ctsls::constraints::{build_supports, ResponseEnsemble, FEASIBILITY_TOL};
use ctsls::h2::{h2_norm, verification_residual};
use ctsls::hinf::real_realization;
use ctsls::plant::{CostWeights, Plant};
use ctsls::simulate::{internal_stability_check, realize_controller_unchecked};
use serde::Serialize;

pub const CONJUGACY_TOL: f64 = 1e-9;
pub const MASK_TOL: f64 = 1e-12;
/// relative agreement between the closed-form H2 norm and the Lyapunov oracle
pub const H2_RTOL: f64 = 1e-8;
/// relative agreement between a stored certificate level and the Hamiltonian norm
pub const GAMMA_RTOL: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub residual: f64,
    pub conjugacy_error: f64,
    pub mask_violation: Option<f64>,
    pub spectral_abscissa: f64,
    pub internally_stable: bool,
    pub h2_formula: f64,
    pub h2_oracle: f64,
    pub hinf_oracle: f64,
    pub stored_norm: Option<f64>,
    pub stored_gamma: Option<f64>,
    pub failures: Vec<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "residual            {:.3e}", self.residual)?;
        writeln!(f, "conjugacy error     {:.3e}", self.conjugacy_error)?;
        match self.mask_violation {
            Some(v) => writeln!(f, "mask violation      {v:.3e}")?,
            None => writeln!(f, "mask violation      (no distance given)")?,
        }
        writeln!(f, "spectral abscissa   {:.6e} ({})", self.spectral_abscissa, if self.internally_stable { "stable" } else { "UNSTABLE" })?;
        writeln!(f, "H2 formula / oracle {:.10} / {:.10}", self.h2_formula, self.h2_oracle)?;
        write!(f, "Hinf oracle         {:.10}", self.hinf_oracle)?;
        if let Some(g) = self.stored_gamma {
            write!(f, " (stored gamma {g:.10})")?;
        }
        writeln!(f)?;
        if self.passed() {
            write!(f, "verification passed")
        } else {
            for e in &self.failures {
                writeln!(f, "FAILED: {e}")?;
            }
            write!(f, "verification failed")
        }
    }
}

pub fn load_ensemble(path: &Path) -> Result<(ResponseEnsemble, serde_json::Value)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let ens = ResponseEnsemble::from_json_value(&doc).with_context(|| format!("ensemble in {}", path.display()))?;
    Ok((ens, doc))
}

pub fn load_plant(path: &Path) -> Result<Plant> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Plant::from_json(&text).with_context(|| format!("plant in {}", path.display()))
}

pub fn verify(plant: &Plant, ens: &ResponseEnsemble, doc: &serde_json::Value, weights: &CostWeights, distance: Option<usize>) -> Result<VerifyReport> {
    if ens.n() != plant.n() || ens.m() != plant.m() {
        bail!(
            "dimension mismatch: ensemble is {}x{} (m x n) but the plant has n = {}, m = {}",
            ens.m(),
            ens.n(),
            plant.n(),
            plant.m()
        );
    }
    weights.check(plant)?;
    let mut failures = Vec::new();

    let residual = verification_residual(ens, plant)?;
    if !(residual <= FEASIBILITY_TOL) {
        failures.push(format!("residual {residual:.3e} exceeds {FEASIBILITY_TOL:.0e}"));
    }
    let conjugacy_error = ens.conjugacy_error();
    if !(conjugacy_error <= CONJUGACY_TOL) {
        failures.push(format!("conjugacy error {conjugacy_error:.3e} exceeds {CONJUGACY_TOL:.0e}"));
    }
    let mask_violation = match distance {
        Some(d) => {
            let v = ens.mask_violation(&build_supports(plant, d)?);
            if v > MASK_TOL {
                failures.push(format!("entries outside the distance-{d} mask reach {v:.3e}"));
            }
            Some(v)
        }
        None => None,
    };

    let ctrl = realize_controller_unchecked(ens)?;
    let stability = internal_stability_check(plant, &ctrl)?;
    if !stability.stable {
        failures.push(format!("closed loop is not internally stable (abscissa {:.3e})", stability.spectral_abscissa));
    }

    let h2_formula = h2_norm(ens, weights)?;
    let sys = real_realization(ens, &weights.sqrt_block()?)?;
    let h2_oracle = h2_norm_ss(&sys)?;
    if (h2_formula - h2_oracle).abs() > H2_RTOL * h2_oracle.max(1.0) {
        failures.push(format!("H2 formula {h2_formula:.10} disagrees with the Lyapunov value {h2_oracle:.10}"));
    }
    let hinf_oracle = hinf_norm_ss(&sys, 1e-9)?.upper;

    let stored_norm = doc.get("norm").and_then(|v| v.as_f64());
    let stored_gamma = doc.get("gamma").and_then(|v| v.as_f64());
    let objective = doc.get("objective").and_then(|v| v.as_str());
    if let Some(norm) = stored_norm {
        let reference = if objective == Some("hinf") { hinf_oracle } else { h2_oracle };
        if (norm - reference).abs() > GAMMA_RTOL * reference.max(1e-12) {
            failures.push(format!("stored norm {norm:.10} disagrees with the recomputed {reference:.10}"));
        }
    }
    if let Some(g) = stored_gamma {
        if g < hinf_oracle * (1.0 - 1e-9) || g > hinf_oracle * (1.0 + GAMMA_RTOL) {
            failures.push(format!("stored gamma {g:.10} is not within {GAMMA_RTOL:.0e} above the norm {hinf_oracle:.10}"));
        }
    }

    Ok(VerifyReport {
        residual,
        conjugacy_error,
        mask_violation,
        spectral_abscissa: stability.spectral_abscissa,
        internally_stable: stability.stable,
        h2_formula,
        h2_oracle,
        hinf_oracle,
        stored_norm,
        stored_gamma,
        failures,
    })
}
