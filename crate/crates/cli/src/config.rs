//! Experiment configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctsls::h2::Objective;
use ctsls::hinf::{HinfMethod, HinfOptions};
use ctsls::plant::{make_chain, make_grid, CostWeights, GridParams, Plant};
use ctsls::poles::{spiral_poles_with_m, PoleSet};
use ctsls::sdp::SdpSettings;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    Chain {
        n: usize,
        a_diag: f64,
        a_off: f64,
        b_diag: f64,
    },
    /// Swing-equation lattice; `randomize` draws per-bus parameters from the config seed.
    Grid {
        rows: usize,
        cols: usize,
        #[serde(default = "one")]
        inertia: f64,
        #[serde(default = "one")]
        damping: f64,
        #[serde(default = "one")]
        coupling: f64,
        #[serde(default)]
        randomize: bool,
    },
    /// Plant JSON document, relative paths resolved against the config file.
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// `Q = q I`, `R = r I`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub q: f64,
    pub r: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub hinf_method: HinfMethod,
    pub joint_max_states: usize,
    pub exchange_tol: f64,
    pub max_rounds: usize,
    pub cuts_per_round: usize,
    pub sdp_gap_tol: f64,
    pub sdp_feas_tol: f64,
    pub sdp_max_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        let h = HinfOptions::default();
        Tolerances {
            hinf_method: h.method,
            joint_max_states: h.joint_max_states,
            exchange_tol: h.exchange_tol,
            max_rounds: h.max_rounds,
            cuts_per_round: h.cuts_per_round,
            sdp_gap_tol: h.sdp.gap_tol,
            sdp_feas_tol: h.sdp.feas_tol,
            sdp_max_iter: h.sdp.max_iter,
        }
    }
}

impl Tolerances {
    pub fn hinf_options(&self) -> HinfOptions {
        HinfOptions {
            method: self.hinf_method,
            joint_max_states: self.joint_max_states,
            exchange_tol: self.exchange_tol,
            max_rounds: self.max_rounds,
            cuts_per_round: self.cuts_per_round,
            sdp: SdpSettings {
                gap_tol: self.sdp_gap_tol,
                feas_tol: self.sdp_feas_tol,
                max_iter: self.sdp_max_iter,
                ..SdpSettings::default()
            },
        }
    }
}

/// Disturbance experiment: unit impulse into `state` (1-based), simulated on `[0, t_end]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub state: usize,
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub plant: PlantSpec,
    pub weights: WeightSpec,
    pub objective: Objective,
    /// pole counts `K`
    #[serde(default)]
    pub poles: Vec<usize>,
    /// communication distances `d`
    #[serde(default)]
    pub distances: Vec<usize>,
    /// also run the unmasked design for every `K`
    #[serde(default)]
    pub centralized: bool,
    /// spiral radius normalization; defaults to `K`
    #[serde(default)]
    pub spiral_m: Option<f64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub simulate: Option<SimulateSpec>,
    #[serde(default)]
    pub seed: u64,
    /// write solve times; turn off for byte-reproducible outputs
    #[serde(default = "yes")]
    pub record_timing: bool,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

/// One `(K, d)` cell; `d = None` is the centralized design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub k: usize,
    pub d: Option<usize>,
}

impl Cell {
    pub fn d_label(&self) -> String {
        self.d.map_or("inf".to_string(), |d| d.to_string())
    }

    pub fn tag(&self, objective: Objective) -> String {
        format!("{}_K{}_d{}", objective_label(objective), self.k, self.d_label())
    }
}

pub fn objective_label(o: Objective) -> &'static str {
    match o {
        Objective::H2 => "h2",
        Objective::Hinf => "hinf",
    }
}

impl ExperimentConfig {
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).context("invalid experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_str(&text).with_context(|| format!("in {}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.poles.iter().find(|&&k| k < 2 || k % 2 != 0) {
            bail!("pole counts must be even and at least 2, got {k}");
        }
        if self.distances.contains(&0) {
            bail!("communication distances must be at least 1");
        }
        if !(self.weights.q >= 0.0) || !(self.weights.r > 0.0) {
            bail!("weights need q >= 0 and r > 0");
        }
        if let Some(s) = &self.simulate {
            if s.state == 0 || !(s.dt > 0.0) || !(s.t_end > 0.0) {
                bail!("simulate needs a 1-based state, dt > 0 and t_end > 0");
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &k in &self.poles {
            for &d in &self.distances {
                cells.push(Cell { k, d: Some(d) });
            }
            if self.centralized {
                cells.push(Cell { k, d: None });
            }
        }
        cells.sort_by_key(|c| (c.k, c.d.is_none(), c.d));
        cells.dedup();
        cells
    }

    pub fn build_plant(&self) -> Result<Plant> {
        let plant = match &self.plant {
            PlantSpec::Chain { n, a_diag, a_off, b_diag } => make_chain(*n, *a_diag, *a_off, *b_diag)?,
            PlantSpec::Grid { rows, cols, inertia, damping, coupling, randomize } => {
                let params = if *randomize {
                    GridParams::randomized(*rows, *cols, self.seed)
                } else {
                    GridParams::uniform(*rows, *cols, *inertia, *damping, *coupling)
                };
                make_grid(&params)?
            }
            PlantSpec::File { path } => {
                let full = match &self.base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                let text = std::fs::read_to_string(&full).with_context(|| format!("reading plant {}", full.display()))?;
                Plant::from_json(&text)?
            }
        };
        Ok(plant)
    }

    pub fn build_weights(&self, plant: &Plant) -> CostWeights {
        CostWeights::identity(plant.n(), plant.m(), self.weights.q, self.weights.r)
    }

    pub fn pole_set(&self, k: usize) -> Result<PoleSet> {
        Ok(spiral_poles_with_m(k, self.spiral_m.unwrap_or(k as f64))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHAIN: &str = r#"{
        "plant": {"kind": "chain", "n": 11, "a_diag": 0.6, "a_off": 0.4, "b_diag": 1.0},
        "weights": {"q": 1.0, "r": 10.0},
        "objective": "h2",
        "poles": [4, 2],
        "distances": [2],
        "centralized": true
    }"#;

    #[test]
    fn parses_and_orders_cells() {
        let cfg = ExperimentConfig::from_str(CHAIN).unwrap();
        let cells: Vec<(usize, String)> = cfg.cells().iter().map(|c| (c.k, c.d_label())).collect();
        assert_eq!(cells, vec![(2, "2".into()), (2, "inf".into()), (4, "2".into()), (4, "inf".into())]);
        assert_eq!(cfg.build_plant().unwrap().n(), 11);
        assert!(cfg.record_timing);
    }

    #[test]
    fn rejects_odd_pole_counts_and_zero_distance() {
        assert!(ExperimentConfig::from_str(&CHAIN.replace("[4, 2]", "[3]")).is_err());
        assert!(ExperimentConfig::from_str(&CHAIN.replace("\"distances\": [2]", "\"distances\": [0]")).is_err());
        assert!(ExperimentConfig::from_str(&CHAIN.replace("\"h2\"", "\"h3\"")).is_err());
    }

    #[test]
    fn tolerances_map_onto_solver_options() {
        let cfg = ExperimentConfig::from_str(&CHAIN.replace(
            "\"centralized\": true",
            "\"centralized\": true, \"tolerances\": {\"exchange_tol\": 1e-4, \"hinf_method\": \"frequency_cut\"}",
        ))
        .unwrap();
        let o = cfg.tolerances.hinf_options();
        assert_eq!(o.exchange_tol, 1e-4);
        assert_eq!(o.method, HinfMethod::FrequencyCut);
        assert_eq!(o.max_rounds, HinfOptions::default().max_rounds);
    }
}
