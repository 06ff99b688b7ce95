//! Sweep execution: one synthesis per `(K, d)` cell, normalized against a shared baseline.

use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ctsls::analysis::lqr_baseline;
use ctsls::constraints::build_supports;
use ctsls::h2::{synth_h2, Objective, SynthesisResult};
use ctsls::hinf::{hinf_baseline, synth_hinf};
use ctsls::linalg::RVec;
use ctsls::plant::{is_stabilizable, CostWeights, Plant};
use ctsls::simulate::{internal_stability_check, reachable_states, realize_controller, simulate_closed_loop, Disturbance};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{objective_label, Cell, ExperimentConfig};

pub const CSV_HEADER: [&str; 10] =
    ["objective", "K", "d", "norm", "baseline", "normalized_cost", "residual", "gamma", "solve_ms", "status"];

#[derive(Clone, Debug)]
pub struct Row {
    pub objective: Objective,
    pub cell: Cell,
    pub norm: Option<f64>,
    pub baseline: f64,
    pub residual: Option<f64>,
    pub gamma: Option<f64>,
    pub solve_ms: Option<f64>,
    pub status: String,
}

impl Row {
    pub fn normalized_cost(&self) -> Option<f64> {
        self.norm.map(|n| n / self.baseline)
    }

    fn record(&self, timing: bool) -> Vec<String> {
        let num = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        vec![
            objective_label(self.objective).to_string(),
            self.cell.k.to_string(),
            self.cell.d_label(),
            num(self.norm),
            format!("{:?}", self.baseline),
            num(self.normalized_cost()),
            num(self.residual),
            num(self.gamma),
            if timing { num(self.solve_ms) } else { String::new() },
            self.status.clone(),
        ]
    }
}

/// What to write besides the summary table.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub csv: bool,
    pub runs: bool,
    pub sims: bool,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<(Plant, CostWeights)> {
    let plant = cfg.build_plant()?;
    let weights = cfg.build_weights(&plant);
    if !is_stabilizable(&plant) {
        bail!("plant is not stabilizable: some unstable mode is not reachable from the inputs");
    }
    Ok((plant, weights))
}

pub fn baseline(cfg: &ExperimentConfig, plant: &Plant, weights: &CostWeights) -> Result<f64> {
    match cfg.objective {
        Objective::H2 => Ok(lqr_baseline(plant, weights).context("LQR baseline")?.1),
        Objective::Hinf => {
            let b = hinf_baseline(plant, weights, &cfg.tolerances.hinf_options()).context("H-infinity baseline")?;
            if let Some(gap) = b.riccati_gap() {
                if gap > 0.01 {
                    eprintln!("note: centralized baseline sits {:.2}% above the Riccati level", gap * 100.0);
                }
            }
            Ok(b.gamma)
        }
    }
}

fn synthesize(cfg: &ExperimentConfig, plant: &Plant, weights: &CostWeights, cell: Cell) -> Result<SynthesisResult> {
    let poles = cfg.pole_set(cell.k)?;
    let mask = cell.d.map(|d| build_supports(plant, d)).transpose()?;
    let res = match cfg.objective {
        Objective::H2 => synth_h2(plant, weights, &poles, mask.as_ref())?,
        Objective::Hinf => synth_hinf(plant, weights, &poles, mask.as_ref(), &cfg.tolerances.hinf_options())?,
    };
    Ok(res)
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, cell: Cell, res: &SynthesisResult, baseline: f64) -> Result<()> {
    let mut v = res.to_json();
    v["K"] = json!(cell.k);
    v["d"] = json!(cell.d);
    v["baseline"] = json!(baseline);
    v["normalized_cost"] = json!(res.norm / baseline);
    if !cfg.record_timing {
        v["solve_ms"] = serde_json::Value::Null;
    }
    let path = dir.join("runs").join(format!("{}.json", cell.tag(cfg.objective)));
    fs::write(&path, serde_json::to_string_pretty(&v)?).with_context(|| format!("writing {}", path.display()))
}

fn write_sim(dir: &Path, cfg: &ExperimentConfig, plant: &Plant, cell: Cell, res: &SynthesisResult) -> Result<()> {
    let Some(spec) = &cfg.simulate else { return Ok(()) };
    if spec.state > plant.n() {
        bail!("simulate.state {} exceeds the plant order {}", spec.state, plant.n());
    }
    let ctrl = realize_controller(plant, &res.ensemble)?;
    let stability = internal_stability_check(plant, &ctrl)?;
    let mut x0 = RVec::zeros(plant.n());
    x0[spec.state - 1] = 1.0;
    let sim = simulate_closed_loop(plant, &ctrl, &RVec::zeros(plant.n()), &Disturbance::Impulse(x0.clone()), spec.t_end, spec.dt)?;
    let allowed = reachable_states(&res.ensemble, &x0);
    let tag = cell.tag(cfg.objective);
    let sims = dir.join("sims");
    fs::write(sims.join(format!("{tag}.csv")), sim.to_csv())?;
    let summary = json!({
        "K": cell.k,
        "d": cell.d,
        "disturbed_state": spec.state,
        "controller_order": ctrl.order(),
        "stability": stability,
        "unstable_trajectory": sim.unstable,
        "summary": sim.summary(&allowed),
        "subsystem_peaks": sim.subsystem_peaks,
    });
    fs::write(sims.join(format!("{tag}.json")), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn run_cell(cfg: &ExperimentConfig, plant: &Plant, weights: &CostWeights, cell: Cell, baseline: f64, dir: &Path, out: Outputs) -> Row {
    let t0 = Instant::now();
    let mut row = Row {
        objective: cfg.objective,
        cell,
        norm: None,
        baseline,
        residual: None,
        gamma: None,
        solve_ms: None,
        status: "ok".into(),
    };
    match synthesize(cfg, plant, weights, cell) {
        Ok(res) => {
            row.norm = Some(res.norm);
            row.residual = Some(res.residual);
            row.gamma = res.gamma;
            row.solve_ms = Some(res.solve_ms);
            let written = (|| -> Result<()> {
                if out.runs {
                    write_run(dir, cfg, cell, &res, baseline)?;
                }
                if out.sims {
                    write_sim(dir, cfg, plant, cell, &res)?;
                }
                Ok(())
            })();
            if let Err(e) = written {
                row.status = format!("output error: {e:#}");
            }
        }
        Err(e) => {
            row.solve_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            row.status = format!("error: {e:#}");
        }
    }
    row
}

fn worker_count() -> Result<usize> {
    match std::env::var("CTSLS_WORKERS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| anyhow!("CTSLS_WORKERS must be a positive integer, got {v:?}"))?;
            Ok(n.max(1))
        }
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs every cell of the sweep and writes the requested outputs below `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path, out: Outputs) -> Result<Vec<Row>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let cells = cfg.cells();
    if cells.is_empty() {
        if out.csv {
            write_csv(&dir.join("results.csv"), &[], cfg.record_timing)?;
        }
        return Ok(Vec::new());
    }
    let (plant, weights) = prepare(cfg)?;
    if out.runs {
        fs::create_dir_all(dir.join("runs"))?;
        fs::write(dir.join("plant.json"), plant.to_json())?;
    }
    if out.sims {
        if cfg.simulate.is_none() {
            bail!("the config has no simulate section");
        }
        fs::create_dir_all(dir.join("sims"))?;
    }
    let base = baseline(cfg, &plant, &weights)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(worker_count()?).build()?;
    let mut rows: Vec<Row> =
        pool.install(|| cells.par_iter().map(|&c| run_cell(cfg, &plant, &weights, c, base, dir, out)).collect());
    rows.sort_by_key(|r| (objective_label(r.objective), r.cell.k, r.cell.d.is_none(), r.cell.d));
    if out.csv {
        write_csv(&dir.join("results.csv"), &rows, cfg.record_timing)?;
    }
    Ok(rows)
}

pub fn write_csv(path: &Path, rows: &[Row], timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(r.record(timing))?;
    }
    w.flush()?;
    Ok(())
}

pub fn print_rows(rows: &[Row]) {
    println!("{:<5} {:>3} {:>4} {:>14} {:>10} {:>10}  status", "obj", "K", "d", "norm", "norm/base", "residual");
    for r in rows {
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$e}"));
        println!(
            "{:<5} {:>3} {:>4} {:>14} {:>10} {:>10}  {}",
            objective_label(r.objective),
            r.cell.k,
            r.cell.d_label(),
            r.norm.map_or("-".into(), |x| format!("{x:.8}")),
            r.normalized_cost().map_or("-".into(), |x| format!("{x:.5}")),
            f(r.residual, 2),
            r.status
        );
    }
}
