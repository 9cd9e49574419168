//! Desk-scale experiments: friction threshold sweeps on an incline, the
//! multi-environment throughput table and the fold-parameter ablation grid.
//!
//! Each experiment returns plain rows that serialize to CSV with a fixed
//! column order (the field order of the row type).

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::mesh::Vec3;
use crate::scenario::{incline_normal, incline_scenario, run_scenario, towel_fold_with, tshirt_fold_with, RunOptions, Scenario, ScenarioError};
use crate::scene::{initialize, SceneConfig, SceneError};

/// Displacement below which a patch counts as sticking (m).
pub const STICK_THRESHOLD: f64 = 1e-4;
/// Displacement above which a patch counts as sliding (m).
pub const SLIP_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrictionRow {
    pub theta_deg: f64,
    pub mu: f64,
    /// Largest vertex displacement after the run (m).
    pub displacement: f64,
    pub stick: bool,
}

fn max_displacement(a: &[Vec3], b: &[Vec3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max)
}

/// Places the incline patch on a `theta`-radian slope for every `mu` and
/// reports how far it moved after `steps` steps.
pub fn friction_sweep(theta: f64, mus: &[f64], steps: usize) -> Result<Vec<FrictionRow>, ScenarioError> {
    mus.iter()
        .map(|&mu| {
            let sc = incline_scenario(theta, mu, steps);
            let out = run_scenario(&sc, &RunOptions::envs(1))?;
            let x = out.session.get_state(0)?.positions;
            let displacement = max_displacement(&x, &out.session.template.rest_positions);
            Ok(FrictionRow { theta_deg: theta.to_degrees(), mu, displacement, stick: displacement < STICK_THRESHOLD })
        })
        .collect()
}

/// `n + 1` friction coefficients evenly spaced over `[lo, hi]`.
pub fn mu_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Smallest sticking and largest sliding coefficient in a sweep, if both
/// sides are present. The threshold lies between them.
pub fn stick_slip_bracket(rows: &[FrictionRow]) -> Option<(f64, f64)> {
    let slip = rows.iter().filter(|r| r.displacement > SLIP_THRESHOLD).map(|r| r.mu).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let stick = rows.iter().filter(|r| r.stick).map(|r| r.mu).fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
    Some((slip?, stick?))
}

/// Downhill acceleration of the patch on a frictionless incline, from the
/// mean velocity after `steps` steps. Implicit Euler under a constant force
/// gives `v_n = n h a` exactly.
pub fn frictionless_acceleration(theta: f64, steps: usize) -> Result<f64, ScenarioError> {
    let sc = incline_scenario(theta, 0.0, steps);
    let out = run_scenario(&sc, &RunOptions::envs(1))?;
    let v = out.session.get_state(0)?.velocities;
    let mean = v.iter().sum::<Vec3>() / v.len() as f64;
    let n = incline_normal(theta);
    let downhill = (Vec3::new(0.0, -1.0, 0.0) - n * (-n.y)).normalize();
    Ok(mean.dot(&downhill) / (steps as f64 * sc.config.timestep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputRow {
    pub n_envs: usize,
    pub ms_per_step: f64,
    /// `ms_per_step` relative to the first row.
    pub ratio: f64,
}

/// Mean wall time per step for each environment count after `warmup`
/// untimed steps. The first entry is the reference for the ratios.
pub fn run_throughput_benchmark(
    config: &SceneConfig,
    n_envs_list: &[usize],
    warmup: usize,
    steps: usize,
) -> Result<Vec<ThroughputRow>, SceneError> {
    let mut rows: Vec<ThroughputRow> = Vec::new();
    for &n in n_envs_list {
        let mut session = initialize(config.clone(), n.max(1))?;
        for _ in 0..warmup {
            session.step();
        }
        let t = Instant::now();
        for _ in 0..steps.max(1) {
            session.step();
        }
        let ms = t.elapsed().as_secs_f64() * 1e3 / steps.max(1) as f64;
        let base = rows.first().map_or(ms, |r| r.ms_per_step);
        rows.push(ThroughputRow { n_envs: n, ms_per_step: ms, ratio: ms / base });
    }
    Ok(rows)
}

/// Which fold scenario an ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldTask {
    Towel,
    Tshirt,
}

impl FoldTask {
    pub fn scenario(self, bending: f64, speed: f64) -> Scenario {
        match self {
            FoldTask::Towel => towel_fold_with(bending, speed),
            FoldTask::Tshirt => tshirt_fold_with(bending, speed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub task: FoldTask,
    pub speed: f64,
    pub bending: f64,
    pub local_global_iterations: usize,
    pub linear_solver_iterations: usize,
    pub overlap: f64,
    pub tip_distance: f64,
    pub peak_kinetic_energy: f64,
    /// Deepest penetration seen during the run (m).
    pub max_penetration: f64,
    pub max_abs_position: f64,
    pub finite: bool,
}

/// Runs the fold scenario for every (speed, bending, iterations) cell.
pub fn ablate(task: FoldTask, speeds: &[f64], bendings: &[f64], iterations: &[(usize, usize)]) -> Result<Vec<AblationCell>, ScenarioError> {
    let mut cells = Vec::new();
    for &speed in speeds {
        for &bending in bendings {
            for &(lg, ls) in iterations {
                let sc = task.scenario(bending, speed);
                let opts = RunOptions { iterations: Some((lg, ls)), ..RunOptions::envs(1) };
                let out = run_scenario(&sc, &opts)?;
                let x = out.session.get_state(0)?.positions;
                let max_abs_position = x.iter().map(|p| p.amax()).fold(0.0, f64::max);
                let finite = !out.non_finite() && max_abs_position.is_finite();
                let max_penetration = out.diagnostics.iter().map(|(_, d)| d.max_penetration).fold(0.0, f64::max);
                let fold = out.fold.as_ref().and_then(|f| f.first().copied());
                cells.push(AblationCell {
                    task,
                    speed,
                    bending,
                    local_global_iterations: lg,
                    linear_solver_iterations: ls,
                    overlap: fold.map_or(f64::NAN, |f| f.overlap),
                    tip_distance: fold.map_or(f64::NAN, |f| f.tip_distance),
                    peak_kinetic_energy: out.peak_kinetic_energy[0],
                    max_penetration,
                    max_abs_position,
                    finite,
                });
            }
        }
    }
    Ok(cells)
}

/// Serializes rows as CSV with a header line.
pub fn write_rows_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
