//! Non-smooth Newton time stepping.
//!
//! Each step detects contacts once, predicts `y = x + h v + h² M⁻¹ f_ext`
//! and runs a fixed number of local-global iterations starting from the
//! previous positions. Every iteration
//! projects the elastic constraints, assembles `b`, linearizes the contact
//! and attachment rows, solves the Schur system
//! `Z (h² Δλ) = h − D A⁻¹ g` with `Z = D A⁻¹ Dᵀ + E` (or `D M⁻¹ Dᵀ + E`
//! for the lite metric) and corrects `x = A⁻¹ (b + h² Jᵀ λ)`.

pub mod dense;

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dense::{solve_dense, ConstraintLinearSolver, DenseSolveReport};

use crate::assembly::{assemble_rhs, predict_state, stack_envs, AssemblyError, MultiEnvSystem, SystemFactorization};
use crate::contact::{
    build_linearization, detect_contacts, eval_bilateral_phi, eval_phi, BlockSource, Collider, ContactConstraint,
    NewtonLinearization,
};
use crate::grasp::BilateralConstraint;
use crate::material::{project_all, ProjectionState, ProjectiveConstraint};
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContactMetric {
    FullImplicit,
    #[default]
    LiteInertia,
}

/// Sign of the Schur right-hand side. `Standard` solves for `h − D A⁻¹ g`;
/// `Reversed` uses `D A⁻¹ g − h` and is kept for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RhsSign {
    #[default]
    Standard,
    Reversed,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("environment count mismatch: {0} models, {1} states")]
    EnvMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub timestep: f64,
    pub local_global_iterations: usize,
    pub linear_solver_iterations: usize,
    /// Cap on contact Newton steps per local-global iteration. The
    /// projections stay fixed while these run.
    pub newton_iterations: usize,
    pub tolerance: f64,
    pub maxforce: f64,
    pub contact_metric: ContactMetric,
    pub constraint_linear_solver: ConstraintLinearSolver,
    /// Base detection distance; the per-step margin adds `h·max|v| + h²|g|`.
    pub contact_margin: f64,
    /// Stop the iteration once residual and position change are below tolerance.
    pub early_exit: bool,
    pub rhs_sign: RhsSign,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            timestep: 0.01,
            local_global_iterations: 5,
            linear_solver_iterations: 10,
            newton_iterations: 8,
            tolerance: 1e-9,
            maxforce: 1e10,
            contact_metric: ContactMetric::LiteInertia,
            constraint_linear_solver: ConstraintLinearSolver::DenseCholesky,
            contact_margin: 2e-3,
            early_exit: false,
            rhs_sign: RhsSign::Standard,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |m: &str| Err(SolverError::InvalidConfig(m.to_string()));
        if !(self.timestep > 0.0) || !self.timestep.is_finite() {
            return bad("timestep must be > 0");
        }
        if self.local_global_iterations < 1 {
            return bad("local_global_iterations must be >= 1");
        }
        if self.newton_iterations < 1 {
            return bad("newton_iterations must be >= 1");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be > 0");
        }
        if !(self.maxforce > 0.0) {
            return bad("maxforce must be > 0");
        }
        if !(self.contact_margin >= 0.0) {
            return bad("contact_margin must be >= 0");
        }
        Ok(())
    }
}

/// Wall time per phase in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PhaseTimings {
    pub detection: f64,
    pub projection: f64,
    pub schur: f64,
    pub solve: f64,
    pub correct: f64,
}

impl PhaseTimings {
    pub fn total(&self) -> f64 {
        self.detection + self.projection + self.schur + self.solve + self.correct
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepDiagnostics {
    pub env: usize,
    pub newton_iterations: usize,
    /// `‖φ‖∞` over contact and attachment rows at the final iterate (m).
    pub max_constraint_residual: f64,
    /// Deepest penetration of any vertex into any collider (m, ≥ 0).
    pub max_penetration: f64,
    pub contacts: usize,
    pub bilaterals: usize,
    pub kinetic_energy: f64,
    pub timings: PhaseTimings,
    pub stagnation: bool,
    pub non_finite: bool,
    pub warnings: Vec<String>,
}

/// Shared, immutable description of one environment.
#[derive(Debug, Clone)]
pub struct EnvModel {
    pub fact: Arc<SystemFactorization>,
    pub constraints: Arc<Vec<ProjectiveConstraint>>,
    pub colliders: Arc<Vec<Collider>>,
    pub gravity: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    /// Contacts of the last completed step with their multipliers.
    pub contacts: Vec<ContactConstraint>,
    pub bilaterals: Vec<BilateralConstraint>,
    /// Set once the state becomes non-finite; flagged environments are frozen.
    pub flagged: bool,
}

impl EnvState {
    pub fn at_rest(x: Vec<Vec3>) -> Self {
        let n = x.len();
        Self { x, v: vec![Vec3::zeros(); n], contacts: Vec::new(), bilaterals: Vec::new(), flagged: false }
    }
}

#[derive(Debug, Clone)]
pub struct MultiEnvState {
    pub system: MultiEnvSystem,
    pub models: Vec<Arc<EnvModel>>,
    pub envs: Vec<EnvState>,
}

impl MultiEnvState {
    pub fn new(models: Vec<Arc<EnvModel>>, envs: Vec<EnvState>) -> Result<Self, SolverError> {
        if models.len() != envs.len() {
            return Err(SolverError::EnvMismatch(models.len(), envs.len()));
        }
        let system = stack_envs(models.iter().map(|m| m.fact.clone()).collect())?;
        Ok(Self { system, models, envs })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }
}

/// Entries `(Â⁻¹)[vᵢ, vⱼ]` for the given vertices.
pub fn inverse_submatrix(fact: &SystemFactorization, vertices: &[usize]) -> DMatrix<f64> {
    let m = vertices.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = fact.inverse_entry(vertices[i], vertices[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Schur complement `Z = D A⁻¹ Ĵᵀ + E` (full) or `D M⁻¹ Ĵᵀ + E` (lite).
/// Without sliding contacts `Ĵ = D` and `Z` is symmetric.
pub fn schur_complement(lin: &NewtonLinearization, fact: &SystemFactorization, metric: ContactMetric) -> DMatrix<f64> {
    let vertices: Vec<usize> = lin.blocks.iter().map(|b| b.vertex).collect();
    let kinv = match metric {
        ContactMetric::FullImplicit => inverse_submatrix(fact, &vertices),
        ContactMetric::LiteInertia => DMatrix::from_fn(vertices.len(), vertices.len(), |i, j| {
            if vertices[i] == vertices[j] {
                1.0 / fact.masses[vertices[i]]
            } else {
                0.0
            }
        }),
    };
    schur_from_scalar_inverse(lin, &kinv)
}

/// Uses `A = Â ⊗ I₃`: the `(i, j)` block of `D A⁻¹ Ĵᵀ` is `(Â⁻¹)[vᵢ, vⱼ] Dᵢ Ĵⱼᵀ`.
fn schur_from_scalar_inverse(lin: &NewtonLinearization, kinv: &DMatrix<f64>) -> DMatrix<f64> {
    let m = lin.blocks.len();
    let d: Vec<_> = lin.blocks.iter().map(|b| b.d_block()).collect();
    let jh: Vec<_> = lin.blocks.iter().map(|b| b.j_active()).collect();
    let mut z = DMatrix::zeros(3 * m, 3 * m);
    for i in 0..m {
        for j in 0..m {
            let k = kinv[(i, j)];
            if k == 0.0 {
                continue;
            }
            let blk = d[i] * jh[j].transpose() * k;
            z.view_mut((3 * i, 3 * j), (3, 3)).copy_from(&blk);
        }
        let mut diag = z.view_mut((3 * i, 3 * i), (3, 3));
        diag += lin.blocks[i].e;
    }
    z
}

/// Groups rows of `Z` into connected components of its nonzero pattern.
fn components(z: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = z.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if z[(i, j)] != 0.0 || z[(j, i)] != 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if slot[r] == usize::MAX {
            slot[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[slot[r]].push(i);
    }
    groups
}

/// Right-hand side `h − D A⁻¹ g` of the Schur system (or its negation).
pub fn schur_rhs(lin: &NewtonLinearization, fact: &SystemFactorization, sign: RhsSign) -> DVector<f64> {
    let ag = fact.apply_inverse(&lin.g);
    let dag = lin.apply_d(&ag);
    match sign {
        RhsSign::Standard => lin.h_vec() - dag,
        RhsSign::Reversed => dag - lin.h_vec(),
    }
}

/// Solves `Z (h² Δλ) = rhs` block by block and returns `Δλ`.
pub fn solve_constraint_increment(
    z: &DMatrix<f64>,
    lin: &NewtonLinearization,
    fact: &SystemFactorization,
    config: &SolverConfig,
) -> (DVector<f64>, DenseSolveReport) {
    let rhs = schur_rhs(lin, fact, config.rhs_sign);
    solve_schur(z, &rhs, fact.h, config)
}

fn solve_schur(z: &DMatrix<f64>, rhs: &DVector<f64>, h: f64, config: &SolverConfig) -> (DVector<f64>, DenseSolveReport) {
    let n = rhs.len();
    let mut out = DVector::zeros(n);
    let mut report = DenseSolveReport { converged: true, ..Default::default() };
    let h2 = h * h;
    for group in components(z) {
        let k = group.len();
        let sub = DMatrix::from_fn(k, k, |a, b| z[(group[a], group[b])]);
        let r = DVector::from_fn(k, |a, _| rhs[group[a]]);
        let (x, rep) =
            solve_dense(&sub, &r, config.constraint_linear_solver, config.linear_solver_iterations, config.tolerance);
        report.merge(&rep);
        for (a, &row) in group.iter().enumerate() {
            out[row] = x[a] / h2;
        }
    }
    (out, report)
}

/// `λ = clamp(λ̃ + Δλ)` componentwise to `±maxforce`.
pub fn update_multipliers(lin: &NewtonLinearization, delta: &DVector<f64>, maxforce: f64) -> Vec<[f64; 3]> {
    lin.lambda_tilde
        .iter()
        .enumerate()
        .map(|(i, l)| std::array::from_fn(|r| (l[r] + delta[3 * i + r]).clamp(-maxforce, maxforce)))
        .collect()
}

/// `x = A⁻¹ (b + h² Jᵀ λ)`.
pub fn correct_positions(
    fact: &SystemFactorization,
    b: &[Vec3],
    lin: &NewtonLinearization,
    lambda: &[[f64; 3]],
    h: f64,
) -> Vec<Vec3> {
    let f = lin.apply_jt(lambda, b.len());
    let rhs: Vec<Vec3> = b.iter().zip(&f).map(|(b, f)| b + f * (h * h)).collect();
    fact.apply_inverse(&rhs)
}

/// Maximum residual over contact and attachment rows.
pub fn constraint_residual(x: &[Vec3], contacts: &[ContactConstraint], bilaterals: &[BilateralConstraint]) -> f64 {
    let c = contacts.iter().map(|c| eval_phi(c, &x[c.vertex], c.lambda).amax());
    let b = bilaterals.iter().map(|b| eval_bilateral_phi(b, &x[b.vertex]).amax());
    c.chain(b).fold(0.0, f64::max)
}

/// Deepest penetration of any vertex into any collider.
pub fn max_penetration(x: &[Vec3], colliders: &[Collider]) -> f64 {
    let mut worst = 0.0f64;
    for p in x {
        for c in colliders {
            worst = worst.max(-c.signed_distance(p).0);
        }
    }
    worst
}

pub fn kinetic_energy(v: &[Vec3], masses: &[f64]) -> f64 {
    v.iter().zip(masses).map(|(v, m)| 0.5 * m * v.norm_squared()).sum()
}

/// Advances one environment by one step.
pub fn step_env(
    model: &EnvModel,
    state: &mut EnvState,
    controls: &[BilateralConstraint],
    config: &SolverConfig,
) -> StepDiagnostics {
    let mut diag = StepDiagnostics::default();
    if state.flagged {
        diag.non_finite = true;
        diag.max_constraint_residual = f64::NAN;
        diag.max_penetration = f64::NAN;
        diag.warnings.push("environment frozen after a non-finite state".into());
        return diag;
    }
    let all_finite = |x: &[Vec3]| x.iter().all(|p| p.iter().all(|c| c.is_finite()));
    if !all_finite(&state.x) || !all_finite(&state.v) {
        state.flagged = true;
        diag.non_finite = true;
        diag.max_constraint_residual = f64::NAN;
        diag.max_penetration = f64::NAN;
        diag.warnings.push("non-finite state; environment frozen".into());
        return diag;
    }
    let fact = &*model.fact;
    let h = fact.h;
    if h != config.timestep {
        diag.warnings.push(format!("solver timestep {} differs from assembled timestep {h}", config.timestep));
    }
    let n = fact.num_vertices();
    let h2 = h * h;

    let t = Instant::now();
    let mut bilaterals: Vec<BilateralConstraint> = controls.to_vec();
    for b in &mut bilaterals {
        if let Some(prev) = state.bilaterals.iter().find(|p| p.effector == b.effector && p.vertex == b.vertex) {
            b.lambda = prev.lambda;
        }
    }
    let mut grasped = vec![false; n];
    for b in &bilaterals {
        grasped[b.vertex] = true;
    }
    let speed = state.v.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let margin = config.contact_margin + h * speed + h2 * model.gravity.norm();
    let mut contacts = detect_contacts(&state.x, &model.colliders, margin, &grasped);
    for c in &mut contacts {
        c.rho = h2 / fact.masses[c.vertex];
        if let Some(prev) = state.contacts.iter().find(|p| p.collider == c.collider && p.vertex == c.vertex) {
            c.lambda = prev.lambda;
        }
    }
    let f_ext: Vec<Vec3> = fact.physical_masses.iter().map(|m| model.gravity * *m).collect();
    let y = predict_state(&state.x, &state.v, &f_ext, &fact.masses, h);
    diag.timings.detection += t.elapsed().as_secs_f64();

    let vertices: Vec<usize> = contacts.iter().map(|c| c.vertex).chain(bilaterals.iter().map(|b| b.vertex)).collect();
    let t = Instant::now();
    let kinv = match config.contact_metric {
        ContactMetric::FullImplicit => inverse_submatrix(fact, &vertices),
        ContactMetric::LiteInertia => DMatrix::from_fn(vertices.len(), vertices.len(), |i, j| {
            if vertices[i] == vertices[j] {
                1.0 / fact.masses[vertices[i]]
            } else {
                0.0
            }
        }),
    };
    diag.timings.schur += t.elapsed().as_secs_f64();

    let mut x = y.clone();
    let mut proj = ProjectionState::for_constraints(&model.constraints);
    for k in 0..config.local_global_iterations {
        diag.newton_iterations = k + 1;
        let t = Instant::now();
        if let Err(e) = project_all(&model.constraints, &x, &mut proj) {
            diag.warnings.push(format!("local projection failed: {e}"));
            diag.non_finite = true;
            break;
        }
        let b = assemble_rhs(fact, &y, &model.constraints, &proj);
        diag.timings.projection += t.elapsed().as_secs_f64();

        let mut x_new = x.clone();
        for _ in 0..config.newton_iterations {
            let t = Instant::now();
            let lin = build_linearization(&contacts, &bilaterals, &x_new, &b, h);
            let z = schur_from_scalar_inverse(&lin, &kinv);
            diag.timings.schur += t.elapsed().as_secs_f64();

            let t = Instant::now();
            let rhs = schur_rhs(&lin, fact, config.rhs_sign);
            let (delta, report) = solve_schur(&z, &rhs, h, config);
            diag.stagnation |= report.stagnated;
            let lambda = update_multipliers(&lin, &delta, config.maxforce);
            for (blk, l) in lin.blocks.iter().zip(&lambda) {
                match blk.source {
                    BlockSource::Contact(i) => contacts[i].lambda = *l,
                    BlockSource::Bilateral(i) => bilaterals[i].lambda = *l,
                }
            }
            diag.timings.solve += t.elapsed().as_secs_f64();

            let t = Instant::now();
            x_new = correct_positions(fact, &b, &lin, &lambda, h);
            diag.timings.correct += t.elapsed().as_secs_f64();
            if lin.rows() == 0 || !all_finite(&x_new) || constraint_residual(&x_new, &contacts, &bilaterals) < config.tolerance {
                break;
            }
        }
        let change = x_new.iter().zip(&x).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        x = x_new;
        if !all_finite(&x) {
            break;
        }
        if config.early_exit
            && change < config.tolerance
            && constraint_residual(&x, &contacts, &bilaterals) < config.tolerance
        {
            break;
        }
    }

    let finite = all_finite(&x);
    let v: Vec<Vec3> = x.iter().zip(&state.x).map(|(a, b)| (a - b) / h).collect();
    diag.max_constraint_residual = constraint_residual(&x, &contacts, &bilaterals);
    diag.max_penetration = max_penetration(&x, &model.colliders);
    diag.contacts = contacts.len();
    diag.bilaterals = bilaterals.len();
    diag.kinetic_energy = kinetic_energy(&v, &fact.physical_masses);
    if !finite || diag.non_finite {
        diag.non_finite = true;
        diag.warnings.push("non-finite state; environment frozen".into());
        state.flagged = true;
    }
    if diag.stagnation {
        diag.warnings.push("constraint linear solver stagnated".into());
    }
    state.x = x;
    state.v = v;
    state.contacts = contacts;
    state.bilaterals = bilaterals;
    diag
}

/// Advances every environment by one step. `controls[e]` holds the
/// attachments of environment `e`; missing entries mean no attachments.
/// Environments are processed in parallel and independently.
pub fn step(state: &mut MultiEnvState, config: &SolverConfig, controls: &[Vec<BilateralConstraint>]) -> Vec<StepDiagnostics> {
    let empty: Vec<BilateralConstraint> = Vec::new();
    let models = &state.models;
    state
        .envs
        .par_iter_mut()
        .enumerate()
        .map(|(e, env)| {
            let ctl = controls.get(e).unwrap_or(&empty);
            let mut d = step_env(&models[e], env, ctl, config);
            d.env = e;
            d
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct DiagnosticsRow {
    schema_version: u32,
    step: usize,
    env: usize,
    iterations: usize,
    residual: f64,
    penetration: f64,
    contacts: usize,
    bilaterals: usize,
    kinetic_energy: f64,
    t_detection: f64,
    t_projection: f64,
    t_schur: f64,
    t_solve: f64,
    t_correct: f64,
    stagnation: bool,
    non_finite: bool,
}

pub const DIAGNOSTICS_SCHEMA_VERSION: u32 = 1;

/// Writes `(step, diagnostics)` records as CSV.
pub fn write_diagnostics_csv<W: Write>(out: W, records: &[(usize, StepDiagnostics)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for (step, d) in records {
        w.serialize(DiagnosticsRow {
            schema_version: DIAGNOSTICS_SCHEMA_VERSION,
            step: *step,
            env: d.env,
            iterations: d.newton_iterations,
            residual: d.max_constraint_residual,
            penetration: d.max_penetration,
            contacts: d.contacts,
            bilaterals: d.bilaterals,
            kinetic_energy: d.kinetic_energy,
            t_detection: d.timings.detection,
            t_projection: d.timings.projection,
            t_schur: d.timings.schur,
            t_solve: d.timings.solve,
            t_correct: d.timings.correct,
            stagnation: d.stagnation,
            non_finite: d.non_finite,
        })?;
    }
    w.flush()?;
    Ok(())
}
