//! Scene and asset configuration, environment construction and the
//! multi-environment session.
//!
//! Scene files follow this layout (all keys except `timestep` and
//! `objects` are optional):
//!
//! ```json
//! {
//!   "timestep": 0.01,
//!   "gravity": [0, -9.81, 0],
//!   "linearsolver": { "type": "SPARSE_INVERSE_CUDA" },
//!   "constraintsolver": { "type": "LiteNonSmoothNewton_CUDA", "maxforce": 1e10,
//!                         "iterations": 10, "tolerance": 1e-9 },
//!   "planecollisions": [ { "point": [0, 0, 0], "normal": [0, 1, 0], "mu": 0.5 } ],
//!   "objects": { "cloth": "cloth.json" }
//! }
//! ```
//!
//! `constraintsolver.iterations` is the linear-solver iteration cap. The
//! local-global iteration count, the dense solver and the detection margin
//! are set with the optional `local_global_iterations`, `linear_solver`,
//! `contact_metric` and `contact_margin` keys. `boxcollisions` adds
//! axis-aligned box obstacles.
//!
//! Asset `mesh` entries are OBJ paths relative to the asset file, or one of
//! the procedural generators `grid:NX,NY,SIZE`,
//! `tshirt:CELLS,SLEEVE_ROWS,BODY_COLS,SIZE` and `tetbox:NX,NY,NZ,EX,EY,EZ`.
//! OBJ tetrahedral meshes name their element sidecar with `tets`. Assets may
//! list `pinned_vertices`.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembly::{AssemblyError, SystemFactorization};
use crate::contact::{BoxCollider, Collider, ContactConstraint, PlaneCollider};
use crate::grasp::{EffectorRegistry, GraspError};
use crate::material::{build_constraints, MaterialError, MaterialParams, ProjectiveConstraint};
use crate::mesh::{
    apply_transform, load_obj, load_tet_mesh, make_grid_cloth, make_tet_box, make_tshirt_cloth, DeformableMesh,
    ElementType, MeshError, RigidTransform, Vec3,
};
use crate::solver::{
    step, ConstraintLinearSolver, ContactMetric, EnvModel, EnvState, MultiEnvState, SolverConfig, SolverError,
    StepDiagnostics,
};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("cannot parse {path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("unknown solver type '{0}'")]
    UnknownSolverType(String),
    #[error("asset not found: {0}")]
    MissingAsset(PathBuf),
    #[error("object '{object}': {source}")]
    Mesh {
        object: String,
        #[source]
        source: MeshError,
    },
    #[error("object '{object}': {source}")]
    Material {
        object: String,
        #[source]
        source: MaterialError,
    },
    #[error("environment {env}: {source}")]
    Assembly {
        env: usize,
        #[source]
        source: AssemblyError,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("environment {env} out of range ({n_envs} environments)")]
    BadEnvId { env: usize, n_envs: usize },
    #[error("environment {env}: {source}")]
    Grasp {
        env: usize,
        #[source]
        source: GraspError,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn default_gravity() -> [f64; 3] {
    [0.0, -9.81, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSolverConfig {
    #[serde(rename = "type")]
    pub kind: String,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        Self { kind: "SPARSE_INVERSE".into() }
    }
}

fn default_solver_type() -> String {
    "LiteNonSmoothNewton".into()
}
fn default_maxforce() -> f64 {
    1e10
}
fn default_iterations() -> usize {
    10
}
fn default_tolerance() -> f64 {
    1e-9
}
fn default_local_global() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSolverConfig {
    #[serde(rename = "type", default = "default_solver_type")]
    pub kind: String,
    #[serde(default = "default_maxforce")]
    pub maxforce: f64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_local_global")]
    pub local_global_iterations: usize,
    #[serde(default)]
    pub linear_solver: ConstraintLinearSolver,
    /// Overrides the metric implied by `type`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_metric: Option<ContactMetric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contact_margin: Option<f64>,
}

impl Default for ConstraintSolverConfig {
    fn default() -> Self {
        Self {
            kind: default_solver_type(),
            maxforce: default_maxforce(),
            iterations: default_iterations(),
            tolerance: default_tolerance(),
            local_global_iterations: default_local_global(),
            linear_solver: ConstraintLinearSolver::default(),
            contact_metric: None,
            contact_margin: None,
        }
    }
}

/// Accepts `LiteNonSmoothNewton` and `NonSmoothNewton` with or without a
/// `_CUDA` suffix.
pub fn parse_solver_type(kind: &str) -> Result<ContactMetric, SceneError> {
    match kind.strip_suffix("_CUDA").unwrap_or(kind) {
        "LiteNonSmoothNewton" => Ok(ContactMetric::LiteInertia),
        "NonSmoothNewton" => Ok(ContactMetric::FullImplicit),
        _ => Err(SceneError::UnknownSolverType(kind.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetConfig {
    pub mesh: String,
    pub element_type: ElementType,
    #[serde(default)]
    pub transformation: RigidTransform,
    pub mechanical_props: MaterialParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tets: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pinned_vertices: Vec<usize>,
    /// Directory that relative mesh paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AssetConfig {
    pub fn procedural(mesh: &str, element_type: ElementType, props: MaterialParams) -> Self {
        Self {
            mesh: mesh.to_string(),
            element_type,
            transformation: RigidTransform::identity(),
            mechanical_props: props,
            tets: None,
            pinned_vertices: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub timestep: f64,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    #[serde(default)]
    pub linearsolver: LinearSolverConfig,
    #[serde(default)]
    pub constraintsolver: ConstraintSolverConfig,
    #[serde(default)]
    pub planecollisions: Vec<PlaneCollider>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxcollisions: Vec<BoxCollider>,
    pub objects: BTreeMap<String, String>,
    /// Assets resolved from `objects`, keyed by object name.
    #[serde(skip)]
    pub assets: BTreeMap<String, AssetConfig>,
}

fn parse_error(path: &Path, e: serde_json::Error) -> SceneError {
    SceneError::Parse { path: path.to_path_buf(), line: e.line(), column: e.column(), message: e.to_string() }
}

fn read(path: &Path) -> Result<String, SceneError> {
    if !path.exists() {
        return Err(SceneError::MissingAsset(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|source| SceneError::Io { path: path.to_path_buf(), source })
}

impl SceneConfig {
    /// Scene with default solver settings, a ground plane and the given assets.
    pub fn with_assets(timestep: f64, planes: Vec<PlaneCollider>, assets: Vec<(String, AssetConfig)>) -> Self {
        let mut cfg = Self {
            timestep,
            gravity: default_gravity(),
            linearsolver: LinearSolverConfig::default(),
            constraintsolver: ConstraintSolverConfig::default(),
            planecollisions: planes,
            boxcollisions: Vec::new(),
            objects: BTreeMap::new(),
            assets: BTreeMap::new(),
        };
        for (name, asset) in assets {
            cfg.objects.insert(name.clone(), format!("{name}.json"));
            cfg.assets.insert(name, asset);
        }
        cfg
    }

    /// Parses scene JSON without resolving assets.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self, SceneError> {
        let cfg: SceneConfig = serde_json::from_str(text).map_err(|e| parse_error(origin, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.timestep > 0.0) || !self.timestep.is_finite() {
            return Err(SceneError::InvalidConfig(format!("timestep must be > 0, got {}", self.timestep)));
        }
        if self.linearsolver.kind.strip_suffix("_CUDA").unwrap_or(&self.linearsolver.kind) != "SPARSE_INVERSE" {
            return Err(SceneError::UnknownSolverType(self.linearsolver.kind.clone()));
        }
        parse_solver_type(&self.constraintsolver.kind)?;
        for p in &self.planecollisions {
            if p.normalized().is_none() {
                return Err(SceneError::InvalidConfig("plane normal must be non-zero".into()));
            }
        }
        Ok(())
    }

    pub fn solver_config(&self) -> Result<SolverConfig, SceneError> {
        let cs = &self.constraintsolver;
        let metric = match cs.contact_metric {
            Some(m) => m,
            None => parse_solver_type(&cs.kind)?,
        };
        let defaults = SolverConfig::default();
        let cfg = SolverConfig {
            timestep: self.timestep,
            local_global_iterations: cs.local_global_iterations,
            linear_solver_iterations: cs.iterations,
            tolerance: cs.tolerance,
            maxforce: cs.maxforce,
            contact_metric: metric,
            constraint_linear_solver: cs.linear_solver,
            contact_margin: cs.contact_margin.unwrap_or(defaults.contact_margin),
            ..defaults
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn colliders(&self) -> Vec<Collider> {
        let planes = self.planecollisions.iter().filter_map(|p| p.normalized()).map(Collider::Plane);
        planes.chain(self.boxcollisions.iter().copied().map(Collider::Box)).collect()
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }
}

/// Reads a scene file and every asset it references.
pub fn load_config(path: impl AsRef<Path>) -> Result<SceneConfig, SceneError> {
    let path = path.as_ref();
    let mut cfg = SceneConfig::from_json(&read(path)?, path)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for (name, rel) in &cfg.objects {
        let apath = dir.join(rel);
        let mut asset: AssetConfig = serde_json::from_str(&read(&apath)?).map_err(|e| parse_error(&apath, e))?;
        asset.base_dir = apath.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.assets.insert(name.clone(), asset);
    }
    Ok(cfg)
}

fn parse_numbers(name: &str, args: &str) -> Result<Vec<f64>, MeshError> {
    args.split(',')
        .map(|a| a.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| MeshError::InvalidDimension(format!("bad arguments for {name}: '{args}'")))
}

/// Builds the mesh an asset describes, before transformation.
pub fn build_asset_mesh(asset: &AssetConfig) -> Result<DeformableMesh, MeshError> {
    let spec = asset.mesh.as_str();
    let mesh = if let Some(args) = spec.strip_prefix("grid:") {
        let a = parse_numbers("grid", args)?;
        if a.len() != 3 {
            return Err(MeshError::InvalidDimension(format!("grid takes 3 arguments, got {}", a.len())));
        }
        make_grid_cloth(a[0] as usize, a[1] as usize, a[2])?
    } else if let Some(args) = spec.strip_prefix("tshirt:") {
        let a = parse_numbers("tshirt", args)?;
        if a.len() != 4 {
            return Err(MeshError::InvalidDimension(format!("tshirt takes 4 arguments, got {}", a.len())));
        }
        make_tshirt_cloth(a[0] as usize, a[1] as usize, a[2] as usize, a[3])?
    } else if let Some(args) = spec.strip_prefix("tetbox:") {
        let a = parse_numbers("tetbox", args)?;
        if a.len() != 6 {
            return Err(MeshError::InvalidDimension(format!("tetbox takes 6 arguments, got {}", a.len())));
        }
        make_tet_box(a[0] as usize, a[1] as usize, a[2] as usize, [a[3], a[4], a[5]])?
    } else {
        let path = asset.base_dir.join(spec);
        match (&asset.tets, asset.element_type) {
            (Some(t), _) => load_tet_mesh(&path, asset.base_dir.join(t))?,
            (None, ElementType::Tetrahedron) => {
                return Err(MeshError::InvalidDimension("tetrahedral OBJ assets need a 'tets' sidecar".into()))
            }
            (None, ElementType::Triangle) => load_obj(&path)?,
        }
    };
    if mesh.element_type != asset.element_type {
        return Err(MeshError::InvalidDimension(format!(
            "asset declares {:?} but mesh has {:?} elements",
            asset.element_type, mesh.element_type
        )));
    }
    mesh.with_total_mass(asset.mechanical_props.obj_mass)
}

/// One placed object inside an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub name: String,
    pub vertices: Range<usize>,
    /// Boundary triangles in environment vertex numbering.
    pub surface: Vec<[usize; 3]>,
}

/// Meshes, materials and pins of one environment before factorization.
#[derive(Debug, Clone)]
pub struct EnvTemplate {
    pub rest_positions: Vec<Vec3>,
    pub masses: Vec<f64>,
    pub pinned: Vec<bool>,
    pub constraints: Vec<ProjectiveConstraint>,
    pub objects: Vec<SceneObject>,
}

impl EnvTemplate {
    pub fn from_config(cfg: &SceneConfig) -> Result<Self, SceneError> {
        let mut t = EnvTemplate {
            rest_positions: Vec::new(),
            masses: Vec::new(),
            pinned: Vec::new(),
            constraints: Vec::new(),
            objects: Vec::new(),
        };
        for name in cfg.objects.keys() {
            let asset = cfg.assets.get(name).ok_or_else(|| SceneError::MissingAsset(PathBuf::from(&cfg.objects[name])))?;
            let mesh = build_asset_mesh(asset).map_err(|source| SceneError::Mesh { object: name.clone(), source })?;
            let mesh = apply_transform(&mesh, &asset.transformation);
            let mut cons = build_constraints(&mesh, &asset.mechanical_props)
                .map_err(|source| SceneError::Material { object: name.clone(), source })?;
            let off = t.rest_positions.len();
            for c in &mut cons {
                for v in &mut c.vertices {
                    *v += off;
                }
            }
            let n = mesh.num_vertices();
            let mut pinned = vec![false; n];
            for &p in &asset.pinned_vertices {
                if p >= n {
                    return Err(SceneError::InvalidConfig(format!("object '{name}': pinned vertex {p} out of range")));
                }
                pinned[p] = true;
            }
            let surface = mesh.surface_triangles().into_iter().map(|f| f.map(|v| v + off)).collect();
            t.objects.push(SceneObject { name: name.clone(), vertices: off..off + n, surface });
            t.rest_positions.extend(mesh.vertices.iter().copied());
            t.masses.extend(mesh.vertex_masses.iter().copied());
            t.pinned.extend(pinned);
            t.constraints.extend(cons);
        }
        if t.rest_positions.is_empty() {
            return Err(SceneError::InvalidConfig("scene has no objects".into()));
        }
        Ok(t)
    }

    /// Assembles and factors the environment model with material weights scaled by `scale`.
    pub fn build_model(&self, cfg: &SceneConfig, scale: f64, env: usize) -> Result<EnvModel, SceneError> {
        let mut constraints = self.constraints.clone();
        for c in &mut constraints {
            c.weight *= scale;
        }
        let fact = SystemFactorization::new(&self.masses, &self.pinned, &constraints, cfg.timestep)
            .map_err(|source| SceneError::Assembly { env, source })?;
        Ok(EnvModel {
            fact: Arc::new(fact),
            constraints: Arc::new(constraints),
            colliders: Arc::new(cfg.colliders()),
            gravity: cfg.gravity(),
        })
    }
}

/// A control verb addressed to one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verb", rename_all = "lowercase", deny_unknown_fields)]
pub enum ControlCommand {
    Add { effector: String, pose: [f64; 3], size: [f64; 3] },
    Move { effector: String, pose: [f64; 3] },
    Grasp { effector: String },
    Release { effector: String },
}

/// Read-only copy of one environment after the last completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSnapshot {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub contacts: Vec<ContactConstraint>,
    pub lambdas: Vec<[f64; 3]>,
    pub flagged: bool,
}

const DIAGNOSTICS_RING: usize = 1024;

#[derive(Debug, Clone)]
pub struct Session {
    pub config: SceneConfig,
    pub solver: SolverConfig,
    pub template: EnvTemplate,
    pub state: MultiEnvState,
    pub effectors: Vec<EffectorRegistry>,
    pub material_scales: Vec<f64>,
    step_count: usize,
    diagnostics: VecDeque<(usize, Vec<StepDiagnostics>)>,
}

/// Builds a session with `n_envs` identical environments.
pub fn initialize(config: SceneConfig, n_envs: usize) -> Result<Session, SceneError> {
    initialize_with_scales(config, n_envs, None)
}

/// As [`initialize`], with optional per-environment material scale factors
/// in `[0.5, 1.5]` applied to every elastic weight before factorization.
pub fn initialize_with_scales(config: SceneConfig, n_envs: usize, scales: Option<&[f64]>) -> Result<Session, SceneError> {
    if n_envs == 0 {
        return Err(SceneError::InvalidConfig("n_envs must be >= 1".into()));
    }
    config.validate()?;
    let solver = config.solver_config()?;
    let scales: Vec<f64> = match scales {
        Some(s) if s.len() != n_envs => {
            return Err(SceneError::InvalidConfig(format!("{} material scales for {n_envs} environments", s.len())))
        }
        Some(s) => s.to_vec(),
        None => vec![1.0; n_envs],
    };
    if let Some(s) = scales.iter().find(|s| !(0.5..=1.5).contains(*s)) {
        return Err(SceneError::InvalidConfig(format!("material scale {s} outside [0.5, 1.5]")));
    }
    let template = EnvTemplate::from_config(&config)?;
    // Environments with equal scale share one factorization.
    let mut cache: Vec<(f64, Arc<EnvModel>)> = Vec::new();
    let mut models = Vec::with_capacity(n_envs);
    for (e, &s) in scales.iter().enumerate() {
        let model = match cache.iter().find(|(cs, _)| *cs == s) {
            Some((_, m)) => m.clone(),
            None => {
                let m = Arc::new(template.build_model(&config, s, e)?);
                cache.push((s, m.clone()));
                m
            }
        };
        models.push(model);
    }
    let envs = vec![EnvState::at_rest(template.rest_positions.clone()); n_envs];
    let state = MultiEnvState::new(models, envs)?;
    Ok(Session {
        config,
        solver,
        template,
        state,
        effectors: vec![EffectorRegistry::new(); n_envs],
        material_scales: scales,
        step_count: 0,
        diagnostics: VecDeque::new(),
    })
}

impl Session {
    pub fn n_envs(&self) -> usize {
        self.state.n_envs()
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    fn check_env(&self, env: usize) -> Result<(), SceneError> {
        if env >= self.n_envs() {
            return Err(SceneError::BadEnvId { env, n_envs: self.n_envs() });
        }
        Ok(())
    }

    pub fn add_ee(&mut self, env: usize, name: &str, pose: Vec3, size: Vec3) -> Result<(), SceneError> {
        self.check_env(env)?;
        self.effectors[env].add_ee(name, pose, size).map_err(|source| SceneError::Grasp { env, source })?;
        Ok(())
    }

    pub fn move_ee(&mut self, env: usize, name: &str, pose: Vec3) -> Result<(), SceneError> {
        self.check_env(env)?;
        self.effectors[env].move_ee(name, pose).map_err(|source| SceneError::Grasp { env, source })
    }

    pub fn grasp_ee(&mut self, env: usize, name: &str, close: bool) -> Result<usize, SceneError> {
        self.check_env(env)?;
        let x = &self.state.envs[env].x;
        self.effectors[env].grasp_ee(name, close, x).map_err(|source| SceneError::Grasp { env, source })
    }

    pub fn apply(&mut self, env: usize, cmd: &ControlCommand) -> Result<(), SceneError> {
        match cmd {
            ControlCommand::Add { effector, pose, size } => self.add_ee(env, effector, (*pose).into(), (*size).into()),
            ControlCommand::Move { effector, pose } => self.move_ee(env, effector, (*pose).into()),
            ControlCommand::Grasp { effector } => self.grasp_ee(env, effector, true).map(|_| ()),
            ControlCommand::Release { effector } => self.grasp_ee(env, effector, false).map(|_| ()),
        }
    }

    /// Applies `controls[e]` to environment `e` and advances every
    /// environment by one step.
    pub fn session_step(&mut self, controls: &[Vec<ControlCommand>]) -> Result<Vec<StepDiagnostics>, SceneError> {
        if controls.len() > self.n_envs() {
            return Err(SceneError::BadEnvId { env: controls.len() - 1, n_envs: self.n_envs() });
        }
        for (e, cmds) in controls.iter().enumerate() {
            for c in cmds {
                self.apply(e, c)?;
            }
        }
        Ok(self.step())
    }

    /// Advances every environment by one step with the current effector state.
    pub fn step(&mut self) -> Vec<StepDiagnostics> {
        let rows: Vec<_> = self.effectors.iter().map(|r| r.emit_bilateral_rows()).collect();
        let mut diags = step(&mut self.state, &self.solver, &rows);
        for (d, reg) in diags.iter_mut().zip(&mut self.effectors) {
            d.warnings.append(&mut reg.warnings);
        }
        self.step_count += 1;
        self.diagnostics.push_back((self.step_count, diags.clone()));
        if self.diagnostics.len() > DIAGNOSTICS_RING {
            self.diagnostics.pop_front();
        }
        diags
    }

    /// Recent `(step, diagnostics)` records, oldest first.
    pub fn recent_diagnostics(&self) -> impl Iterator<Item = &(usize, Vec<StepDiagnostics>)> {
        self.diagnostics.iter()
    }

    pub fn get_state(&self, env: usize) -> Result<EnvSnapshot, SceneError> {
        self.check_env(env)?;
        let s = &self.state.envs[env];
        Ok(EnvSnapshot {
            positions: s.x.clone(),
            velocities: s.v.clone(),
            contacts: s.contacts.clone(),
            lambdas: s.contacts.iter().map(|c| c.lambda).chain(s.bilaterals.iter().map(|b| b.lambda)).collect(),
            flagged: s.flagged,
        })
    }

    /// Mesh of object `name` in environment `env` at its current positions.
    pub fn object_mesh(&self, env: usize, name: &str) -> Result<DeformableMesh, SceneError> {
        self.check_env(env)?;
        let obj = self
            .template
            .objects
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| SceneError::InvalidConfig(format!("no object '{name}'")))?;
        let asset = &self.config.assets[name];
        let base = build_asset_mesh(asset).map_err(|source| SceneError::Mesh { object: name.to_string(), source })?;
        let mut mesh = apply_transform(&base, &asset.transformation);
        mesh.vertices = self.state.envs[env].x[obj.vertices.clone()].to_vec();
        Ok(mesh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG_SCENE: &str = r#"{
        "timestep": 0.01,
        "gravity": [0, -9.81, 0],
        "linearsolver": { "type": "SPARSE_INVERSE_CUDA" },
        "constraintsolver": {
            "type": "LiteNonSmoothNewton_CUDA",
            "maxforce": 1E+10,
            "iterations": 10,
            "tolerance": 1E-9
        },
        "planecollisions": [ { "point": [0, 0, 0], "normal": [0, 2, 0], "mu": 0.5 } ],
        "objects": { "cloth": "cloth.json" }
    }"#;

    const FIG_ASSET: &str = r#"{
        "mesh": "grid:5,5,0.4",
        "element_type": "TRIANGLE",
        "transformation": { "trans": [0, 0.1, 0], "rotation": [0, 0, 0] },
        "mechanical_props": { "obj_mass": 0.1, "young": 3E+4, "poisson": 0.4, "constitutive": "TRI_ARAP", "bending": 0.2 }
    }"#;

    fn write_scene(dir: &Path, scene: &str) -> PathBuf {
        std::fs::write(dir.join("cloth.json"), FIG_ASSET).unwrap();
        let p = dir.join("scene.json");
        std::fs::write(&p, scene).unwrap();
        p
    }

    #[test]
    fn figure_scene_parses_with_stated_values() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(write_scene(dir.path(), FIG_SCENE)).unwrap();
        assert_eq!(cfg.timestep, 0.01);
        assert_eq!(cfg.gravity, [0.0, -9.81, 0.0]);
        let s = cfg.solver_config().unwrap();
        assert_eq!(s.contact_metric, ContactMetric::LiteInertia);
        assert_eq!(s.linear_solver_iterations, 10);
        assert_eq!(s.tolerance, 1e-9);
        assert_eq!(s.maxforce, 1e10);
        assert_eq!(s.local_global_iterations, 5);
        assert_eq!(cfg.assets["cloth"].mechanical_props.bending, 0.2);
        match cfg.colliders()[0] {
            Collider::Plane(p) => assert_eq!(p.normal, [0.0, 1.0, 0.0]),
            _ => panic!(),
        }
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = SceneConfig::from_json(r#"{"timestep": 0.02, "objects": {}}"#, Path::new("s.json")).unwrap();
        assert_eq!(cfg.gravity, [0.0, -9.81, 0.0]);
        assert_eq!(cfg.constraintsolver.maxforce, 1e10);
        let bad = SceneConfig::from_json(
            r#"{"timestep": 0.02, "objects": {}, "constraintsolver": {"type": "Unknown_XYZ"}}"#,
            Path::new("s.json"),
        );
        assert!(matches!(bad, Err(SceneError::UnknownSolverType(_))));
        let full = SceneConfig::from_json(
            r#"{"timestep": 0.02, "objects": {}, "constraintsolver": {"type": "NonSmoothNewton_CUDA"}}"#,
            Path::new("s.json"),
        )
        .unwrap();
        assert_eq!(full.solver_config().unwrap().contact_metric, ContactMetric::FullImplicit);
        let ls = SceneConfig::from_json(r#"{"timestep": 0.02, "objects": {}, "linearsolver": {"type": "LDLT"}}"#, Path::new("s.json"));
        assert!(matches!(ls, Err(SceneError::UnknownSolverType(_))));
        match SceneConfig::from_json("{\n\"timestep\": 0.02, \"objects\": {}, \"wind\": 3}", Path::new("s.json")) {
            Err(SceneError::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("wind"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_config("/nonexistent/scene.json"), Err(SceneError::MissingAsset(_))));
    }

    #[test]
    fn missing_asset_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.json");
        std::fs::write(&p, r#"{"timestep": 0.01, "objects": {"cloth": "nope.json"}}"#).unwrap();
        assert!(matches!(load_config(&p), Err(SceneError::MissingAsset(_))));
    }

    #[test]
    fn config_round_trip() {
        let cfg = SceneConfig::from_json(FIG_SCENE, Path::new("s.json")).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SceneConfig::from_json(&text, Path::new("s.json")).unwrap(), cfg);
        let asset: AssetConfig = serde_json::from_str(FIG_ASSET).unwrap();
        let again: AssetConfig = serde_json::from_str(&serde_json::to_string(&asset).unwrap()).unwrap();
        assert_eq!(asset, again);
    }

    fn session(n: usize) -> Session {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(write_scene(dir.path(), FIG_SCENE)).unwrap();
        initialize(cfg, n).unwrap()
    }

    #[test]
    fn initial_state_and_env_ids() {
        let s = session(8);
        assert_eq!(s.n_envs(), 8);
        let first = s.get_state(0).unwrap();
        assert!(first.positions.iter().all(|p| (p.y - 0.1).abs() < 1e-15));
        for e in 1..8 {
            assert_eq!(s.get_state(e).unwrap(), first);
        }
        assert!(matches!(s.get_state(8), Err(SceneError::BadEnvId { env: 8, n_envs: 8 })));
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(write_scene(dir.path(), FIG_SCENE)).unwrap();
        assert!(initialize(cfg, 0).is_err());
    }

    #[test]
    fn one_gravity_step_velocity() {
        let mut s = session(1);
        s.step();
        let st = s.get_state(0).unwrap();
        for v in &st.velocities {
            assert!((v.y + 9.81 * 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn controls_in_one_env_leave_others_untouched() {
        let mut a = session(3);
        let mut b = session(3);
        let grab = vec![
            ControlCommand::Add { effector: "left".into(), pose: [-0.2, 0.1, -0.2], size: [0.05; 3] },
            ControlCommand::Grasp { effector: "left".into() },
        ];
        for k in 0..30 {
            let lift = ControlCommand::Move { effector: "left".into(), pose: [-0.2, 0.1 + 0.002 * k as f64, -0.2] };
            let mut ctl = vec![Vec::new(), Vec::new(), Vec::new()];
            if k == 0 {
                ctl[0] = grab.clone();
            } else {
                ctl[0] = vec![lift];
            }
            a.session_step(&ctl).unwrap();
            b.session_step(&[]).unwrap();
        }
        assert_ne!(a.get_state(0).unwrap(), b.get_state(0).unwrap());
        for e in 1..3 {
            assert_eq!(a.get_state(e).unwrap(), b.get_state(e).unwrap());
        }
    }

    #[test]
    fn nan_in_one_env_is_isolated() {
        let mut s = session(3);
        s.state.envs[1].x[3].x = f64::NAN;
        let d = s.step();
        assert!(d[1].non_finite && s.get_state(1).unwrap().flagged);
        assert!(!d[0].non_finite && !d[2].non_finite);
        assert_eq!(s.get_state(0).unwrap(), s.get_state(2).unwrap());
        let d = s.step();
        assert!(d[1].non_finite && !d[0].non_finite);
    }

    #[test]
    fn material_scales_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = load_config(write_scene(dir.path(), FIG_SCENE)).unwrap();
        assert!(initialize_with_scales(cfg.clone(), 2, Some(&[1.0, 2.0])).is_err());
        let s = initialize_with_scales(cfg, 3, Some(&[0.5, 1.0, 0.5])).unwrap();
        assert!(Arc::ptr_eq(&s.state.models[0], &s.state.models[2]));
        assert!(!Arc::ptr_eq(&s.state.models[0], &s.state.models[1]));
    }

    #[test]
    fn procedural_specs() {
        let props = MaterialParams::cloth(0.1);
        let a = AssetConfig::procedural("tshirt:8,3,4,0.6", ElementType::Triangle, props);
        assert!(build_asset_mesh(&a).unwrap().num_vertices() > 0);
        let tet = MaterialParams { constitutive: crate::material::Constitutive::TetArap, ..props };
        let b = AssetConfig::procedural("tetbox:2,1,1,0.2,0.1,0.1", ElementType::Tetrahedron, tet);
        assert_eq!(build_asset_mesh(&b).unwrap().elements.len(), 12);
        let c = AssetConfig::procedural("grid:2,x,1", ElementType::Triangle, props);
        assert!(build_asset_mesh(&c).is_err());
        let d = AssetConfig::procedural("grid:3,3,1", ElementType::Tetrahedron, props);
        assert!(build_asset_mesh(&d).is_err());
    }
}
