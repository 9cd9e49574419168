//! Scripted scenarios: control schedules, built-in desk-scale experiments,
//! fold-quality metrics and the batch runner with exports.
//!
//! A scenario file looks like
//!
//! ```json
//! {
//!   "scene": "towel_scene.json",
//!   "duration": 250,
//!   "controls": [
//!     { "step": 0, "effector": "arm", "verb": "add", "pose": [0.15, 0, 0.15], "size": [0.01, 0.01, 0.01] },
//!     { "step": 1, "effector": "arm", "verb": "grasp" },
//!     { "step": 2, "effector": "arm", "verb": "move", "pose": [0, 0.1, 0], "until": 60 },
//!     { "step": 125, "effector": "arm", "verb": "release" }
//!   ],
//!   "exports": { "obj_every": 50, "depth_every": 0, "csv": true }
//! }
//! ```
//!
//! A `move` with `until` interpolates linearly from the current pose and
//! reaches `pose` when step `until` runs. Events without `env` apply to every
//! environment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::PlaneCollider;
use crate::material::MaterialParams;
use crate::mesh::{export_obj, ElementType, RigidTransform, Vec3};
use crate::render::{augment, depth_to_pointcloud, render_depth, save_pgm, save_xyz, AugmentationConfig, CameraSpec, RenderError};
use crate::scene::{initialize_with_scales, load_config, AssetConfig, ControlCommand, SceneConfig, SceneError, Session};
use crate::solver::{write_diagnostics_csv, ContactMetric, StepDiagnostics};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cannot write {path}: {message}")]
    Export { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Add,
    Move,
    Grasp,
    Release,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlEvent {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub env: Option<usize>,
    pub effector: String,
    pub verb: Verb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub until: Option<usize>,
}

impl ControlEvent {
    pub fn add(step: usize, effector: &str, pose: [f64; 3], size: [f64; 3]) -> Self {
        Self { step, env: None, effector: effector.into(), verb: Verb::Add, pose: Some(pose), size: Some(size), until: None }
    }

    pub fn grasp(step: usize, effector: &str) -> Self {
        Self { step, env: None, effector: effector.into(), verb: Verb::Grasp, pose: None, size: None, until: None }
    }

    pub fn release(step: usize, effector: &str) -> Self {
        Self { step, env: None, effector: effector.into(), verb: Verb::Release, pose: None, size: None, until: None }
    }

    /// Linear move that arrives at `pose` on step `until`.
    pub fn move_to(step: usize, until: usize, effector: &str, pose: [f64; 3]) -> Self {
        Self { step, env: None, effector: effector.into(), verb: Verb::Move, pose: Some(pose), size: None, until: Some(until) }
    }

    /// Half-circle sweep about a horizontal fold axis, split into `segments`
    /// linear moves over `[step, until]`. `pivot` lies on the axis, `out` is
    /// the horizontal unit direction (x, z) from the axis to the start pose.
    pub fn fold_arc(
        step: usize,
        until: usize,
        effector: &str,
        pivot: [f64; 3],
        out: [f64; 2],
        radius: f64,
        segments: usize,
    ) -> Vec<Self> {
        let segments = segments.max(1);
        let span = (until - step + 1) as f64;
        (1..=segments)
            .map(|i| {
                let a = std::f64::consts::PI * i as f64 / segments as f64;
                let pose = [
                    pivot[0] + radius * a.cos() * out[0],
                    pivot[1] + radius * a.sin(),
                    pivot[2] + radius * a.cos() * out[1],
                ];
                let s0 = step + ((i - 1) as f64 * span / segments as f64).round() as usize;
                let s1 = step + (i as f64 * span / segments as f64).round() as usize - 1;
                Self::move_to(s0, s1, effector, pose)
            })
            .collect()
    }

    pub fn for_env(mut self, env: usize) -> Self {
        self.env = Some(env);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSpec {
    /// Export OBJ meshes every N steps; 0 disables.
    pub obj_every: usize,
    /// Render depth images every N steps; 0 disables.
    pub depth_every: usize,
    pub csv: bool,
}

impl Default for ExportSpec {
    fn default() -> Self {
        Self { obj_every: 0, depth_every: 0, csv: true }
    }
}

/// Fold target in the ground (x, z) plane: tips on one side of the fold
/// line should end at their mirror images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldSpec {
    pub object: String,
    pub line_point: [f64; 2],
    pub line_dir: [f64; 2],
    /// Rest (x, z) positions of the tips; the nearest vertex is tracked.
    pub tips: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    /// Scene file, relative to the scenario file.
    pub scene: String,
    pub duration: usize,
    #[serde(default)]
    pub controls: Vec<ControlEvent>,
    #[serde(default)]
    pub exports: ExportSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold: Option<FoldSpec>,
}

/// A scene plus everything needed to run it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub config: SceneConfig,
    pub duration: usize,
    pub controls: Vec<ControlEvent>,
    pub exports: ExportSpec,
    pub camera: Option<CameraSpec>,
    pub augmentation: Option<AugmentationConfig>,
    pub fold: Option<FoldSpec>,
}

impl Scenario {
    fn new(name: &str, config: SceneConfig, duration: usize) -> Self {
        Self {
            name: name.into(),
            config,
            duration,
            controls: Vec::new(),
            exports: ExportSpec::default(),
            camera: None,
            augmentation: None,
            fold: None,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration == 0 {
            return Err(ScenarioError::Invalid("duration must be positive".into()));
        }
        let mut last = 0;
        for (i, e) in self.controls.iter().enumerate() {
            if e.step < last {
                return Err(ScenarioError::Invalid(format!("control {i} at step {} is out of order", e.step)));
            }
            last = e.step;
            if e.step >= self.duration {
                return Err(ScenarioError::Invalid(format!("control {i} at step {} is past the duration", e.step)));
            }
            match e.verb {
                Verb::Add if e.pose.is_none() || e.size.is_none() => {
                    return Err(ScenarioError::Invalid(format!("control {i}: add needs pose and size")))
                }
                Verb::Move if e.pose.is_none() => return Err(ScenarioError::Invalid(format!("control {i}: move needs pose"))),
                _ => {}
            }
            if let Some(u) = e.until {
                if u < e.step || u >= self.duration {
                    return Err(ScenarioError::Invalid(format!("control {i}: until {u} outside [{}, duration)", e.step)));
                }
            }
        }
        if let Some(f) = &self.fold {
            if !self.config.objects.contains_key(&f.object) {
                return Err(ScenarioError::Invalid(format!("fold object '{}' is not in the scene", f.object)));
            }
        }
        Ok(())
    }
}

/// Reads a scenario file and the scene it references.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(SceneError::MissingAsset(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path)
        .map_err(|source| SceneError::Io { path: path.to_path_buf(), source })?;
    let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| SceneError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let config = load_config(dir.join(&spec.scene))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let sc = Scenario {
        name,
        config,
        duration: spec.duration,
        controls: spec.controls,
        exports: spec.exports,
        camera: spec.camera,
        augmentation: spec.augmentation,
        fold: spec.fold,
    };
    sc.validate()?;
    Ok(sc)
}

/// Per-step, per-environment command lists, with interpolated moves expanded.
pub fn compile_schedule(
    controls: &[ControlEvent],
    n_envs: usize,
    duration: usize,
) -> Result<Vec<Vec<Vec<ControlCommand>>>, ScenarioError> {
    let mut out = vec![vec![Vec::new(); n_envs]; duration];
    for env in 0..n_envs {
        let mut poses: BTreeMap<&str, [f64; 3]> = BTreeMap::new();
        // Pending interpolations: effector -> (start step, start pose, end step, end pose).
        let mut moves: BTreeMap<&str, (usize, [f64; 3], usize, [f64; 3])> = BTreeMap::new();
        let mut events = controls.iter().filter(|e| e.env.is_none_or(|x| x == env)).peekable();
        for step in 0..duration {
            while let Some(e) = events.next_if(|e| e.step == step) {
                let name = e.effector.as_str();
                match e.verb {
                    Verb::Add => {
                        let pose = e.pose.expect("validated");
                        poses.insert(name, pose);
                        out[step][env].push(ControlCommand::Add {
                            effector: name.into(),
                            pose,
                            size: e.size.expect("validated"),
                        });
                    }
                    Verb::Move => {
                        let target = e.pose.expect("validated");
                        let until = e.until.unwrap_or(step);
                        let start = *poses.get(name).ok_or_else(|| {
                            ScenarioError::Invalid(format!("step {step}: move of '{name}' before it is added"))
                        })?;
                        moves.insert(name, (step, start, until, target));
                    }
                    Verb::Grasp => out[step][env].push(ControlCommand::Grasp { effector: name.into() }),
                    Verb::Release => out[step][env].push(ControlCommand::Release { effector: name.into() }),
                }
            }
            let mut done = Vec::new();
            for (&name, &(s, a, u, b)) in &moves {
                let t = if u == s { 1.0 } else { (step - s + 1) as f64 / (u - s + 1) as f64 };
                let pose = [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t];
                poses.insert(name, pose);
                out[step][env].push(ControlCommand::Move { effector: name.into(), pose });
                if step >= u {
                    done.push(name);
                }
            }
            for name in done {
                moves.remove(name);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FoldMetrics {
    /// Fraction of the ideal folded footprint covered by the folded region.
    pub overlap: f64,
    /// Mean (x, z) distance from each tip to its mirror target.
    pub tip_distance: f64,
}

fn mirror(p: [f64; 2], o: [f64; 2], d: [f64; 2]) -> [f64; 2] {
    let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let d = [d[0] / n, d[1] / n];
    let r = [p[0] - o[0], p[1] - o[1]];
    let a = r[0] * d[0] + r[1] * d[1];
    [o[0] + 2.0 * a * d[0] - r[0], o[1] + 2.0 * a * d[1] - r[1]]
}

fn side(p: [f64; 2], o: [f64; 2], d: [f64; 2]) -> f64 {
    d[0] * (p[1] - o[1]) - d[1] * (p[0] - o[0])
}

/// Grid cell size used to rasterize footprints.
pub const FOOTPRINT_CELL: f64 = 1e-3;

fn rasterize(tris: &[[[f64; 2]; 3]], origin: [f64; 2], nx: usize, nz: usize) -> Vec<bool> {
    let mut grid = vec![false; nx * nz];
    for t in tris {
        let lo = |k: usize| t.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = |k: usize| t.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        if !(lo(0).is_finite() && lo(1).is_finite() && hi(0).is_finite() && hi(1).is_finite()) {
            continue;
        }
        let i0 = (((lo(0) - origin[0]) / FOOTPRINT_CELL).floor().max(0.0)) as usize;
        let i1 = ((((hi(0) - origin[0]) / FOOTPRINT_CELL).ceil()) as usize).min(nx);
        let j0 = (((lo(1) - origin[1]) / FOOTPRINT_CELL).floor().max(0.0)) as usize;
        let j1 = ((((hi(1) - origin[1]) / FOOTPRINT_CELL).ceil()) as usize).min(nz);
        let edge = |a: [f64; 2], b: [f64; 2], p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let area = edge(t[0], t[1], t[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        for j in j0..j1 {
            for i in i0..i1 {
                let p = [origin[0] + (i as f64 + 0.5) * FOOTPRINT_CELL, origin[1] + (j as f64 + 0.5) * FOOTPRINT_CELL];
                let w = [edge(t[1], t[2], p), edge(t[2], t[0], p), edge(t[0], t[1], p)];
                if w.iter().all(|x| x * area >= 0.0) {
                    grid[j * nx + i] = true;
                }
            }
        }
    }
    grid
}

/// Fold quality of one environment. Triangles whose rest centroid lies on
/// the tips' side of the fold line form the folded region.
pub fn fold_metrics(session: &Session, env: usize, fold: &FoldSpec) -> Result<FoldMetrics, ScenarioError> {
    let obj = session
        .template
        .objects
        .iter()
        .find(|o| o.name == fold.object)
        .ok_or_else(|| ScenarioError::Invalid(format!("no object '{}'", fold.object)))?;
    let rest = &session.template.rest_positions;
    let x = &session.get_state(env)?.positions;
    let xz = |p: &Vec3| [p.x, p.z];
    let (o, d) = (fold.line_point, fold.line_dir);
    let tip_side = fold.tips.first().map(|t| side(*t, o, d).signum()).unwrap_or(1.0);

    let mut folded = Vec::new();
    let mut target = Vec::new();
    for f in &obj.surface {
        let c = [0, 1, 2].map(|k| xz(&rest[f[k]]));
        let centroid = [(c[0][0] + c[1][0] + c[2][0]) / 3.0, (c[0][1] + c[1][1] + c[2][1]) / 3.0];
        if side(centroid, o, d) * tip_side > 0.0 {
            target.push(c.map(|p| mirror(p, o, d)));
            folded.push([0, 1, 2].map(|k| xz(&x[f[k]])));
        }
    }
    // Only cells inside the target's bounding box can count, so the raster
    // stays small even when the simulated cloth has wandered far away.
    let overlap = if target.is_empty() {
        0.0
    } else {
        let pts = target.iter().flatten();
        let min = pts.clone().fold([f64::INFINITY; 2], |m, p| [m[0].min(p[0]), m[1].min(p[1])]);
        let max = pts.fold([f64::NEG_INFINITY; 2], |m, p| [m[0].max(p[0]), m[1].max(p[1])]);
        let nx = ((max[0] - min[0]) / FOOTPRINT_CELL).ceil() as usize + 1;
        let nz = ((max[1] - min[1]) / FOOTPRINT_CELL).ceil() as usize + 1;
        let a = rasterize(&folded, min, nx, nz);
        let b = rasterize(&target, min, nx, nz);
        let inter = a.iter().zip(&b).filter(|(p, q)| **p && **q).count();
        let tgt = b.iter().filter(|q| **q).count();
        if tgt == 0 { 0.0 } else { inter as f64 / tgt as f64 }
    };

    let mut dist = 0.0;
    for t in &fold.tips {
        let v = obj
            .vertices
            .clone()
            .min_by(|&a, &b| {
                let da = (rest[a].x - t[0]).powi(2) + (rest[a].z - t[1]).powi(2);
                let db = (rest[b].x - t[0]).powi(2) + (rest[b].z - t[1]).powi(2);
                da.total_cmp(&db)
            })
            .expect("object has vertices");
        let goal = mirror(xz(&rest[v]), o, d);
        dist += ((x[v].x - goal[0]).powi(2) + (x[v].z - goal[1]).powi(2)).sqrt();
    }
    let tip_distance = if fold.tips.is_empty() { 0.0 } else { dist / fold.tips.len() as f64 };
    Ok(FoldMetrics { overlap, tip_distance })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub n_envs: usize,
    pub seed: u64,
    /// Draw a material scale in [0.5, 1.5] per environment from the seed.
    pub randomize_materials: bool,
    pub metric: Option<ContactMetric>,
    /// Overrides (local-global iterations, linear-solver iterations).
    pub iterations: Option<(usize, usize)>,
    pub out: Option<PathBuf>,
    pub export_obj_every: Option<usize>,
    pub export_depth_every: Option<usize>,
}

impl RunOptions {
    pub fn envs(n: usize) -> Self {
        Self { n_envs: n, ..Default::default() }
    }
}

pub struct RunOutcome {
    pub session: Session,
    pub diagnostics: Vec<(usize, StepDiagnostics)>,
    /// Largest kinetic energy seen per environment.
    pub peak_kinetic_energy: Vec<f64>,
    pub fold: Option<Vec<FoldMetrics>>,
}

impl RunOutcome {
    pub fn stagnated(&self) -> bool {
        self.diagnostics.iter().any(|(_, d)| d.stagnation)
    }

    pub fn non_finite(&self) -> bool {
        self.diagnostics.iter().any(|(_, d)| d.non_finite)
    }

    /// Diagnostics of the last step, one per environment.
    pub fn last(&self) -> Vec<&StepDiagnostics> {
        let last = self.diagnostics.last().map(|(s, _)| *s);
        self.diagnostics.iter().filter(|(s, _)| Some(*s) == last).map(|(_, d)| d).collect()
    }
}

fn export_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Export { path: path.to_path_buf(), message: e.to_string() }
}

/// Material scale per environment, drawn from a seeded stream.
pub fn material_scales(n_envs: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_envs).map(|_| rng.random_range(0.5..=1.5)).collect()
}

/// Runs a scenario in `opts.n_envs` environments and writes the requested exports.
pub fn run_scenario(scenario: &Scenario, opts: &RunOptions) -> Result<RunOutcome, ScenarioError> {
    scenario.validate()?;
    let n_envs = opts.n_envs.max(1);
    let mut config = scenario.config.clone();
    if let Some(m) = opts.metric {
        config.constraintsolver.contact_metric = Some(m);
    }
    if let Some((lg, ls)) = opts.iterations {
        config.constraintsolver.local_global_iterations = lg;
        config.constraintsolver.iterations = ls;
    }
    let scales = opts.randomize_materials.then(|| material_scales(n_envs, opts.seed));
    let mut session = initialize_with_scales(config, n_envs, scales.as_deref())?;
    let schedule = compile_schedule(&scenario.controls, n_envs, scenario.duration)?;

    let obj_every = opts.export_obj_every.unwrap_or(scenario.exports.obj_every);
    let depth_every = opts.export_depth_every.unwrap_or(scenario.exports.depth_every);
    let camera = match (&scenario.camera, depth_every) {
        (_, 0) => None,
        (Some(c), _) => Some(c.build()?),
        (None, _) => return Err(ScenarioError::Invalid("depth export requested without a camera".into())),
    };
    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out).map_err(|e| export_err(out, e))?;
    }

    let mut diagnostics = Vec::with_capacity(scenario.duration * n_envs);
    let mut peak = vec![0.0f64; n_envs];
    for (step, cmds) in schedule.iter().enumerate() {
        let diags = session.session_step(cmds)?;
        for (p, d) in peak.iter_mut().zip(&diags) {
            if d.kinetic_energy.is_finite() {
                *p = p.max(d.kinetic_energy);
            }
        }
        diagnostics.extend(diags.into_iter().map(|d| (step + 1, d)));
        let Some(out) = &opts.out else { continue };
        let n = step + 1;
        if obj_every > 0 && n % obj_every == 0 {
            for env in 0..n_envs {
                for name in scenario.config.objects.keys() {
                    let path = out.join(format!("env{env:03}_{name}_{n:05}.obj"));
                    let mesh = session.object_mesh(env, name)?;
                    export_obj(&mesh, &path).map_err(|e| export_err(&path, e))?;
                }
            }
        }
        if let Some(cam) = &camera {
            if n % depth_every == 0 {
                for env in 0..n_envs {
                    let img = render_depth(&session, env, cam)?;
                    let img = match &scenario.augmentation {
                        Some(a) => augment(&img, &AugmentationConfig { seed: a.seed ^ (n as u64) ^ ((env as u64) << 32), ..a.clone() }),
                        None => img,
                    };
                    let pgm = out.join(format!("env{env:03}_depth_{n:05}.pgm"));
                    save_pgm(&img, &pgm).map_err(|e| export_err(&pgm, e))?;
                    let xyz = out.join(format!("env{env:03}_cloud_{n:05}.xyz"));
                    save_xyz(&depth_to_pointcloud(&img, cam), &xyz).map_err(|e| export_err(&xyz, e))?;
                }
            }
        }
    }
    if let (Some(out), true) = (&opts.out, scenario.exports.csv) {
        let path = out.join("diagnostics.csv");
        let f = std::fs::File::create(&path).map_err(|e| export_err(&path, e))?;
        write_diagnostics_csv(f, &diagnostics).map_err(|e| export_err(&path, e))?;
    }
    let fold = match &scenario.fold {
        Some(f) => Some((0..n_envs).map(|e| fold_metrics(&session, e, f)).collect::<Result<Vec<_>, _>>()?),
        None => None,
    };
    Ok(RunOutcome { session, diagnostics, peak_kinetic_energy: peak, fold })
}

/// Timestep of the built-in scenarios.
pub const BUILTIN_TIMESTEP: f64 = 0.01;

fn cloth_asset(mesh: &str, mass: f64, trans: [f64; 3]) -> AssetConfig {
    let mut a = AssetConfig::procedural(mesh, ElementType::Triangle, MaterialParams::cloth(mass));
    a.transformation = RigidTransform::translation(trans);
    a
}

/// Built-in scenes use the fully implicit metric: the cloth is stiff enough
/// (`h²k/m` in the hundreds) that the inertia metric converges too slowly
/// to hold grasps and resting contacts at tight tolerances.
fn single_cloth(asset: AssetConfig, planes: Vec<PlaneCollider>) -> SceneConfig {
    let mut cfg = SceneConfig::with_assets(BUILTIN_TIMESTEP, planes, vec![("cloth".into(), asset)]);
    cfg.constraintsolver.kind = "NonSmoothNewton".into();
    cfg
}

/// A 0.2 m cloth square dropped from 5 cm onto the ground.
pub fn drop_scenario() -> Scenario {
    let asset = cloth_asset("grid:9,9,0.2", 0.05, [0.0, 0.05, 0.0]);
    Scenario::new("drop", single_cloth(asset, vec![PlaneCollider::ground(0.5)]), 200)
}

/// Normal of a plane through the origin tilted by `theta` about z; downhill points to -x.
pub fn incline_normal(theta: f64) -> Vec3 {
    Vec3::new(-theta.sin(), theta.cos(), 0.0)
}

/// A small flat patch resting on an incline of `theta` radians with friction `mu`.
pub fn incline_scenario(theta: f64, mu: f64, steps: usize) -> Scenario {
    let mut asset = cloth_asset("grid:3,3,0.05", 0.02, [0.0; 3]);
    asset.transformation.rotation = [0.0, 0.0, theta];
    let plane = PlaneCollider::new(Vec3::zeros(), incline_normal(theta), mu).expect("non-zero normal");
    Scenario::new("incline", single_cloth(asset, vec![plane]), steps)
}

/// Cloth held at two corners 8 cm above the ground; the free end drapes
/// onto the floor.
pub fn pinned_drape_scenario() -> Scenario {
    let mut asset = cloth_asset("grid:9,9,0.2", 0.05, [0.0, 0.08, 0.0]);
    asset.pinned_vertices = vec![0, 8];
    Scenario::new("pinned-drape", single_cloth(asset, vec![PlaneCollider::ground(0.5)]), 300)
}

/// Cloth pinned at its four corners, sagging freely under gravity.
pub fn pinned_settle_scenario(steps: usize) -> Scenario {
    let mut asset = cloth_asset("grid:9,9,0.2", 0.05, [0.0, 0.3, 0.0]);
    asset.pinned_vertices = vec![0, 8, 72, 80];
    Scenario::new("pinned-settle", single_cloth(asset, vec![PlaneCollider::ground(0.5)]), steps)
}

/// Motion timing of the fold scenarios, scaled by a speed multiplier:
/// the sweep ends on `place`, the grip opens on `release`.
fn timeline(speed: f64) -> [usize; 3] {
    let place = 2 + ((238.0 / speed).round() as usize).max(4);
    let release = place + 5;
    [place, release, release + 150]
}

/// Segments used to approximate a fold sweep.
const ARC_SEGMENTS: usize = 12;

/// Sweep radius relative to the grip's distance from the fold line; a little
/// slack keeps the sweep from dragging the unfolded part along.
const ARC_SLACK: f64 = 1.0;

/// Towel folded corner to corner by one arm.
pub fn towel_fold_scenario() -> Scenario {
    towel_fold_with(0.2, 1.0)
}

/// Towel fold with the given bending stiffness and control speed multiplier.
pub fn towel_fold_with(bending: f64, speed: f64) -> Scenario {
    let half = 0.15;
    let mut asset = cloth_asset("grid:11,11,0.3", 0.06, [0.0; 3]);
    asset.mechanical_props.bending = bending;
    let [place, release, end] = timeline(speed);
    let mut sc = Scenario::new("towel-fold", single_cloth(asset, vec![PlaneCollider::ground(0.5)]), end);
    let out = [std::f64::consts::FRAC_1_SQRT_2; 2];
    let radius = ARC_SLACK * half * std::f64::consts::SQRT_2;
    sc.controls = vec![ControlEvent::add(0, "arm", [half, 0.0, half], [0.01; 3]), ControlEvent::grasp(1, "arm")];
    sc.controls.extend(ControlEvent::fold_arc(2, place, "arm", [0.0, 0.01, 0.0], out, radius, ARC_SEGMENTS));
    sc.controls.push(ControlEvent::release(release, "arm"));
    sc.fold = Some(FoldSpec { object: "cloth".into(), line_point: [0.0, 0.0], line_dir: [1.0, -1.0], tips: vec![[half, half]] });
    sc.camera = Some(CameraSpec {
        eye: [0.0, 0.6, 0.0],
        target: [0.0, 0.0, 0.0],
        up: [0.0, 0.0, -1.0],
        fx: 60.0,
        fy: 60.0,
        cx: 32.0,
        cy: 32.0,
        width: 64,
        height: 64,
        near: 0.05,
        far: 2.0,
    });
    sc
}

/// T-shirt blank whose sleeves are folded onto the torso by two grippers.
pub fn tshirt_fold_scenario() -> Scenario {
    tshirt_fold_with(0.2, 1.0)
}

pub fn tshirt_fold_with(bending: f64, speed: f64) -> Scenario {
    // 10 cells over 0.4 m: torso spans x in [-0.08, 0.08], sleeves the top
    // three rows at z in [0.08, 0.2].
    let mut asset = cloth_asset("tshirt:10,3,4,0.4", 0.08, [0.0; 3]);
    asset.mechanical_props.bending = bending;
    let [place, release, end] = timeline(speed);
    let mut sc = Scenario::new("tshirt-fold", single_cloth(asset, vec![PlaneCollider::ground(0.5)]), end);
    let (tip, edge, zc) = (0.2, 0.08, 0.14);
    sc.controls = vec![
        ControlEvent::add(0, "left", [-tip, 0.0, zc], [0.01, 0.01, 0.065]),
        ControlEvent::add(0, "right", [tip, 0.0, zc], [0.01, 0.01, 0.065]),
        ControlEvent::grasp(1, "left"),
        ControlEvent::grasp(1, "right"),
    ];
    let r = ARC_SLACK * (tip - edge);
    sc.controls.extend(ControlEvent::fold_arc(2, place, "left", [-edge, 0.01, zc], [-1.0, 0.0], r, ARC_SEGMENTS));
    sc.controls.extend(ControlEvent::fold_arc(2, place, "right", [edge, 0.01, zc], [1.0, 0.0], r, ARC_SEGMENTS));
    sc.controls.push(ControlEvent::release(release, "left"));
    sc.controls.push(ControlEvent::release(release, "right"));
    sc.controls.sort_by_key(|e| e.step);
    // Only the left sleeve is scored; the right one mirrors it.
    sc.fold = Some(FoldSpec { object: "cloth".into(), line_point: [-edge, 0.0], line_dir: [0.0, 1.0], tips: vec![[-tip, 0.2], [-tip, 0.08]] });
    sc
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 6] = ["drop", "incline", "pinned-drape", "pinned-settle", "towel-fold", "tshirt-fold"];

pub fn builtin(name: &str) -> Option<Scenario> {
    Some(match name {
        "drop" => drop_scenario(),
        "incline" => incline_scenario(10f64.to_radians(), 0.5, 300),
        "pinned-drape" => pinned_drape_scenario(),
        "pinned-settle" => pinned_settle_scenario(600),
        "towel-fold" => towel_fold_scenario(),
        "tshirt-fold" => tshirt_fold_scenario(),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_interpolates_moves() {
        let ev = vec![
            ControlEvent::add(0, "a", [0.0; 3], [0.1; 3]),
            ControlEvent::move_to(1, 4, "a", [4.0, 0.0, 0.0]),
        ];
        let s = compile_schedule(&ev, 2, 6).unwrap();
        let xs: Vec<f64> = (1..=4)
            .map(|k| match &s[k][1][0] {
                ControlCommand::Move { pose, .. } => pose[0],
                c => panic!("{c:?}"),
            })
            .collect();
        assert_eq!(xs, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(s[5][0].is_empty());
    }

    #[test]
    fn schedule_targets_single_env() {
        let ev = vec![ControlEvent::add(0, "a", [0.0; 3], [0.1; 3]).for_env(1)];
        let s = compile_schedule(&ev, 3, 2).unwrap();
        assert!(s[0][0].is_empty() && s[0][2].is_empty());
        assert_eq!(s[0][1].len(), 1);
    }

    #[test]
    fn validation_rejects_bad_scripts() {
        let mut sc = drop_scenario();
        sc.controls = vec![ControlEvent::grasp(5, "a"), ControlEvent::grasp(3, "a")];
        assert!(sc.validate().is_err());
        sc.controls = vec![ControlEvent::grasp(500, "a")];
        assert!(sc.validate().is_err());
        sc.controls = vec![ControlEvent::move_to(1, 900, "a", [0.0; 3])];
        assert!(sc.validate().is_err());
        sc.controls = vec![ControlEvent::move_to(1, 2, "a", [0.0; 3])];
        assert!(matches!(compile_schedule(&sc.controls, 1, 10), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn mirror_and_side() {
        let m = mirror([0.15, 0.15], [0.0, 0.0], [1.0, -1.0]);
        assert!((m[0] + 0.15).abs() < 1e-15 && (m[1] + 0.15).abs() < 1e-15);
        assert!(side([1.0, 1.0], [0.0, 0.0], [1.0, -1.0]) * side([-1.0, -1.0], [0.0, 0.0], [1.0, -1.0]) < 0.0);
    }

    #[test]
    fn unfolded_towel_scores_zero_overlap() {
        let sc = towel_fold_scenario();
        let s = initialize_with_scales(sc.config.clone(), 1, None).unwrap();
        let m = fold_metrics(&s, 0, sc.fold.as_ref().unwrap()).unwrap();
        assert!(m.overlap < 0.05, "{m:?}");
        assert!((m.tip_distance - 0.3 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn scenario_file_round_trip() {
        let spec = ScenarioSpec {
            scene: "scene.json".into(),
            duration: 10,
            controls: vec![ControlEvent::add(0, "a", [0.0; 3], [0.1; 3])],
            exports: ExportSpec::default(),
            camera: None,
            augmentation: None,
            fold: None,
        };
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ScenarioSpec>(&text).unwrap(), spec);
    }
}
