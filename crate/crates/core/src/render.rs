//! Ray-cast depth rendering, point clouds and depth-image augmentation.
//!
//! Cameras follow the pinhole convention with the optical axis along the
//! camera `+z`, image `x` to the right and image `y` downward. Pixel `(u, v)`
//! (column, row) looks along `((u - cx)/fx, (v - cy)/fy, 1)`. Depth is the
//! Euclidean range from the camera centre along that ray, and pixels without
//! a hit hold [`SENTINEL`].

use std::io::{self, BufRead, Read, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contact::{tangent_basis, Collider};
use crate::mesh::Vec3;
use crate::scene::{SceneError, Session};

/// Depth value of pixels that hit nothing.
pub const SENTINEL: f64 = 0.0;
/// Instance id of pixels that hit nothing.
pub const NO_INSTANCE: i32 = -1;
/// Half side length of the quad that stands in for an infinite plane collider.
pub const PLANE_HALF_EXTENT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("malformed image data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthCamera {
    /// Camera axes in world coordinates, one per column.
    pub rotation: Matrix3<f64>,
    pub position: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Serializable camera description built with [`DepthCamera::look_at`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}
fn default_near() -> f64 {
    0.01
}
fn default_far() -> f64 {
    10.0
}

impl CameraSpec {
    pub fn build(&self) -> Result<DepthCamera, RenderError> {
        let mut cam = DepthCamera::look_at(self.eye.into(), self.target.into(), self.up.into())?;
        cam.fx = self.fx;
        cam.fy = self.fy;
        cam.cx = self.cx;
        cam.cy = self.cy;
        cam.width = self.width;
        cam.height = self.height;
        cam.near = self.near;
        cam.far = self.far;
        cam.validate()?;
        Ok(cam)
    }
}

impl DepthCamera {
    /// Camera at `eye` looking at `target`, with `up` pointing towards the
    /// top of the image. Intrinsics default to a 64×64 image with fx = fy = 64.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, RenderError> {
        let z = target - eye;
        if z.norm() == 0.0 {
            return Err(RenderError::InvalidCamera("eye and target coincide".into()));
        }
        let z = z.normalize();
        let y = -(up - z * up.dot(&z));
        if y.norm() < 1e-12 {
            return Err(RenderError::InvalidCamera("up is parallel to the viewing direction".into()));
        }
        let y = y.normalize();
        let x = y.cross(&z);
        Ok(Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            position: eye,
            fx: 64.0,
            fy: 64.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            near: default_near(),
            far: default_far(),
        })
    }

    pub fn with_intrinsics(mut self, fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        self.fx = fx;
        self.fy = fy;
        self.cx = cx;
        self.cy = cy;
        self.width = width;
        self.height = height;
        self
    }

    pub fn with_range(mut self, near: f64, far: f64) -> Self {
        self.near = near;
        self.far = far;
        self
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(RenderError::InvalidCamera(format!("focal lengths must be positive, got {} {}", self.fx, self.fy)));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(RenderError::InvalidCamera(format!("need 0 < near < far, got {} {}", self.near, self.far)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::InvalidCamera("empty resolution".into()));
        }
        Ok(())
    }

    /// Unit ray direction of pixel `(u, v)` in world coordinates.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vec3 {
        let d = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize();
        self.rotation * d
    }

    /// Pixel coordinates and range of a world point, or `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64, f64)> {
        let c = self.rotation.transpose() * (p - self.position);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.norm()))
    }

    /// World point at range `depth` along the ray of pixel `(u, v)`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        self.position + self.ray_direction(u, v) * depth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major depths in metres.
    pub depth: Vec<f64>,
    /// Row-major instance ids, [`NO_INSTANCE`] where nothing was hit.
    pub instance: Vec<i32>,
    pub near: f64,
    pub far: f64,
}

impl DepthImage {
    pub fn empty(width: usize, height: usize, near: f64, far: f64) -> Self {
        Self {
            width,
            height,
            depth: vec![SENTINEL; width * height],
            instance: vec![NO_INSTANCE; width * height],
            near,
            far,
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width + u]
    }

    pub fn is_hit(&self, i: usize) -> bool {
        self.depth[i] != SENTINEL
    }

    pub fn hit_count(&self) -> usize {
        (0..self.depth.len()).filter(|&i| self.is_hit(i)).count()
    }

    fn clear(&mut self, i: usize) {
        self.depth[i] = SENTINEL;
        self.instance[i] = NO_INSTANCE;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle {
    pub v: [Vec3; 3],
    pub instance: i32,
}

/// Two-sided Möller–Trumbore intersection. Returns the ray parameter.
pub fn intersect_triangle(origin: &Vec3, dir: &Vec3, tri: &Triangle) -> Option<f64> {
    let e1 = tri.v[1] - tri.v[0];
    let e2 = tri.v[2] - tri.v[0];
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let s = origin - tri.v[0];
    let u = s.dot(&p) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) * inv)
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    /// Entry parameter of the slab test, if the ray meets the box before `t_max`.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - origin[k]) * inv_dir[k];
            let b = (self.max[k] - origin[k]) * inv_dir[k];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            // NaN from 0·∞ on an axis-parallel ray leaves the bounds untouched.
            if lo > t0 {
                t0 = lo;
            }
            if hi < t1 {
                t1 = hi;
            }
        }
        (t0 <= t1).then_some(t0)
    }
}

enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-volume hierarchy over triangles, split at the centroid median of
/// the widest axis.
pub struct Bvh {
    tris: Vec<Triangle>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mut tris: Vec<Triangle>) -> Self {
        let mut nodes = Vec::new();
        if !tris.is_empty() {
            let n = tris.len();
            Self::build_node(&mut tris, 0, n, &mut nodes);
        }
        Self { tris, nodes }
    }

    fn build_node(tris: &mut [Triangle], start: usize, end: usize, nodes: &mut Vec<Node>) -> usize {
        let mut bounds = Aabb::empty();
        let mut centroids = Aabb::empty();
        for t in &tris[start..end] {
            for p in &t.v {
                bounds.grow(p);
            }
            centroids.grow(&((t.v[0] + t.v[1] + t.v[2]) / 3.0));
        }
        let id = nodes.len();
        if end - start <= LEAF_SIZE {
            nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        let ext = centroids.max - centroids.min;
        let axis = ext.imax();
        let mid = (start + end) / 2;
        let key = |t: &Triangle| t.v[0][axis] + t.v[1][axis] + t.v[2][axis];
        tris[start..end].select_nth_unstable_by(mid - start, |a, b| key(a).total_cmp(&key(b)));
        nodes.push(Node::Leaf { bounds, start, end });
        let left = Self::build_node(tris, start, mid, nodes);
        let right = Self::build_node(tris, mid, end, nodes);
        nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.tris.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tris.is_empty()
    }

    /// Nearest hit with parameter in `[t_min, t_max]`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, i32)> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = dir.map(|d| 1.0 / d);
        let mut best: Option<(f64, i32)> = None;
        let mut limit = t_max;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds().hit(origin, &inv, limit).is_none() {
                continue;
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for tri in &self.tris[start..end] {
                        if let Some(t) = intersect_triangle(origin, dir, tri) {
                            if t >= t_min && t <= limit && best.is_none_or(|(bt, _)| t < bt) {
                                best = Some((t, tri.instance));
                                limit = t;
                            }
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(left);
                    stack.push(right);
                }
            }
        }
        best
    }
}

/// Renders a triangle soup. Each pixel keeps the nearest hit in `[near, far]`.
pub fn render_triangles(tris: &[Triangle], camera: &DepthCamera) -> Result<DepthImage, RenderError> {
    camera.validate()?;
    let bvh = Bvh::build(tris.to_vec());
    let mut img = DepthImage::empty(camera.width, camera.height, camera.near, camera.far);
    let w = camera.width;
    img.depth
        .par_chunks_mut(w)
        .zip(img.instance.par_chunks_mut(w))
        .enumerate()
        .for_each(|(v, (drow, irow))| {
            for u in 0..w {
                let dir = camera.ray_direction(u as f64, v as f64);
                if let Some((t, id)) = bvh.intersect(&camera.position, &dir, camera.near, camera.far) {
                    drow[u] = t;
                    irow[u] = id;
                }
            }
        });
    Ok(img)
}

fn collider_triangles(c: &Collider, instance: i32) -> Vec<Triangle> {
    match c {
        Collider::Plane(p) => {
            let n = Vec3::from(p.normal);
            let (t1, t2) = tangent_basis(&n);
            let o = Vec3::from(p.point);
            let e = PLANE_HALF_EXTENT;
            let q = [o - t1 * e - t2 * e, o + t1 * e - t2 * e, o + t1 * e + t2 * e, o - t1 * e + t2 * e];
            vec![Triangle { v: [q[0], q[1], q[2]], instance }, Triangle { v: [q[0], q[2], q[3]], instance }]
        }
        Collider::Box(b) => {
            let c = Vec3::from(b.center);
            let h = Vec3::from(b.half_extents);
            let corner = |i: usize| {
                Vec3::new(
                    c.x + if i & 1 != 0 { h.x } else { -h.x },
                    c.y + if i & 2 != 0 { h.y } else { -h.y },
                    c.z + if i & 4 != 0 { h.z } else { -h.z },
                )
            };
            const FACES: [[usize; 4]; 6] =
                [[0, 1, 3, 2], [4, 5, 7, 6], [0, 1, 5, 4], [2, 3, 7, 6], [0, 2, 6, 4], [1, 3, 7, 5]];
            FACES
                .iter()
                .flat_map(|f| {
                    [
                        Triangle { v: [corner(f[0]), corner(f[1]), corner(f[2])], instance },
                        Triangle { v: [corner(f[0]), corner(f[2]), corner(f[3])], instance },
                    ]
                })
                .collect()
        }
    }
}

/// Surface triangles of environment `env`. Objects carry their index as
/// instance id; colliders, when included, follow after the objects.
pub fn env_triangles(session: &Session, env: usize, include_colliders: bool) -> Result<Vec<Triangle>, SceneError> {
    let snap = session.get_state(env)?;
    let x = &snap.positions;
    let mut tris = Vec::new();
    for (i, obj) in session.template.objects.iter().enumerate() {
        tris.extend(obj.surface.iter().map(|f| Triangle { v: [x[f[0]], x[f[1]], x[f[2]]], instance: i as i32 }));
    }
    if include_colliders {
        let base = session.template.objects.len();
        for (k, c) in session.state.models[env].colliders.iter().enumerate() {
            tris.extend(collider_triangles(c, (base + k) as i32));
        }
    }
    Ok(tris)
}

/// Depth image of environment `env`, including collider surfaces.
pub fn render_depth(session: &Session, env: usize, camera: &DepthCamera) -> Result<DepthImage, RenderError> {
    render_triangles(&env_triangles(session, env, true)?, camera)
}

/// World-frame points of every hit pixel, in row-major pixel order.
pub fn depth_to_pointcloud(image: &DepthImage, camera: &DepthCamera) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(image.hit_count());
    for v in 0..image.height {
        for u in 0..image.width {
            let d = image.at(u, v);
            if d != SENTINEL {
                out.push(camera.backproject(u as f64, v as f64, d));
            }
        }
    }
    out
}

/// Re-renders points as a depth image by projecting each to its nearest
/// pixel, keeping the closest point per pixel.
pub fn pointcloud_to_depth(points: &[Vec3], camera: &DepthCamera) -> DepthImage {
    let mut img = DepthImage::empty(camera.width, camera.height, camera.near, camera.far);
    for p in points {
        let Some((u, v, d)) = camera.project(p) else { continue };
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= camera.width as f64 || v >= camera.height as f64 {
            continue;
        }
        let i = v as usize * camera.width + u as usize;
        if img.depth[i] == SENTINEL || d < img.depth[i] {
            img.depth[i] = d;
            img.instance[i] = 0;
        }
    }
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Blockout {
    pub count: usize,
    /// Largest rectangle side in pixels.
    pub max_size: usize,
    /// Chance that each of the `count` rectangles is applied.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub blockout: Blockout,
    /// Width in pixels of the band around mask boundaries that is randomly
    /// eroded or dilated.
    pub boundary_jitter: usize,
    pub depth_noise_sigma: f64,
    /// Polygons in pixel coordinates whose interiors are cleared.
    pub occlusion_masks: Vec<Vec<[f64; 2]>>,
    pub seed: u64,
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let b = &self.blockout;
        if !(0.0..=1.0).contains(&b.probability) {
            return Err(RenderError::InvalidCamera(format!("blockout probability {} outside [0, 1]", b.probability)));
        }
        if !(self.depth_noise_sigma >= 0.0) {
            return Err(RenderError::InvalidCamera(format!("negative depth noise {}", self.depth_noise_sigma)));
        }
        Ok(())
    }
}

/// Even-odd point-in-polygon test.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + n - 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
    }
    inside
}

/// Applies blockout, boundary jitter, depth noise and occlusion masks in
/// that order. The seed fully determines the result.
pub fn augment(image: &DepthImage, config: &AugmentationConfig) -> DepthImage {
    let mut out = image.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (image.width, image.height);

    let b = &config.blockout;
    if b.max_size > 0 && b.probability > 0.0 {
        for _ in 0..b.count {
            if rng.random::<f64>() >= b.probability {
                continue;
            }
            let bw = rng.random_range(1..=b.max_size.min(w));
            let bh = rng.random_range(1..=b.max_size.min(h));
            let u0 = rng.random_range(0..=w - bw);
            let v0 = rng.random_range(0..=h - bh);
            for v in v0..v0 + bh {
                for u in u0..u0 + bw {
                    out.clear(v * w + u);
                }
            }
        }
    }

    let j = config.boundary_jitter as isize;
    if j > 0 {
        let src = out.clone();
        for v in 0..h as isize {
            for u in 0..w as isize {
                let i = (v * w as isize + u) as usize;
                let hit = src.is_hit(i);
                // Nearest neighbour of opposite state inside the band, scanning rings outward.
                let mut other = None;
                'rings: for r in 1..=j {
                    for dv in -r..=r {
                        for du in -r..=r {
                            if du.abs() != r && dv.abs() != r {
                                continue;
                            }
                            let (uu, vv) = (u + du, v + dv);
                            if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                                continue;
                            }
                            let k = (vv * w as isize + uu) as usize;
                            if src.is_hit(k) != hit {
                                other = Some(k);
                                break 'rings;
                            }
                        }
                    }
                }
                let Some(k) = other else { continue };
                if !rng.random_bool(0.5) {
                    continue;
                }
                if hit {
                    out.clear(i);
                } else {
                    out.depth[i] = src.depth[k];
                    out.instance[i] = src.instance[k];
                }
            }
        }
    }

    if config.depth_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.depth_noise_sigma).expect("sigma is finite and positive");
        for i in 0..out.depth.len() {
            if out.is_hit(i) {
                out.depth[i] = (out.depth[i] + normal.sample(&mut rng)).clamp(out.near, out.far);
            }
        }
    }

    for poly in &config.occlusion_masks {
        for v in 0..h {
            for u in 0..w {
                if point_in_polygon([u as f64, v as f64], poly) {
                    out.clear(v * w + u);
                }
            }
        }
    }
    out
}

/// 16-bit binary PGM with millimetre quantization; misses and depths of
/// zero map to 0, depths beyond 65.535 m saturate.
pub fn write_pgm<W: Write>(image: &DepthImage, mut out: W) -> io::Result<()> {
    write!(out, "P5\n{} {}\n65535\n", image.width, image.height)?;
    let mut buf = Vec::with_capacity(image.depth.len() * 2);
    for &d in &image.depth {
        let mm = if d == SENTINEL { 0 } else { (d * 1000.0).round().clamp(1.0, 65535.0) as u16 };
        buf.extend_from_slice(&mm.to_be_bytes());
    }
    out.write_all(&buf)
}

fn pgm_token<R: BufRead>(r: &mut R) -> Result<String, RenderError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0] as char;
        if c == '#' && tok.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    Ok(tok)
}

/// Reads a PGM written by [`write_pgm`]; depths come back in metres.
pub fn read_pgm<R: BufRead>(mut r: R) -> Result<DepthImage, RenderError> {
    if pgm_token(&mut r)? != "P5" {
        return Err(RenderError::Format("not a binary PGM".into()));
    }
    let mut num = || -> Result<usize, RenderError> {
        let t = pgm_token(&mut r)?;
        t.parse().map_err(|_| RenderError::Format(format!("bad header field '{t}'")))
    };
    let (w, h, maxval) = (num()?, num()?, num()?);
    if maxval != 65535 {
        return Err(RenderError::Format(format!("expected 16-bit PGM, maxval {maxval}")));
    }
    let mut buf = vec![0u8; w * h * 2];
    r.read_exact(&mut buf)?;
    let mut img = DepthImage::empty(w, h, 0.0, f64::INFINITY);
    for (i, c) in buf.chunks_exact(2).enumerate() {
        let mm = u16::from_be_bytes([c[0], c[1]]);
        if mm != 0 {
            img.depth[i] = mm as f64 / 1000.0;
            img.instance[i] = 0;
        }
    }
    Ok(img)
}

/// Raw little-endian f64 depths, row-major, preceded by width and height as
/// little-endian u64.
pub fn write_raw<W: Write>(image: &DepthImage, mut out: W) -> io::Result<()> {
    out.write_all(&(image.width as u64).to_le_bytes())?;
    out.write_all(&(image.height as u64).to_le_bytes())?;
    for d in &image.depth {
        out.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_raw<R: Read>(mut r: R) -> Result<DepthImage, RenderError> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let w = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let h = u64::from_le_bytes(word) as usize;
    let mut img = DepthImage::empty(w, h, 0.0, f64::INFINITY);
    for i in 0..w * h {
        r.read_exact(&mut word)?;
        img.depth[i] = f64::from_le_bytes(word);
        if img.depth[i] != SENTINEL {
            img.instance[i] = 0;
        }
    }
    Ok(img)
}

/// ASCII XYZ, one point per line. Values use the shortest representation
/// that parses back to the same f64.
pub fn write_xyz<W: Write>(points: &[Vec3], mut out: W) -> io::Result<()> {
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
    }
    Ok(())
}

pub fn read_xyz<R: BufRead>(r: R) -> Result<Vec<Vec3>, RenderError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| RenderError::Format(format!("line {}: bad number", n + 1)))?;
        if v.len() != 3 {
            return Err(RenderError::Format(format!("line {}: expected 3 values", n + 1)));
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn save_pgm(image: &DepthImage, path: impl AsRef<Path>) -> io::Result<()> {
    write_pgm(image, io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn save_xyz(points: &[Vec3], path: impl AsRef<Path>) -> io::Result<()> {
    write_xyz(points, io::BufWriter::new(std::fs::File::create(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RenderBenchRow {
    pub n_envs: usize,
    pub total_ms: f64,
    pub per_env_ms: f64,
}

/// Times rendering the first `n` environments (cycling when the session
/// has fewer) one after another, for every `n` in `n_envs_list`. Each
/// entry is the median of `repeats` runs.
pub fn render_benchmark(
    session: &Session,
    camera: &DepthCamera,
    n_envs_list: &[usize],
    repeats: usize,
) -> Result<Vec<RenderBenchRow>, RenderError> {
    let mut rows = Vec::new();
    for &n in n_envs_list {
        let mut samples = Vec::new();
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            for e in 0..n {
                render_depth(session, e % session.n_envs(), camera)?;
            }
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        samples.sort_by(f64::total_cmp);
        let total_ms = samples[samples.len() / 2];
        rows.push(RenderBenchRow { n_envs: n, total_ms, per_env_ms: total_ms / n.max(1) as f64 });
    }
    Ok(rows)
}
