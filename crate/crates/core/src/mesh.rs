//! Deformable mesh geometry: OBJ loading and export, procedural cloth and
//! tetrahedral boxes, rigid placement and lumped vertex masses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed record on line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("vertex index {index} out of range on line {line} ({count} vertices)")]
    IndexOutOfRange { line: usize, index: i64, count: usize },
    #[error("element {element} has {got} indices, expected {expected}")]
    ArityMismatch { element: usize, got: usize, expected: usize },
    #[error("element {0} is degenerate (zero rest area or volume)")]
    DegenerateElement(usize),
    #[error("invalid grid dimension: {0}")]
    InvalidDimension(String),
    #[error("total mass must be positive, got {0}")]
    InvalidMass(f64),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ElementType {
    Triangle,
    Tetrahedron,
}

impl ElementType {
    pub fn arity(self) -> usize {
        match self {
            ElementType::Triangle => 3,
            ElementType::Tetrahedron => 4,
        }
    }
}

/// Position and orientation applied to an asset when it is placed in a scene.
///
/// `rotation` holds Euler angles in radians composed as `Rz * Ry * Rx`, so the
/// x rotation is applied first.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    #[serde(default)]
    pub trans: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self { trans: t, rotation: [0.0; 3] }
    }

    pub fn is_identity(&self) -> bool {
        self.trans == [0.0; 3] && self.rotation == [0.0; 3]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let [rx, ry, rz] = self.rotation;
        let (sx, cx) = rx.sin_cos();
        let (sy, cy) = ry.sin_cos();
        let (sz, cz) = rz.sin_cos();
        let mx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
        let my = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
        let mz = Matrix3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
        mz * my * mx
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let t = Vec3::from(self.trans);
        if self.rotation == [0.0; 3] {
            return p + t;
        }
        self.rotation_matrix() * p + t
    }
}

/// A triangle or tetrahedral mesh with its rest configuration and lumped
/// vertex masses.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformableMesh {
    pub vertices: Vec<Vec3>,
    pub elements: Vec<Vec<usize>>,
    pub element_type: ElementType,
    pub rest_vertices: Vec<Vec3>,
    pub vertex_masses: Vec<f64>,
}

impl DeformableMesh {
    /// Builds a validated mesh whose masses sum to one. Use
    /// [`DeformableMesh::with_total_mass`] to rescale.
    pub fn new(
        vertices: Vec<Vec3>,
        elements: Vec<Vec<usize>>,
        element_type: ElementType,
    ) -> Result<Self, MeshError> {
        let n = vertices.len();
        for (e, el) in elements.iter().enumerate() {
            if el.len() != element_type.arity() {
                return Err(MeshError::ArityMismatch {
                    element: e,
                    got: el.len(),
                    expected: element_type.arity(),
                });
            }
            if let Some(&bad) = el.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange {
                    line: 0,
                    index: bad as i64,
                    count: n,
                });
            }
        }
        let mut mesh = Self {
            rest_vertices: vertices.clone(),
            vertices,
            elements,
            element_type,
            vertex_masses: Vec::new(),
        };
        for e in 0..mesh.elements.len() {
            if !is_nondegenerate(mesh.element_measure(e), &mesh.rest_vertices, &mesh.elements[e]) {
                return Err(MeshError::DegenerateElement(e));
            }
        }
        mesh.vertex_masses = mesh.lumped_masses(1.0);
        Ok(mesh)
    }

    pub fn with_total_mass(mut self, total: f64) -> Result<Self, MeshError> {
        if !(total > 0.0) || !total.is_finite() {
            return Err(MeshError::InvalidMass(total));
        }
        self.vertex_masses = self.lumped_masses(total);
        Ok(self)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.vertex_masses.iter().sum()
    }

    /// Rest area (triangles) or volume (tetrahedra) of element `e`.
    pub fn element_measure(&self, e: usize) -> f64 {
        let el = &self.elements[e];
        let x = &self.rest_vertices;
        match self.element_type {
            ElementType::Triangle => triangle_area(&x[el[0]], &x[el[1]], &x[el[2]]),
            ElementType::Tetrahedron => tet_volume(&x[el[0]], &x[el[1]], &x[el[2]], &x[el[3]]),
        }
    }

    /// Distributes `total` over vertices proportionally to adjacent element
    /// measure. Vertices not referenced by any element receive the mean share.
    fn lumped_masses(&self, total: f64) -> Vec<f64> {
        let n = self.vertices.len();
        if n == 0 {
            return Vec::new();
        }
        let mut share = vec![0.0; n];
        let k = self.element_type.arity() as f64;
        for e in 0..self.elements.len() {
            let m = self.element_measure(e).abs() / k;
            for &i in &self.elements[e] {
                share[i] += m;
            }
        }
        let used: Vec<f64> = share.iter().copied().filter(|&s| s > 0.0).collect();
        let fill = if used.is_empty() { 1.0 } else { used.iter().sum::<f64>() / used.len() as f64 };
        for s in share.iter_mut() {
            if *s <= 0.0 {
                *s = fill;
            }
        }
        let sum: f64 = share.iter().sum();
        share.iter().map(|s| total * s / sum).collect()
    }

    /// Undirected edges shared by exactly two triangles, with the two
    /// opposite vertices: `(a, b, c, d)` where `(a, b)` is the shared edge.
    pub fn interior_edges(&self) -> Vec<[usize; 4]> {
        if self.element_type != ElementType::Triangle {
            return Vec::new();
        }
        let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for tri in &self.elements {
            for k in 0..3 {
                let (a, b, c) = (tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]);
                map.entry((a.min(b), a.max(b))).or_default().push(c);
            }
        }
        map.into_iter()
            .filter(|(_, opp)| opp.len() == 2)
            .map(|((a, b), opp)| [a, b, opp[0], opp[1]])
            .collect()
    }

    /// Triangles bounding the mesh: the elements themselves for cloth, faces
    /// referenced by a single tetrahedron for volumes (outward oriented).
    pub fn surface_triangles(&self) -> Vec<[usize; 3]> {
        match self.element_type {
            ElementType::Triangle => self.elements.iter().map(|t| [t[0], t[1], t[2]]).collect(),
            ElementType::Tetrahedron => {
                let mut faces: BTreeMap<[usize; 3], ([usize; 3], usize)> = BTreeMap::new();
                for t in &self.elements {
                    // Faces oriented outward for positively oriented tets.
                    for f in [[t[0], t[2], t[1]], [t[0], t[1], t[3]], [t[0], t[3], t[2]], [t[1], t[2], t[3]]] {
                        let mut key = f;
                        key.sort_unstable();
                        faces.entry(key).or_insert((f, 0)).1 += 1;
                    }
                }
                faces.into_values().filter(|(_, c)| *c == 1).map(|(f, _)| f).collect()
            }
        }
    }

    pub fn positions_finite(&self) -> bool {
        self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
    }
}

fn is_nondegenerate(measure: f64, x: &[Vec3], el: &[usize]) -> bool {
    let mut scale: f64 = 0.0;
    for i in 0..el.len() {
        for j in i + 1..el.len() {
            scale = scale.max((x[el[i]] - x[el[j]]).norm());
        }
    }
    let dim = (el.len() - 1) as i32;
    measure > 1e-12 * scale.powi(dim) && measure.is_finite()
}

pub fn triangle_area(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Signed volume, positive when `d` lies on the side of `(a, b, c)` given by
/// the right-hand rule.
pub fn tet_volume(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

/// Places a mesh rigidly: vertices are rotated (`Rz * Ry * Rx`) and then
/// translated. The rest configuration is left untouched.
pub fn apply_transform(mesh: &DeformableMesh, t: &RigidTransform) -> DeformableMesh {
    let mut out = mesh.clone();
    if t.is_identity() {
        return out;
    }
    for v in out.vertices.iter_mut() {
        *v = t.apply_point(v);
    }
    out
}

/// Regular `nx` by `ny` vertex grid spanning `size` by `size` metres in the
/// y = 0 plane, centred on the origin. Quads are split along alternating
/// diagonals.
pub fn make_grid_cloth(nx: usize, ny: usize, size: f64) -> Result<DeformableMesh, MeshError> {
    if nx < 2 || ny < 2 {
        return Err(MeshError::InvalidDimension(format!("grid needs at least 2x2 vertices, got {nx}x{ny}")));
    }
    if !(size > 0.0) || !size.is_finite() {
        return Err(MeshError::InvalidDimension(format!("grid size must be positive, got {size}")));
    }
    let dx = size / (nx - 1) as f64;
    let dz = size / (ny - 1) as f64;
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Vec3::new(-0.5 * size + i as f64 * dx, 0.0, -0.5 * size + j as f64 * dz));
        }
    }
    let mut elements = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            push_quad(&mut elements, nx, i, j);
        }
    }
    DeformableMesh::new(vertices, elements, ElementType::Triangle)
}

fn push_quad(elements: &mut Vec<Vec<usize>>, nx: usize, i: usize, j: usize) {
    let v00 = j * nx + i;
    let v10 = v00 + 1;
    let v01 = v00 + nx;
    let v11 = v01 + 1;
    // Counter-clockwise seen from +y.
    if (i + j) % 2 == 0 {
        elements.push(vec![v00, v11, v10]);
        elements.push(vec![v00, v01, v11]);
    } else {
        elements.push(vec![v00, v01, v10]);
        elements.push(vec![v10, v01, v11]);
    }
}

/// T-shaped garment blank on a square lattice of `cells` x `cells` quads:
/// the top `sleeve_rows` rows span the full width (sleeves and shoulders),
/// below that only the central `body_cols` columns remain (torso). The
/// lattice spans `size` metres; unused lattice vertices are dropped.
pub fn make_tshirt_cloth(
    cells: usize,
    sleeve_rows: usize,
    body_cols: usize,
    size: f64,
) -> Result<DeformableMesh, MeshError> {
    if cells < 3 || sleeve_rows == 0 || sleeve_rows >= cells || body_cols == 0 || body_cols > cells {
        return Err(MeshError::InvalidDimension(format!(
            "t-shirt lattice {cells} cells, {sleeve_rows} sleeve rows, {body_cols} body columns"
        )));
    }
    if !(size > 0.0) {
        return Err(MeshError::InvalidDimension(format!("size must be positive, got {size}")));
    }
    let n = cells + 1;
    let h = size / cells as f64;
    let first_body = (cells - body_cols) / 2;
    let keep = |i: usize, j: usize| j >= cells - sleeve_rows || (i >= first_body && i < first_body + body_cols);
    let mut quads = Vec::new();
    for j in 0..cells {
        for i in 0..cells {
            if keep(i, j) {
                push_quad(&mut quads, n, i, j);
            }
        }
    }
    let mut remap = vec![usize::MAX; n * n];
    let mut vertices = Vec::new();
    for tri in quads.iter_mut() {
        for idx in tri.iter_mut() {
            if remap[*idx] == usize::MAX {
                remap[*idx] = vertices.len();
                let (i, j) = (*idx % n, *idx / n);
                vertices.push(Vec3::new(-0.5 * size + i as f64 * h, 0.0, -0.5 * size + j as f64 * h));
            }
            *idx = remap[*idx];
        }
    }
    DeformableMesh::new(vertices, quads, ElementType::Triangle)
}

/// Axis-aligned tetrahedral box with `nx * ny * nz` cells, each split into
/// six tetrahedra around the cell diagonal. The box spans `extent` and has
/// its minimum corner at the origin.
pub fn make_tet_box(nx: usize, ny: usize, nz: usize, extent: [f64; 3]) -> Result<DeformableMesh, MeshError> {
    if nx == 0 || ny == 0 || nz == 0 || extent.iter().any(|&e| !(e > 0.0)) {
        return Err(MeshError::InvalidDimension(format!("tet box {nx}x{ny}x{nz} extent {extent:?}")));
    }
    let (px, py) = (nx + 1, ny + 1);
    let idx = |i: usize, j: usize, k: usize| (k * py + j) * px + i;
    let mut vertices = Vec::new();
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Vec3::new(
                    extent[0] * i as f64 / nx as f64,
                    extent[1] * j as f64 / ny as f64,
                    extent[2] * k as f64 / nz as f64,
                ));
            }
        }
    }
    // Kuhn subdivision: paths from corner 0 to corner 7 through the cube.
    const PATHS: [[usize; 2]; 6] = [[1, 3], [1, 5], [2, 3], [2, 6], [4, 5], [4, 6]];
    let mut elements = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let corner = |c: usize| idx(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
                for p in PATHS {
                    let mut t = vec![corner(0), corner(p[0]), corner(p[1]), corner(7)];
                    let vol = tet_volume(&vertices[t[0]], &vertices[t[1]], &vertices[t[2]], &vertices[t[3]]);
                    if vol < 0.0 {
                        t.swap(1, 2);
                    }
                    elements.push(t);
                }
            }
        }
    }
    DeformableMesh::new(vertices, elements, ElementType::Tetrahedron)
}

struct ObjData {
    vertices: Vec<Vec3>,
    faces: Vec<(usize, Vec<i64>)>,
}

fn parse_obj(text: &str) -> Result<ObjData, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        match tag {
            "v" => {
                let coords: Result<Vec<f64>, _> = tokens.map(str::parse::<f64>).collect();
                let coords = coords.map_err(|e| MeshError::MalformedRecord { line, message: e.to_string() })?;
                if coords.len() < 3 || coords.len() > 4 {
                    return Err(MeshError::MalformedRecord {
                        line,
                        message: format!("vertex needs 3 coordinates, got {}", coords.len()),
                    });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            "f" => {
                let mut idx = Vec::new();
                for tok in tokens {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first.parse().map_err(|_| MeshError::MalformedRecord {
                        line,
                        message: format!("bad face index '{tok}'"),
                    })?;
                    idx.push(i);
                }
                if idx.len() < 3 || idx.len() > 4 {
                    return Err(MeshError::MalformedRecord {
                        line,
                        message: format!("only triangles and quads are supported, got {} vertices", idx.len()),
                    });
                }
                // Negative indices are relative to the vertices read so far.
                for i in idx.iter_mut() {
                    if *i < 0 {
                        *i += vertices.len() as i64 + 1;
                    }
                }
                faces.push((line, idx));
            }
            _ => {}
        }
    }
    Ok(ObjData { vertices, faces })
}

fn read_text(path: &Path) -> Result<String, MeshError> {
    if !path.exists() {
        return Err(MeshError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| MeshError::IoFailure { path: path.to_path_buf(), source })
}

/// Loads a Wavefront OBJ triangle mesh. Quads are fan-split from their first
/// vertex; only the position index of `f v/vt/vn` records is used.
pub fn load_obj(path: impl AsRef<Path>) -> Result<DeformableMesh, MeshError> {
    let text = read_text(path.as_ref())?;
    obj_from_str(&text)
}

pub fn obj_from_str(text: &str) -> Result<DeformableMesh, MeshError> {
    let data = parse_obj(text)?;
    let count = data.vertices.len();
    let mut elements = Vec::new();
    for (line, idx) in &data.faces {
        let mut zero_based = Vec::with_capacity(idx.len());
        for &i in idx {
            if i < 1 || i as usize > count {
                return Err(MeshError::IndexOutOfRange { line: *line, index: i, count });
            }
            zero_based.push(i as usize - 1);
        }
        for k in 1..zero_based.len() - 1 {
            elements.push(vec![zero_based[0], zero_based[k], zero_based[k + 1]]);
        }
    }
    DeformableMesh::new(data.vertices, elements, ElementType::Triangle)
}

/// Reads a tetrahedron list: one element per line as four 1-based vertex
/// indices, optionally prefixed with `t`. `#` starts a comment.
pub fn parse_tet_sidecar(text: &str, vertex_count: usize) -> Result<Vec<Vec<usize>>, MeshError> {
    let mut tets = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let content = content.strip_prefix('t').unwrap_or(content).trim();
        if content.is_empty() {
            continue;
        }
        let idx: Result<Vec<i64>, _> = content.split_whitespace().map(str::parse::<i64>).collect();
        let idx = idx.map_err(|e| MeshError::MalformedRecord { line, message: e.to_string() })?;
        if idx.len() != 4 {
            return Err(MeshError::MalformedRecord { line, message: format!("expected 4 indices, got {}", idx.len()) });
        }
        let mut tet = Vec::with_capacity(4);
        for i in idx {
            if i < 1 || i as usize > vertex_count {
                return Err(MeshError::IndexOutOfRange { line, index: i, count: vertex_count });
            }
            tet.push(i as usize - 1);
        }
        tets.push(tet);
    }
    Ok(tets)
}

/// Loads a tetrahedral mesh: vertex positions from an OBJ file (faces are
/// ignored) and elements from a sidecar tetrahedron list.
pub fn load_tet_mesh(obj_path: impl AsRef<Path>, tet_path: impl AsRef<Path>) -> Result<DeformableMesh, MeshError> {
    let data = parse_obj(&read_text(obj_path.as_ref())?)?;
    let tets = parse_tet_sidecar(&read_text(tet_path.as_ref())?, data.vertices.len())?;
    DeformableMesh::new(data.vertices, tets, ElementType::Tetrahedron)
}

pub fn obj_to_string(mesh: &DeformableMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.surface_triangles() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

/// Writes current vertex positions and surface triangles as OBJ.
pub fn export_obj(mesh: &DeformableMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    fs::write(path, obj_to_string(mesh)).map_err(|source| MeshError::IoFailure { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn minimal_obj() {
        let m = obj_from_str("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        assert_eq!(m.num_vertices(), 3);
        assert_eq!(m.elements, vec![vec![0, 1, 2]]);
        assert_eq!(m.rest_vertices, m.vertices);
    }

    #[test]
    fn quad_is_fan_split() {
        let m = obj_from_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1/1/1 2/2/2 3/3/3 4/4/4\n").unwrap();
        assert_eq!(m.elements, vec![vec![0, 1, 2], vec![0, 2, 3]]);
    }

    #[test]
    fn obj_index_errors() {
        let zero = obj_from_str("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n");
        assert!(matches!(zero, Err(MeshError::IndexOutOfRange { line: 4, index: 0, .. })));
        let big = obj_from_str("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n");
        assert!(matches!(big, Err(MeshError::IndexOutOfRange { index: 4, .. })));
        let bad = obj_from_str("v 0 0\n");
        assert!(matches!(bad, Err(MeshError::MalformedRecord { line: 1, .. })));
        let pent = obj_from_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 2 0\nf 1 2 3 4 5\n");
        assert!(matches!(pent, Err(MeshError::MalformedRecord { .. })));
        assert!(matches!(load_obj("/nonexistent/cloth.obj"), Err(MeshError::MissingFile(_))));
    }

    #[test]
    fn degenerate_triangle_rejected() {
        let r = obj_from_str("v 0 0 0\nv 1 0 0\nv 2 0 0\nf 1 2 3\n");
        assert!(matches!(r, Err(MeshError::DegenerateElement(0))));
    }

    #[test]
    fn grid_counts() {
        let g = make_grid_cloth(2, 2, 1.0).unwrap();
        assert_eq!((g.num_vertices(), g.elements.len()), (4, 2));
        assert_eq!((g.vertices[1] - g.vertices[0]).norm(), 1.0);
        let g = make_grid_cloth(3, 3, 1.0).unwrap();
        assert_eq!((g.num_vertices(), g.elements.len()), (9, 8));
        assert!(matches!(make_grid_cloth(1, 3, 1.0), Err(MeshError::InvalidDimension(_))));
        assert!(matches!(make_grid_cloth(3, 3, 0.0), Err(MeshError::InvalidDimension(_))));
    }

    #[test]
    fn grid_area_matches_square() {
        for (nx, ny, s) in [(2, 2, 1.0), (5, 7, 0.3), (11, 4, 2.5)] {
            let g = make_grid_cloth(nx, ny, s).unwrap();
            let area: f64 = (0..g.elements.len()).map(|e| g.element_measure(e)).sum();
            assert!((area - s * s).abs() <= 1e-9 * s * s, "{area} vs {}", s * s);
        }
    }

    #[test]
    fn grid_masses_sum_to_total() {
        let g = make_grid_cloth(6, 4, 1.0).unwrap().with_total_mass(0.25).unwrap();
        assert!((g.total_mass() - 0.25).abs() < 1e-14);
        assert!(g.vertex_masses.iter().all(|&m| m > 0.0));
        // Interior vertices of a uniform grid carry equal share.
        assert!(matches!(g.clone().with_total_mass(0.0), Err(MeshError::InvalidMass(_))));
    }

    #[test]
    fn identity_transform_is_bitwise() {
        let mut g = make_grid_cloth(3, 3, 1.0).unwrap();
        g.vertices[0].x = -0.0;
        let t = apply_transform(&g, &RigidTransform::identity());
        for (a, b) in g.vertices.iter().zip(&t.vertices) {
            for k in 0..3 {
                assert_eq!(a[k].to_bits(), b[k].to_bits());
            }
        }
    }

    #[test]
    fn translation_and_rotation() {
        let m = DeformableMesh::new(vec![Vec3::zeros(), Vec3::x()], vec![], ElementType::Triangle).unwrap();
        let t = apply_transform(&m, &RigidTransform::translation([1.0, 0.0, 0.0]));
        assert_eq!(t.vertices[0], Vec3::new(1.0, 0.0, 0.0));
        let r = RigidTransform { trans: [0.0; 3], rotation: [0.0, FRAC_PI_2, 0.0] };
        let rotated = apply_transform(&m, &r);
        // Independent composition: rotation about y by +90 deg maps x to -z.
        let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), FRAC_PI_2);
        let expected = ry * Vec3::x();
        assert!((rotated.vertices[1] - expected).norm() < 1e-12);
        assert!((rotated.vertices[1] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        assert_eq!(rotated.rest_vertices, m.rest_vertices);
    }

    #[test]
    fn euler_order_is_zyx() {
        let r = RigidTransform { trans: [0.0; 3], rotation: [0.3, -0.7, 1.1] };
        let rx = nalgebra::Rotation3::from_axis_angle(&Vec3::x_axis(), 0.3);
        let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), -0.7);
        let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), 1.1);
        let expected = (rz * ry * rx).into_inner();
        assert!((r.rotation_matrix() - expected).norm() < 1e-14);
    }

    #[test]
    fn export_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = make_grid_cloth(2, 2, 1.0).unwrap();
        let p = dir.path().join("g.obj");
        export_obj(&g, &p).unwrap();
        let back = load_obj(&p).unwrap();
        assert_eq!(back.elements, g.elements);
        for (a, b) in back.vertices.iter().zip(&g.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
        let empty = DeformableMesh::new(vec![], vec![], ElementType::Triangle).unwrap();
        let p = dir.path().join("empty.obj");
        export_obj(&empty, &p).unwrap();
        assert_eq!(load_obj(&p).unwrap().num_vertices(), 0);
        assert!(matches!(
            export_obj(&g, dir.path().join("missing/dir/x.obj")),
            Err(MeshError::IoFailure { .. })
        ));
    }

    #[test]
    fn tet_box_is_valid() {
        let b = make_tet_box(2, 1, 1, [0.2, 0.1, 0.1]).unwrap();
        assert_eq!(b.elements.len(), 12);
        let vol: f64 = (0..b.elements.len()).map(|e| b.element_measure(e)).sum();
        assert!((vol - 0.002).abs() < 1e-15);
        assert!((0..b.elements.len()).all(|e| b.element_measure(e) > 0.0));
        // Closed surface of a 2x1x1 box: 2 * (2 + 2 + 1) quads, two triangles each.
        assert_eq!(b.surface_triangles().len(), 20);
    }

    #[test]
    fn tet_sidecar_parsing() {
        let tets = parse_tet_sidecar("# comment\nt 1 2 3 4\n2 3 4 5\n", 5).unwrap();
        assert_eq!(tets, vec![vec![0, 1, 2, 3], vec![1, 2, 3, 4]]);
        assert!(matches!(parse_tet_sidecar("1 2 3 9\n", 5), Err(MeshError::IndexOutOfRange { .. })));
    }

    #[test]
    fn tshirt_shape() {
        let t = make_tshirt_cloth(8, 3, 4, 0.8).unwrap();
        // 3 full rows of 8 quads plus 5 body rows of 4 quads.
        assert_eq!(t.elements.len(), 2 * (3 * 8 + 5 * 4));
        let area: f64 = (0..t.elements.len()).map(|e| t.element_measure(e)).sum();
        assert!((area - 44.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn interior_edges_of_two_triangles() {
        let g = make_grid_cloth(2, 2, 1.0).unwrap();
        assert_eq!(g.interior_edges().len(), 1);
    }
}
