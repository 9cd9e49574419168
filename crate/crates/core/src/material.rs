//! Projective constitutive models.
//!
//! Every constraint owns a small scalar stencil `G` over its vertices. The
//! full operator acting on stacked 3D positions is `G ⊗ I₃`, so row `a` of
//! the stencil maps positions to one 3-vector of the projection space:
//! `(G x)_a = Σ_v G[a, v] x_v`. For ARAP these 3-vectors are the columns of
//! the deformation gradient; for bending there is a single row holding the
//! discrete mean-curvature vector of a hinge.

use nalgebra::{DMatrix, Matrix2, Matrix3, Matrix3x2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{DeformableMesh, ElementType, Vec3};

/// Reference bending modulus (N·m) that one unit of `bending` represents.
pub const BENDING_MODULUS_UNIT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaterialError {
    #[error("element {0} is degenerate")]
    DegenerateElement(usize),
    #[error("invalid material parameters: {0}")]
    InvalidParams(String),
    #[error("constitutive model {model:?} does not apply to {element:?} meshes")]
    ModelMismatch { model: Constitutive, element: ElementType },
    #[error("singular value decomposition did not converge for constraint {0}")]
    NumericalBreakdown(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constitutive {
    #[serde(rename = "TRI_ARAP")]
    TriArap,
    #[serde(rename = "TET_ARAP")]
    TetArap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub obj_mass: f64,
    pub young: f64,
    pub poisson: f64,
    pub constitutive: Constitutive,
    #[serde(default)]
    pub bending: f64,
}

impl MaterialParams {
    /// Cloth defaults: bending 0.2, Young's modulus 3e4, Poisson ratio 0.4.
    pub fn cloth(obj_mass: f64) -> Self {
        Self { obj_mass, young: 3e4, poisson: 0.4, constitutive: Constitutive::TriArap, bending: 0.2 }
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let bad = |m: String| Err(MaterialError::InvalidParams(m));
        if !(self.young > 0.0) || !self.young.is_finite() {
            return bad(format!("young must be > 0, got {}", self.young));
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return bad(format!("poisson must be in [0, 0.5), got {}", self.poisson));
        }
        if !(self.bending >= 0.0) || !self.bending.is_finite() {
            return bad(format!("bending must be >= 0, got {}", self.bending));
        }
        if !(self.obj_mass > 0.0) || !self.obj_mass.is_finite() {
            return bad(format!("obj_mass must be > 0, got {}", self.obj_mass));
        }
        Ok(())
    }

    pub fn shear_modulus(&self) -> f64 {
        self.young / (2.0 * (1.0 + self.poisson))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Arap,
    Bending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectiveConstraint {
    /// Element index for ARAP, interior-edge index for bending.
    pub element_id: usize,
    pub kind: ConstraintKind,
    pub weight: f64,
    pub vertices: Vec<usize>,
    /// Scalar stencil, one column per entry of `vertices`.
    pub stencil: DMatrix<f64>,
    /// Magnitude of the bending vector at rest (zero for flat hinges).
    pub rest_curvature: f64,
}

impl ProjectiveConstraint {
    /// Number of rows of the full operator `G ⊗ I₃`.
    pub fn rows(&self) -> usize {
        3 * self.stencil.nrows()
    }

    pub fn block_rows(&self) -> usize {
        self.stencil.nrows()
    }

    /// `G x` as one 3-vector per stencil row.
    pub fn apply(&self, x: &[Vec3]) -> Vec<Vec3> {
        (0..self.stencil.nrows())
            .map(|a| {
                self.vertices
                    .iter()
                    .enumerate()
                    .fold(Vec3::zeros(), |acc, (c, &v)| acc + x[v] * self.stencil[(a, c)])
            })
            .collect()
    }

    /// Closest point on the constitutive manifold to `G x`.
    pub fn project(&self, x: &[Vec3]) -> Result<Vec<Vec3>, MaterialError> {
        let gx = self.apply(x);
        match self.kind {
            ConstraintKind::Arap if gx.len() == 2 => {
                let f = Matrix3x2::from_columns(&[gx[0], gx[1]]);
                let r = closest_stiefel(&f).ok_or(MaterialError::NumericalBreakdown(self.element_id))?;
                Ok(vec![r.column(0).into(), r.column(1).into()])
            }
            ConstraintKind::Arap => {
                let f = Matrix3::from_columns(&[gx[0], gx[1], gx[2]]);
                let r = closest_rotation(&f).ok_or(MaterialError::NumericalBreakdown(self.element_id))?;
                Ok((0..3).map(|c| r.column(c).into()).collect())
            }
            ConstraintKind::Bending => {
                if self.rest_curvature == 0.0 {
                    return Ok(vec![Vec3::zeros()]);
                }
                let n = gx[0].norm();
                let dir = if n > 0.0 { gx[0] / n } else { Vec3::x() };
                Ok(vec![dir * self.rest_curvature])
            }
        }
    }

    /// `w Gᵀ (p − G x)` scattered onto the constraint's vertices.
    pub fn accumulate_force(&self, x: &[Vec3], p: &[Vec3], force: &mut [Vec3]) {
        let gx = self.apply(x);
        for (c, &v) in self.vertices.iter().enumerate() {
            let mut f = Vec3::zeros();
            for a in 0..gx.len() {
                f += (p[a] - gx[a]) * self.stencil[(a, c)];
            }
            force[v] += f * self.weight;
        }
    }

    /// `w Gᵀ p` scattered onto the constraint's vertices.
    pub fn accumulate_rhs(&self, p: &[Vec3], scale: f64, out: &mut [Vec3]) {
        for (c, &v) in self.vertices.iter().enumerate() {
            let mut f = Vec3::zeros();
            for (a, pa) in p.iter().enumerate() {
                f += pa * self.stencil[(a, c)];
            }
            out[v] += f * (self.weight * scale);
        }
    }

    /// Proximal energy `w/2 ‖p − G x‖²` at the projected `p`.
    pub fn energy(&self, x: &[Vec3]) -> Result<f64, MaterialError> {
        let p = self.project(x)?;
        let gx = self.apply(x);
        Ok(0.5 * self.weight * p.iter().zip(&gx).map(|(a, b)| (a - b).norm_squared()).sum::<f64>())
    }
}

/// Polar factor of a 3x2 matrix: the matrix with orthonormal columns closest
/// in Frobenius norm.
pub fn closest_stiefel(f: &Matrix3x2<f64>) -> Option<Matrix3x2<f64>> {
    let svd = f.try_svd(true, true, 1e-15, 200)?;
    let (u, vt) = (svd.u?, svd.v_t?);
    Some(u * vt)
}

/// Closest proper rotation to `f`. When the polar factor is a reflection the
/// singular vector of the smallest singular value is negated.
pub fn closest_rotation(f: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = f.try_svd(true, true, 1e-15, 200)?;
    let (mut u, vt) = (svd.u?, svd.v_t?);
    if (u * vt).determinant() < 0.0 {
        let s = svd.singular_values;
        let k = (0..3).min_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        let neg = -u.column(k);
        u.set_column(k, &neg);
    }
    Some(u * vt)
}

fn cot(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b) / a.cross(b).norm()
}

fn triangle_stencil(x: &[Vec3], tri: &[usize]) -> Option<DMatrix<f64>> {
    let e1 = x[tri[1]] - x[tri[0]];
    let e2 = x[tri[2]] - x[tri[0]];
    let b1 = e1.normalize();
    let b2 = (e2 - b1 * e2.dot(&b1)).try_normalize(1e-300)?;
    let dm = Matrix2::new(e1.dot(&b1), e2.dot(&b1), e1.dot(&b2), e2.dot(&b2));
    let dm_inv_t = dm.try_inverse()?.transpose();
    let sel = nalgebra::Matrix2x3::new(-1.0, 1.0, 0.0, -1.0, 0.0, 1.0);
    let g = dm_inv_t * sel;
    Some(DMatrix::from_iterator(2, 3, g.iter().copied()))
}

fn tet_stencil(x: &[Vec3], tet: &[usize]) -> Option<DMatrix<f64>> {
    let dm = Matrix3::from_columns(&[x[tet[1]] - x[tet[0]], x[tet[2]] - x[tet[0]], x[tet[3]] - x[tet[0]]]);
    let dm_inv_t = dm.try_inverse()?.transpose();
    let sel = nalgebra::Matrix3x4::new(-1.0, 1.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 1.0);
    let g = dm_inv_t * sel;
    Some(DMatrix::from_iterator(3, 4, g.iter().copied()))
}

/// Cotangent hinge stencil for edge `(x0, x1)` with opposite vertices `x2`
/// and `x3`. It annihilates affine functions over a flat hinge.
fn hinge_stencil(x: &[Vec3], hinge: &[usize; 4]) -> [f64; 4] {
    let [x0, x1, x2, x3] = hinge.map(|i| x[i]);
    let e0 = x1 - x0;
    let (e1, e2) = (x2 - x0, x3 - x0);
    let (e3, e4) = (x2 - x1, x3 - x1);
    let c01 = cot(&e0, &e1);
    let c02 = cot(&e0, &e2);
    let c03 = cot(&-e0, &e3);
    let c04 = cot(&-e0, &e4);
    [c03 + c04, c01 + c02, -c01 - c03, -c02 - c04]
}

/// One ARAP constraint per element and, for triangle meshes, one quadratic
/// bending constraint per interior edge.
///
/// ARAP weight is `μ · rest measure` with `μ = young / (2 (1 + poisson))`.
/// Bending weight is `bending · B₀ · 3 / (A₀ + A₁)` with `B₀` =
/// [`BENDING_MODULUS_UNIT`] and `A₀, A₁` the rest areas of the hinge.
pub fn build_constraints(
    mesh: &DeformableMesh,
    params: &MaterialParams,
) -> Result<Vec<ProjectiveConstraint>, MaterialError> {
    params.validate()?;
    let expected = match params.constitutive {
        Constitutive::TriArap => ElementType::Triangle,
        Constitutive::TetArap => ElementType::Tetrahedron,
    };
    if mesh.element_type != expected {
        return Err(MaterialError::ModelMismatch { model: params.constitutive, element: mesh.element_type });
    }
    let x = &mesh.rest_vertices;
    let mu = params.shear_modulus();
    let mut out = Vec::with_capacity(mesh.elements.len());
    for (e, el) in mesh.elements.iter().enumerate() {
        let stencil = match mesh.element_type {
            ElementType::Triangle => triangle_stencil(x, el),
            ElementType::Tetrahedron => tet_stencil(x, el),
        }
        .ok_or(MaterialError::DegenerateElement(e))?;
        let measure = mesh.element_measure(e);
        if !(measure > 0.0) {
            return Err(MaterialError::DegenerateElement(e));
        }
        out.push(ProjectiveConstraint {
            element_id: e,
            kind: ConstraintKind::Arap,
            weight: mu * measure,
            vertices: el.clone(),
            stencil,
            rest_curvature: 0.0,
        });
    }
    if mesh.element_type == ElementType::Triangle && params.bending > 0.0 {
        for (k, hinge) in mesh.interior_edges().into_iter().enumerate() {
            let coeffs = hinge_stencil(x, &hinge);
            if coeffs.iter().any(|c| !c.is_finite()) {
                return Err(MaterialError::DegenerateElement(k));
            }
            let area = crate::mesh::triangle_area(&x[hinge[0]], &x[hinge[1]], &x[hinge[2]])
                + crate::mesh::triangle_area(&x[hinge[0]], &x[hinge[1]], &x[hinge[3]]);
            let stencil = DMatrix::from_row_slice(1, 4, &coeffs);
            let mut c = ProjectiveConstraint {
                element_id: k,
                kind: ConstraintKind::Bending,
                weight: params.bending * BENDING_MODULUS_UNIT * 3.0 / area,
                vertices: hinge.to_vec(),
                stencil,
                rest_curvature: 0.0,
            };
            let rest = c.apply(x)[0].norm();
            // Flat within round-off is treated as exactly flat.
            let scale = coeffs.iter().map(|v| v.abs()).sum::<f64>()
                * hinge.iter().map(|&i| x[i].norm()).fold(1e-300, f64::max);
            c.rest_curvature = if rest <= 1e-12 * scale { 0.0 } else { rest };
            out.push(c);
        }
    }
    Ok(out)
}

/// Stacked projections for a constraint list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionState {
    pub offsets: Vec<usize>,
    pub values: Vec<Vec3>,
}

impl ProjectionState {
    pub fn for_constraints(constraints: &[ProjectiveConstraint]) -> Self {
        let mut offsets = Vec::with_capacity(constraints.len() + 1);
        offsets.push(0);
        for c in constraints {
            offsets.push(offsets.last().unwrap() + c.block_rows());
        }
        let n = *offsets.last().unwrap();
        Self { offsets, values: vec![Vec3::zeros(); n] }
    }

    pub fn block(&self, i: usize) -> &[Vec3] {
        &self.values[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Local step: projects every constraint at `x` into `state`.
pub fn project_all(
    constraints: &[ProjectiveConstraint],
    x: &[Vec3],
    state: &mut ProjectionState,
) -> Result<(), MaterialError> {
    for (i, c) in constraints.iter().enumerate() {
        let p = c.project(x)?;
        state.values[state.offsets[i]..state.offsets[i + 1]].copy_from_slice(&p);
    }
    Ok(())
}

/// Projection for a single constraint.
pub fn project_local(constraint: &ProjectiveConstraint, x: &[Vec3]) -> Result<Vec<Vec3>, MaterialError> {
    constraint.project(x)
}

/// `Σᵢ wᵢ Gᵢᵀ (pᵢ − Gᵢ x)` with projections evaluated at `x`.
pub fn internal_force(constraints: &[ProjectiveConstraint], x: &[Vec3]) -> Result<Vec<Vec3>, MaterialError> {
    let mut f = vec![Vec3::zeros(); x.len()];
    for c in constraints {
        let p = c.project(x)?;
        c.accumulate_force(x, &p, &mut f);
    }
    Ok(f)
}

/// Total proximal elastic energy `Σᵢ wᵢ/2 ‖pᵢ − Gᵢ x‖²`.
pub fn elastic_energy(constraints: &[ProjectiveConstraint], x: &[Vec3]) -> Result<f64, MaterialError> {
    constraints.iter().map(|c| c.energy(x)).sum()
}
