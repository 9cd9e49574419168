//! Collision detection and the semi-smooth linearization of the contact
//! complementarity conditions.
//!
//! Residuals are expressed in position units. With `ρ = h²/m` for the
//! contact vertex, the normal residual is
//! `φₙ = ρλₙ − max(0, ρλₙ − gap)` and the tangential residual is
//! `φₜ = ρλₜ − Π(ρλₜ − vₜ)` where `Π` projects onto the disk of radius
//! `ρμ·max(λₙ, 0)` and `vₜ` is the tangential displacement over the step.
//! These are the force-unit residuals scaled by `ρ`.
//!
//! The saddle system is written in the unknown `h²λ`, so compliance
//! entries are `E = ∂φ/∂(h²λ)`.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::grasp::BilateralConstraint;
use crate::mesh::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneCollider {
    pub point: [f64; 3],
    pub normal: [f64; 3],
    #[serde(default)]
    pub mu: f64,
}

impl PlaneCollider {
    /// Builds a plane with the normal rescaled to unit length.
    pub fn new(point: Vec3, normal: Vec3, mu: f64) -> Option<Self> {
        let n = normal.try_normalize(1e-300)?;
        Some(Self { point: point.into(), normal: n.into(), mu })
    }

    pub fn ground(mu: f64) -> Self {
        Self { point: [0.0; 3], normal: [0.0, 1.0, 0.0], mu }
    }

    pub fn normalized(&self) -> Option<Self> {
        Self::new(self.point.into(), self.normal.into(), self.mu)
    }

    pub fn signed_distance(&self, p: &Vec3) -> (f64, Vec3) {
        let n = Vec3::from(self.normal);
        (n.dot(&(p - Vec3::from(self.point))), n)
    }
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxCollider {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub mu: f64,
}

impl BoxCollider {
    /// Signed distance and outward normal of the nearest face region.
    pub fn signed_distance(&self, p: &Vec3) -> (f64, Vec3) {
        let c = Vec3::from(self.center);
        let e = Vec3::from(self.half_extents);
        let d = p - c;
        let q = d.abs() - e;
        if q.max() > 0.0 {
            let outside = q.map(|v| v.max(0.0));
            let dist = outside.norm();
            let dir = Vec3::new(outside.x * d.x.signum(), outside.y * d.y.signum(), outside.z * d.z.signum());
            (dist, dir / dist)
        } else {
            let axis = q.imax();
            let mut n = Vec3::zeros();
            n[axis] = if d[axis] >= 0.0 { 1.0 } else { -1.0 };
            (q[axis], n)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Collider {
    Plane(PlaneCollider),
    Box(BoxCollider),
}

impl Collider {
    pub fn signed_distance(&self, p: &Vec3) -> (f64, Vec3) {
        match self {
            Collider::Plane(c) => c.signed_distance(p),
            Collider::Box(c) => c.signed_distance(p),
        }
    }

    pub fn mu(&self) -> f64 {
        match self {
            Collider::Plane(c) => c.mu,
            Collider::Box(c) => c.mu,
        }
    }
}

/// Tangents for a unit normal: `t₁ = normalize(n × ê)` with `ê` the axis
/// least aligned with `n`, and `t₂ = n × t₁`.
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let a = n.abs();
    let mut axis = 0;
    for k in 1..3 {
        if a[k] < a[axis] {
            axis = k;
        }
    }
    let mut e = Vec3::zeros();
    e[axis] = 1.0;
    let t1 = n.cross(&e).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactConstraint {
    pub vertex: usize,
    pub collider: usize,
    pub normal: Vec3,
    pub t1: Vec3,
    pub t2: Vec3,
    /// Closest collider point at detection; the gap is linearized about it.
    pub surface_point: Vec3,
    /// Signed distance at detection.
    pub gap: f64,
    pub mu: f64,
    /// Multiplier `(λₙ, λₜ₁, λₜ₂)` in newtons.
    pub lambda: [f64; 3],
    /// Vertex position at the start of the step.
    pub anchor: Vec3,
    /// `h²/m` for the contact vertex.
    pub rho: f64,
}

impl ContactConstraint {
    /// Rows `n, t₁, t₂`.
    pub fn frame(&self) -> Matrix3<f64> {
        Matrix3::from_rows(&[self.normal.transpose(), self.t1.transpose(), self.t2.transpose()])
    }

    pub fn gap_at(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.surface_point))
    }

    pub fn tangential_displacement(&self, p: &Vec3) -> Vector2<f64> {
        let d = p - self.anchor;
        Vector2::new(self.t1.dot(&d), self.t2.dot(&d))
    }
}

/// One constraint per vertex closer than `margin` to any collider, using the
/// nearest collider. Vertices with `skip[v]` set are ignored. The result is
/// sorted by `(collider, vertex)`.
pub fn detect_contacts(x: &[Vec3], colliders: &[Collider], margin: f64, skip: &[bool]) -> Vec<ContactConstraint> {
    let mut out = Vec::new();
    for (v, p) in x.iter().enumerate() {
        if skip.get(v).copied().unwrap_or(false) {
            continue;
        }
        let mut best: Option<(usize, f64, Vec3)> = None;
        for (ci, c) in colliders.iter().enumerate() {
            let (gap, n) = c.signed_distance(p);
            if gap < margin && best.is_none_or(|b| gap < b.1) {
                best = Some((ci, gap, n));
            }
        }
        if let Some((ci, gap, n)) = best {
            let (t1, t2) = tangent_basis(&n);
            out.push(ContactConstraint {
                vertex: v,
                collider: ci,
                normal: n,
                t1,
                t2,
                surface_point: p - n * gap,
                gap,
                mu: colliders[ci].mu(),
                lambda: [0.0; 3],
                anchor: *p,
                rho: 0.0,
            });
        }
    }
    out.sort_by_key(|c| (c.collider, c.vertex));
    out
}

fn project_disk(z: Vector2<f64>, radius: f64) -> Vector2<f64> {
    let r = radius.max(0.0);
    let len = z.norm();
    if len <= r {
        z
    } else if len > 0.0 {
        z * (r / len)
    } else {
        z
    }
}

/// Complementarity residual of a contact at vertex position `p` and
/// multiplier `lambda`, in metres.
pub fn eval_phi(c: &ContactConstraint, p: &Vec3, lambda: [f64; 3]) -> Vec3 {
    let rho = c.rho;
    let ln = rho * lambda[0];
    let phi_n = ln - (ln - c.gap_at(p)).max(0.0);
    let lt = Vector2::new(rho * lambda[1], rho * lambda[2]);
    let z = lt - c.tangential_displacement(p);
    let phi_t = lt - project_disk(z, rho * c.mu * lambda[0].max(0.0));
    Vec3::new(phi_n, phi_t.x, phi_t.y)
}

/// Residual of a bilateral attachment.
pub fn eval_bilateral_phi(b: &BilateralConstraint, p: &Vec3) -> Vec3 {
    p - b.target
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSource {
    Contact(usize),
    Bilateral(usize),
}

/// Three constraint rows acting on a single vertex.
///
/// Each row is linearized as `D x + E (h²Δλ) = h` with positions responding
/// to the multipliers through `x = A⁻¹ (g + h² Ĵᵀ Δλ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    pub source: BlockSource,
    pub vertex: usize,
    /// Force directions; row `r` of `J` maps the multiplier to a force.
    pub jacobian: Matrix3<f64>,
    /// Derivative of the residual with respect to the vertex position.
    pub d: Matrix3<f64>,
    /// Rows whose multiplier may change this iteration. The others are held
    /// at `λ̃` and drop out of `Ĵ`.
    pub active: [bool; 3],
    /// Derivative of the residual with respect to `h²λ`.
    pub e: Matrix3<f64>,
    pub h: [f64; 3],
    pub phi: [f64; 3],
}

impl ConstraintBlock {
    /// The `3×3` block of `D` on this vertex.
    pub fn d_block(&self) -> Matrix3<f64> {
        self.d
    }

    /// `J` with held rows zeroed.
    pub fn j_active(&self) -> Matrix3<f64> {
        let mut j = self.jacobian;
        for r in 0..3 {
            if !self.active[r] {
                j.row_mut(r).fill(0.0);
            }
        }
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonLinearization {
    pub blocks: Vec<ConstraintBlock>,
    /// `g = b + h² Jᵀ λ̃`.
    pub g: Vec<Vec3>,
    /// Multipliers the increment is added to, stacked per block.
    pub lambda_tilde: Vec<[f64; 3]>,
}

impl NewtonLinearization {
    pub fn rows(&self) -> usize {
        3 * self.blocks.len()
    }

    fn scatter(&self, n_vertices: usize, f: impl Fn(&ConstraintBlock) -> Matrix3<f64>) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows(), 3 * n_vertices);
        for (i, b) in self.blocks.iter().enumerate() {
            d.view_mut((3 * i, 3 * b.vertex), (3, 3)).copy_from(&f(b));
        }
        d
    }

    pub fn d_dense(&self, n_vertices: usize) -> DMatrix<f64> {
        self.scatter(n_vertices, |b| b.d)
    }

    /// Dense `Ĵ`.
    pub fn j_dense(&self, n_vertices: usize) -> DMatrix<f64> {
        self.scatter(n_vertices, |b| b.j_active())
    }

    pub fn e_dense(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.rows(), self.rows());
        for (i, b) in self.blocks.iter().enumerate() {
            e.view_mut((3 * i, 3 * i), (3, 3)).copy_from(&b.e);
        }
        e
    }

    pub fn h_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows(), self.blocks.iter().flat_map(|b| b.h))
    }

    pub fn phi_vec(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows(), self.blocks.iter().flat_map(|b| b.phi))
    }

    /// True when every block has `D = Ĵ` and a symmetric `E`, so `Z` is symmetric.
    pub fn is_symmetric(&self) -> bool {
        self.blocks.iter().all(|b| b.d == b.j_active() && b.e == b.e.transpose())
    }

    /// `D x` for stacked positions.
    pub fn apply_d(&self, x: &[Vec3]) -> DVector<f64> {
        DVector::from_iterator(self.rows(), self.blocks.iter().flat_map(|b| {
            let v = b.d * x[b.vertex];
            [v.x, v.y, v.z]
        }))
    }

    /// `Jᵀ λ` scattered onto vertices.
    pub fn apply_jt(&self, lambda: &[[f64; 3]], n_vertices: usize) -> Vec<Vec3> {
        let mut f = vec![Vec3::zeros(); n_vertices];
        for (b, l) in self.blocks.iter().zip(lambda) {
            f[b.vertex] += b.jacobian.transpose() * Vec3::from(*l);
        }
        f
    }
}

/// Semi-smooth linearization at the iterate `x` with the multipliers stored
/// on the constraints.
///
/// Penetrating or touching normals, sticking tangents and attachments are
/// linear in `x` (`D = J`, `E = 0`). A separated normal holds `λₙ = 0` and its
/// tangents hold `λₜ = 0`; held rows carry `E = ρ/h²` and decouple. A
/// sliding tangent uses the generalized derivative of the disk projection,
/// `P = (r/|z|)(I − ẑẑᵀ)` with `z = ρλₜ − vₜ` and `r = ρμλₙ`, giving
/// `D = P T` and a λ-block `ρ(I − P)` coupled to `λₙ` through `−ρμẑ`.
pub fn build_linearization(
    contacts: &[ContactConstraint],
    bilaterals: &[BilateralConstraint],
    x: &[Vec3],
    b: &[Vec3],
    h: f64,
) -> NewtonLinearization {
    let h2 = h * h;
    let inv_h2 = if h2 > 0.0 { 1.0 / h2 } else { 0.0 };
    let mut blocks = Vec::with_capacity(contacts.len() + bilaterals.len());
    let mut lambda_tilde = Vec::with_capacity(blocks.capacity());
    for (i, c) in contacts.iter().enumerate() {
        let p = &x[c.vertex];
        let rho = c.rho;
        let jac = c.frame();
        let mut lam = c.lambda;
        let mut d = Matrix3::zeros();
        let mut e = Matrix3::zeros();
        let mut active = [true; 3];
        let mut phi = [0.0; 3];
        let gap = c.gap_at(p);
        if gap <= rho * lam[0] {
            phi[0] = gap;
            d.set_row(0, &jac.row(0));
            let vt = c.tangential_displacement(p);
            let lt = Vector2::new(lam[1], lam[2]);
            let z = lt * rho - vt;
            let radius = rho * c.mu * lam[0].max(0.0);
            if z.norm() <= radius {
                phi[1] = vt.x;
                phi[2] = vt.y;
                d.set_row(1, &jac.row(1));
                d.set_row(2, &jac.row(2));
            } else {
                let zn = z.norm();
                let zh = z / zn;
                let proj = (Matrix2::identity() - zh * zh.transpose()) * (radius / zn);
                let pt = rho * lt - zh * radius;
                phi[1] = pt.x;
                phi[2] = pt.y;
                let t = jac.fixed_rows::<2>(1).into_owned();
                d.fixed_rows_mut::<2>(1).copy_from(&(proj * t));
                let lt_block = (Matrix2::identity() - proj) * (rho * inv_h2);
                e.fixed_view_mut::<2, 2>(1, 1).copy_from(&lt_block);
                let coupling = if lam[0] >= 0.0 { -rho * c.mu * inv_h2 } else { 0.0 };
                e[(1, 0)] = coupling * zh.x;
                e[(2, 0)] = coupling * zh.y;
            }
        } else {
            active = [false; 3];
            lam = [0.0; 3];
            for r in 0..3 {
                e[(r, r)] = rho * inv_h2;
            }
        }
        let dx = d * p;
        let mut hv = [0.0; 3];
        for r in 0..3 {
            if active[r] {
                hv[r] = dx[r] - phi[r];
            }
        }
        blocks.push(ConstraintBlock { source: BlockSource::Contact(i), vertex: c.vertex, jacobian: jac, d, active, e, h: hv, phi });
        lambda_tilde.push(lam);
    }
    for (i, bc) in bilaterals.iter().enumerate() {
        let p = &x[bc.vertex];
        let phi = p - bc.target;
        blocks.push(ConstraintBlock {
            source: BlockSource::Bilateral(i),
            vertex: bc.vertex,
            jacobian: Matrix3::identity(),
            d: Matrix3::identity(),
            active: [true; 3],
            e: Matrix3::zeros(),
            h: bc.target.into(),
            phi: phi.into(),
        });
        lambda_tilde.push(bc.lambda);
    }
    let mut g = b.to_vec();
    for (blk, l) in blocks.iter().zip(&lambda_tilde) {
        g[blk.vertex] += blk.jacobian.transpose() * Vec3::from(*l) * h2;
    }
    NewtonLinearization { blocks, g, lambda_tilde }
}
