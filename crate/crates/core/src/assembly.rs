//! Global system assembly and factorization.
//!
//! Projective stencils act identically on the three coordinates, so the
//! system matrix is `A = Â ⊗ I₃` with the per-vertex scalar matrix
//! `Â = M̂ + h² Σᵢ wᵢ ĜᵢᵀĜᵢ`. Only `Â` is stored and factored:
//! `P Â Pᵀ = L Lᵀ` with a minimum-degree permutation `P`, and
//! `Â⁻¹ = (S P)ᵀ (S P)` where `S = L⁻¹` is formed explicitly.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::material::{ProjectionState, ProjectiveConstraint};
use crate::mesh::{DeformableMesh, Vec3};
use crate::sparse::{minimum_degree_ordering, Cholesky, CscMatrix, FactorError};

/// Mass multiplier used to pin a vertex in place.
pub const PIN_MASS_SCALE: f64 = 1e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssemblyError {
    #[error("system matrix is not positive definite: {0}")]
    NotPositiveDefinite(FactorError),
    #[error("invalid timestep {0}")]
    InvalidTimestep(f64),
    #[error("vertex {vertex} has non-positive mass {mass}")]
    BadMass { vertex: usize, mass: f64 },
    #[error("environments use different timesteps ({0} vs {1})")]
    HeterogeneousTimestep(f64, f64),
    #[error("no environments to stack")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct SystemFactorization {
    pub h: f64,
    /// Diagonal of `M̂` including pin augmentation.
    pub masses: Vec<f64>,
    /// Unaugmented vertex masses.
    pub physical_masses: Vec<f64>,
    pub pinned: Vec<bool>,
    /// Scalar system matrix `Â`.
    pub a: CscMatrix,
    /// `perm[new] = old` for the factored ordering.
    pub perm: Vec<usize>,
    inv_perm: Vec<usize>,
    /// Cholesky factor of `P Â Pᵀ`.
    pub l: CscMatrix,
    /// Explicit inverse `S = L⁻¹`.
    pub s: CscMatrix,
}

impl SystemFactorization {
    /// Assembles `Â = M̂ + h² Σ wᵢ ĜᵢᵀĜᵢ`, orders, factors and inverts it.
    pub fn new(
        masses: &[f64],
        pinned: &[bool],
        constraints: &[ProjectiveConstraint],
        h: f64,
    ) -> Result<Self, AssemblyError> {
        if !(h >= 0.0) || !h.is_finite() {
            return Err(AssemblyError::InvalidTimestep(h));
        }
        let n = masses.len();
        let mut aug = Vec::with_capacity(n);
        for (v, &m) in masses.iter().enumerate() {
            if !(m > 0.0) || !m.is_finite() {
                return Err(AssemblyError::BadMass { vertex: v, mass: m });
            }
            aug.push(if pinned.get(v).copied().unwrap_or(false) { m * PIN_MASS_SCALE } else { m });
        }
        let h2 = h * h;
        let mut trip: Vec<(usize, usize, f64)> = (0..n).map(|v| (v, v, aug[v])).collect();
        for c in constraints {
            let g = &c.stencil;
            for (ci, &u) in c.vertices.iter().enumerate() {
                for (cj, &v) in c.vertices.iter().enumerate() {
                    let gg: f64 = (0..g.nrows()).map(|a| g[(a, ci)] * g[(a, cj)]).sum();
                    trip.push((u, v, h2 * c.weight * gg));
                }
            }
        }
        let a = CscMatrix::from_triplets(n, n, &trip);
        let perm = minimum_degree_ordering(&a);
        let mut inv_perm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv_perm[old] = new;
        }
        let chol = Cholesky::factor(&a.permute_symmetric(&perm)).map_err(AssemblyError::NotPositiveDefinite)?;
        let s = chol.inverse_factor();
        Ok(Self {
            h,
            masses: aug,
            physical_masses: masses.to_vec(),
            pinned: (0..n).map(|v| pinned.get(v).copied().unwrap_or(false)).collect(),
            a,
            perm,
            inv_perm,
            l: chol.l,
            s,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.masses.len()
    }

    /// `(S P) g`, the first half of `A⁻¹ g`.
    pub fn apply_s(&self, g: &[Vec3]) -> Vec<[f64; 3]> {
        let n = self.num_vertices();
        let u: Vec<[f64; 3]> = (0..n).map(|i| g[self.perm[i]].into()).collect();
        let mut y = vec![[0.0; 3]; n];
        self.s.mul_interleaved(&u, &mut y);
        y
    }

    /// `(S P)ᵀ y`.
    pub fn apply_st(&self, y: &[[f64; 3]]) -> Vec<Vec3> {
        let n = self.num_vertices();
        let mut z = vec![[0.0; 3]; n];
        self.s.tr_mul_interleaved(y, &mut z);
        (0..n).map(|v| Vec3::from(z[self.inv_perm[v]])).collect()
    }

    /// `A⁻¹ g = (S P)ᵀ (S P) g` as two sparse products.
    pub fn apply_inverse(&self, g: &[Vec3]) -> Vec<Vec3> {
        self.apply_st(&self.apply_s(g))
    }

    /// Entry `(u, v)` of `Â⁻¹`, the dot product of two columns of `S P`.
    pub fn inverse_entry(&self, u: usize, v: usize) -> f64 {
        let (ri, vi) = self.s.col(self.inv_perm[u]);
        let (rj, vj) = self.s.col(self.inv_perm[v]);
        let (mut a, mut b, mut acc) = (0, 0, 0.0);
        while a < ri.len() && b < rj.len() {
            match ri[a].cmp(&rj[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    acc += vi[a] * vj[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        acc
    }

    /// `A x`.
    pub fn mul_a(&self, x: &[Vec3]) -> Vec<Vec3> {
        let n = self.num_vertices();
        let xs: Vec<[f64; 3]> = x.iter().map(|v| (*v).into()).collect();
        let mut y = vec![[0.0; 3]; n];
        self.a.mul_interleaved(&xs, &mut y);
        y.into_iter().map(Vec3::from).collect()
    }

    /// Reference solve by forward and backward substitution with `L`.
    pub fn triangular_solve(&self, g: &[Vec3]) -> Vec<Vec3> {
        let chol = Cholesky { l: self.l.clone() };
        let n = self.num_vertices();
        let mut out = vec![Vec3::zeros(); n];
        for k in 0..3 {
            let b: Vec<f64> = (0..n).map(|i| g[self.perm[i]][k]).collect();
            let x = chol.solve(&b);
            for i in 0..n {
                out[self.perm[i]][k] = x[i];
            }
        }
        out
    }

    /// Dense `A = Â ⊗ I₃` with coordinates interleaved per vertex.
    pub fn dense_full(&self) -> DMatrix<f64> {
        let n = self.num_vertices();
        let scalar = self.a.to_dense();
        DMatrix::from_fn(3 * n, 3 * n, |r, c| if r % 3 == c % 3 { scalar[(r / 3, c / 3)] } else { 0.0 })
    }

    pub fn fill_stats(&self) -> FillStats {
        FillStats { n: self.num_vertices(), nnz_a: self.a.nnz(), nnz_l: self.l.nnz(), nnz_s: self.s.nnz() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillStats {
    pub n: usize,
    pub nnz_a: usize,
    pub nnz_l: usize,
    pub nnz_s: usize,
}

/// Assembles and factors the system for a single mesh without pins.
pub fn assemble_system(
    mesh: &DeformableMesh,
    constraints: &[ProjectiveConstraint],
    h: f64,
) -> Result<SystemFactorization, AssemblyError> {
    SystemFactorization::new(&mesh.vertex_masses, &[], constraints, h)
}

/// `y = x + h v + h² M⁻¹ f_ext`.
pub fn predict_state(x: &[Vec3], v: &[Vec3], f_ext: &[Vec3], masses: &[f64], h: f64) -> Vec<Vec3> {
    x.iter()
        .zip(v)
        .zip(f_ext.iter().zip(masses))
        .map(|((x, v), (f, m))| x + v * h + f * (h * h / m))
        .collect()
}

/// `b = M y + h² Σᵢ wᵢ Gᵢᵀ pᵢ`.
pub fn assemble_rhs(
    fact: &SystemFactorization,
    y: &[Vec3],
    constraints: &[ProjectiveConstraint],
    projections: &ProjectionState,
) -> Vec<Vec3> {
    let mut b: Vec<Vec3> = y.iter().zip(&fact.masses).map(|(y, m)| y * *m).collect();
    let h2 = fact.h * fact.h;
    for (i, c) in constraints.iter().enumerate() {
        c.accumulate_rhs(projections.block(i), h2, &mut b);
    }
    b
}

/// Block-diagonal stack of per-environment systems. Environments that share
/// assets share one factorization.
#[derive(Debug, Clone)]
pub struct MultiEnvSystem {
    pub h: f64,
    pub blocks: Vec<Arc<SystemFactorization>>,
    /// Vertex offset of each environment in stacked vectors.
    pub offsets: Vec<usize>,
}

impl MultiEnvSystem {
    pub fn n_envs(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_vertices(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn env_range(&self, env: usize) -> std::ops::Range<usize> {
        self.offsets[env]..self.offsets[env + 1]
    }

    /// `Ā⁻¹ ḡ` applied block by block.
    pub fn apply_inverse(&self, g: &[Vec3]) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(g.len());
        for (e, block) in self.blocks.iter().enumerate() {
            out.extend(block.apply_inverse(&g[self.env_range(e)]));
        }
        out
    }

    /// The assembled block-diagonal scalar matrix `Ā`.
    pub fn stacked_matrix(&self) -> CscMatrix {
        let n = self.total_vertices();
        let mut trip = Vec::new();
        for (e, block) in self.blocks.iter().enumerate() {
            let off = self.offsets[e];
            for j in 0..block.a.ncols {
                let (rows, vals) = block.a.col(j);
                for (&i, &v) in rows.iter().zip(vals) {
                    trip.push((i + off, j + off, v));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &trip)
    }
}

pub fn stack_envs(systems: Vec<Arc<SystemFactorization>>) -> Result<MultiEnvSystem, AssemblyError> {
    let first = systems.first().ok_or(AssemblyError::Empty)?;
    let h = first.h;
    let mut offsets = vec![0];
    for s in &systems {
        if s.h != h {
            return Err(AssemblyError::HeterogeneousTimestep(h, s.h));
        }
        offsets.push(offsets.last().unwrap() + s.num_vertices());
    }
    Ok(MultiEnvSystem { h, blocks: systems, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{build_constraints, project_all, MaterialParams};
    use crate::mesh::{make_grid_cloth, ElementType};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloth(n: usize) -> (DeformableMesh, Vec<ProjectiveConstraint>) {
        let g = make_grid_cloth(n, n, 1.0).unwrap().with_total_mass(0.5).unwrap();
        let c = build_constraints(&g, &MaterialParams::cloth(0.5)).unwrap();
        (g, c)
    }

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn single_free_vertex() {
        let m = DeformableMesh::new(vec![Vec3::zeros()], vec![], ElementType::Triangle).unwrap().with_total_mass(2.0).unwrap();
        let f = assemble_system(&m, &[], 0.01).unwrap();
        assert_eq!(f.dense_full(), DMatrix::from_diagonal_element(3, 3, 2.0));
        assert_eq!(f.s.to_dense(), DMatrix::from_element(1, 1, 1.0 / 2.0f64.sqrt()));
    }

    #[test]
    fn zero_timestep_gives_mass_matrix() {
        let (g, c) = cloth(3);
        let f = assemble_system(&g, &c, 0.0).unwrap();
        let a = f.a.to_dense();
        assert_eq!(a, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(g.vertex_masses.clone())));
    }

    #[test]
    fn small_grid_inverse_matches_dense() {
        let (g, c) = cloth(2);
        let f = assemble_system(&g, &c, 0.01).unwrap();
        let a = f.dense_full();
        let ainv = a.clone().try_inverse().unwrap();
        let n = g.num_vertices();
        // Build SᵀS column by column through the sparse operator.
        let mut sts = DMatrix::zeros(3 * n, 3 * n);
        for col in 0..3 * n {
            let mut e = vec![Vec3::zeros(); n];
            e[col / 3][col % 3] = 1.0;
            let x = f.apply_inverse(&e);
            for (v, xv) in x.iter().enumerate() {
                for k in 0..3 {
                    sts[(3 * v + k, col)] = xv[k];
                }
            }
        }
        assert!((&sts * &a - DMatrix::identity(3 * n, 3 * n)).amax() < 1e-8);
        assert!((sts - ainv).amax() < 1e-8);
    }

    #[test]
    fn factor_reconstructs_and_inverse_factor() {
        let (g, c) = cloth(6);
        let f = assemble_system(&g, &c, 0.01).unwrap();
        let l = f.l.to_dense();
        let pap = f.a.permute_symmetric(&f.perm).to_dense();
        assert!((&l * l.transpose() - &pap).amax() / pap.amax() < 1e-10);
        let n = f.num_vertices();
        assert!((l * f.s.to_dense() - DMatrix::identity(n, n)).amax() < 1e-8);
    }

    #[test]
    fn sparse_inverse_matches_triangular_solves() {
        let (g, c) = cloth(7);
        let f = assemble_system(&g, &c, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let v = random_vecs(&mut rng, g.num_vertices());
            let x = f.apply_inverse(&v);
            let r = f.triangular_solve(&v);
            let num: f64 = x.iter().zip(&r).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
            let den: f64 = r.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
            assert!(num / den < 1e-8);
            let back = f.mul_a(&x);
            let err: f64 = back.iter().zip(&v).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
            let vn: f64 = v.iter().map(|a| a.norm_squared()).sum::<f64>().sqrt();
            assert!(err / vn < 1e-6);
        }
    }

    #[test]
    fn inverse_entries_match_dense() {
        let (g, c) = cloth(4);
        let f = assemble_system(&g, &c, 0.01).unwrap();
        let inv = f.a.to_dense().try_inverse().unwrap();
        for u in 0..g.num_vertices() {
            for v in 0..g.num_vertices() {
                assert!((f.inverse_entry(u, v) - inv[(u, v)]).abs() < 1e-10 * inv.amax());
            }
        }
    }

    #[test]
    fn predict_state_cases() {
        let x = vec![Vec3::new(1.0, 2.0, 3.0)];
        let g = vec![Vec3::new(0.0, -9.81, 0.0)];
        let y = predict_state(&x, &[Vec3::zeros()], &g, &[1.0], 0.01);
        assert!((y[0] - Vec3::new(1.0, 2.0 - 9.81e-4, 3.0)).norm() < 1e-15);
        let v = vec![Vec3::new(1.0, 0.0, -2.0)];
        let y = predict_state(&x, &v, &[Vec3::zeros()], &[1.0], 0.1);
        assert_eq!(y[0], x[0] + v[0] * 0.1);
        let y = predict_state(&x, &v, &g, &[1.0], 0.0);
        assert_eq!(y[0], x[0]);
    }

    #[test]
    fn rhs_without_constraints_is_momentum() {
        let (g, _) = cloth(3);
        let f = assemble_system(&g, &[], 0.01).unwrap();
        let y = g.vertices.clone();
        let b = assemble_rhs(&f, &y, &[], &ProjectionState::for_constraints(&[]));
        for (v, bv) in b.iter().enumerate() {
            assert_eq!(*bv, y[v] * g.vertex_masses[v]);
        }
    }

    #[test]
    fn rest_state_is_fixed_point_of_global_step() {
        let (g, c) = cloth(5);
        let f = assemble_system(&g, &c, 0.01).unwrap();
        let mut p = ProjectionState::for_constraints(&c);
        project_all(&c, &g.vertices, &mut p).unwrap();
        let b = assemble_rhs(&f, &g.vertices, &c, &p);
        let x = f.apply_inverse(&b);
        for (a, r) in x.iter().zip(&g.vertices) {
            assert!((a - r).norm() < 1e-8);
        }
    }

    #[test]
    fn stretched_element_rhs_matches_dense() {
        let g = make_grid_cloth(2, 2, 1.0).unwrap();
        let params = MaterialParams { bending: 0.0, ..MaterialParams::cloth(1.0) };
        let c = build_constraints(&g, &params).unwrap();
        let h = 0.01;
        let f = assemble_system(&g, &c, h).unwrap();
        let x: Vec<Vec3> = g.vertices.iter().map(|v| Vec3::new(2.0 * v.x, v.y, v.z)).collect();
        let mut p = ProjectionState::for_constraints(&c);
        project_all(&c, &x, &mut p).unwrap();
        let b = assemble_rhs(&f, &x, &c, &p);
        // Dense oracle: expand each G ⊗ I₃ and accumulate h² w Gᵀ p.
        let n = g.num_vertices();
        let mut dense = nalgebra::DVector::zeros(3 * n);
        for v in 0..n {
            for k in 0..3 {
                dense[3 * v + k] = g.vertex_masses[v] * x[v][k];
            }
        }
        for (i, ci) in c.iter().enumerate() {
            let rows = ci.rows();
            let mut gfull = DMatrix::zeros(rows, 3 * n);
            for a in 0..ci.block_rows() {
                for (col, &v) in ci.vertices.iter().enumerate() {
                    for k in 0..3 {
                        gfull[(3 * a + k, 3 * v + k)] = ci.stencil[(a, col)];
                    }
                }
            }
            let pv = nalgebra::DVector::from_iterator(rows, p.block(i).iter().flat_map(|q| q.iter().copied()));
            dense += gfull.transpose() * pv * (h * h * ci.weight);
        }
        for v in 0..n {
            for k in 0..3 {
                assert!((b[v][k] - dense[3 * v + k]).abs() < 1e-12);
            }
        }
        let my: Vec<Vec3> = x.iter().zip(&g.vertex_masses).map(|(x, m)| x * *m).collect();
        assert!(b.iter().zip(&my).any(|(a, b)| (a - b).norm() > 1e-8));
    }

    #[test]
    fn stacking_checks_timestep() {
        let (g, c) = cloth(3);
        let a = Arc::new(assemble_system(&g, &c, 0.01).unwrap());
        let b = Arc::new(assemble_system(&g, &c, 0.02).unwrap());
        assert!(matches!(stack_envs(vec![a.clone(), b]), Err(AssemblyError::HeterogeneousTimestep(..))));
        let s = stack_envs(vec![a.clone(), a.clone(), a]).unwrap();
        assert_eq!(s.total_vertices(), 27);
        let m = s.stacked_matrix();
        // Block-diagonal: nothing couples two environments.
        for j in 0..m.ncols {
            for &i in m.col(j).0 {
                assert_eq!(i / 9, j / 9);
            }
        }
    }

    #[test]
    fn bad_mass_rejected() {
        assert!(matches!(SystemFactorization::new(&[1.0, 0.0], &[], &[], 0.01), Err(AssemblyError::BadMass { vertex: 1, .. })));
    }

    proptest::proptest! {
        #[test]
        fn factorization_identities(n in 2usize..7, h in 1e-3f64..0.05, bending in 0.0f64..1.0, pin_mask in 0u64..16, seed in 0u64..100) {
            let g = make_grid_cloth(n, n, 0.4).unwrap().with_total_mass(0.3).unwrap();
            let c = build_constraints(&g, &MaterialParams { bending, ..MaterialParams::cloth(0.3) }).unwrap();
            let nv = g.num_vertices();
            let pinned: Vec<bool> = (0..nv).map(|v| v < 4 && pin_mask & (1 << v) != 0).collect();
            let f = SystemFactorization::new(&g.vertex_masses, &pinned, &c, h).unwrap();
            let ls = f.l.to_dense() * f.s.to_dense();
            proptest::prop_assert!((ls - DMatrix::identity(nv, nv)).amax() < 1e-8);
            let v = random_vecs(&mut ChaCha8Rng::seed_from_u64(seed), nv);
            let back = f.apply_inverse(&f.mul_a(&v));
            let err: f64 = back.iter().zip(&v).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
            let norm: f64 = v.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt();
            proptest::prop_assert!(err / norm < 1e-6);
        }
    }
}
