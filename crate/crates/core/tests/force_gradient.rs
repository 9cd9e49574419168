mod common;

use common::{force_fd_error, jitter};
use drape::material::{build_constraints, Constitutive, ConstraintKind, MaterialParams};
use drape::mesh::{make_grid_cloth, make_tet_box, DeformableMesh, ElementType, Vec3};

const STATES: u64 = 20;

#[test]
fn triangle_arap_force_is_energy_gradient() {
    let mesh = make_grid_cloth(4, 4, 0.3).unwrap();
    let params = MaterialParams { bending: 0.0, ..MaterialParams::cloth(0.1) };
    let cs = build_constraints(&mesh, &params).unwrap();
    for seed in 0..STATES {
        let x = jitter(&mesh.rest_vertices, 0.03, seed);
        let err = force_fd_error(&cs, &x, 1e-7);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn tet_arap_force_is_energy_gradient() {
    let mesh = make_tet_box(2, 1, 1, [0.2, 0.1, 0.1]).unwrap();
    let params = MaterialParams { constitutive: Constitutive::TetArap, ..MaterialParams::cloth(0.1) };
    let cs = build_constraints(&mesh, &params).unwrap();
    for seed in 0..STATES {
        let x = jitter(&mesh.rest_vertices, 0.02, 100 + seed);
        let err = force_fd_error(&cs, &x, 1e-7);
        assert!(err < 1e-4, "seed {seed}: {err:e}");
    }
}

#[test]
fn bending_force_is_energy_gradient() {
    // A curved rest shape exercises the non-zero rest-curvature projection.
    let flat = make_grid_cloth(4, 4, 0.3).unwrap();
    let bumped: Vec<Vec3> = flat.rest_vertices.iter().map(|p| Vec3::new(p.x, 0.2 * (p.x * p.x + 0.5 * p.z * p.z), p.z)).collect();
    for mesh in [flat.clone(), DeformableMesh::new(bumped, flat.elements.clone(), ElementType::Triangle).unwrap()] {
        let cs: Vec<_> = build_constraints(&mesh, &MaterialParams::cloth(0.1))
            .unwrap()
            .into_iter()
            .filter(|c| c.kind == ConstraintKind::Bending)
            .collect();
        assert!(!cs.is_empty());
        for seed in 0..STATES {
            let x = jitter(&mesh.rest_vertices, 0.03, 200 + seed);
            let err = force_fd_error(&cs, &x, 1e-7);
            assert!(err < 1e-4, "seed {seed}: {err:e}");
        }
    }
}
