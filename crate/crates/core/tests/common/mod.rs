#![allow(dead_code)]

use drape::material::{elastic_energy, internal_force, ProjectiveConstraint};
use drape::mesh::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error between `internal_force` and the negated central
/// difference of the proximal energy.
pub fn force_fd_error(cs: &[ProjectiveConstraint], x: &[Vec3], eps: f64) -> f64 {
    let f = internal_force(cs, x).expect("projection");
    let mut num = 0.0;
    let mut den = 0.0;
    let mut xp = x.to_vec();
    for v in 0..x.len() {
        for k in 0..3 {
            let orig = xp[v][k];
            xp[v][k] = orig + eps;
            let ep = elastic_energy(cs, &xp).expect("energy");
            xp[v][k] = orig - eps;
            let em = elastic_energy(cs, &xp).expect("energy");
            xp[v][k] = orig;
            let fd = -(ep - em) / (2.0 * eps);
            num += (f[v][k] - fd).powi(2);
            den += fd * fd;
        }
    }
    num.sqrt() / den.sqrt().max(1e-300)
}

/// `x` displaced by uniform noise of the given amplitude, seeded.
pub fn jitter(x: &[Vec3], amplitude: f64, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.iter()
        .map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-amplitude..amplitude)))
        .collect()
}
