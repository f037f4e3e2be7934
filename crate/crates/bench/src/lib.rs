//! Shared fixtures for the benchmarks.

use deformsplat::{Camera, DeformField, Gaussian2D, Scene, SplatParams};
use nalgebra::{Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Square pinhole camera at the origin looking down +z.
pub fn camera(size: usize) -> Camera {
    let f = size as f64;
    Camera::new((f, f), (f / 2.0, f / 2.0), Matrix4::identity(), (size, size), 1.0, 1000.0).expect("valid camera")
}

/// `count` random splats filling the view of [`camera`] between depths 40
/// and 60.
pub fn random_gaussians(count: usize, seed: u64) -> Vec<Gaussian2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z = rng.random_range(40.0..60.0);
            let center = Vector3::new(rng.random_range(-0.45..0.45) * z, rng.random_range(-0.45..0.45) * z, z);
            let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let b = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (tu, tv) = deformsplat::orthonormalize_frame(&a, &b).unwrap_or((Vector3::x(), Vector3::y()));
            Gaussian2D {
                center,
                tangent_u: tu,
                tangent_v: tv,
                scale_u: rng.random_range(0.3..1.5),
                scale_v: rng.random_range(0.3..1.5),
                opacity: rng.random_range(0.2..0.95),
                color: Vector3::new(rng.random(), rng.random(), rng.random()),
            }
        })
        .collect()
}

/// Random scene with identity deformation banks of `basis` functions.
pub fn random_scene(count: usize, basis: usize, seed: u64) -> Scene {
    let params = random_gaussians(count, seed).iter().map(SplatParams::from_gaussian).collect();
    let deform = (basis > 0).then(|| DeformField::identity(count, basis));
    Scene::new(params, deform).expect("consistent scene")
}
