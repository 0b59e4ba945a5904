//! Seeded sampling utilities shared across modules.
//!
//! All randomness in the crate flows through explicitly seeded ChaCha
//! streams so that every result is reproducible from the seeds recorded
//! in run artifacts.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Derives a sub-seed for an independent stream, keyed by a salt.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer over base xor salt
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal sample via Box-Muller.
pub fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform direction on the unit sphere.
pub fn unit_vector(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(normal(rng), normal(rng), normal(rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Uniform point inside the unit ball.
pub fn ball_point(rng: &mut ChaCha12Rng) -> Vector3<f64> {
    let dir = unit_vector(rng);
    let r = rng.random::<f64>().cbrt();
    dir * r
}

/// Uniform random rotation (via a normalized Gaussian quaternion).
pub fn random_rotation(rng: &mut ChaCha12Rng) -> Matrix3<f64> {
    let q = Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

/// Rotation about a uniform axis by an angle drawn uniformly in
/// `[0, max_angle_rad]`.
pub fn bounded_rotation(rng: &mut ChaCha12Rng, max_angle_rad: f64) -> Matrix3<f64> {
    let axis = unit_vector(rng);
    let angle = rng.random::<f64>() * max_angle_rad;
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}
