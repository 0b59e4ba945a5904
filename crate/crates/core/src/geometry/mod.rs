//! Rigid-transform algebra, projection, sampling, and the weighted SVD
//! solver the matching stages are built on.

mod svd3;

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

pub(crate) use svd3::svd3;

/// A proper rigid transform: `p ↦ rotation · p + translation`.
///
/// The rotation is orthonormal with determinant +1; `new` validates both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    /// Builds a pose, rejecting rotations that are not proper orthonormal.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid() {
            return Err(Error::DegenerateInput(
                "rotation is not proper orthonormal".into(),
            ));
        }
        Ok(pose)
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks `‖RᵀR − I‖_max < tol` and `det(R) ≈ +1`.
    pub fn is_valid(&self) -> bool {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity())
            .abs()
            .max();
        ortho < Self::ORTHONORMAL_TOL
            && (self.rotation.determinant() - 1.0).abs() < Self::ORTHONORMAL_TOL
            && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Geodesic distance between the two rotations, in radians.
    pub fn rotation_geodesic_to(&self, other: &Self) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// An ordered 3D point set with optional per-point descriptor rows.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    descriptors: Option<Array2<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("point cloud is empty".into()));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::DegenerateInput(
                "point cloud has non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            points,
            descriptors: None,
        })
    }

    pub fn with_descriptors(points: Vec<Vector3<f64>>, descriptors: Array2<f64>) -> Result<Self> {
        let mut pc = Self::new(points)?;
        if descriptors.nrows() != pc.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} descriptor rows", pc.len()),
                actual: format!("{}", descriptors.nrows()),
            });
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput(
                "descriptors contain non-finite values".into(),
            ));
        }
        pc.descriptors = Some(descriptors);
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &Vector3<f64> {
        &self.points[i]
    }

    pub fn descriptors(&self) -> Option<&Array2<f64>> {
        self.descriptors.as_ref()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Gathers the sub-cloud at `indices`, carrying descriptor rows along.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    len: self.len(),
                });
            }
            points.push(self.points[i]);
        }
        let descriptors = self.descriptors.as_ref().map(|d| {
            let mut out = Array2::zeros((indices.len(), d.ncols()));
            for (row, &i) in indices.iter().enumerate() {
                out.row_mut(row).assign(&d.row(i));
            }
            out
        });
        let mut pc = Self::new(points)?;
        pc.descriptors = descriptors;
        Ok(pc)
    }
}

/// Center and bounding-sphere radius used for unit-sphere normalization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub center: [f64; 3],
    pub radius: f64,
}

impl NormalizationInfo {
    pub fn new(center: Vector3<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::DegenerateInput(format!(
                "normalization radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            center: [center.x, center.y, center.z],
            radius,
        })
    }

    /// Centroid and max-distance radius of `pc`.
    pub fn from_cloud(pc: &PointCloud) -> Result<Self> {
        let center = pc.centroid();
        let radius = pc
            .points()
            .iter()
            .map(|p| (p - center).norm())
            .fold(0.0f64, f64::max);
        Self::new(center, radius)
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::new(self.center[0], self.center[1], self.center[2])
    }
}

/// Pinhole camera intrinsics plus image bounds, in pixels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(Error::DegenerateInput(
                "camera needs positive focal lengths and nonzero image size".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Axis-aligned half-open pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min <= x_max && y_min <= y_max) {
            return Err(Error::DegenerateInput(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

/// Solves `argmin_{R,t} Σ wᵢ ‖R·srcᵢ + t − dstᵢ‖²` over proper rotations.
///
/// Reflections are rejected by flipping the sign of the singular vector
/// paired with the smallest singular value whenever `det < 0`.
pub fn kabsch_weighted(src: &PointCloud, dst: &PointCloud, weights: &[f64]) -> Result<Pose> {
    if src.len() != dst.len() || src.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("src, dst and weights of equal length {}", src.len()),
            actual: format!("dst {}, weights {}", dst.len(), weights.len()),
        });
    }
    kabsch_core(src.points(), dst.points(), weights)
}

/// Slice-level Kabsch used by the hypothesis sampler and the fine stage.
pub(crate) fn kabsch_core(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: &[f64],
) -> Result<Pose> {
    let n = src.len();
    if n < 3 {
        return Err(Error::DegenerateInput(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::DegenerateInput("weights must be nonnegative".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::DegenerateInput("all weights are zero".into()));
    }

    let mut c_src = Vector3::zeros();
    let mut c_dst = Vector3::zeros();
    for i in 0..n {
        c_src += weights[i] * src[i];
        c_dst += weights[i] * dst[i];
    }
    c_src /= wsum;
    c_dst /= wsum;

    let mut cross = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    for i in 0..n {
        let p = src[i] - c_src;
        let q = dst[i] - c_dst;
        cross += weights[i] * p * q.transpose();
        src_cov += weights[i] * p * p.transpose();
    }

    let src_spectrum = svd3(&src_cov).sigma;
    if src_spectrum.x <= 0.0 || src_spectrum.y <= 1e-12 * src_spectrum.x {
        return Err(Error::DegenerateInput(
            "weighted source covariance has rank < 2".into(),
        ));
    }

    let svd = svd3(&cross);
    let sign = if (svd.v * svd.u.transpose()).determinant() < 0.0 {
        -1.0
    } else {
        1.0
    };
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rotation = svd.v * d * svd.u.transpose();
    let translation = c_dst - rotation * c_src;

    debug_assert!(
        (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max()
            < 1e-9
    );
    Ok(Pose {
        rotation,
        translation,
    })
}

/// Maps every point through the pose; descriptors carry through unchanged.
pub fn transform_points(pose: &Pose, pc: &PointCloud) -> PointCloud {
    let points = pc.points().iter().map(|p| pose.apply(p)).collect();
    PointCloud {
        points,
        descriptors: pc.descriptors.clone(),
    }
}

/// `points′ = (points − center) / radius`.
pub fn normalize_to_unit_sphere(pc: &PointCloud, info: &NormalizationInfo) -> Result<PointCloud> {
    if !(info.radius > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "normalization radius must be positive, got {}",
            info.radius
        )));
    }
    let c = info.center_vec();
    let points = pc.points().iter().map(|p| (p - c) / info.radius).collect();
    Ok(PointCloud {
        points,
        descriptors: pc.descriptors.clone(),
    })
}

/// Inverse of [`normalize_to_unit_sphere`].
pub fn denormalize_from_unit_sphere(
    pc: &PointCloud,
    info: &NormalizationInfo,
) -> Result<PointCloud> {
    if !(info.radius > 0.0) {
        return Err(Error::DegenerateInput(format!(
            "normalization radius must be positive, got {}",
            info.radius
        )));
    }
    let c = info.center_vec();
    let points = pc.points().iter().map(|p| p * info.radius + c).collect();
    Ok(PointCloud {
        points,
        descriptors: pc.descriptors.clone(),
    })
}

/// Tight axis-aligned box over the pixel projections, clamped to the image.
pub fn project_points_bbox(pc: &PointCloud, cam: &Camera) -> Result<BBox2D> {
    let mut x_min = f64::INFINITY;
    let mut y_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (i, p) in pc.points().iter().enumerate() {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { index: i, z: p.z });
        }
        let u = cam.fx * p.x / p.z + cam.cx;
        let v = cam.fy * p.y / p.z + cam.cy;
        x_min = x_min.min(u);
        y_min = y_min.min(v);
        x_max = x_max.max(u);
        y_max = y_max.max(v);
    }
    let w = cam.width as f64;
    let h = cam.height as f64;
    BBox2D::new(
        x_min.clamp(0.0, w),
        y_min.clamp(0.0, h),
        x_max.clamp(0.0, w),
        y_max.clamp(0.0, h),
    )
}

/// `area(a ∩ b) / area(a ∪ b)`; 0 when the union has zero area.
pub fn bbox_iou(a: &BBox2D, b: &BBox2D) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy max-min farthest point sampling.
///
/// The first index is drawn from a ChaCha stream seeded with `seed`; each
/// following index maximizes the distance to the chosen set, ties broken
/// by the lowest index. Output is deterministic under `(pc, n, seed)`.
pub fn farthest_point_sample(pc: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    let total = pc.len();
    if n == 0 || n > total {
        return Err(Error::InvalidCount {
            requested: n,
            available: total,
        });
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let start = rng.random_range(0..total);

    let mut chosen = Vec::with_capacity(n);
    chosen.push(start);
    let pts = pc.points();
    let mut min_d2: Vec<f64> = pts.iter().map(|p| (p - pts[start]).norm_squared()).collect();

    while chosen.len() < n {
        let mut best = 0;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        chosen.push(best);
        for (i, d2) in min_d2.iter_mut().enumerate() {
            let cand = (pts[i] - pts[best]).norm_squared();
            if cand < *d2 {
                *d2 = cand;
            }
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_chacha::ChaCha12Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cloud(points: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()).unwrap()
    }

    fn rot_z(angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
    }

    #[test]
    fn kabsch_identity_case() {
        let src = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let pose = kabsch_weighted(&src, &src, &[1.0, 1.0, 1.0]).unwrap();
        assert!((pose.rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!(pose.translation.norm() < 1e-12);
    }

    #[test]
    fn kabsch_recovers_known_transform() {
        let src = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.3, 0.2, 0.9],
        ]);
        let gt = Pose {
            rotation: rot_z(FRAC_PI_2),
            translation: Vector3::new(1.0, 2.0, 3.0),
        };
        let dst = transform_points(&gt, &src);
        let pose = kabsch_weighted(&src, &dst, &[1.0; 4]).unwrap();
        assert!((pose.rotation - gt.rotation).abs().max() < 1e-9);
        assert!((pose.translation - gt.translation).norm() < 1e-9);
    }

    #[test]
    fn kabsch_rejects_reflection() {
        // Planar source; destination mirrored through the xz-plane.
        let src = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]);
        let dst = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [1.0, -1.0, 0.0]]);
        let w = [1.0; 4];
        let pose = kabsch_weighted(&src, &dst, &w).unwrap();
        assert!(pose.rotation.determinant() > 0.99);
        let residual: f64 = src
            .points()
            .iter()
            .zip(dst.points())
            .map(|(s, d)| (pose.apply(s) - d).norm_squared())
            .sum();
        assert!(residual > 1e-6, "mirror image cannot be fit by a rotation");
    }

    #[test]
    fn kabsch_degenerate_inputs() {
        let two = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(
            kabsch_weighted(&two, &two, &[1.0, 1.0]),
            Err(Error::DegenerateInput(_))
        ));
        let tri = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(matches!(
            kabsch_weighted(&tri, &tri, &[0.0, 0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        let line = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert!(matches!(
            kabsch_weighted(&line, &line, &[1.0, 1.0, 1.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn kabsch_matches_unweighted_oracle() {
        // Uniform weights must agree with plain (unit-weight) Kabsch.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pts: Vec<Vector3<f64>> = (0..12)
                .map(|_| Vector3::new(
                    crate::rng::normal(&mut rng),
                    crate::rng::normal(&mut rng),
                    crate::rng::normal(&mut rng),
                ))
                .collect();
            let src = PointCloud::new(pts).unwrap();
            let gt = Pose {
                rotation: crate::rng::random_rotation(&mut rng),
                translation: Vector3::new(0.3, -0.1, 0.7),
            };
            let dst = transform_points(&gt, &src);
            let a = kabsch_weighted(&src, &dst, &[0.7; 12]).unwrap();
            let b = kabsch_weighted(&src, &dst, &[1.0; 12]).unwrap();
            assert!((a.rotation - b.rotation).abs().max() < 1e-12);
            assert!((a.translation - b.translation).norm() < 1e-12);
        }
    }

    #[test]
    fn kabsch_conjugation_invariance() {
        // Solving on (G·src, G·dst) yields G ∘ pose ∘ G⁻¹.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..20 {
            let pts: Vec<Vector3<f64>> = (0..10)
                .map(|_| crate::rng::ball_point(&mut rng) * 2.0)
                .collect();
            let src = PointCloud::new(pts).unwrap();
            let gt = Pose {
                rotation: crate::rng::random_rotation(&mut rng),
                translation: crate::rng::ball_point(&mut rng),
            };
            let dst = transform_points(&gt, &src);
            let g = Pose {
                rotation: crate::rng::random_rotation(&mut rng),
                translation: crate::rng::ball_point(&mut rng) * 3.0,
            };
            let w: Vec<f64> = (0..10).map(|_| rng.random::<f64>() + 0.1).collect();
            let base = kabsch_weighted(&src, &dst, &w).unwrap();
            let moved = kabsch_weighted(
                &transform_points(&g, &src),
                &transform_points(&g, &dst),
                &w,
            )
            .unwrap();
            let expected = g.compose(&base).compose(&g.inverse());
            assert!((moved.rotation - expected.rotation).abs().max() < 1e-9);
            assert!((moved.translation - expected.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn kabsch_residual_beats_random_poses() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let pts: Vec<Vector3<f64>> = (0..15).map(|_| crate::rng::ball_point(&mut rng)).collect();
        let src = PointCloud::new(pts).unwrap();
        let gt = Pose {
            rotation: crate::rng::random_rotation(&mut rng),
            translation: Vector3::new(0.2, 0.4, -0.3),
        };
        let mut dst = transform_points(&gt, &src);
        // perturb so the optimum is nontrivial
        for p in dst.points.iter_mut() {
            *p += Vector3::new(
                crate::rng::normal(&mut rng),
                crate::rng::normal(&mut rng),
                crate::rng::normal(&mut rng),
            ) * 0.05;
        }
        let w: Vec<f64> = (0..15).map(|_| rng.random::<f64>() + 0.05).collect();
        let residual = |pose: &Pose| -> f64 {
            src.points()
                .iter()
                .zip(dst.points())
                .zip(&w)
                .map(|((s, d), wi)| wi * (pose.apply(s) - d).norm_squared())
                .sum()
        };
        let best = kabsch_weighted(&src, &dst, &w).unwrap();
        let best_res = residual(&best);
        for _ in 0..1000 {
            let candidate = Pose {
                rotation: crate::rng::random_rotation(&mut rng),
                translation: crate::rng::ball_point(&mut rng),
            };
            assert!(best_res <= residual(&candidate) + 1e-12);
        }
    }

    #[test]
    fn transform_round_trip() {
        let pc = cloud(&[[0.1, 0.2, 0.3], [1.0, -1.0, 2.0], [0.0, 0.0, 1.0]]);
        let pose = Pose {
            rotation: rot_z(1.1),
            translation: Vector3::new(-0.4, 0.8, 0.2),
        };
        let back = transform_points(&pose.inverse(), &transform_points(&pose, &pc));
        for (a, b) in pc.points().iter().zip(back.points()) {
            assert!((a - b).norm() < 1e-12);
        }
        let origin = cloud(&[[0.0, 0.0, 0.0]]);
        let shift = Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::new(0.0, 0.0, 1.0),
        };
        assert_abs_diff_eq!(transform_points(&shift, &origin).point(0).z, 1.0);
    }

    #[test]
    fn normalization_round_trip() {
        let pc = cloud(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [-2.0, 0.0, 1.0]]);
        let info = NormalizationInfo::from_cloud(&pc).unwrap();
        let normed = normalize_to_unit_sphere(&pc, &info).unwrap();
        let max_norm = normed.points().iter().map(|p| p.norm()).fold(0.0, f64::max);
        assert_abs_diff_eq!(max_norm, 1.0, epsilon = 1e-12);
        let back = denormalize_from_unit_sphere(&normed, &info).unwrap();
        for (a, b) in pc.points().iter().zip(back.points()) {
            assert!((a - b).norm() < 1e-12);
        }
        // Already-normalized input is unchanged under a trivial info.
        let trivial = NormalizationInfo::new(Vector3::zeros(), 1.0).unwrap();
        let same = normalize_to_unit_sphere(&normed, &trivial).unwrap();
        for (a, b) in normed.points().iter().zip(same.points()) {
            assert!((a - b).norm() == 0.0);
        }
        assert!(NormalizationInfo::new(Vector3::zeros(), 0.0).is_err());
    }

    #[test]
    fn projection_cases() {
        let cam = Camera::new(100.0, 100.0, 112.0, 112.0, 224, 224).unwrap();
        let axis = cloud(&[[0.0, 0.0, 1.0]]);
        let b = project_points_bbox(&axis, &cam).unwrap();
        assert_eq!(b, BBox2D::new(112.0, 112.0, 112.0, 112.0).unwrap());

        // Flat square of half-size s at depth z projects to half-width fx·s/z.
        let s = 0.5;
        let z = 4.0;
        let square = cloud(&[[-s, -s, z], [s, -s, z], [-s, s, z], [s, s, z]]);
        let b = project_points_bbox(&square, &cam).unwrap();
        assert_abs_diff_eq!(b.x_max - b.x_min, 2.0 * cam.fx * s / z, epsilon = 1e-12);

        // Points outside the frustum clamp to the image bounds.
        let wide = cloud(&[[-10.0, -10.0, 1.0], [10.0, 10.0, 1.0]]);
        let b = project_points_bbox(&wide, &cam).unwrap();
        assert_eq!(b, BBox2D::new(0.0, 0.0, 224.0, 224.0).unwrap());

        let behind = cloud(&[[0.0, 0.0, -1.0]]);
        assert!(matches!(
            project_points_bbox(&behind, &cam),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn iou_cases() {
        let a = BBox2D::new(0.0, 0.0, 2.0, 2.0).unwrap();
        assert_abs_diff_eq!(bbox_iou(&a, &a), 1.0);
        let b = BBox2D::new(3.0, 3.0, 5.0, 5.0).unwrap();
        assert_abs_diff_eq!(bbox_iou(&a, &b), 0.0);
        let c = BBox2D::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_abs_diff_eq!(bbox_iou(&a, &c), 1.0 / 7.0, epsilon = 1e-15);
        // symmetry and bounds over random boxes
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha12Rng| {
                let x0: f64 = rng.random::<f64>() * 4.0;
                let y0: f64 = rng.random::<f64>() * 4.0;
                BBox2D::new(x0, y0, x0 + rng.random::<f64>() * 4.0, y0 + rng.random::<f64>() * 4.0)
                    .unwrap()
            };
            let (p, q) = (mk(&mut rng), mk(&mut rng));
            let pq = bbox_iou(&p, &q);
            assert_abs_diff_eq!(pq, bbox_iou(&q, &p));
            assert!((0.0..=1.0).contains(&pq));
        }
    }

    #[test]
    fn fps_contracts() {
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        // n = N covers every index exactly once
        let all = farthest_point_sample(&pc, 4, 7).unwrap();
        let mut sorted = all.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        // n = 1 is exactly the seeded start
        let one = farthest_point_sample(&pc, 1, 7).unwrap();
        assert_eq!(one[0], all[0]);
        // determinism
        assert_eq!(
            farthest_point_sample(&pc, 3, 123).unwrap(),
            farthest_point_sample(&pc, 3, 123).unwrap()
        );
        assert!(matches!(
            farthest_point_sample(&pc, 5, 0),
            Err(Error::InvalidCount { .. })
        ));
    }

    #[test]
    fn fps_square_opposite_corner() {
        // Corners of the unit square, indices 0..4 with 2 opposite to 0.
        let pc = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let seed = (0..u64::MAX)
            .find(|&s| farthest_point_sample(&pc, 1, s).unwrap()[0] == 0)
            .unwrap();
        let picked = farthest_point_sample(&pc, 2, seed).unwrap();
        assert_eq!(picked, vec![0, 2]);
    }

    #[test]
    fn pose_validation() {
        assert!(Pose::new(Matrix3::identity(), Vector3::zeros()).is_ok());
        let mut reflect = Matrix3::identity();
        reflect[(2, 2)] = -1.0;
        assert!(Pose::new(reflect, Vector3::zeros()).is_err());
        let skew = Matrix3::identity() * 1.5;
        assert!(Pose::new(skew, Vector3::zeros()).is_err());
    }
}
