//! SO(3)/pose algebra and plane primitives.
//!
//! Attitude perturbations are right-multiplicative everywhere in the crate:
//! `R = R̂ · Exp(δθ)`. Translations perturb additively.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, to_f64, Real};

pub type Vec3<T> = Vector3<T>;
pub type Mat3<T> = Matrix3<T>;
/// Proper orthonormal 3×3 matrix.
pub type RotationMatrix<T> = Rotation3<T>;

/// Default upper bound on `λ_min / λ_mid` for an accepted plane fit.
pub const DEFAULT_PLANARITY_RATIO: f64 = 0.1;

const SMALL_ANGLE: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("matrix is not a proper rotation (orthonormality error {0:e})")]
    NotOrthonormal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PlaneFitError {
    #[error("plane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("point set is degenerate for a plane fit")]
    Degenerate,
}

/// `[v]×`, so that `skew(v) * w == v.cross(&w)`.
pub fn skew<T: Real>(v: &Vec3<T>) -> Mat3<T> {
    let z = T::zero();
    Matrix3::new(z, -v.z, v.y, v.z, z, -v.x, -v.y, v.x, z)
}

/// Inverse of [`skew`] on the antisymmetric part of `m`.
pub fn vee<T: Real>(m: &Mat3<T>) -> Vec3<T> {
    let half = lit::<T>(0.5);
    Vector3::new(
        (m[(2, 1)] - m[(1, 2)]) * half,
        (m[(0, 2)] - m[(2, 0)]) * half,
        (m[(1, 0)] - m[(0, 1)]) * half,
    )
}

/// Exponential map from a rotation vector to a rotation matrix (Rodrigues).
pub fn so3_exp<T: Real>(theta: &Vec3<T>) -> RotationMatrix<T> {
    let angle = theta.norm();
    let k = skew(theta);
    let k2 = k * k;
    let m = if angle < lit(SMALL_ANGLE) {
        Matrix3::identity() + k + k2 * lit::<T>(0.5)
    } else {
        let half = angle * lit::<T>(0.5);
        let s = half.sin();
        // 1 - cos(a) written as 2 sin²(a/2) to keep precision for small angles.
        Matrix3::identity() + k * (angle.sin() / angle) + k2 * (lit::<T>(2.0) * s * s / (angle * angle))
    };
    Rotation3::from_matrix_unchecked(m)
}

/// Logarithm map; the returned rotation vector has norm in `[0, π]`.
///
/// At exactly π the axis sign is chosen so that its largest-magnitude
/// component is positive.
pub fn so3_log<T: Real>(r: &Mat3<T>) -> Result<Vec3<T>, GeometryError> {
    let err = (r.transpose() * r - Matrix3::identity()).norm();
    if !(err <= T::orthonormal_tolerance()) || r.determinant() <= T::zero() {
        return Err(GeometryError::NotOrthonormal(to_f64(err)));
    }
    Ok(log_unchecked(r))
}

/// Logarithm of a rotation already known to be orthonormal.
pub fn rotation_log<T: Real>(r: &RotationMatrix<T>) -> Vec3<T> {
    log_unchecked(r.matrix())
}

fn log_unchecked<T: Real>(r: &Mat3<T>) -> Vec3<T> {
    let one = T::one();
    let half = lit::<T>(0.5);
    let axis_sin = vee(r); // sin(θ)·a
    let sin_angle = axis_sin.norm();
    let cos_angle = ((r.trace() - one) * half).clamp(-one, one);
    let angle = sin_angle.atan2(cos_angle);

    if angle < lit(SMALL_ANGLE) {
        return axis_sin;
    }
    if cos_angle > lit(-0.99) {
        return axis_sin * (angle / sin_angle);
    }

    // Near π the antisymmetric part vanishes; recover the axis from the
    // symmetric part, aaᵀ = ((R + Rᵀ)/2 − cosθ·I) / (1 − cosθ).
    let sym = (r + r.transpose()) * half - Matrix3::identity() * cos_angle;
    let outer = sym / (one - cos_angle);
    let mut best = 0;
    for i in 1..3 {
        if outer[(i, i)] > outer[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vec3<T> = outer.column(best).into_owned();
    axis /= axis.norm();
    let align = axis.dot(&axis_sin);
    if align < T::zero() {
        axis = -axis;
    } else if align.abs() <= lit(1e-12) {
        let mut lead = 0;
        for i in 1..3 {
            if axis[i].abs() > axis[lead].abs() {
                lead = i;
            }
        }
        if axis[lead] < T::zero() {
            axis = -axis;
        }
    }
    axis * angle
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r(φ)·δ)`.
pub fn right_jacobian<T: Real>(phi: &Vec3<T>) -> Mat3<T> {
    let angle = phi.norm();
    let k = skew(phi);
    if angle < lit(1e-5) {
        return Matrix3::identity() - k * lit::<T>(0.5) + k * k * lit::<T>(1.0 / 6.0);
    }
    let a2 = angle * angle;
    let half = angle * lit::<T>(0.5);
    let s = half.sin();
    Matrix3::identity() - k * (lit::<T>(2.0) * s * s / a2) + k * k * ((angle - angle.sin()) / (a2 * angle))
}

/// Rigid transform; maps points from its child frame into its parent frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Pose<T: Real> {
    pub rotation: RotationMatrix<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: RotationMatrix<T>, translation: Vec3<T>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn transform_point(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose<T>) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<T> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `(R̂·Exp(δθ), p̂ + δp)`.
    pub fn boxplus(&self, d_theta: &Vec3<T>, d_pos: &Vec3<T>) -> Self {
        Self { rotation: self.rotation * so3_exp(d_theta), translation: self.translation + d_pos }
    }

    /// Inverse of [`Pose::boxplus`]: returns `(δθ, δp)` with `base ⊞ (δθ, δp) = self`.
    pub fn boxminus(&self, base: &Pose<T>) -> (Vec3<T>, Vec3<T>) {
        let dr = base.rotation.inverse() * self.rotation;
        (rotation_log(&dr), self.translation - base.translation)
    }

    /// Converts to another scalar type.
    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: Rotation3::from_matrix_unchecked(self.rotation.matrix().map(|x| lit::<U>(to_f64(x)))),
            translation: self.translation.map(|x| lit::<U>(to_f64(x))),
        }
    }
}

/// `boxplus_pose(nominal, δ)`.
pub fn boxplus_pose<T: Real>(nominal: &Pose<T>, d_theta: &Vec3<T>, d_pos: &Vec3<T>) -> Pose<T> {
    nominal.boxplus(d_theta, d_pos)
}

/// Plane `nᵀp + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct Plane<T: Real> {
    pub normal: Vec3<T>,
    pub offset: T,
}

impl<T: Real> Plane<T> {
    /// Signed distance `nᵀp + d`.
    #[inline]
    pub fn distance(&self, p: &Vec3<T>) -> T {
        self.normal.dot(p) + self.offset
    }
}

/// Signed point-to-plane distance.
pub fn point_plane_distance<T: Real>(plane: &Plane<T>, p: &Vec3<T>) -> T {
    plane.distance(p)
}

/// Least-squares plane through `points` using the default planarity ratio.
pub fn fit_plane<T: Real>(points: &[Vec3<T>]) -> Result<Plane<T>, PlaneFitError> {
    fit_plane_with_ratio(points, lit(DEFAULT_PLANARITY_RATIO))
}

/// Least-squares plane minimising `Σ(nᵀp + d)²` with `‖n‖ = 1`.
///
/// The normal is the eigenvector of the centred scatter matrix with the
/// smallest eigenvalue. The fit is rejected when `λ_min / λ_mid` exceeds
/// `max_ratio` or the points span less than two dimensions. The normal sign
/// is fixed toward `+z`, then `+x`, then `+y`.
pub fn fit_plane_with_ratio<T: Real>(points: &[Vec3<T>], max_ratio: T) -> Result<Plane<T>, PlaneFitError> {
    if points.len() < 3 {
        return Err(PlaneFitError::TooFewPoints(points.len()));
    }
    let n = lit::<T>(points.len() as f64);
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p) / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let c = p - centroid;
        scatter += c * c.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap_or(std::cmp::Ordering::Equal));
    let (l_min, l_mid, l_max) =
        (eig.eigenvalues[order[0]].max(T::zero()), eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(l_max > T::zero()) || !(l_mid > l_max * lit(1e-12)) || l_min > l_mid * max_ratio {
        return Err(PlaneFitError::Degenerate);
    }
    let mut normal: Vec3<T> = eig.eigenvectors.column(order[0]).into_owned();
    normal /= normal.norm();
    normal = canonical_normal_sign(normal);
    Ok(Plane { normal, offset: -normal.dot(&centroid) })
}

fn canonical_normal_sign<T: Real>(n: Vec3<T>) -> Vec3<T> {
    let tie = lit::<T>(1e-12);
    for i in [2usize, 0, 1] {
        if n[i].abs() > tie {
            return if n[i] < T::zero() { -n } else { n };
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3<f64> {
        Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
    }

    #[test]
    fn skew_examples() {
        assert_eq!(skew(&Vector3::<f64>::zeros()), Matrix3::zeros());
        let s = skew(&Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(s, Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0));
    }

    #[test]
    fn skew_matches_componentwise_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 5.0);
            let w = random_vec(&mut rng, 5.0);
            let oracle = Vector3::new(v.y * w.z - v.z * w.y, v.z * w.x - v.x * w.z, v.x * w.y - v.y * w.x);
            assert_relative_eq!(skew(&v) * w, oracle, epsilon = 1e-12);
            let s = skew(&v);
            for i in 0..3 {
                assert_eq!(s[(i, i)], 0.0);
                for j in (0..3).filter(|&j| j != i) {
                    assert_eq!(s[(i, j)].to_bits(), (-s[(j, i)]).to_bits());
                }
            }
        }
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*so3_exp(&Vector3::<f64>::zeros()).matrix(), Matrix3::identity());
        let r = so3_exp(&Vector3::new(PI / 2.0, 0.0, 0.0));
        assert_relative_eq!(r * Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn exp_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let r = so3_exp(&random_vec(&mut rng, 3.0));
            let m = r.matrix();
            assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn log_examples() {
        assert_eq!(so3_log(&Matrix3::<f64>::identity()).unwrap(), Vector3::zeros());
        let v = Vector3::new(0.1, 0.2, 0.3);
        assert_relative_eq!(so3_log(so3_exp(&v).matrix()).unwrap(), v, epsilon = 1e-12);
        let rz = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(so3_log(&rz).unwrap(), Vector3::new(0.0, 0.0, PI), epsilon = 1e-12);
    }

    #[test]
    fn log_rejects_non_orthonormal() {
        let m = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(so3_log(&m), Err(GeometryError::NotOrthonormal(_))));
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(so3_log(&reflection).is_err());
    }

    #[test]
    fn exp_log_round_trip_up_to_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let axis = random_vec(&mut rng, 1.0).normalize();
            let angle = rng.random_range(1e-9..PI - 1e-6);
            let v = axis * angle;
            let back = so3_log(so3_exp(&v).matrix()).unwrap();
            assert!((back - v).norm() < 1e-9, "angle {angle}: {back} vs {v}");
        }
    }

    #[test]
    fn right_jacobian_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let phi = random_vec(&mut rng, 1.5);
            let d = random_vec(&mut rng, 1.0) * 1e-6;
            let lhs = so3_exp(&(phi + d));
            let rhs = so3_exp(&phi) * so3_exp(&(right_jacobian(&phi) * d));
            assert!((lhs.matrix() - rhs.matrix()).norm() < 1e-11);
        }
    }

    #[test]
    fn boxplus_examples() {
        let id = Pose::<f64>::identity();
        assert_eq!(boxplus_pose(&id, &Vector3::zeros(), &Vector3::zeros()), id);
        let p = boxplus_pose(&id, &Vector3::new(0.0, 0.0, PI / 2.0), &Vector3::new(1.0, 2.0, 3.0));
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*p.rotation.matrix(), rz, epsilon = 1e-15);
        assert_eq!(p.translation, Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn boxplus_boxminus_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = Pose::new(so3_exp(&random_vec(&mut rng, 3.0)), random_vec(&mut rng, 10.0));
            let dt = random_vec(&mut rng, 0.1);
            let dp = random_vec(&mut rng, 0.1);
            let (rt, rp) = x.boxplus(&dt, &dp).boxminus(&x);
            assert!((rt - dt).norm() < 1e-10);
            assert!((rp - dp).norm() < 1e-10);
        }
    }

    #[test]
    fn pose_compose_matches_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Pose::new(so3_exp(&random_vec(&mut rng, 3.0)), random_vec(&mut rng, 10.0));
        let b = Pose::new(so3_exp(&random_vec(&mut rng, 3.0)), random_vec(&mut rng, 10.0));
        assert_relative_eq!(a.compose(&b).to_homogeneous(), a.to_homogeneous() * b.to_homogeneous(), epsilon = 1e-12);
        assert_relative_eq!(a.compose(&a.inverse()).to_homogeneous(), Matrix4::identity(), epsilon = 1e-12);
    }

    #[test]
    fn fit_plane_exact_z0() {
        let pts: [Vec3<f64>; 5] = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(-1.0, 0.5, 0.0),
            Vector3::new(3.0, -1.0, 0.0),
        ];
        let plane = fit_plane(&pts).unwrap();
        assert!((plane.normal - Vector3::z()).norm() < 1e-12);
        assert!(plane.offset.abs() < 1e-12);
        for p in &pts {
            assert!(point_plane_distance(&plane, p).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_plane_rejects_collinear_and_small_sets() {
        let collinear = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0), Vector3::new(2.0, 2.0, 2.0)];
        assert_eq!(fit_plane(&collinear), Err(PlaneFitError::Degenerate));
        assert_eq!(fit_plane(&collinear[..2]), Err(PlaneFitError::TooFewPoints(2)));
        let cube: Vec<_> = (0..8)
            .map(|i| Vector3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64))
            .collect();
        assert_eq!(fit_plane(&cube), Err(PlaneFitError::Degenerate));
    }

    #[test]
    fn fit_plane_noisy_monte_carlo() {
        // Noisy samples of x + y + z = 1, σ = 0.01: normal within 1° in ≥ 99% of trials.
        let truth: Vec3<f64> = Vector3::new(1.0, 1.0, 1.0).normalize();
        let noise = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pass = 0;
        for _ in 0..1000 {
            let pts: Vec<_> = (0..30)
                .map(|_| {
                    let x = rng.random_range(-1.0..1.0);
                    let y = rng.random_range(-1.0..1.0);
                    Vector3::new(x, y, 1.0 - x - y) + truth * noise.sample(&mut rng)
                })
                .collect();
            let plane = fit_plane(&pts).unwrap();
            if plane.normal.dot(&truth).abs().min(1.0).acos() < 1f64.to_radians() {
                pass += 1;
            }
        }
        assert!(pass >= 990, "{pass}/1000");
    }

    #[test]
    fn fit_plane_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let pts: Vec<_> = (0..12)
                .map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.05..0.05)))
                .collect();
            let t = Pose::new(so3_exp(&random_vec(&mut rng, 3.0)), random_vec(&mut rng, 5.0));
            let moved: Vec<_> = pts.iter().map(|p| t.transform_point(p)).collect();
            let a = fit_plane(&pts).unwrap();
            let b = fit_plane(&moved).unwrap();
            let rotated = t.rotation * a.normal;
            let sign = rotated.dot(&b.normal).signum();
            assert!((rotated * sign - b.normal).norm() < 1e-9);
        }
    }

    #[test]
    fn fit_plane_is_least_squares_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..40)
            .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-0.1..0.1)))
            .collect();
        let plane = fit_plane(&pts).unwrap();
        let msd = |pl: &Plane<f64>| pts.iter().map(|p| pl.distance(p).powi(2)).sum::<f64>() / pts.len() as f64;
        let best = msd(&plane);
        for _ in 0..100 {
            let tilt = random_vec(&mut rng, 1.0).normalize() * 1f64.to_radians();
            let normal = so3_exp(&tilt) * plane.normal;
            let offset = plane.offset + rng.random_range(-0.01..0.01);
            assert!(best <= msd(&Plane { normal, offset }) + 1e-15);
        }
    }

    #[test]
    fn point_plane_distance_examples() {
        let plane = Plane { normal: Vector3::z(), offset: 0.0 };
        assert_eq!(point_plane_distance(&plane, &Vector3::new(1.0, 2.0, 3.0)), 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let normal = random_vec(&mut rng, 1.0).normalize();
            let offset = rng.random_range(-5.0..5.0);
            let plane = Plane { normal, offset };
            let p0 = -normal * offset;
            let p = random_vec(&mut rng, 10.0);
            assert_relative_eq!(plane.distance(&p).abs(), (normal.dot(&(p - p0))).abs(), epsilon = 1e-12);
        }
    }

    #[test]
    fn generic_over_f32() {
        let r = so3_exp(&Vector3::new(0.1f32, -0.2, 0.3));
        let back = rotation_log(&r);
        assert!((back - Vector3::new(0.1f32, -0.2, 0.3)).norm() < 1e-5);
        let pts = [
            Vector3::new(0.0f32, 0.0, 1.0),
            Vector3::new(1.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 1.0),
            Vector3::new(1.0, 1.0, 1.0),
        ];
        let plane = fit_plane(&pts).unwrap();
        assert!((plane.normal - Vector3::z()).norm() < 1e-5);
        assert!((plane.offset + 1.0).abs() < 1e-5);
    }
}
