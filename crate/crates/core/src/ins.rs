//! Strapdown mechanization, error-state propagation, scan de-skew and static
//! initialization.

use std::collections::VecDeque;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{right_jacobian, rotation_log, skew, so3_exp, Pose, RotationMatrix, Vec3};
use crate::msckf::{FilterState, IMU_DIM};
use crate::scalar::{lit, to_f64, Real};

/// Error-state offsets inside the 15-dimensional IMU block.
pub const ATT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;

/// Largest single mechanization step accepted, seconds.
pub const MAX_STEP: f64 = 0.1;

pub type ImuTransition<T> = SMatrix<T, 15, 15>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InsError {
    #[error("IMU timestamps not increasing ({prev} -> {curr})")]
    NonMonotonicTime { prev: f64, curr: f64 },
    #[error("IMU step of {0} s exceeds the {MAX_STEP} s limit")]
    StepTooLarge(f64),
    #[error("time {t} outside pose history [{start}, {end}]")]
    TimestampOutOfRange { t: f64, start: f64, end: f64 },
    #[error("platform not static (max specific-force variance {0} > threshold)")]
    NotStatic(f64),
    #[error("static buffer spans {0} s, need at least {1} s")]
    NotEnoughData(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ImuSample<T: Real> {
    pub timestamp: T,
    /// Gyroscope reading, rad/s.
    pub angular_rate: Vec3<T>,
    /// Accelerometer reading, m/s².
    pub specific_force: Vec3<T>,
}

impl<T: Real> ImuSample<T> {
    pub fn new(timestamp: T, angular_rate: Vec3<T>, specific_force: Vec3<T>) -> Self {
        Self { timestamp, angular_rate, specific_force }
    }

    /// Linear interpolation between `self` and `next` at time `t`.
    pub fn interpolate(&self, next: &ImuSample<T>, t: T) -> ImuSample<T> {
        let span = next.timestamp - self.timestamp;
        let s = if span > T::zero() { (t - self.timestamp) / span } else { T::zero() };
        ImuSample {
            timestamp: t,
            angular_rate: self.angular_rate.lerp(&next.angular_rate, s),
            specific_force: self.specific_force.lerp(&next.specific_force, s),
        }
    }
}

/// LiDAR return in the sensor frame with its capture time (LiDAR clock).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct LidarPoint<T: Real> {
    pub timestamp: T,
    pub position: Vec3<T>,
}

/// Nominal IMU navigation state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ImuNominal<T: Real> {
    /// Body-to-world attitude.
    pub attitude: RotationMatrix<T>,
    pub position: Vec3<T>,
    pub velocity: Vec3<T>,
    pub gyro_bias: Vec3<T>,
    pub accel_bias: Vec3<T>,
    pub gravity: Vec3<T>,
}

impl<T: Real> ImuNominal<T> {
    pub fn at_rest(gravity_magnitude: T) -> Self {
        Self {
            attitude: RotationMatrix::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gravity: Vector3::new(T::zero(), T::zero(), -gravity_magnitude),
        }
    }

    pub fn pose(&self) -> Pose<T> {
        Pose::new(self.attitude, self.position)
    }
}

/// IMU noise densities and the initial error-state standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
    pub initial: InitialUncertainty,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro_noise: 5e-4,
            accel_noise: 5e-3,
            gyro_bias_walk: 5e-5,
            accel_bias_walk: 5e-4,
            initial: InitialUncertainty::default(),
        }
    }
}

/// Initial one-sigma values for every error block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialUncertainty {
    pub attitude: f64,
    pub position: f64,
    pub velocity: f64,
    pub gyro_bias: f64,
    pub accel_bias: f64,
    pub extrinsic_rotation: f64,
    pub extrinsic_translation: f64,
    pub time_delay: f64,
}

impl Default for InitialUncertainty {
    fn default() -> Self {
        Self {
            attitude: 1f64.to_radians(),
            position: 1e-3,
            velocity: 1e-2,
            gyro_bias: 2e-3,
            accel_bias: 5e-2,
            extrinsic_rotation: 2f64.to_radians(),
            extrinsic_translation: 0.05,
            time_delay: 0.05,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> bool {
        let i = &self.initial;
        [
            self.gyro_noise,
            self.accel_noise,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            i.attitude,
            i.position,
            i.velocity,
            i.gyro_bias,
            i.accel_bias,
            i.extrinsic_rotation,
            i.extrinsic_translation,
            i.time_delay,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
    }

    /// Diagonal of the discrete process noise for a step of `dt` seconds.
    pub fn process_noise<T: Real>(&self, dt: T) -> SVector<T, 15> {
        let mut q = SVector::<T, 15>::zeros();
        let dt = to_f64(dt);
        for i in 0..3 {
            q[ATT + i] = lit(self.gyro_noise.powi(2) * dt);
            q[VEL + i] = lit(self.accel_noise.powi(2) * dt);
            q[BG + i] = lit(self.gyro_bias_walk.powi(2) * dt);
            q[BA + i] = lit(self.accel_bias_walk.powi(2) * dt);
        }
        q
    }

    /// Initial covariance diagonal of the 15-dimensional IMU block.
    pub fn initial_imu_diagonal<T: Real>(&self) -> SVector<T, 15> {
        let i = &self.initial;
        let mut d = SVector::<T, 15>::zeros();
        for k in 0..3 {
            d[ATT + k] = lit(i.attitude.powi(2));
            d[POS + k] = lit(i.position.powi(2));
            d[VEL + k] = lit(i.velocity.powi(2));
            d[BG + k] = lit(i.gyro_bias.powi(2));
            d[BA + k] = lit(i.accel_bias.powi(2));
        }
        d
    }
}

struct StepTerms<T: Real> {
    dt: T,
    omega: Vec3<T>,
    force: Vec3<T>,
    delta_rot: RotationMatrix<T>,
    mid_rot: RotationMatrix<T>,
}

fn step_terms<T: Real>(state: &ImuNominal<T>, prev: &ImuSample<T>, curr: &ImuSample<T>) -> Result<StepTerms<T>, InsError> {
    let dt = curr.timestamp - prev.timestamp;
    if !(dt > T::zero()) {
        return Err(InsError::NonMonotonicTime { prev: to_f64(prev.timestamp), curr: to_f64(curr.timestamp) });
    }
    if dt > lit(MAX_STEP + 1e-9) {
        return Err(InsError::StepTooLarge(to_f64(dt)));
    }
    let half = lit::<T>(0.5);
    let omega = (prev.angular_rate + curr.angular_rate) * half - state.gyro_bias;
    let force = (prev.specific_force + curr.specific_force) * half - state.accel_bias;
    Ok(StepTerms {
        dt,
        omega,
        force,
        delta_rot: so3_exp(&(omega * dt)),
        mid_rot: state.attitude * so3_exp(&(omega * (dt * half))),
    })
}

/// One midpoint mechanization step from `prev` to `curr`.
pub fn mechanize<T: Real>(state: &ImuNominal<T>, prev: &ImuSample<T>, curr: &ImuSample<T>) -> Result<ImuNominal<T>, InsError> {
    let s = step_terms(state, prev, curr)?;
    let accel = s.mid_rot * s.force + state.gravity;
    let velocity = state.velocity + accel * s.dt;
    let position = state.position + (state.velocity + velocity) * (lit::<T>(0.5) * s.dt);
    Ok(ImuNominal { attitude: state.attitude * s.delta_rot, position, velocity, ..*state })
}

/// Error-state transition of [`mechanize`] for the IMU block, linearised at
/// the pre-step nominal state.
pub fn transition_matrix<T: Real>(
    state: &ImuNominal<T>,
    prev: &ImuSample<T>,
    curr: &ImuSample<T>,
) -> Result<ImuTransition<T>, InsError> {
    let s = step_terms(state, prev, curr)?;
    let half_dt = s.dt * lit::<T>(0.5);
    let id = Matrix3::<T>::identity();
    let mut phi = ImuTransition::<T>::identity();

    let rot_back = so3_exp(&(-s.omega * s.dt));
    let half_back = so3_exp(&(-s.omega * half_dt));
    let rf = s.mid_rot.matrix() * skew(&s.force);

    let v_theta = -(rf * half_back.matrix()) * s.dt;
    let v_bg = rf * right_jacobian(&(s.omega * half_dt)) * (s.dt * half_dt);
    let v_ba = -s.mid_rot.matrix() * s.dt;

    phi.fixed_view_mut::<3, 3>(ATT, ATT).copy_from(rot_back.matrix());
    phi.fixed_view_mut::<3, 3>(ATT, BG).copy_from(&(-right_jacobian(&(s.omega * s.dt)) * s.dt));

    phi.fixed_view_mut::<3, 3>(VEL, ATT).copy_from(&v_theta);
    phi.fixed_view_mut::<3, 3>(VEL, BG).copy_from(&v_bg);
    phi.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&v_ba);

    phi.fixed_view_mut::<3, 3>(POS, ATT).copy_from(&(v_theta * half_dt));
    phi.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(id * s.dt));
    phi.fixed_view_mut::<3, 3>(POS, BG).copy_from(&(v_bg * half_dt));
    phi.fixed_view_mut::<3, 3>(POS, BA).copy_from(&(v_ba * half_dt));
    Ok(phi)
}

/// Mechanizes the nominal IMU state and propagates the full covariance.
///
/// Only the IMU block has a non-identity transition and process noise; the
/// extrinsic, time-delay and keyframe blocks are carried unchanged.
pub fn propagate<T: Real>(
    filter: &mut FilterState<T>,
    noise: &NoiseConfig,
    prev: &ImuSample<T>,
    curr: &ImuSample<T>,
) -> Result<(), InsError> {
    let phi = transition_matrix(&filter.imu, prev, curr)?;
    filter.imu = mechanize(&filter.imu, prev, curr)?;
    let q = noise.process_noise(curr.timestamp - prev.timestamp);

    let n = filter.covariance.nrows();
    let p = &mut filter.covariance;
    let p_ii: SMatrix<T, 15, 15> = p.fixed_view::<15, 15>(0, 0).into_owned();
    let mut new_ii = phi * p_ii * phi.transpose();
    for i in 0..IMU_DIM {
        new_ii[(i, i)] += q[i];
    }
    p.fixed_view_mut::<15, 15>(0, 0).copy_from(&new_ii);
    if n > IMU_DIM {
        let rest = n - IMU_DIM;
        let cross = phi * p.view((0, IMU_DIM), (IMU_DIM, rest));
        p.view_mut((0, IMU_DIM), (IMU_DIM, rest)).copy_from(&cross);
        p.view_mut((IMU_DIM, 0), (rest, IMU_DIM)).copy_from(&cross.transpose());
    }
    filter.symmetrize();
    Ok(())
}

/// Time-stamped IMU poses with geodesic interpolation.
#[derive(Debug, Clone, Default)]
pub struct PoseHistory<T: Real> {
    entries: VecDeque<(T, Pose<T>)>,
}

impl<T: Real> PoseHistory<T> {
    pub fn new() -> Self {
        Self { entries: VecDeque::new() }
    }

    /// Appends a pose; times must be non-decreasing.
    pub fn push(&mut self, t: T, pose: Pose<T>) {
        if let Some((last, _)) = self.entries.back() {
            if t <= *last {
                self.entries.pop_back();
            }
        }
        self.entries.push_back((t, pose));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn span(&self) -> Option<(T, T)> {
        Some((self.entries.front()?.0, self.entries.back()?.0))
    }

    /// Drops entries strictly older than the last one at or before `t`.
    pub fn trim_before(&mut self, t: T) {
        while self.entries.len() > 1 && self.entries[1].0 <= t {
            self.entries.pop_front();
        }
    }

    /// Left-multiplies every stored pose by `correction`.
    pub fn apply_correction(&mut self, correction: &Pose<T>) {
        for (_, pose) in self.entries.iter_mut() {
            *pose = correction.compose(pose);
        }
    }

    pub fn pose_at(&self, t: T) -> Result<Pose<T>, InsError> {
        let out_of_range = || {
            let (start, end) = self.span().map(|(a, b)| (to_f64(a), to_f64(b))).unwrap_or((f64::NAN, f64::NAN));
            InsError::TimestampOutOfRange { t: to_f64(t), start, end }
        };
        let (start, end) = self.span().ok_or_else(out_of_range)?;
        let eps = lit::<T>(1e-9);
        if t < start - eps || t > end + eps {
            return Err(out_of_range());
        }
        let idx = self.entries.partition_point(|(ti, _)| *ti <= t);
        if idx == 0 {
            return Ok(self.entries[0].1);
        }
        if idx >= self.entries.len() {
            return Ok(self.entries[self.entries.len() - 1].1);
        }
        let (t0, p0) = &self.entries[idx - 1];
        let (t1, p1) = &self.entries[idx];
        Ok(interpolate_pose(p0, p1, (t - *t0) / (*t1 - *t0)))
    }
}

/// Linear in translation, geodesic in rotation; `s ∈ [0, 1]`.
pub fn interpolate_pose<T: Real>(a: &Pose<T>, b: &Pose<T>, s: T) -> Pose<T> {
    let rel = rotation_log(&(a.rotation.inverse() * b.rotation));
    Pose::new(a.rotation * so3_exp(&(rel * s)), a.translation.lerp(&b.translation, s))
}

/// Re-expresses every point in the LiDAR frame at `scan_end`.
///
/// `imu_pose_at` maps a LiDAR-clock time to the world pose of the IMU;
/// `extrinsic` maps LiDAR coordinates into the IMU frame.
pub fn deskew_scan<T: Real, F>(
    points: &[LidarPoint<T>],
    scan_end: T,
    extrinsic: &Pose<T>,
    imu_pose_at: F,
) -> Result<Vec<LidarPoint<T>>, InsError>
where
    F: Fn(T) -> Result<Pose<T>, InsError>,
{
    let end_inv = imu_pose_at(scan_end)?.compose(extrinsic).inverse();
    let mut cache: Option<(T, Pose<T>)> = None;
    points
        .iter()
        .map(|pt| {
            let rel = match cache {
                Some((t, rel)) if t == pt.timestamp => rel,
                _ => {
                    let rel = end_inv.compose(&imu_pose_at(pt.timestamp)?.compose(extrinsic));
                    cache = Some((pt.timestamp, rel));
                    rel
                }
            };
            Ok(LidarPoint { timestamp: pt.timestamp, position: rel.transform_point(&pt.position) })
        })
        .collect()
}

/// Thresholds for [`static_initialize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticInitConfig {
    pub min_duration: f64,
    /// Largest per-axis specific-force variance accepted, (m/s²)².
    pub max_accel_variance: f64,
    pub gravity: f64,
}

impl Default for StaticInitConfig {
    fn default() -> Self {
        Self { min_duration: 1.0, max_accel_variance: 0.05, gravity: 9.81 }
    }
}

/// Levels the platform from a static IMU buffer.
///
/// Roll and pitch come from the mean specific force, yaw is zero, gyro bias is
/// the mean angular rate and the accelerometer bias starts at zero. Returns
/// the nominal state and the initial IMU covariance diagonal.
pub fn static_initialize<T: Real>(
    buffer: &[ImuSample<T>],
    config: &StaticInitConfig,
    noise: &NoiseConfig,
) -> Result<(ImuNominal<T>, SVector<T, 15>), InsError> {
    let duration = match (buffer.first(), buffer.last()) {
        (Some(a), Some(b)) => to_f64(b.timestamp - a.timestamp),
        _ => 0.0,
    };
    if buffer.len() < 2 || duration < config.min_duration - 1e-9 {
        return Err(InsError::NotEnoughData(duration, config.min_duration));
    }
    let n = lit::<T>(buffer.len() as f64);
    let mean_f = buffer.iter().fold(Vector3::zeros(), |a, s| a + s.specific_force) / n;
    let mean_w = buffer.iter().fold(Vector3::zeros(), |a, s| a + s.angular_rate) / n;
    let var = buffer
        .iter()
        .fold(Vector3::<T>::zeros(), |a, s| a + (s.specific_force - mean_f).component_mul(&(s.specific_force - mean_f)))
        / n;
    let max_var = to_f64(var.max());
    if max_var > config.max_accel_variance {
        return Err(InsError::NotStatic(max_var));
    }
    // Static: f = Rᵀ·(0, 0, g) = g·(−sinθ, cosθ·sinφ, cosθ·cosφ) for R = Rz·Ry(θ)·Rx(φ).
    let roll = mean_f.y.atan2(mean_f.z);
    let pitch = (-mean_f.x).atan2((mean_f.y * mean_f.y + mean_f.z * mean_f.z).sqrt());
    let attitude = RotationMatrix::from_euler_angles(roll, pitch, T::zero());
    let mut nominal = ImuNominal::at_rest(lit(config.gravity));
    nominal.attitude = attitude;
    nominal.gyro_bias = mean_w;
    Ok((nominal, noise.initial_imu_diagonal()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msckf::FilterState;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn sample(t: f64, w: Vec3<f64>, f: Vec3<f64>) -> ImuSample<f64> {
        ImuSample::new(t, w, f)
    }

    #[test]
    fn gravity_only_free_fall() {
        let s0 = ImuNominal::at_rest(9.81);
        let a = sample(0.0, Vector3::zeros(), Vector3::zeros());
        let b = sample(0.01, Vector3::zeros(), Vector3::zeros());
        let s1 = mechanize(&s0, &a, &b).unwrap();
        assert_relative_eq!(s1.velocity, Vector3::new(0.0, 0.0, -9.81 * 0.01), epsilon = 1e-15);
        assert_eq!(s1.gyro_bias, s0.gyro_bias);
        assert_eq!(s1.accel_bias, s0.accel_bias);
    }

    #[test]
    fn constant_yaw_rate_integrates_to_one_radian() {
        let mut s = ImuNominal::at_rest(9.81);
        let w = Vector3::new(0.0, 0.0, 1.0);
        let f = Vector3::new(0.0, 0.0, 9.81);
        for k in 0..200 {
            let a = sample(k as f64 / 200.0, w, f);
            let b = sample((k + 1) as f64 / 200.0, w, f);
            s = mechanize(&s, &a, &b).unwrap();
        }
        let yaw = rotation_log(&s.attitude);
        assert!((yaw.z - 1.0).abs() < 1e-4);
        assert!(s.velocity.norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_time_steps() {
        let s = ImuNominal::at_rest(9.81);
        let a = sample(1.0, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(mechanize(&s, &a, &a), Err(InsError::NonMonotonicTime { .. })));
        let far = sample(1.5, Vector3::zeros(), Vector3::zeros());
        assert!(matches!(mechanize(&s, &a, &far), Err(InsError::StepTooLarge(_))));
    }

    #[test]
    fn attitude_stays_orthonormal() {
        let mut s = ImuNominal::at_rest(9.81);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut prev = sample(0.0, Vector3::new(0.3, -0.2, 0.5), Vector3::new(0.0, 0.0, 9.81));
        for k in 1..=10_000 {
            let w = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let curr = sample(k as f64 * 0.005, w, Vector3::new(0.0, 0.0, 9.81));
            s = mechanize(&s, &prev, &curr).unwrap();
            prev = curr;
        }
        let m = s.attitude.matrix();
        assert!((m.transpose() * m - Matrix3::identity()).norm() < 1e-9);
    }

    fn random_nominal(rng: &mut ChaCha8Rng) -> ImuNominal<f64> {
        let mut r = || Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        ImuNominal {
            attitude: so3_exp(&(r() * 2.0)),
            position: r() * 10.0,
            velocity: r() * 2.0,
            gyro_bias: r() * 0.01,
            accel_bias: r() * 0.1,
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }

    fn perturb(s: &ImuNominal<f64>, d: &SVector<f64, 15>) -> ImuNominal<f64> {
        ImuNominal {
            attitude: s.attitude * so3_exp(&d.fixed_rows::<3>(ATT).into_owned()),
            position: s.position + d.fixed_rows::<3>(POS),
            velocity: s.velocity + d.fixed_rows::<3>(VEL),
            gyro_bias: s.gyro_bias + d.fixed_rows::<3>(BG),
            accel_bias: s.accel_bias + d.fixed_rows::<3>(BA),
            gravity: s.gravity,
        }
    }

    fn difference(a: &ImuNominal<f64>, b: &ImuNominal<f64>) -> SVector<f64, 15> {
        let mut d = SVector::<f64, 15>::zeros();
        d.fixed_rows_mut::<3>(ATT).copy_from(&rotation_log(&(b.attitude.inverse() * a.attitude)));
        d.fixed_rows_mut::<3>(POS).copy_from(&(a.position - b.position));
        d.fixed_rows_mut::<3>(VEL).copy_from(&(a.velocity - b.velocity));
        d.fixed_rows_mut::<3>(BG).copy_from(&(a.gyro_bias - b.gyro_bias));
        d.fixed_rows_mut::<3>(BA).copy_from(&(a.accel_bias - b.accel_bias));
        d
    }

    #[test]
    fn transition_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..20 {
            let s = random_nominal(&mut rng);
            let a = sample(0.0, Vector3::new(0.4, -0.3, 1.2), Vector3::new(1.0, -2.0, 9.0));
            let b = sample(0.01, Vector3::new(0.5, -0.1, 1.0), Vector3::new(1.5, -1.0, 9.5));
            let phi = transition_matrix(&s, &a, &b).unwrap();
            let nominal_next = mechanize(&s, &a, &b).unwrap();
            for j in 0..15 {
                let mut d = SVector::<f64, 15>::zeros();
                d[j] = h;
                let plus = mechanize(&perturb(&s, &d), &a, &b).unwrap();
                let minus = mechanize(&perturb(&s, &(-d)), &a, &b).unwrap();
                let col = (difference(&plus, &nominal_next) - difference(&minus, &nominal_next)) / (2.0 * h);
                for i in 0..15 {
                    let (an, fd) = (phi[(i, j)], col[i]);
                    let tol = 1e-4 * an.abs().max(fd.abs()) + 1e-9;
                    assert!((an - fd).abs() <= tol, "Φ[{i},{j}] analytic {an} vs fd {fd}");
                }
            }
        }
    }

    fn test_filter(keyframes: usize) -> FilterState<f64> {
        let mut f = FilterState::new(ImuNominal::at_rest(9.81), Pose::identity(), 0.0, 10);
        let dim = f.dim() + 6 * keyframes;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.1..0.1));
        f.covariance = &a * a.transpose() + DMatrix::identity(dim, dim) * 1e-6;
        for k in 0..keyframes {
            f.keyframes.push(crate::msckf::KeyframeState {
                id: k as u64,
                pose: Pose::identity(),
                lidar_timestamp: k as f64,
                delay_at_creation: 0.0,
                slot: k,
            });
        }
        f
    }

    #[test]
    fn propagate_keeps_keyframe_blocks_with_zero_noise() {
        let mut f = test_filter(3);
        let before = f.covariance.clone();
        let kf_before = f.keyframes.clone();
        let noise = NoiseConfig { gyro_noise: 0.0, accel_noise: 0.0, gyro_bias_walk: 0.0, accel_bias_walk: 0.0, ..Default::default() };
        let a = sample(0.0, Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.5, 0.0, 9.81));
        let b = sample(0.005, Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.5, 0.0, 9.81));
        propagate(&mut f, &noise, &a, &b).unwrap();
        let n = f.dim();
        let tail_before = before.view((IMU_DIM, IMU_DIM), (n - IMU_DIM, n - IMU_DIM));
        let tail_after = f.covariance.view((IMU_DIM, IMU_DIM), (n - IMU_DIM, n - IMU_DIM));
        assert_eq!(tail_before, tail_after);
        assert_eq!(f.keyframes, kf_before);
    }

    #[test]
    fn propagate_keeps_covariance_symmetric_psd() {
        let mut f = test_filter(4);
        let noise = NoiseConfig::default();
        let mut prev = sample(0.0, Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.5, 0.0, 9.81));
        for k in 1..200 {
            let curr = sample(k as f64 * 0.005, Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.5, 0.1, 9.81));
            propagate(&mut f, &noise, &prev, &curr).unwrap();
            prev = curr;
            assert_eq!(f.covariance, f.covariance.transpose());
        }
        let min_eig = f.covariance.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig >= -1e-12);
    }

    #[test]
    fn pose_history_interpolates_geodesically() {
        let mut h = PoseHistory::new();
        h.push(0.0, Pose::identity());
        h.push(1.0, Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 1.0)), Vector3::new(2.0, 0.0, 0.0)));
        let mid = h.pose_at(0.5).unwrap();
        assert_relative_eq!(rotation_log(&mid.rotation), Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        assert_relative_eq!(mid.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        assert!(matches!(h.pose_at(1.5), Err(InsError::TimestampOutOfRange { .. })));
    }

    #[test]
    fn deskew_is_identity_for_static_platform() {
        let pts: Vec<_> = (0..10)
            .map(|i| LidarPoint { timestamp: i as f64 * 0.01, position: Vector3::new(i as f64, 2.0, -1.0) })
            .collect();
        let ext = Pose::new(so3_exp(&Vector3::new(0.1, 0.2, 0.3)), Vector3::new(0.1, 0.0, 0.05));
        let fixed = Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 0.7)), Vector3::new(3.0, 1.0, 0.0));
        let out = deskew_scan(&pts, 0.1, &ext, |_| Ok(fixed)).unwrap();
        for (a, b) in pts.iter().zip(&out) {
            assert!((a.position - b.position).norm() < 1e-12);
            assert_eq!(a.timestamp, b.timestamp);
        }
    }

    #[test]
    fn deskew_constant_velocity_closed_form() {
        // IMU moves at (1, 0, 0) m/s with a yawed extrinsic; a point captured
        // 0.05 s before scan end shifts by the LiDAR-frame image of −0.05 m x.
        let ext = Pose::new(so3_exp(&Vector3::new(0.0, 0.0, 0.5)), Vector3::new(0.2, 0.0, 0.0));
        let lookup = |t: f64| Ok(Pose::new(RotationMatrix::identity(), Vector3::new(t, 0.0, 0.0)));
        let p = Vector3::new(4.0, 1.0, 0.5);
        let out = deskew_scan(&[LidarPoint { timestamp: 0.05, position: p }], 0.1, &ext, lookup).unwrap();
        let expected = p + ext.rotation.inverse() * Vector3::new(-0.05, 0.0, 0.0);
        assert!((out[0].position - expected).norm() < 1e-12);
    }

    fn static_buffer(roll: f64, bias: Vec3<f64>, noise: f64, seed: u64) -> Vec<ImuSample<f64>> {
        let r = RotationMatrix::from_euler_angles(roll, 0.0, 0.0);
        let f = r.inverse() * Vector3::new(0.0, 0.0, 9.81);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, noise.max(1e-300)).unwrap();
        (0..=400)
            .map(|k| {
                let jitter = Vector3::new(n.sample(&mut rng), n.sample(&mut rng), n.sample(&mut rng));
                sample(k as f64 * 0.005, bias, f + jitter)
            })
            .collect()
    }

    #[test]
    fn static_init_recovers_gyro_bias_and_roll() {
        let cfg = StaticInitConfig::default();
        let buf = static_buffer(0.0, Vector3::new(0.01, 0.0, 0.0), 0.0, 1);
        let (s, diag) = static_initialize(&buf, &cfg, &NoiseConfig::default()).unwrap();
        assert!((s.gyro_bias - Vector3::new(0.01, 0.0, 0.0)).norm() < 1e-4);
        assert_eq!(s.accel_bias, Vector3::zeros());
        assert_eq!(s.position, Vector3::zeros());
        assert_eq!(s.gravity, Vector3::new(0.0, 0.0, -9.81));
        assert!(diag.iter().all(|v| *v > 0.0));

        let tilted = static_buffer(10f64.to_radians(), Vector3::zeros(), 0.02, 2);
        let (s, _) = static_initialize(&tilted, &cfg, &NoiseConfig::default()).unwrap();
        let (roll, pitch, yaw) = s.attitude.euler_angles();
        assert!((roll - 10f64.to_radians()).abs() < 0.1f64.to_radians());
        assert!(pitch.abs() < 0.1f64.to_radians());
        assert_eq!(yaw, 0.0);
    }

    #[test]
    fn static_init_rejects_motion_and_short_buffers() {
        let cfg = StaticInitConfig::default();
        let mut moving = static_buffer(0.0, Vector3::zeros(), 0.0, 3);
        for (k, s) in moving.iter_mut().enumerate() {
            s.specific_force.x += (k as f64 * 0.05).sin() * 2.0;
        }
        assert!(matches!(static_initialize(&moving, &cfg, &NoiseConfig::default()), Err(InsError::NotStatic(_))));
        let short = &moving[..50];
        assert!(matches!(static_initialize(short, &cfg, &NoiseConfig::default()), Err(InsError::NotEnoughData(..))));
    }
}
