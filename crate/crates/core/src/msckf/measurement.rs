//! Scalar plane-consistency measurement built from a tracked point cluster.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_plane_with_ratio, skew, Mat3, Plane, Pose, Vec3};
use crate::scalar::{lit, to_f64, Real};

use super::{FilterState, KeyframeId, PoseRef, EXT_POS, EXT_ROT, TIME_DELAY};

/// Time on the IMU clock for a LiDAR stamp.
pub fn apply_time_delay<T: Real>(lidar_time: T, time_delay: T) -> T {
    lidar_time + time_delay
}

/// Moves a LiDAR-frame point from the current delay estimate back to the
/// instant its keyframe pose was taken.
pub fn compensate_point_for_litd<T: Real>(point: &Vec3<T>, velocity: &Vec3<T>, time_delay: T, keyframe_delay: T) -> Vec3<T> {
    point - velocity * (time_delay - keyframe_delay)
}

pub fn project_point_to_world<T: Real>(point: &Vec3<T>, keyframe_pose: &Pose<T>, extrinsic: &Pose<T>) -> Vec3<T> {
    keyframe_pose.transform_point(&extrinsic.transform_point(point))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct ClusterPoint<T: Real> {
    pub keyframe: KeyframeId,
    /// Deskewed point in the keyframe's LiDAR frame.
    pub point: Vec3<T>,
    /// Apparent LiDAR-frame velocity of the point; `None` disables delay
    /// compensation for it.
    pub velocity: Option<Vec3<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementConfig {
    pub min_points: usize,
    pub gate_sigmas: f64,
    /// Lower bound on the per-point distance sigma in metres.
    pub sigma_floor: f64,
    pub planarity_ratio: f64,
    pub estimate_time_delay: bool,
    /// Multiplies the measurement variance; the gate is unaffected.
    pub variance_scale: f64,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            min_points: 5,
            gate_sigmas: 3.0,
            sigma_floor: 1e-3,
            planarity_ratio: crate::geometry::DEFAULT_PLANARITY_RATIO,
            estimate_time_delay: true,
            variance_scale: 1.0,
        }
    }
}

/// Measurement variance and the equivalent per-point distance sigma.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel<T: Real> {
    pub variance: T,
    pub sigma: T,
}

impl<T: Real> NoiseModel<T> {
    /// `variance` is the variance of a mean of squared distances; for
    /// Gaussian distances it equals `2σ⁴`.
    pub fn from_variance(variance: T) -> Self {
        Self { variance, sigma: (variance * lit(0.5)).sqrt().sqrt() }
    }

    pub fn floored(&self, sigma_floor: T) -> Self {
        let var_floor = lit::<T>(2.0) * sigma_floor.powi(4);
        Self {
            variance: self.variance.max(var_floor),
            sigma: self.sigma.max(sigma_floor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum Rejection {
    #[error("cluster has {0} usable points")]
    TooFewPoints(usize),
    #[error("keyframe {0} is not in the window")]
    UnknownKeyframe(KeyframeId),
    #[error("cluster points are not planar")]
    DegeneratePlane,
    #[error("non-finite value in measurement")]
    NonFinite,
    #[error("cluster has no point from the current keyframe")]
    NotCurrent,
    #[error("point-to-plane distance {distance} exceeds gate {limit}")]
    GateExceeded { distance: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsppMeasurement<T: Real> {
    pub plane: Plane<T>,
    /// Mean squared point-to-plane distance.
    pub value: T,
    /// `0 - value`.
    pub residual: T,
    /// Row of `∂z/∂δx`, stored as a column.
    pub jacobian: DVector<T>,
    pub variance: T,
    pub points: usize,
}

/// A cluster point resolved against the state.
#[derive(Debug, Clone, Copy)]
pub struct WorldPoint<T: Real> {
    pub world: Vec3<T>,
    /// Delay-compensated LiDAR-frame point.
    pub lidar: Vec3<T>,
    pub velocity: Option<Vec3<T>>,
    pub pose: PoseRef<T>,
}

pub fn world_points<T: Real>(state: &FilterState<T>, points: &[ClusterPoint<T>]) -> Result<Vec<WorldPoint<T>>, Rejection> {
    points
        .iter()
        .map(|cp| {
            let pose = state.pose_ref(cp.keyframe).ok_or(Rejection::UnknownKeyframe(cp.keyframe))?;
            let lidar = match &cp.velocity {
                Some(v) => compensate_point_for_litd(&cp.point, v, state.time_delay, pose.delay_at_creation),
                None => cp.point,
            };
            let world = project_point_to_world(&lidar, &pose.pose, &state.extrinsic);
            Ok(WorldPoint { world, lidar, velocity: cp.velocity, pose })
        })
        .collect()
}

/// Jacobian of the mean squared distance to a frozen `plane`.
pub fn lspp_jacobians<T: Real>(
    state: &FilterState<T>,
    points: &[ClusterPoint<T>],
    plane: &Plane<T>,
    estimate_time_delay: bool,
) -> Result<DVector<T>, Rejection> {
    let resolved = world_points(state, points)?;
    Ok(jacobian_from_resolved(state, &resolved, plane, estimate_time_delay))
}

fn jacobian_from_resolved<T: Real>(
    state: &FilterState<T>,
    resolved: &[WorldPoint<T>],
    plane: &Plane<T>,
    estimate_time_delay: bool,
) -> DVector<T> {
    let mut h = DVector::zeros(state.dim());
    let scale = lit::<T>(2.0) / T::from_usize(resolved.len()).unwrap();
    let r_l = state.extrinsic.rotation.matrix();
    let n = plane.normal;
    let add = |h: &mut DVector<T>, o: usize, row: Vec3<T>| {
        for i in 0..3 {
            h[o + i] += row[i];
        }
    };
    for wp in resolved {
        // ∂z/∂p_world for this point.
        let j = n * (scale * plane.distance(&wp.world));
        let r_k: &Mat3<T> = wp.pose.pose.rotation.matrix();
        let in_body = r_l * wp.lidar + state.extrinsic.translation;
        let jr = r_k.transpose() * j;
        let o = wp.pose.offset;
        add(&mut h, o, -(skew(&in_body).transpose() * jr));
        add(&mut h, o + 3, j);
        let jrl = r_l.transpose() * jr;
        add(&mut h, EXT_ROT, -(skew(&wp.lidar).transpose() * jrl));
        add(&mut h, EXT_POS, jr);
        if estimate_time_delay {
            if let Some(v) = &wp.velocity {
                h[TIME_DELAY] -= jrl.dot(v);
            }
        }
    }
    h
}

/// Fits a plane to the delay-compensated world points, applies the 3σ gate
/// and linearizes the mean squared distance about the current state.
pub fn lspp_measurement<T: Real>(
    state: &FilterState<T>,
    points: &[ClusterPoint<T>],
    noise: NoiseModel<T>,
    config: &MeasurementConfig,
) -> Result<LsppMeasurement<T>, Rejection> {
    if points.len() < config.min_points {
        return Err(Rejection::TooFewPoints(points.len()));
    }
    let current = state.current_keyframe().ok_or(Rejection::NotCurrent)?;
    if !points.iter().any(|p| p.keyframe == current) {
        return Err(Rejection::NotCurrent);
    }
    let resolved = world_points(state, points)?;
    if resolved.iter().any(|w| !w.world.iter().all(|v| v.is_finite())) {
        return Err(Rejection::NonFinite);
    }
    let xyz: Vec<Vec3<T>> = resolved.iter().map(|w| w.world).collect();
    let plane = fit_plane_with_ratio(&xyz, lit(config.planarity_ratio)).map_err(|_| Rejection::DegeneratePlane)?;
    let noise = noise.floored(lit(config.sigma_floor));
    let limit = noise.sigma * lit(config.gate_sigmas);
    let mut sum = T::zero();
    for p in &xyz {
        let d = plane.distance(p);
        if d.abs() >= limit {
            return Err(Rejection::GateExceeded { distance: to_f64(d.abs()), limit: to_f64(limit) });
        }
        sum += d * d;
    }
    let value = sum / T::from_usize(xyz.len()).unwrap();
    let jacobian = jacobian_from_resolved(state, &resolved, &plane, config.estimate_time_delay);
    if !value.is_finite() || !jacobian.iter().all(|v| v.is_finite()) {
        return Err(Rejection::NonFinite);
    }
    Ok(LsppMeasurement { plane, value, residual: -value, jacobian, variance: noise.variance * lit(config.variance_scale), points: xyz.len() })
}
