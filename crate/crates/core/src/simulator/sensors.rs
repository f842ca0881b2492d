//! IMU and LiDAR measurement synthesis.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::ins::{ImuSample, LidarPoint};

use super::trajectory::AnalyticTrajectory;
use super::world::PlaneWorld;

type V3 = Vector3<f64>;

pub const GRAVITY: f64 = 9.81;

/// Stream ids keep IMU and per-scan noise independent under one seed.
const IMU_STREAM: u64 = 1;
const SCAN_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ScanPattern {
    /// Rotating multi-beam: `channels` beams evenly spread in elevation,
    /// `columns` firings per revolution, points timed by azimuth.
    Spinning { channels: usize, columns: usize, min_elevation_deg: f64, max_elevation_deg: f64 },
    /// Forward-looking raster, timed row by row.
    SolidState { rows: usize, cols: usize, h_fov_deg: f64, v_fov_deg: f64 },
}

impl ScanPattern {
    /// Unit ray directions in the LiDAR frame with their fraction of the
    /// scan period.
    pub fn rays(&self) -> Vec<(V3, f64)> {
        let dir = |az: f64, el: f64| V3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        match *self {
            ScanPattern::Spinning { channels, columns, min_elevation_deg, max_elevation_deg } => {
                let mut out = Vec::with_capacity(channels * columns);
                for c in 0..columns {
                    let frac = c as f64 / columns as f64;
                    let az = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * frac;
                    for ch in 0..channels {
                        let s = if channels > 1 { ch as f64 / (channels - 1) as f64 } else { 0.5 };
                        let el = (min_elevation_deg + s * (max_elevation_deg - min_elevation_deg)).to_radians();
                        out.push((dir(az, el), frac));
                    }
                }
                out
            }
            ScanPattern::SolidState { rows, cols, h_fov_deg, v_fov_deg } => {
                let n = (rows * cols) as f64;
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let u = if cols > 1 { c as f64 / (cols - 1) as f64 - 0.5 } else { 0.0 };
                        let v = if rows > 1 { 0.5 - r as f64 / (rows - 1) as f64 } else { 0.0 };
                        out.push((dir(u * h_fov_deg.to_radians(), v * v_fov_deg.to_radians()), (r * cols + c) as f64 / n));
                    }
                }
                out
            }
        }
    }
}

/// Simulated IMU error model; densities in continuous-time units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuErrorModel {
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias: V3,
    pub accel_bias: V3,
}

impl ImuErrorModel {
    pub fn noiseless() -> Self {
        Self {
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias: V3::zeros(),
            accel_bias: V3::zeros(),
        }
    }

    /// Consumer-grade MEMS figures.
    pub fn realistic() -> Self {
        Self {
            gyro_noise: 2e-4,
            accel_noise: 2e-3,
            gyro_bias_walk: 2e-5,
            accel_bias_walk: 2e-4,
            gyro_bias: V3::new(1e-3, -2e-3, 1.5e-3),
            accel_bias: V3::new(0.02, -0.01, 0.015),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRig {
    /// LiDAR → IMU.
    pub extrinsic: Pose<f64>,
    /// LiDAR stamps lag the IMU clock by this much.
    pub time_delay: f64,
    pub imu_rate: f64,
    pub lidar_rate: f64,
    pub pattern: ScanPattern,
    pub range_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub imu_error: ImuErrorModel,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            extrinsic: Pose::new(
                nalgebra::Rotation3::from_euler_angles(0.0, 0.0, 0.0),
                V3::new(0.05, -0.03, 0.12),
            ),
            time_delay: 0.0,
            imu_rate: 200.0,
            lidar_rate: 10.0,
            pattern: ScanPattern::Spinning { channels: 16, columns: 600, min_elevation_deg: -15.0, max_elevation_deg: 15.0 },
            range_noise: 0.0,
            min_range: 0.3,
            max_range: 60.0,
            imu_error: ImuErrorModel::noiseless(),
        }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.imu_rate > 0.0 && self.lidar_rate > 0.0) {
            return Err("sensor rates must be positive");
        }
        if !(self.min_range >= 0.0 && self.max_range > self.min_range) {
            return Err("invalid range limits");
        }
        if self.range_noise < 0.0 {
            return Err("range noise must be non-negative");
        }
        Ok(())
    }

    pub fn scan_period(&self) -> f64 {
        1.0 / self.lidar_rate
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut ChaCha8Rng) -> V3 {
    V3::new(gauss(rng), gauss(rng), gauss(rng))
}

/// IMU samples at `rig.imu_rate` over `[0, traj.duration]`.
pub fn sample_imu(traj: &AnalyticTrajectory, rig: &SensorRig, seed: u64) -> Vec<ImuSample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(IMU_STREAM);
    let dt = 1.0 / rig.imu_rate;
    let n = (traj.duration * rig.imu_rate).floor() as usize;
    let e = &rig.imu_error;
    let (mut bg, mut ba) = (e.gyro_bias, e.accel_bias);
    let gravity = V3::new(0.0, 0.0, -GRAVITY);
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = i as f64 * dt;
        let s = traj.state(t);
        let rt = s.pose.rotation.transpose();
        let mut gyro = s.angular_rate + bg;
        let mut accel = rt * (s.acceleration - gravity) + ba;
        if e.gyro_noise > 0.0 {
            gyro += gauss3(&mut rng) * (e.gyro_noise / dt.sqrt());
        }
        if e.accel_noise > 0.0 {
            accel += gauss3(&mut rng) * (e.accel_noise / dt.sqrt());
        }
        if e.gyro_bias_walk > 0.0 {
            bg += gauss3(&mut rng) * (e.gyro_bias_walk * dt.sqrt());
        }
        if e.accel_bias_walk > 0.0 {
            ba += gauss3(&mut rng) * (e.accel_bias_walk * dt.sqrt());
        }
        out.push(ImuSample::new(t, gyro, accel));
    }
    out
}

/// Number of complete scans inside the trajectory.
pub fn scan_count(traj: &AnalyticTrajectory, rig: &SensorRig) -> usize {
    (traj.duration * rig.lidar_rate + 1e-9).floor() as usize
}

/// True (IMU-clock) end time of scan `index`.
pub fn scan_end_time(rig: &SensorRig, index: usize) -> f64 {
    (index + 1) as f64 / rig.lidar_rate
}

/// Casts every ray of the pattern from the LiDAR pose at its own capture
/// time. Points are in the LiDAR frame at capture, stamped on the LiDAR
/// clock and ordered by time.
pub fn sample_lidar_scan(
    world: &PlaneWorld,
    traj: &AnalyticTrajectory,
    rig: &SensorRig,
    index: usize,
    seed: u64,
) -> Vec<LidarPoint<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SCAN_STREAM_BASE + index as u64);
    let period = rig.scan_period();
    let start = scan_end_time(rig, index) - period;
    let mut out = Vec::new();
    for (dir, frac) in rig.pattern.rays() {
        let t = start + frac * period;
        let lidar_pose = traj.pose(t).compose(&rig.extrinsic);
        let world_dir = lidar_pose.rotation * dir;
        let Some(hit) = world.raycast(&lidar_pose.translation, &world_dir, rig.min_range, rig.max_range) else {
            continue;
        };
        let range = if rig.range_noise > 0.0 { hit.range + gauss(&mut rng) * rig.range_noise } else { hit.range };
        out.push(LidarPoint { timestamp: t - rig.time_delay, position: dir * range });
    }
    out
}

/// True IMU poses sampled at `rate` over the trajectory.
pub fn export_groundtruth(traj: &AnalyticTrajectory, rate: f64) -> Vec<(f64, Pose<f64>)> {
    let n = (traj.duration * rate + 1e-9).floor() as usize;
    (0..=n).map(|i| {
        let t = i as f64 / rate;
        (t, traj.pose(t))
    }).collect()
}
