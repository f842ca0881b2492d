//! Synthetic plane worlds, trajectories and sensor streams.

mod sensors;
mod trajectory;
mod world;

pub use sensors::{
    export_groundtruth, sample_imu, sample_lidar_scan, scan_count, scan_end_time, ImuErrorModel, ScanPattern, SensorRig,
    GRAVITY,
};
pub use trajectory::{AnalyticTrajectory, Term, TrajectoryFamily, TrajectoryState, Wobble};
pub use world::{Hit, Patch, PlaneWorld, WorldError};

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::ins::{ImuSample, LidarPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Room,
    FurnishedRoom,
    Corridor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    Circle,
    FigureEight,
    Straight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Spinning,
    SolidState,
}

/// Flat description of a simulated run; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub world: WorldKind,
    pub room_length: f64,
    pub room_width: f64,
    pub room_height: f64,
    pub trajectory: TrajectoryKind,
    pub duration: f64,
    pub lead_in: f64,
    pub ramp: f64,
    pub radius: f64,
    pub period: f64,
    pub speed: f64,
    pub yaw_amplitude_deg: f64,
    pub wobble_roll_deg: f64,
    pub wobble_pitch_deg: f64,
    pub wobble_heave: f64,
    pub wobble_cycles: f64,
    pub imu_rate: f64,
    pub lidar_rate: f64,
    pub pattern: PatternKind,
    pub channels: usize,
    pub columns: usize,
    pub min_elevation_deg: f64,
    pub max_elevation_deg: f64,
    pub h_fov_deg: f64,
    pub v_fov_deg: f64,
    pub range_noise: f64,
    pub max_range: f64,
    pub time_delay: f64,
    pub extrinsic_rpy_deg: [f64; 3],
    pub extrinsic_xyz: [f64; 3],
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            world: WorldKind::FurnishedRoom,
            room_length: 16.0,
            room_width: 12.0,
            room_height: 4.0,
            trajectory: TrajectoryKind::Circle,
            duration: 60.0,
            lead_in: 2.0,
            ramp: 3.0,
            radius: 3.0,
            period: 20.0,
            speed: 1.0,
            yaw_amplitude_deg: 25.0,
            wobble_roll_deg: 4.0,
            wobble_pitch_deg: 3.0,
            wobble_heave: 0.1,
            wobble_cycles: 3.0,
            imu_rate: 200.0,
            lidar_rate: 10.0,
            pattern: PatternKind::Spinning,
            channels: 16,
            columns: 600,
            min_elevation_deg: -15.0,
            max_elevation_deg: 15.0,
            h_fov_deg: 70.0,
            v_fov_deg: 70.0,
            range_noise: 0.0,
            max_range: 60.0,
            time_delay: 0.0,
            extrinsic_rpy_deg: [0.0, 0.0, 0.0],
            extrinsic_xyz: [0.05, -0.03, 0.12],
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

impl SimulationConfig {
    /// Switches on the consumer-grade IMU error model.
    pub fn with_realistic_imu(mut self) -> Self {
        let e = ImuErrorModel::realistic();
        self.gyro_noise = e.gyro_noise;
        self.accel_noise = e.accel_noise;
        self.gyro_bias_walk = e.gyro_bias_walk;
        self.accel_bias_walk = e.accel_bias_walk;
        self.gyro_bias = e.gyro_bias.into();
        self.accel_bias = e.accel_bias.into();
        self
    }

    pub fn extrinsic(&self) -> Pose<f64> {
        let [r, p, y] = self.extrinsic_rpy_deg.map(f64::to_radians);
        Pose::new(Rotation3::from_euler_angles(r, p, y), Vector3::from(self.extrinsic_xyz))
    }

    pub fn rig(&self) -> SensorRig {
        let pattern = match self.pattern {
            PatternKind::Spinning => ScanPattern::Spinning {
                channels: self.channels,
                columns: self.columns,
                min_elevation_deg: self.min_elevation_deg,
                max_elevation_deg: self.max_elevation_deg,
            },
            PatternKind::SolidState => ScanPattern::SolidState {
                rows: self.channels,
                cols: self.columns,
                h_fov_deg: self.h_fov_deg,
                v_fov_deg: self.v_fov_deg,
            },
        };
        SensorRig {
            extrinsic: self.extrinsic(),
            time_delay: self.time_delay,
            imu_rate: self.imu_rate,
            lidar_rate: self.lidar_rate,
            pattern,
            range_noise: self.range_noise,
            min_range: 0.3,
            max_range: self.max_range,
            imu_error: ImuErrorModel {
                gyro_noise: self.gyro_noise,
                accel_noise: self.accel_noise,
                gyro_bias_walk: self.gyro_bias_walk,
                accel_bias_walk: self.accel_bias_walk,
                gyro_bias: Vector3::from(self.gyro_bias),
                accel_bias: Vector3::from(self.accel_bias),
            },
        }
    }

    pub fn trajectory(&self) -> AnalyticTrajectory {
        let family = match self.trajectory {
            TrajectoryKind::Static => TrajectoryFamily::Static,
            TrajectoryKind::Circle => TrajectoryFamily::Circle { radius: self.radius, period: self.period },
            TrajectoryKind::FigureEight => {
                TrajectoryFamily::FigureEight { half_length: self.radius * 1.5, half_width: self.radius * 0.75, period: self.period }
            }
            TrajectoryKind::Straight => TrajectoryFamily::StraightSinusoidalYaw {
                speed: self.speed,
                yaw_amplitude: self.yaw_amplitude_deg.to_radians(),
                yaw_period: self.period,
            },
        };
        let wobble = Wobble {
            roll: self.wobble_roll_deg.to_radians(),
            pitch: self.wobble_pitch_deg.to_radians(),
            heave: self.wobble_heave,
            cycles: self.wobble_cycles,
        };
        AnalyticTrajectory::new(family, wobble, self.duration, self.lead_in, self.ramp)
    }

    /// World placed so the trajectory stays inside it.
    pub fn world(&self) -> PlaneWorld {
        let size = Vector3::new(self.room_length, self.room_width, self.room_height);
        let centre_y = match self.trajectory {
            TrajectoryKind::Circle => self.radius,
            _ => 0.0,
        };
        let min = Vector3::new(-size.x / 2.0, centre_y - size.y / 2.0, -1.5);
        match self.world {
            WorldKind::Room => PlaneWorld::room(min, size),
            WorldKind::FurnishedRoom => PlaneWorld::furnished_room(min, size),
            WorldKind::Corridor => PlaneWorld::corridor(self.room_length, self.room_width, self.room_height, -5.0),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.rig().validate().map_err(str::to_string)?;
        if !(self.duration >= 1.0) {
            return Err("simulation duration must be at least 1 s".into());
        }
        if self.lead_in < 1.0 {
            return Err("a static lead-in of at least 1 s is needed for initialization".into());
        }
        if !(self.ramp > 0.0 && self.period > 0.0 && self.radius > 0.0 && self.speed >= 0.0) {
            return Err("trajectory parameters must be positive".into());
        }
        if self.channels == 0 || self.columns == 0 {
            return Err("scan pattern must have at least one ray".into());
        }
        self.world().validate().map_err(|e| e.to_string())
    }
}

/// A fully built simulation: world, trajectory, rig and seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub world: PlaneWorld,
    pub trajectory: AnalyticTrajectory,
    pub rig: SensorRig,
    pub seed: u64,
}

impl Scenario {
    pub fn new(config: &SimulationConfig, seed: u64) -> Self {
        Self { world: config.world(), trajectory: config.trajectory(), rig: config.rig(), seed }
    }

    pub fn imu(&self) -> Vec<ImuSample<f64>> {
        sample_imu(&self.trajectory, &self.rig, self.seed)
    }

    pub fn scan_count(&self) -> usize {
        scan_count(&self.trajectory, &self.rig)
    }

    pub fn scan(&self, index: usize) -> Vec<LidarPoint<f64>> {
        sample_lidar_scan(&self.world, &self.trajectory, &self.rig, index, self.seed)
    }

    pub fn groundtruth(&self, rate: f64) -> Vec<(f64, Pose<f64>)> {
        export_groundtruth(&self.trajectory, rate)
    }
}
