//! Flat `key = value` configuration.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use thiserror::Error;

use crate::geometry::Pose;
use crate::ins::{NoiseConfig, StaticInitConfig};
use crate::msckf::MeasurementConfig;
use crate::simulator::{PatternKind, SimulationConfig, TrajectoryKind, WorldKind};
use crate::tracking::TrackingConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("override {0:?} is not `key=value`")]
    Override(String),
    #[error("cannot read config: {0}")]
    Read(String),
    #[error("{0}")]
    Invalid(String),
}

/// New keyframe when any threshold since the previous keyframe is exceeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframePolicy {
    pub translation: f64,
    pub rotation_deg: f64,
    pub interval: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self { translation: 0.3, rotation_deg: 5.0, interval: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub noise: NoiseConfig,
    pub static_init: StaticInitConfig,
    pub tracking: TrackingConfig,
    pub measurement: MeasurementConfig,
    pub keyframe: KeyframePolicy,
    /// Prior LiDAR → IMU extrinsic: roll, pitch, yaw in degrees.
    pub extrinsic_rpy_deg: [f64; 3],
    pub extrinsic_xyz: [f64; 3],
    pub extrinsic_estimation: bool,
    pub initial_time_delay: f64,
    pub tracking_enabled: bool,
    /// Largest tolerated hole in the IMU stream, seconds.
    pub imu_gap_limit: f64,
    pub dump_clusters: bool,
    pub eval_max_dt: f64,
    pub groundtruth_rate: f64,
    pub sim: SimulationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_size: 10,
            noise: NoiseConfig::default(),
            static_init: StaticInitConfig::default(),
            tracking: TrackingConfig::default(),
            measurement: MeasurementConfig::default(),
            keyframe: KeyframePolicy::default(),
            extrinsic_rpy_deg: [0.0; 3],
            extrinsic_xyz: [0.05, -0.03, 0.12],
            extrinsic_estimation: true,
            initial_time_delay: 0.0,
            tracking_enabled: true,
            imu_gap_limit: 0.5,
            dump_clusters: false,
            eval_max_dt: crate::evaluation::DEFAULT_MAX_DT,
            groundtruth_rate: 200.0,
            sim: SimulationConfig::default(),
        }
    }
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for usize {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for u64 {
    fn parse(s: &str) -> Result<Self, String> {
        s.parse().map_err(|e| format!("{e}"))
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "true" | "on" | "1" | "yes" => Ok(true),
            "false" | "off" | "0" | "no" => Ok(false),
            _ => Err("expected true or false".into()),
        }
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl ConfigValue for [f64; 3] {
    fn parse(s: &str) -> Result<Self, String> {
        let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{e}"))).collect::<Result<_, _>>()?;
        v.try_into().map_err(|_| "expected three comma-separated numbers".to_string())
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0], self[1], self[2])
    }
}

macro_rules! enum_value {
    ($t:ty { $($name:literal => $variant:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                match s {
                    $($name => Ok($variant),)*
                    _ => Err(format!("expected one of: {}", [$($name),*].join(", "))),
                }
            }
            fn render(&self) -> String {
                $(if *self == $variant { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_value!(WorldKind { "room" => WorldKind::Room, "furnished_room" => WorldKind::FurnishedRoom, "corridor" => WorldKind::Corridor });
enum_value!(TrajectoryKind {
    "static" => TrajectoryKind::Static,
    "circle" => TrajectoryKind::Circle,
    "figure_eight" => TrajectoryKind::FigureEight,
    "straight" => TrajectoryKind::Straight,
});
enum_value!(PatternKind { "spinning" => PatternKind::Spinning, "solid_state" => PatternKind::SolidState });

/// Angles stored in radians but configured in degrees.
struct Degrees;

impl Degrees {
    fn parse(s: &str) -> Result<f64, String> {
        f64::parse(s).map(f64::to_radians)
    }
    fn render(v: &f64) -> String {
        format!("{}", v.to_degrees())
    }
}

macro_rules! config_keys {
    ($( $key:literal => $conv:ident $($field:ident).+ ),* $(,)?) => {
        impl PipelineConfig {
            /// Every accepted key, in file order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |reason: String| ConfigError::InvalidValue { key: key.to_string(), value: value.to_string(), reason };
                match key {
                    $( $key => { self.$($field).+ = config_keys!(@parse $conv, value).map_err(bad)?; } )*
                    _ => return Err(ConfigError::UnknownKey(key.to_string())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(config_keys!(@render $conv, &self.$($field).+)), )*
                    _ => None,
                }
            }
        }
    };
    (@parse plain, $v:expr) => { ConfigValue::parse($v) };
    (@parse deg, $v:expr) => { Degrees::parse($v) };
    (@render plain, $v:expr) => { ConfigValue::render($v) };
    (@render deg, $v:expr) => { Degrees::render($v) };
}

config_keys! {
    "window.size" => plain window_size,
    "noise.gyro" => plain noise.gyro_noise,
    "noise.accel" => plain noise.accel_noise,
    "noise.gyro_bias_walk" => plain noise.gyro_bias_walk,
    "noise.accel_bias_walk" => plain noise.accel_bias_walk,
    "init.sigma_attitude_deg" => deg noise.initial.attitude,
    "init.sigma_position" => plain noise.initial.position,
    "init.sigma_velocity" => plain noise.initial.velocity,
    "init.sigma_gyro_bias" => plain noise.initial.gyro_bias,
    "init.sigma_accel_bias" => plain noise.initial.accel_bias,
    "init.sigma_extrinsic_rotation_deg" => deg noise.initial.extrinsic_rotation,
    "init.sigma_extrinsic_translation" => plain noise.initial.extrinsic_translation,
    "init.sigma_time_delay" => plain noise.initial.time_delay,
    "init.static_duration" => plain static_init.min_duration,
    "init.max_accel_variance" => plain static_init.max_accel_variance,
    "init.gravity" => plain static_init.gravity,
    "extrinsic.rpy_deg" => plain extrinsic_rpy_deg,
    "extrinsic.xyz" => plain extrinsic_xyz,
    "extrinsic.estimate" => plain extrinsic_estimation,
    "time_delay.initial" => plain initial_time_delay,
    "time_delay.estimate" => plain measurement.estimate_time_delay,
    "tracking.enabled" => plain tracking_enabled,
    "tracking.map_voxel_size" => plain tracking.map_voxel_size,
    "tracking.supplement_voxel_size" => plain tracking.supplement_voxel_size,
    "tracking.knn" => plain tracking.knn,
    "tracking.point_plane_gate" => plain tracking.point_plane_gate,
    "tracking.min_cluster_points" => plain tracking.min_cluster_points,
    "tracking.stale_window" => plain tracking.stale_window,
    "tracking.max_match_distance" => plain tracking.max_match_distance,
    "tracking.velocity_match_distance" => plain tracking.velocity_match_distance,
    "tracking.planarity_ratio" => plain tracking.planarity_ratio,
    "measurement.gate_sigmas" => plain measurement.gate_sigmas,
    "measurement.sigma_floor" => plain measurement.sigma_floor,
    "measurement.variance_scale" => plain measurement.variance_scale,
    "keyframe.translation" => plain keyframe.translation,
    "keyframe.rotation_deg" => plain keyframe.rotation_deg,
    "keyframe.interval" => plain keyframe.interval,
    "imu.gap_limit" => plain imu_gap_limit,
    "output.dump_clusters" => plain dump_clusters,
    "eval.max_dt" => plain eval_max_dt,
    "sim.groundtruth_rate" => plain groundtruth_rate,
    "sim.world" => plain sim.world,
    "sim.room_length" => plain sim.room_length,
    "sim.room_width" => plain sim.room_width,
    "sim.room_height" => plain sim.room_height,
    "sim.trajectory" => plain sim.trajectory,
    "sim.duration" => plain sim.duration,
    "sim.lead_in" => plain sim.lead_in,
    "sim.ramp" => plain sim.ramp,
    "sim.radius" => plain sim.radius,
    "sim.period" => plain sim.period,
    "sim.speed" => plain sim.speed,
    "sim.yaw_amplitude_deg" => plain sim.yaw_amplitude_deg,
    "sim.wobble_roll_deg" => plain sim.wobble_roll_deg,
    "sim.wobble_pitch_deg" => plain sim.wobble_pitch_deg,
    "sim.wobble_heave" => plain sim.wobble_heave,
    "sim.wobble_cycles" => plain sim.wobble_cycles,
    "sim.imu_rate" => plain sim.imu_rate,
    "sim.lidar_rate" => plain sim.lidar_rate,
    "sim.pattern" => plain sim.pattern,
    "sim.channels" => plain sim.channels,
    "sim.columns" => plain sim.columns,
    "sim.min_elevation_deg" => plain sim.min_elevation_deg,
    "sim.max_elevation_deg" => plain sim.max_elevation_deg,
    "sim.h_fov_deg" => plain sim.h_fov_deg,
    "sim.v_fov_deg" => plain sim.v_fov_deg,
    "sim.range_noise" => plain sim.range_noise,
    "sim.max_range" => plain sim.max_range,
    "sim.time_delay" => plain sim.time_delay,
    "sim.extrinsic_rpy_deg" => plain sim.extrinsic_rpy_deg,
    "sim.extrinsic_xyz" => plain sim.extrinsic_xyz,
    "sim.gyro_noise" => plain sim.gyro_noise,
    "sim.accel_noise" => plain sim.accel_noise,
    "sim.gyro_bias_walk" => plain sim.gyro_bias_walk,
    "sim.accel_bias_walk" => plain sim.accel_bias_walk,
    "sim.gyro_bias" => plain sim.gyro_bias,
    "sim.accel_bias" => plain sim.accel_bias,
}

impl PipelineConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_file(path)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies a config file without validating, so overrides can follow.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its current value, one `key = value` per line.
    pub fn render(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k).unwrap())).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.window_size == 0 {
            return fail("window.size must be at least 1");
        }
        if !self.noise.validate() {
            return fail("noise and initial sigmas must be finite and non-negative");
        }
        self.tracking.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let m = &self.measurement;
        if !(m.gate_sigmas > 0.0 && m.sigma_floor > 0.0 && m.planarity_ratio > 0.0) {
            return fail("measurement gate and floor must be positive");
        }
        let k = &self.keyframe;
        if !(k.translation > 0.0 && k.rotation_deg > 0.0 && k.interval > 0.0) {
            return fail("keyframe thresholds must be positive");
        }
        if !(self.imu_gap_limit > 0.0 && self.eval_max_dt > 0.0 && self.groundtruth_rate > 0.0) {
            return fail("imu.gap_limit, eval.max_dt and sim.groundtruth_rate must be positive");
        }
        if !(self.static_init.min_duration > 0.0 && self.static_init.gravity > 0.0) {
            return fail("static initialization needs positive duration and gravity");
        }
        self.sim.validate().map_err(ConfigError::Invalid)
    }

    pub fn initial_extrinsic(&self) -> Pose<f64> {
        let [r, p, y] = self.extrinsic_rpy_deg.map(f64::to_radians);
        Pose::new(Rotation3::from_euler_angles(r, p, y), Vector3::from(self.extrinsic_xyz))
    }

    /// Measurement settings; cluster size and planarity are shared with tracking.
    pub fn measurement_config(&self) -> MeasurementConfig {
        MeasurementConfig {
            min_points: self.tracking.min_cluster_points,
            planarity_ratio: self.tracking.planarity_ratio,
            ..self.measurement.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_render_round_trips() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back = PipelineConfig::from_text(&c.render()).unwrap();
        assert_eq!(back.render(), c.render());
    }

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# comment\nwindow.size = 7  # trailing\n\nsim.world=corridor\ninit.sigma_attitude_deg = 2\n";
        let mut c = PipelineConfig::from_text(text).unwrap();
        assert_eq!(c.window_size, 7);
        assert_eq!(c.sim.world, WorldKind::Corridor);
        assert!((c.noise.initial.attitude - 2f64.to_radians()).abs() < 1e-15);
        c.apply_override("window.size=10").unwrap();
        assert_eq!(c.window_size, 10);
        c.apply_override("sim.extrinsic_xyz = 0.1, 0.2,0.3").unwrap();
        assert_eq!(c.sim.extrinsic_xyz, [0.1, 0.2, 0.3]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(PipelineConfig::from_text("window.sise = 3"), Err(ConfigError::UnknownKey("window.sise".into())));
        assert!(matches!(PipelineConfig::from_text("window.size = ten"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(PipelineConfig::from_text("sim.world = moon"), Err(ConfigError::InvalidValue { .. })));
        assert_eq!(PipelineConfig::from_text("just words"), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!(PipelineConfig::from_text("window.size = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            PipelineConfig::from_text("tracking.supplement_voxel_size = 0.1"),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn every_key_is_gettable() {
        let c = PipelineConfig::default();
        for k in PipelineConfig::KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}
