//! Odometry driver: initialization, propagation, keyframing and updates.

mod config;

pub use config::{ConfigError, KeyframePolicy, PipelineConfig};

use std::collections::VecDeque;
use std::time::Instant;

use thiserror::Error;

use crate::geometry::{rotation_log, Pose};
use crate::ins::{deskew_scan, propagate, static_initialize, ImuSample, InsError, LidarPoint, PoseHistory, MAX_STEP};
use crate::io::{BenchmarkRow, ClusterDumpRow, DiagnosticsRow, IoError, ScanSource};
use crate::msckf::{measurement_update, FilterError, FilterState, KeyframeId, MeasurementConfig};
use crate::scalar::{lit, to_f64, Real};
use crate::tracking::{
    associate_without_tracking, build_keyframe_map, cluster_measurement, drop_keyframe, prune_clusters,
    supplement_clusters, track_all, KeyframeMap, LsppCluster, TrackingError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initialization failed: {0}")]
    InitializationFailed(InsError),
    #[error("IMU stream gap of {gap} s at t = {at}")]
    StreamGap { at: f64, gap: f64 },
    #[error(transparent)]
    Ins(#[from] InsError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// What happened to one scan.
#[derive(Debug, Clone, PartialEq)]
pub enum ScanOutcome {
    /// Scan starts before the filter was initialized or has no points.
    Skipped,
    /// Not enough IMU data to reach the end of the scan.
    ImuExhausted,
    NotKeyframe,
    Keyframe(Box<EpochRecord>),
}

/// Outputs of one keyframe epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub keyframe: KeyframeId,
    /// IMU-clock time of the keyframe.
    pub t: f64,
    pub pose: Pose<f64>,
    pub diagnostics: DiagnosticsRow,
    pub benchmark: BenchmarkRow,
    /// Points in the keyframe's downsampled map.
    pub map_points: usize,
    pub clusters: Option<Vec<ClusterDumpRow>>,
}

pub struct Odometry<T: Real> {
    config: PipelineConfig,
    measurement: MeasurementConfig,
    state: FilterState<T>,
    last_sample: ImuSample<T>,
    history: PoseHistory<T>,
    clusters: Vec<LsppCluster<T>>,
    /// Keyframe maps of the window; kept only without tracking.
    window_maps: VecDeque<KeyframeMap<T>>,
    next_keyframe: KeyframeId,
    next_cluster: u64,
    /// LiDAR time and IMU pose of the last keyframe.
    last_keyframe: Option<(f64, Pose<T>)>,
    epoch: usize,
    truth_extrinsic: Option<Pose<f64>>,
    cursor: usize,
}

fn cast_sample<T: Real>(s: &ImuSample<f64>) -> ImuSample<T> {
    ImuSample::new(lit(s.timestamp), s.angular_rate.map(lit), s.specific_force.map(lit))
}

fn angle_between_deg(a: &Pose<f64>, b: &Pose<f64>) -> f64 {
    rotation_log(&(a.rotation.inverse() * b.rotation)).norm().to_degrees()
}

impl<T: Real> Odometry<T> {
    /// Levels the filter on the static segment at the start of `imu`.
    pub fn initialize(
        config: &PipelineConfig,
        imu: &[ImuSample<f64>],
        truth_extrinsic: Option<Pose<f64>>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let t0 = imu.first().map(|s| s.timestamp).ok_or(PipelineError::InitializationFailed(InsError::NotEnoughData(0.0, config.static_init.min_duration)))?;
        let end = t0 + config.static_init.min_duration + 1e-9;
        let count = imu.partition_point(|s| s.timestamp <= end);
        let buffer: Vec<ImuSample<T>> = imu[..count].iter().map(cast_sample).collect();
        let (nominal, imu_diag) =
            static_initialize(&buffer, &config.static_init, &config.noise).map_err(PipelineError::InitializationFailed)?;

        let init = &config.noise.initial;
        let ext_var = |s: f64| if config.extrinsic_estimation { lit(s * s) } else { T::zero() };
        let td_var = if config.measurement.estimate_time_delay { lit(init.time_delay.powi(2)) } else { T::zero() };
        let mut state = FilterState::new(nominal, config.initial_extrinsic().cast(), lit(config.initial_time_delay), config.window_size);
        state.set_base_covariance(&imu_diag, ext_var(init.extrinsic_rotation), ext_var(init.extrinsic_translation), td_var);

        let last_sample = buffer[count - 1];
        let mut history = PoseHistory::new();
        history.push(last_sample.timestamp, state.imu.pose());
        Ok(Self {
            config: config.clone(),
            measurement: config.measurement_config(),
            state,
            last_sample,
            history,
            clusters: Vec::new(),
            window_maps: VecDeque::new(),
            next_keyframe: 0,
            next_cluster: 0,
            last_keyframe: None,
            epoch: 0,
            truth_extrinsic,
            cursor: count,
        })
    }

    pub fn state(&self) -> &FilterState<T> {
        &self.state
    }

    pub fn clusters(&self) -> &[LsppCluster<T>] {
        &self.clusters
    }

    /// IMU-clock time the filter has been propagated to.
    pub fn time(&self) -> f64 {
        to_f64(self.last_sample.timestamp)
    }

    /// Propagates one sample, splitting steps longer than the mechanization limit.
    fn step(&mut self, curr: ImuSample<T>) -> Result<(), PipelineError> {
        let start = self.last_sample;
        let dt = to_f64(curr.timestamp - start.timestamp);
        if dt <= 0.0 {
            return Ok(());
        }
        let n = (dt / MAX_STEP).ceil().max(1.0) as usize;
        let mut prev = start;
        for k in 1..=n {
            let sub = if k == n { curr } else { start.interpolate(&curr, start.timestamp + lit::<T>(dt * k as f64 / n as f64)) };
            propagate(&mut self.state, &self.config.noise, &prev, &sub)?;
            prev = sub;
        }
        self.last_sample = curr;
        self.history.push(curr.timestamp, self.state.imu.pose());
        Ok(())
    }

    /// Propagates up to IMU time `target`. Returns false when the stream ends first.
    fn advance_to(&mut self, imu: &[ImuSample<f64>], target: f64) -> Result<bool, PipelineError> {
        while self.time() < target {
            let Some(next) = imu.get(self.cursor) else { return Ok(false) };
            let prev = &imu[self.cursor - 1];
            let gap = next.timestamp - prev.timestamp;
            if gap > self.config.imu_gap_limit {
                return Err(PipelineError::StreamGap { at: prev.timestamp, gap });
            }
            if next.timestamp < prev.timestamp {
                return Err(InsError::NonMonotonicTime { prev: prev.timestamp, curr: next.timestamp }.into());
            }
            if next.timestamp <= target {
                self.step(cast_sample(next))?;
                self.cursor += 1;
            } else {
                self.step(cast_sample(&prev.interpolate(next, target)))?;
            }
        }
        Ok(true)
    }

    fn is_keyframe(&self, scan_end: f64, pose: &Pose<T>) -> bool {
        let Some((t, last)) = &self.last_keyframe else { return true };
        let policy = &self.config.keyframe;
        let rel = last.inverse().compose(pose);
        scan_end - t >= policy.interval
            || to_f64(rel.translation.norm()) >= policy.translation
            || to_f64(rotation_log(&rel.rotation).norm()).to_degrees() >= policy.rotation_deg
    }

    /// Feeds one scan (LiDAR clock); `imu` is the whole IMU stream.
    pub fn process_scan(&mut self, imu: &[ImuSample<f64>], points: &[LidarPoint<f64>]) -> Result<ScanOutcome, PipelineError> {
        let Some(start) = points.iter().map(|p| p.timestamp).reduce(f64::min) else { return Ok(ScanOutcome::Skipped) };
        let end = points.iter().map(|p| p.timestamp).fold(start, f64::max);
        let td = to_f64(self.state.time_delay);
        let (history_start, _) = self.history.span().map(|(a, b)| (to_f64(a), to_f64(b))).unwrap_or_default();
        if start + td < history_start {
            return Ok(ScanOutcome::Skipped);
        }
        if !self.advance_to(imu, end + td)? {
            return Ok(ScanOutcome::ImuExhausted);
        }
        let pose = self.state.imu.pose();
        if !self.is_keyframe(end, &pose) {
            return Ok(ScanOutcome::NotKeyframe);
        }
        let record = self.keyframe_epoch(points, end, td)?;
        self.last_keyframe = Some((end, self.state.imu.pose()));
        self.history.trim_before(lit(self.time() - 1.0));
        Ok(ScanOutcome::Keyframe(Box::new(record)))
    }

    fn keyframe_epoch(&mut self, points: &[LidarPoint<f64>], end: f64, td: f64) -> Result<EpochRecord, PipelineError> {
        let id = self.next_keyframe;
        self.next_keyframe += 1;
        let end_t: T = lit(end);
        self.state.begin_keyframe(id, end_t);

        let scan: Vec<LidarPoint<T>> =
            points.iter().map(|p| LidarPoint { timestamp: lit(p.timestamp), position: p.position.map(lit) }).collect();
        let (history, delay) = (&self.history, self.state.time_delay);
        let deskewed = deskew_scan(&scan, end_t, &self.state.extrinsic, |t| history.pose_at(t + delay))?;
        let positions: Vec<_> = deskewed.iter().map(|p| p.position).collect();
        let map = build_keyframe_map(id, &positions, &self.config.tracking)?;
        let map_points = map.len();

        let timer = Instant::now();
        let baseline = if self.config.tracking_enabled {
            track_all(&mut self.clusters, &self.state, &map, &self.config.tracking);
            Vec::new()
        } else {
            let window: Vec<&KeyframeMap<T>> = self.window_maps.iter().collect();
            associate_without_tracking(&map, &window, &self.state, &self.config.tracking, &mut self.next_cluster)
        };
        let mut t_da = timer.elapsed().as_secs_f64();

        let timer = Instant::now();
        let candidates: Vec<&LsppCluster<T>> = if self.config.tracking_enabled {
            self.clusters.iter().filter(|c| c.newest().keyframe == id).collect()
        } else {
            baseline.iter().collect()
        };
        let n_clusters = candidates.len();
        let measurements: Vec<_> =
            candidates.iter().filter_map(|c| cluster_measurement(c, &self.state, &self.measurement).ok()).collect();
        let n_accepted = measurements.len();
        if !measurements.is_empty() {
            let before = self.state.imu.pose();
            match measurement_update(&mut self.state, &measurements) {
                Ok(_) => {
                    let correction = self.state.imu.pose().compose(&before.inverse());
                    self.history.apply_correction(&correction);
                }
                // A numerically indefinite innovation skips the epoch's update.
                Err(FilterError::InnovationNotPD) => {}
                Err(e) => return Err(e.into()),
            }
        }
        if self.state.keyframes.len() >= self.config.window_size {
            let old = self.state.marginalize_oldest()?;
            drop_keyframe(&mut self.clusters, old.id);
            if self.window_maps.front().is_some_and(|m| m.id == old.id) {
                self.window_maps.pop_front();
            }
        }
        self.state.augment_keyframe(id, end_t)?;
        let t_est = timer.elapsed().as_secs_f64();

        let timer = Instant::now();
        if self.config.tracking_enabled {
            let seeds = supplement_clusters(&map, &self.clusters, &self.config.tracking, &mut self.next_cluster);
            self.clusters.extend(seeds);
            prune_clusters(&mut self.clusters, id, &self.config.tracking);
        } else {
            self.window_maps.push_back(map);
        }
        t_da += timer.elapsed().as_secs_f64();

        let stamp = end + td;
        let pose: Pose<f64> = self.state.imu.pose().cast();
        let extrinsic: Pose<f64> = self.state.extrinsic.cast();
        let record = EpochRecord {
            keyframe: id,
            t: stamp,
            pose,
            diagnostics: DiagnosticsRow {
                t: stamp,
                n_clusters,
                n_accepted,
                t_d: to_f64(self.state.time_delay),
                extrinsic_angle_err_deg: self.truth_extrinsic.as_ref().map(|truth| angle_between_deg(truth, &extrinsic)),
            },
            benchmark: BenchmarkRow { epoch: self.epoch, t_da_ms: t_da * 1e3, t_est_ms: t_est * 1e3 },
            map_points,
            clusters: self.config.dump_clusters.then(|| self.cluster_dump(if self.config.tracking_enabled { &self.clusters } else { &baseline })),
        };
        self.epoch += 1;
        Ok(record)
    }

    /// World-frame cluster points for every keyframe still in the window.
    fn cluster_dump(&self, clusters: &[LsppCluster<T>]) -> Vec<ClusterDumpRow> {
        let mut rows = Vec::new();
        for c in clusters {
            for (p, gamma) in c.points.iter().zip(&c.thickness) {
                let Some(kf) = self.state.pose_ref(p.keyframe) else { continue };
                let w = kf.pose.compose(&self.state.extrinsic).transform_point(&p.point);
                rows.push(ClusterDumpRow {
                    cluster_id: c.id,
                    kf_id: p.keyframe,
                    x: to_f64(w.x),
                    y: to_f64(w.y),
                    z: to_f64(w.z),
                    vx: p.velocity.map(|v| to_f64(v.x)),
                    vy: p.velocity.map(|v| to_f64(v.y)),
                    vz: p.velocity.map(|v| to_f64(v.z)),
                    gamma: gamma.map(to_f64),
                });
            }
        }
        rows
    }
}

/// Everything a run produces, one entry per keyframe.
#[derive(Debug, Clone)]
pub struct OdometryOutput<T: Real> {
    pub trajectory: Vec<(f64, Pose<f64>)>,
    pub diagnostics: Vec<DiagnosticsRow>,
    pub benchmark: Vec<BenchmarkRow>,
    pub cluster_dumps: Vec<(KeyframeId, Vec<ClusterDumpRow>)>,
    pub map_points: Vec<usize>,
    pub final_state: FilterState<T>,
    pub scans_processed: usize,
}

/// Runs the estimator over a recorded or simulated stream.
///
/// `truth_extrinsic`, when given, feeds the extrinsic error column of the
/// diagnostics.
pub fn run_odometry<T: Real, S: ScanSource>(
    config: &PipelineConfig,
    imu: &[ImuSample<f64>],
    scans: &S,
    truth_extrinsic: Option<Pose<f64>>,
) -> Result<OdometryOutput<T>, PipelineError> {
    let mut odo = Odometry::<T>::initialize(config, imu, truth_extrinsic)?;
    let mut out = OdometryOutput {
        trajectory: Vec::new(),
        diagnostics: Vec::new(),
        benchmark: Vec::new(),
        cluster_dumps: Vec::new(),
        map_points: Vec::new(),
        final_state: odo.state.clone(),
        scans_processed: 0,
    };
    for i in 0..scans.len() {
        let points = scans.load(i)?;
        match odo.process_scan(imu, &points)? {
            ScanOutcome::ImuExhausted => break,
            ScanOutcome::Skipped => continue,
            ScanOutcome::NotKeyframe => {}
            ScanOutcome::Keyframe(rec) => {
                out.trajectory.push((rec.t, rec.pose));
                out.diagnostics.push(rec.diagnostics);
                out.benchmark.push(rec.benchmark);
                out.map_points.push(rec.map_points);
                if let Some(rows) = rec.clusters {
                    out.cluster_dumps.push((rec.keyframe, rows));
                }
            }
        }
        out.scans_processed += 1;
    }
    out.final_state = odo.state;
    Ok(out)
}

#[cfg(test)]
mod tests;
