//! File formats: IMU and scan CSV, TUM trajectories, diagnostics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::TrajectoryErrorReport;
use crate::geometry::Pose;
use crate::ins::{ImuSample, LidarPoint};
use crate::simulator::Scenario;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

fn write_rows<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_rows<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>, IoError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(csv_err(path))?;
    r.deserialize().collect::<Result<Vec<S>, _>>().map_err(csv_err(path))
}

pub fn write_imu_csv(path: &Path, samples: &[ImuSample<f64>]) -> Result<(), IoError> {
    write_rows(
        path,
        samples.iter().map(|s| ImuRow {
            t: s.timestamp,
            gx: s.angular_rate.x,
            gy: s.angular_rate.y,
            gz: s.angular_rate.z,
            ax: s.specific_force.x,
            ay: s.specific_force.y,
            az: s.specific_force.z,
        }),
    )
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample<f64>>, IoError> {
    let rows: Vec<ImuRow> = read_rows(path)?;
    Ok(rows
        .into_iter()
        .map(|r| ImuSample::new(r.t, Vector3::new(r.gx, r.gy, r.gz), Vector3::new(r.ax, r.ay, r.az)))
        .collect())
}

pub fn write_scan_csv(path: &Path, points: &[LidarPoint<f64>]) -> Result<(), IoError> {
    write_rows(
        path,
        points.iter().map(|p| ScanRow { t: p.timestamp, x: p.position.x, y: p.position.y, z: p.position.z }),
    )
}

pub fn read_scan_csv(path: &Path) -> Result<Vec<LidarPoint<f64>>, IoError> {
    let rows: Vec<ScanRow> = read_rows(path)?;
    Ok(rows.into_iter().map(|r| LidarPoint { timestamp: r.t, position: Vector3::new(r.x, r.y, r.z) }).collect())
}

pub fn scan_file_name(index: usize) -> String {
    format!("scan_{index:06}.csv")
}

/// Ordered supply of LiDAR scans, loaded one at a time.
pub trait ScanSource {
    fn len(&self) -> usize;
    fn load(&self, index: usize) -> Result<Vec<LidarPoint<f64>>, IoError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scan CSV files in a directory, ordered by file name.
#[derive(Debug, Clone)]
pub struct ScanDirectory {
    pub files: Vec<PathBuf>,
}

impl ScanDirectory {
    pub fn open(dir: &Path) -> Result<Self, IoError> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scan_") && n.ends_with(".csv"))
            })
            .collect();
        files.sort();
        Ok(Self { files })
    }
}

impl ScanSource for ScanDirectory {
    fn len(&self) -> usize {
        self.files.len()
    }

    fn load(&self, index: usize) -> Result<Vec<LidarPoint<f64>>, IoError> {
        read_scan_csv(&self.files[index])
    }
}

impl ScanSource for Scenario {
    fn len(&self) -> usize {
        self.scan_count()
    }

    fn load(&self, index: usize) -> Result<Vec<LidarPoint<f64>>, IoError> {
        Ok(self.scan(index))
    }
}

impl<S: ScanSource + ?Sized> ScanSource for &S {
    fn len(&self) -> usize {
        (**self).len()
    }

    fn load(&self, index: usize) -> Result<Vec<LidarPoint<f64>>, IoError> {
        (**self).load(index)
    }
}

/// `t tx ty tz qx qy qz qw`, quaternion scalar last.
pub fn format_tum_line(t: f64, pose: &Pose<f64>) -> String {
    let q = UnitQuaternion::from_rotation_matrix(&pose.rotation);
    let p = pose.translation;
    format!(
        "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
        t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
    )
}

pub fn write_tum(path: &Path, poses: &[(f64, Pose<f64>)]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for (t, pose) in poses {
        writeln!(w, "{}", format_tum_line(*t, pose)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn parse_tum_line(line: &str) -> Result<Option<(f64, Pose<f64>)>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|e| format!("bad number {s:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if v.len() != 8 {
        return Err(format!("expected 8 fields, found {}", v.len()));
    }
    let q = Quaternion::new(v[7], v[4], v[5], v[6]);
    if !(q.norm() > 0.0) {
        return Err("zero quaternion".into());
    }
    let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
    Ok(Some((v[0], Pose::new(rotation, Vector3::new(v[1], v[2], v[3])))))
}

pub fn read_tum(path: &Path) -> Result<Vec<(f64, Pose<f64>)>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        match parse_tum_line(&line) {
            Ok(Some(row)) => out.push(row),
            Ok(None) => {}
            Err(message) => return Err(IoError::Parse { path: path.to_path_buf(), line: i + 1, message }),
        }
    }
    Ok(out)
}

/// One row per keyframe epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub n_clusters: usize,
    pub n_accepted: usize,
    pub t_d: f64,
    /// Angle between estimated and true extrinsic rotation when truth is known.
    pub extrinsic_angle_err_deg: Option<f64>,
}

pub fn write_diagnostics(path: &Path, rows: &[DiagnosticsRow]) -> Result<(), IoError> {
    write_rows(path, rows)
}

pub fn read_diagnostics(path: &Path) -> Result<Vec<DiagnosticsRow>, IoError> {
    read_rows(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub epoch: usize,
    pub t_da_ms: f64,
    pub t_est_ms: f64,
}

pub fn write_benchmark(path: &Path, rows: &[BenchmarkRow]) -> Result<(), IoError> {
    write_rows(path, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterDumpRow {
    pub cluster_id: u64,
    pub kf_id: u64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub vx: Option<f64>,
    pub vy: Option<f64>,
    pub vz: Option<f64>,
    pub gamma: Option<f64>,
}

/// Per-pose errors of an evaluated trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrorRow {
    pub t: f64,
    pub translation_error: f64,
    pub rotation_error_deg: f64,
    pub raw_rotation_error_deg: f64,
}

pub fn write_trajectory_errors(path: &Path, report: &TrajectoryErrorReport) -> Result<(), IoError> {
    let rows = (0..report.timestamps.len()).map(|i| TrajectoryErrorRow {
        t: report.timestamps[i],
        translation_error: report.translation_errors[i],
        rotation_error_deg: report.rotation_errors_deg[i],
        raw_rotation_error_deg: report.raw_rotation_errors_deg[i],
    });
    write_rows(path, rows)
}

pub fn write_cluster_dump(path: &Path, rows: &[ClusterDumpRow]) -> Result<(), IoError> {
    write_rows(path, rows)
}
