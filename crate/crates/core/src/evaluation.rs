//! Trajectory alignment, ATE/ARE metrics and the Jacobian audit.

use nalgebra::{DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{rotation_log, so3_exp, Plane, Pose};
use crate::ins::ImuNominal;
use crate::msckf::{
    lspp_measurement, ClusterPoint, FilterState, KeyframeId, MeasurementConfig, NoiseModel, BASE_DIM, EXT_POS,
    EXT_ROT, IMU_DIM, TIME_DELAY,
};

pub type Trajectory = Vec<(f64, Pose<f64>)>;

pub const DEFAULT_MAX_DT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no timestamp pairs within tolerance")]
    NoMatches,
    #[error("alignment needs at least 3 non-collinear positions")]
    DegenerateGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair {
    pub timestamp: f64,
    pub estimate: Pose<f64>,
    pub reference: Pose<f64>,
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_dt` are
/// accepted in order of increasing time gap, each pose used at most once.
pub fn associate(estimate: &[(f64, Pose<f64>)], reference: &[(f64, Pose<f64>)], max_dt: f64) -> Result<Vec<PosePair>, EvalError> {
    let mut candidates = Vec::new();
    for (i, (te, _)) in estimate.iter().enumerate() {
        let lo = reference.partition_point(|(tr, _)| *tr < te - max_dt);
        for (j, (tr, _)) in reference.iter().enumerate().skip(lo) {
            if *tr > te + max_dt {
                break;
            }
            candidates.push(((te - tr).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; estimate.len()];
    let mut used_r = vec![false; reference.len()];
    let mut matched = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_r[j] {
            used_e[i] = true;
            used_r[j] = true;
            matched.push((i, j));
        }
    }
    if matched.is_empty() {
        return Err(EvalError::NoMatches);
    }
    matched.sort_unstable();
    Ok(matched
        .into_iter()
        .map(|(i, j)| PosePair { timestamp: estimate[i].0, estimate: estimate[i].1, reference: reference[j].1 })
        .collect())
}

/// Rigid transform `T` minimizing `Σ‖T·p_est − p_ref‖²`.
pub fn umeyama_se3_align(pairs: &[PosePair]) -> Result<Pose<f64>, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let n = pairs.len() as f64;
    let mu_e = pairs.iter().map(|p| p.estimate.translation).sum::<Vector3<f64>>() / n;
    let mu_r = pairs.iter().map(|p| p.reference.translation).sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in pairs {
        cov += (p.reference.translation - mu_r) * (p.estimate.translation - mu_e).transpose();
    }
    cov /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(EvalError::DegenerateGeometry);
    }
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let rotation = nalgebra::Rotation3::from_matrix_unchecked(r);
    Ok(Pose::new(rotation, mu_r - rotation * mu_e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryErrorReport {
    pub ate_rmse: f64,
    /// Rotation error after applying the alignment, degrees.
    pub are_rmse_deg: f64,
    /// Rotation error without alignment, degrees.
    pub are_raw_rmse_deg: f64,
    pub timestamps: Vec<f64>,
    pub translation_errors: Vec<f64>,
    pub rotation_errors_deg: Vec<f64>,
    pub raw_rotation_errors_deg: Vec<f64>,
    #[serde(skip)]
    pub alignment: Pose<f64>,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn angle_deg(a: &Pose<f64>, b: &Pose<f64>) -> f64 {
    rotation_log(&(b.rotation.inverse() * a.rotation)).norm().to_degrees()
}

/// Errors of `alignment · estimate` against the reference.
pub fn ate_are(pairs: &[PosePair], alignment: &Pose<f64>) -> TrajectoryErrorReport {
    let mut translation_errors = Vec::with_capacity(pairs.len());
    let mut rotation_errors_deg = Vec::with_capacity(pairs.len());
    let mut raw_rotation_errors_deg = Vec::with_capacity(pairs.len());
    for p in pairs {
        let aligned = alignment.compose(&p.estimate);
        translation_errors.push((aligned.translation - p.reference.translation).norm());
        rotation_errors_deg.push(angle_deg(&aligned, &p.reference));
        raw_rotation_errors_deg.push(angle_deg(&p.estimate, &p.reference));
    }
    TrajectoryErrorReport {
        ate_rmse: rms(&translation_errors),
        are_rmse_deg: rms(&rotation_errors_deg),
        are_raw_rmse_deg: rms(&raw_rotation_errors_deg),
        timestamps: pairs.iter().map(|p| p.timestamp).collect(),
        translation_errors,
        rotation_errors_deg,
        raw_rotation_errors_deg,
        alignment: *alignment,
    }
}

/// Associates, optionally aligns, and scores an estimate.
pub fn evaluate(estimate: &[(f64, Pose<f64>)], reference: &[(f64, Pose<f64>)], max_dt: f64, align: bool) -> Result<TrajectoryErrorReport, EvalError> {
    let pairs = associate(estimate, reference, max_dt)?;
    let alignment = if align { umeyama_se3_align(&pairs)? } else { Pose::identity() };
    Ok(ate_are(&pairs, &alignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JacobianBlock {
    CurrentPose,
    WindowPose,
    ExtrinsicRotation,
    ExtrinsicTranslation,
    TimeDelay,
    /// Velocity, biases and keyframes without points; must be exactly zero.
    Unrelated,
}

impl JacobianBlock {
    pub const ALL: [JacobianBlock; 6] = [
        JacobianBlock::CurrentPose,
        JacobianBlock::WindowPose,
        JacobianBlock::ExtrinsicRotation,
        JacobianBlock::ExtrinsicTranslation,
        JacobianBlock::TimeDelay,
        JacobianBlock::Unrelated,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            JacobianBlock::CurrentPose => "current_pose",
            JacobianBlock::WindowPose => "window_pose",
            JacobianBlock::ExtrinsicRotation => "extrinsic_rotation",
            JacobianBlock::ExtrinsicTranslation => "extrinsic_translation",
            JacobianBlock::TimeDelay => "time_delay",
            JacobianBlock::Unrelated => "unrelated",
        }
    }
}

pub const AUDIT_RELATIVE_TOLERANCE: f64 = 1e-5;
pub const AUDIT_ABSOLUTE_TOLERANCE: f64 = 1e-9;
pub const AUDIT_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockAudit {
    pub block: JacobianBlock,
    pub entries: usize,
    /// Largest `|fd − analytic| / max(|analytic|, abs_tol/rel_tol)`.
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// Entries outside `max(rel_tol·|analytic|, abs_tol)`.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianAuditReport {
    pub seed: u64,
    pub trials: usize,
    pub rejected_trials: usize,
    pub blocks: Vec<BlockAudit>,
}

impl JacobianAuditReport {
    pub fn passed(&self) -> bool {
        self.rejected_trials == 0 && self.blocks.iter().all(|b| b.violations == 0)
    }
}

/// One audit case: a state, a cluster and the keyframes it touches.
#[derive(Debug, Clone)]
pub struct AuditCase {
    pub state: FilterState<f64>,
    pub points: Vec<ClusterPoint<f64>>,
}

/// Random state with a window of keyframes, a pending current keyframe and a
/// cluster on a random plane with one point per chosen keyframe.
pub fn random_audit_case(rng: &mut ChaCha8Rng, plane_noise: f64) -> AuditCase {
    let rv = |rng: &mut ChaCha8Rng, s: f64| Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s));
    let extrinsic = Pose::new(so3_exp(&rv(rng, 0.2)), rv(rng, 0.3));
    let mut imu = ImuNominal::at_rest(9.81);
    imu.velocity = rv(rng, 1.0);
    imu.gyro_bias = rv(rng, 0.01);
    imu.accel_bias = rv(rng, 0.1);
    let mut state = FilterState::new(imu, extrinsic, rng.random_range(-0.05..0.05), 10);
    let window = rng.random_range(4..=9u64);
    for k in 0..window {
        state.imu.attitude = so3_exp(&rv(rng, 1.0));
        state.imu.position = rv(rng, 3.0);
        state.augment_keyframe(k, k as f64 * 0.2).unwrap();
        state.keyframes[k as usize].delay_at_creation = rng.random_range(-0.05..0.05);
    }
    state.imu.attitude = so3_exp(&rv(rng, 1.0));
    state.imu.position = rv(rng, 3.0);
    state.begin_keyframe(window, window as f64 * 0.2);
    state.time_delay = rng.random_range(-0.05..0.05);

    let normal = rv(rng, 1.0).normalize();
    let offset = rng.random_range(-5.0..5.0);
    let (u, v) = {
        let a = if normal.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = normal.cross(&a).normalize();
        (u, normal.cross(&u))
    };
    let mut ids: Vec<KeyframeId> = (0..window).filter(|_| rng.random_bool(0.7)).collect();
    for k in (0..window).rev() {
        if ids.len() >= 4 {
            break;
        }
        if !ids.contains(&k) {
            ids.push(k);
        }
    }
    ids.sort_unstable();
    ids.push(window);
    let mut points = Vec::new();
    for id in ids {
        let on_plane = -normal * offset + u * rng.random_range(-3.0..3.0) + v * rng.random_range(-3.0..3.0);
        let world = on_plane + normal * rng.random_range(-plane_noise..=plane_noise);
        let pose = state.pose_ref(id).unwrap();
        let velocity = rng.random_bool(0.8).then(|| rv(rng, 3.0));
        // Invert compensation and projection so the point lands on `world`.
        let lidar_comp = extrinsic.inverse().transform_point(&pose.pose.inverse().transform_point(&world));
        let point = match &velocity {
            Some(vel) => lidar_comp + vel * (state.time_delay - pose.delay_at_creation),
            None => lidar_comp,
        };
        points.push(ClusterPoint { keyframe: id, point, velocity });
    }
    AuditCase { state, points }
}

/// Independent world projection of a cluster under a perturbation `dx`.
fn perturbed_value(case: &AuditCase, plane: &Plane<f64>, dx: &DVector<f64>) -> f64 {
    let s = &case.state;
    let v3 = |o: usize| Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
    let r_l = s.extrinsic.rotation * so3_exp(&v3(EXT_ROT));
    let p_l = s.extrinsic.translation + v3(EXT_POS);
    let t_d = s.time_delay + dx[TIME_DELAY];
    let mut sum = 0.0;
    for cp in &case.points {
        let (rot, pos, delay) = if Some(cp.keyframe) == s.current_keyframe() {
            let p = s.pending.unwrap();
            (s.imu.attitude * so3_exp(&v3(0)), s.imu.position + v3(3), p.delay_at_creation)
        } else {
            let slot = s.keyframes.iter().position(|k| k.id == cp.keyframe).unwrap();
            let o = BASE_DIM + 6 * slot;
            let kf = &s.keyframes[slot];
            (kf.pose.rotation * so3_exp(&v3(o)), kf.pose.translation + v3(o + 3), kf.delay_at_creation)
        };
        let p = cp.point - cp.velocity.unwrap_or_else(Vector3::zeros) * (t_d - delay);
        let w = rot * (r_l * p + p_l) + pos;
        sum += (plane.normal.dot(&w) + plane.offset).powi(2);
    }
    sum / case.points.len() as f64
}

fn block_of(state: &FilterState<f64>, touched: &[usize], i: usize) -> JacobianBlock {
    match i {
        0..6 => JacobianBlock::CurrentPose,
        6..IMU_DIM => JacobianBlock::Unrelated,
        EXT_ROT..EXT_POS => JacobianBlock::ExtrinsicRotation,
        EXT_POS..TIME_DELAY => JacobianBlock::ExtrinsicTranslation,
        TIME_DELAY => JacobianBlock::TimeDelay,
        _ => {
            let slot = (i - BASE_DIM) / 6;
            debug_assert!(slot < state.keyframes.len());
            if touched.contains(&slot) {
                JacobianBlock::WindowPose
            } else {
                JacobianBlock::Unrelated
            }
        }
    }
}

/// Compares analytic measurement rows against central differences of an
/// independently coded measurement function with the plane held fixed.
pub fn jacobian_audit(seed: u64, trials: usize) -> JacobianAuditReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let floor = AUDIT_ABSOLUTE_TOLERANCE / AUDIT_RELATIVE_TOLERANCE;
    let mut blocks: Vec<BlockAudit> = JacobianBlock::ALL
        .iter()
        .map(|&block| BlockAudit { block, entries: 0, max_relative_error: 0.0, max_absolute_error: 0.0, violations: 0 })
        .collect();
    let config = MeasurementConfig { gate_sigmas: 1e9, ..Default::default() };
    let mut rejected = 0;
    for _ in 0..trials {
        let case = random_audit_case(&mut rng, 0.05);
        let noise = NoiseModel::from_variance(1.0);
        let Ok(m) = lspp_measurement(&case.state, &case.points, noise, &config) else {
            rejected += 1;
            continue;
        };
        let touched: Vec<usize> = case.points.iter().filter_map(|p| case.state.slot_of(p.keyframe)).collect();
        let n = case.state.dim();
        for i in 0..n {
            let mut dx = DVector::zeros(n);
            dx[i] = AUDIT_STEP;
            let plus = perturbed_value(&case, &m.plane, &dx);
            dx[i] = -AUDIT_STEP;
            let minus = perturbed_value(&case, &m.plane, &dx);
            let fd = (plus - minus) / (2.0 * AUDIT_STEP);
            let analytic = m.jacobian[i];
            let err = (fd - analytic).abs();
            let block = block_of(&case.state, &touched, i);
            let b = &mut blocks[JacobianBlock::ALL.iter().position(|x| *x == block).unwrap()];
            b.entries += 1;
            b.max_absolute_error = b.max_absolute_error.max(err);
            b.max_relative_error = b.max_relative_error.max(err / analytic.abs().max(floor));
            let unrelated_nonzero = block == JacobianBlock::Unrelated && analytic != 0.0;
            if unrelated_nonzero || err > (AUDIT_RELATIVE_TOLERANCE * analytic.abs()).max(AUDIT_ABSOLUTE_TOLERANCE) {
                b.violations += 1;
            }
        }
    }
    JacobianAuditReport { seed, trials, rejected_trials: rejected, blocks }
}
