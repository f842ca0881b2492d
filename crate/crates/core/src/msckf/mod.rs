//! Sliding-window error-state filter.
//!
//! Error-state layout, in order:
//!
//! | block            | size | contents                                   |
//! |------------------|------|--------------------------------------------|
//! | IMU              | 15   | δθ, δp, δv, δb_g, δb_a                     |
//! | extrinsic        | 6    | δθ_l^b, δp_l^b (LiDAR → IMU)               |
//! | time delay       | 1    | δt_d                                       |
//! | keyframe `i`     | 6    | δθ_i, δp_i, oldest first                   |

mod measurement;
mod update;

pub use measurement::{
    apply_time_delay, compensate_point_for_litd, lspp_jacobians, lspp_measurement, project_point_to_world,
    world_points, ClusterPoint, LsppMeasurement, MeasurementConfig, NoiseModel, Rejection, WorldPoint,
};
pub use update::{measurement_update, UpdateSummary};

use nalgebra::{DMatrix, DVector, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::ins::ImuNominal;
use crate::scalar::{lit, to_f64, Real};

pub const IMU_DIM: usize = 15;
pub const EXT_ROT: usize = 15;
pub const EXT_POS: usize = 18;
pub const TIME_DELAY: usize = 21;
pub const BASE_DIM: usize = 22;
pub const KEYFRAME_DIM: usize = 6;

/// Monotonic keyframe counter shared with the tracking module.
pub type KeyframeId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("sliding window already holds {0} keyframes")]
    WindowFull(usize),
    #[error("sliding window is empty")]
    EmptyWindow,
    #[error("innovation covariance is not positive definite")]
    InnovationNotPD,
    #[error("no measurements supplied")]
    NoMeasurements,
    #[error("measurement row has {got} columns, state has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct KeyframeState<T: Real> {
    pub id: KeyframeId,
    /// IMU pose at `lidar_timestamp + delay_at_creation`.
    pub pose: Pose<T>,
    pub lidar_timestamp: T,
    pub delay_at_creation: T,
    /// Position in the sliding window; the covariance block starts at
    /// `BASE_DIM + 6·slot`.
    pub slot: usize,
}

/// Keyframe being processed but not yet augmented; its pose is the current
/// IMU pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct PendingKeyframe<T: Real> {
    pub id: KeyframeId,
    pub lidar_timestamp: T,
    pub delay_at_creation: T,
}

/// Where a keyframe's pose lives in the state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRef<T: Real> {
    pub pose: Pose<T>,
    /// Offset of the `δθ` block; `δp` follows at `offset + 3`.
    pub offset: usize,
    pub delay_at_creation: T,
    pub lidar_timestamp: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct FilterState<T: Real> {
    pub imu: ImuNominal<T>,
    /// LiDAR → IMU.
    pub extrinsic: Pose<T>,
    pub time_delay: T,
    pub keyframes: Vec<KeyframeState<T>>,
    pub covariance: DMatrix<T>,
    pub max_keyframes: usize,
    pub pending: Option<PendingKeyframe<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthReport {
    pub symmetric: bool,
    pub min_eigenvalue: f64,
}

impl HealthReport {
    pub fn is_healthy(&self, psd_tolerance: f64) -> bool {
        self.symmetric && self.min_eigenvalue >= -psd_tolerance
    }
}

impl<T: Real> FilterState<T> {
    /// State with an all-zero covariance; see [`FilterState::set_base_covariance`].
    pub fn new(imu: ImuNominal<T>, extrinsic: Pose<T>, time_delay: T, max_keyframes: usize) -> Self {
        Self {
            imu,
            extrinsic,
            time_delay,
            keyframes: Vec::new(),
            covariance: DMatrix::zeros(BASE_DIM, BASE_DIM),
            max_keyframes,
            pending: None,
        }
    }

    /// Sets the diagonal of the non-keyframe blocks and clears their
    /// cross-covariances.
    pub fn set_base_covariance(&mut self, imu_diag: &SVector<T, 15>, extrinsic_rot: T, extrinsic_pos: T, time_delay: T) {
        let n = self.dim();
        self.covariance.view_mut((0, 0), (BASE_DIM, n)).fill(T::zero());
        self.covariance.view_mut((0, 0), (n, BASE_DIM)).fill(T::zero());
        for i in 0..IMU_DIM {
            self.covariance[(i, i)] = imu_diag[i];
        }
        for i in 0..3 {
            self.covariance[(EXT_ROT + i, EXT_ROT + i)] = extrinsic_rot;
            self.covariance[(EXT_POS + i, EXT_POS + i)] = extrinsic_pos;
        }
        self.covariance[(TIME_DELAY, TIME_DELAY)] = time_delay;
    }

    pub fn dim(&self) -> usize {
        BASE_DIM + KEYFRAME_DIM * self.keyframes.len()
    }

    pub fn keyframe_offset(slot: usize) -> usize {
        BASE_DIM + KEYFRAME_DIM * slot
    }

    pub fn symmetrize(&mut self) {
        let n = self.covariance.nrows();
        let half = lit::<T>(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (self.covariance[(i, j)] + self.covariance[(j, i)]) * half;
                self.covariance[(i, j)] = v;
                self.covariance[(j, i)] = v;
            }
        }
    }

    /// Marks the start of a keyframe epoch at the current IMU pose.
    pub fn begin_keyframe(&mut self, id: KeyframeId, lidar_timestamp: T) {
        self.pending = Some(PendingKeyframe { id, lidar_timestamp, delay_at_creation: self.time_delay });
    }

    /// Pose of keyframe `id`, either from the window or the pending keyframe.
    pub fn pose_ref(&self, id: KeyframeId) -> Option<PoseRef<T>> {
        if let Some(p) = self.pending.filter(|p| p.id == id) {
            return Some(PoseRef {
                pose: self.imu.pose(),
                offset: 0,
                delay_at_creation: p.delay_at_creation,
                lidar_timestamp: p.lidar_timestamp,
            });
        }
        let slot = self.slot_of(id)?;
        let kf = &self.keyframes[slot];
        Some(PoseRef {
            pose: kf.pose,
            offset: Self::keyframe_offset(slot),
            delay_at_creation: kf.delay_at_creation,
            lidar_timestamp: kf.lidar_timestamp,
        })
    }

    pub fn slot_of(&self, id: KeyframeId) -> Option<usize> {
        self.keyframes.binary_search_by_key(&id, |k| k.id).ok()
    }

    /// Current keyframe id, if an epoch is open.
    pub fn current_keyframe(&self) -> Option<KeyframeId> {
        self.pending.map(|p| p.id)
    }

    /// Appends the current IMU pose to the window and grows the covariance
    /// by `[I; J] P [I; J]ᵀ` with `J` selecting the IMU attitude and position.
    ///
    /// The delay stamp is the one recorded by [`FilterState::begin_keyframe`]
    /// for the same id, else the current delay estimate.
    pub fn augment_keyframe(&mut self, id: KeyframeId, lidar_timestamp: T) -> Result<(), FilterError> {
        if self.keyframes.len() >= self.max_keyframes {
            return Err(FilterError::WindowFull(self.keyframes.len()));
        }
        let delay = match self.pending.take() {
            Some(p) if p.id == id => p.delay_at_creation,
            _ => self.time_delay,
        };
        let n = self.dim();
        let mut grown = DMatrix::zeros(n + KEYFRAME_DIM, n + KEYFRAME_DIM);
        grown.view_mut((0, 0), (n, n)).copy_from(&self.covariance);
        let rows = self.covariance.rows(0, KEYFRAME_DIM).into_owned();
        grown.view_mut((n, 0), (KEYFRAME_DIM, n)).copy_from(&rows);
        grown.view_mut((0, n), (n, KEYFRAME_DIM)).copy_from(&rows.transpose());
        grown
            .view_mut((n, n), (KEYFRAME_DIM, KEYFRAME_DIM))
            .copy_from(&self.covariance.view((0, 0), (KEYFRAME_DIM, KEYFRAME_DIM)));
        self.covariance = grown;
        self.keyframes.push(KeyframeState {
            id,
            pose: self.imu.pose(),
            lidar_timestamp,
            delay_at_creation: delay,
            slot: self.keyframes.len(),
        });
        Ok(())
    }

    /// Deletes the oldest keyframe and its covariance rows and columns.
    pub fn marginalize_oldest(&mut self) -> Result<KeyframeState<T>, FilterError> {
        if self.keyframes.is_empty() {
            return Err(FilterError::EmptyWindow);
        }
        let removed = self.keyframes.remove(0);
        let cov = std::mem::replace(&mut self.covariance, DMatrix::zeros(0, 0));
        self.covariance = cov.remove_rows(BASE_DIM, KEYFRAME_DIM).remove_columns(BASE_DIM, KEYFRAME_DIM);
        for kf in &mut self.keyframes {
            kf.slot -= 1;
        }
        Ok(removed)
    }

    /// Injects an error-state correction into every nominal state.
    ///
    /// Zero components leave the corresponding nominal bitwise unchanged.
    pub fn apply_correction(&mut self, dx: &DVector<T>) {
        let v3 = |o: usize| Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        let imu_pose = correct_pose(&self.imu.pose(), &v3(0), &v3(3));
        self.imu.attitude = imu_pose.rotation;
        self.imu.position = imu_pose.translation;
        add_nonzero(&mut self.imu.velocity, &v3(6));
        add_nonzero(&mut self.imu.gyro_bias, &v3(9));
        add_nonzero(&mut self.imu.accel_bias, &v3(12));
        self.extrinsic = correct_pose(&self.extrinsic, &v3(EXT_ROT), &v3(EXT_POS));
        if dx[TIME_DELAY] != T::zero() {
            self.time_delay += dx[TIME_DELAY];
        }
        for (slot, kf) in self.keyframes.iter_mut().enumerate() {
            let o = Self::keyframe_offset(slot);
            kf.pose = correct_pose(&kf.pose, &v3(o), &v3(o + 3));
        }
    }

    /// Symmetry (exact) and smallest eigenvalue of the covariance.
    pub fn health(&self) -> HealthReport {
        let p = &self.covariance;
        let symmetric = p == &p.transpose();
        let min_eigenvalue = if p.nrows() == 0 {
            0.0
        } else {
            to_f64(p.clone().symmetric_eigen().eigenvalues.min())
        };
        HealthReport { symmetric, min_eigenvalue }
    }
}

fn add_nonzero<T: Real>(target: &mut Vec3<T>, d: &Vec3<T>) {
    for i in 0..3 {
        if d[i] != T::zero() {
            target[i] += d[i];
        }
    }
}

fn correct_pose<T: Real>(pose: &Pose<T>, d_theta: &Vec3<T>, d_pos: &Vec3<T>) -> Pose<T> {
    let mut out = *pose;
    if d_theta.iter().any(|v| *v != T::zero()) {
        out.rotation = pose.rotation * crate::geometry::so3_exp(d_theta);
    }
    add_nonzero(&mut out.translation, d_pos);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n + 3, |_, _| rng.random_range(-0.1..0.1));
        let mut p = &a * a.transpose();
        for i in 0..n {
            for j in 0..i {
                p[(i, j)] = p[(j, i)];
            }
        }
        p
    }

    fn state_with_random_cov(keyframes: usize, seed: u64) -> FilterState<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = FilterState::new(ImuNominal::at_rest(9.81), Pose::identity(), 0.0, 10);
        for k in 0..keyframes {
            s.imu.position = Vector3::new(k as f64, 0.0, 0.0);
            s.augment_keyframe(k as u64, k as f64).unwrap();
        }
        s.covariance = random_psd(s.dim(), &mut rng);
        s
    }

    #[test]
    fn augmented_block_copies_imu_pose_block() {
        let mut s = state_with_random_cov(2, 1);
        let before = s.covariance.clone();
        let n = s.dim();
        s.augment_keyframe(7, 3.0).unwrap();
        let p = &s.covariance;
        assert_eq!(p.nrows(), n + 6);
        assert_eq!(p.view((n, n), (6, 6)), before.view((0, 0), (6, 6)));
        assert_eq!(p.view((n, 0), (6, n)), before.rows(0, 6));
        assert_eq!(p.view((0, n), (n, 6)), before.rows(0, 6).transpose());
        assert_eq!(p.view((0, 0), (n, n)), before);
        assert_eq!(s.keyframes.last().unwrap().slot, 2);
    }

    #[test]
    fn augmented_covariance_stays_psd() {
        for seed in 0..20 {
            let mut s = state_with_random_cov(seed as usize % 5, seed);
            s.augment_keyframe(100, 1.0).unwrap();
            assert_eq!(s.covariance, s.covariance.transpose());
            assert!(s.health().min_eigenvalue >= -1e-12);
        }
    }

    #[test]
    fn augment_refuses_full_window() {
        let mut s = state_with_random_cov(10, 2);
        assert_eq!(s.augment_keyframe(11, 11.0), Err(FilterError::WindowFull(10)));
    }

    #[test]
    fn augment_uses_pending_delay_stamp() {
        let mut s = state_with_random_cov(0, 3);
        s.time_delay = 0.01;
        s.begin_keyframe(5, 2.0);
        s.time_delay = 0.03;
        s.augment_keyframe(5, 2.0).unwrap();
        assert_eq!(s.keyframes[0].delay_at_creation, 0.01);
        assert!(s.pending.is_none());
        s.augment_keyframe(6, 3.0).unwrap();
        assert_eq!(s.keyframes[1].delay_at_creation, 0.03);
    }

    #[test]
    fn marginalize_deletes_oldest_block() {
        let mut s = state_with_random_cov(10, 4);
        let before = s.covariance.clone();
        let removed = s.marginalize_oldest().unwrap();
        assert_eq!(removed.id, 0);
        assert_eq!(s.keyframes.len(), 9);
        let n = s.dim();
        for i in 0..n {
            for j in 0..n {
                let oi = if i < BASE_DIM { i } else { i + 6 };
                let oj = if j < BASE_DIM { j } else { j + 6 };
                assert_eq!(s.covariance[(i, j)], before[(oi, oj)]);
            }
        }
        for (slot, kf) in s.keyframes.iter().enumerate() {
            assert_eq!(kf.slot, slot);
            assert_eq!(kf.id, slot as u64 + 1);
        }
    }

    #[test]
    fn augment_marginalize_soak_keeps_dimension_bounded() {
        let mut s = state_with_random_cov(0, 5);
        s.covariance = DMatrix::identity(BASE_DIM, BASE_DIM) * 1e-2;
        for k in 0..1000u64 {
            if s.keyframes.len() == s.max_keyframes {
                s.marginalize_oldest().unwrap();
            }
            s.augment_keyframe(k, k as f64).unwrap();
            assert!(s.dim() <= BASE_DIM + 6 * 10);
        }
        assert_eq!(s.dim(), BASE_DIM + 60);
        assert!(s.health().is_healthy(1e-12));
    }

    #[test]
    fn pose_ref_resolves_pending_and_window() {
        let mut s = state_with_random_cov(3, 6);
        s.imu.attitude = so3_exp(&Vector3::new(0.0, 0.0, 0.3));
        s.begin_keyframe(9, 4.0);
        let cur = s.pose_ref(9).unwrap();
        assert_eq!(cur.offset, 0);
        assert_eq!(cur.pose, s.imu.pose());
        let old = s.pose_ref(1).unwrap();
        assert_eq!(old.offset, BASE_DIM + 6);
        assert!(s.pose_ref(42).is_none());
    }

    #[test]
    fn zero_correction_is_bitwise_noop() {
        let mut s = state_with_random_cov(3, 7);
        s.imu.attitude = so3_exp(&Vector3::new(0.1, -0.2, 0.3));
        s.imu.velocity = Vector3::new(-0.0, 1.0, 2.0);
        let before = s.clone();
        s.apply_correction(&DVector::zeros(s.dim()));
        assert_eq!(s, before);
    }

    #[test]
    fn serde_round_trip_is_exact() {
        let mut s = state_with_random_cov(4, 8);
        s.imu.attitude = so3_exp(&Vector3::new(0.1, -0.2, 0.3));
        s.time_delay = 0.0123456789;
        s.begin_keyframe(10, 5.5);
        let text = serde_json::to_string(&s).unwrap();
        let back: FilterState<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
