//! Batch Kalman update with Joseph-form covariance.

use nalgebra::{DMatrix, DVector};

use crate::scalar::Real;

use super::{FilterError, FilterState, LsppMeasurement};

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSummary<T: Real> {
    pub measurements: usize,
    pub correction: DVector<T>,
    /// Whether the stacked system was compressed by QR before solving.
    pub compressed: bool,
}

/// Stacks the measurements, solves for the gain and applies the correction.
///
/// When there are more rows than states the whitened system is reduced by a
/// thin QR factorization first; the result is algebraically identical.
pub fn measurement_update<T: Real>(
    state: &mut FilterState<T>,
    measurements: &[LsppMeasurement<T>],
) -> Result<UpdateSummary<T>, FilterError> {
    if measurements.is_empty() {
        return Err(FilterError::NoMeasurements);
    }
    let n = state.dim();
    if let Some(m) = measurements.iter().find(|m| m.jacobian.len() != n) {
        return Err(FilterError::DimensionMismatch { got: m.jacobian.len(), expected: n });
    }
    let rows = measurements.len();
    let mut h = DMatrix::zeros(rows, n);
    let mut r = DVector::zeros(rows);
    let mut noise = DVector::zeros(rows);
    for (i, m) in measurements.iter().enumerate() {
        h.row_mut(i).copy_from(&m.jacobian.transpose());
        r[i] = m.residual;
        noise[i] = m.variance;
    }
    let compressed = rows > n;
    let (h, r, noise) = if compressed {
        for i in 0..rows {
            let w = T::one() / noise[i].sqrt();
            h.row_mut(i).scale_mut(w);
            r[i] *= w;
        }
        let qr = h.qr();
        let q = qr.q();
        let rt = q.transpose() * r;
        (qr.r(), rt, DVector::from_element(n, T::one()))
    } else {
        (h, r, noise)
    };

    let p = &state.covariance;
    let pht = p * h.transpose();
    let mut s = &h * &pht;
    for i in 0..s.nrows() {
        s[(i, i)] += noise[i];
    }
    let chol = s.cholesky().ok_or(FilterError::InnovationNotPD)?;
    // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P.
    let gain = chol.solve(&pht.transpose()).transpose();
    let correction = &gain * r;

    let mut i_kh = -(&gain * &h);
    for i in 0..n {
        i_kh[(i, i)] += T::one();
    }
    let mut k_r = gain.clone();
    for (j, mut col) in k_r.column_iter_mut().enumerate() {
        col *= noise[j];
    }
    state.covariance = &i_kh * p * i_kh.transpose() + k_r * gain.transpose();
    state.symmetrize();
    state.apply_correction(&correction);
    Ok(UpdateSummary { measurements: rows, correction, compressed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Plane, Pose};
    use crate::ins::ImuNominal;
    use crate::msckf::{BASE_DIM, TIME_DELAY};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meas(jacobian: DVector<f64>, residual: f64, variance: f64) -> LsppMeasurement<f64> {
        LsppMeasurement {
            plane: Plane { normal: Vector3::z(), offset: 0.0 },
            value: -residual,
            residual,
            jacobian,
            variance,
            points: 5,
        }
    }

    fn base_state() -> FilterState<f64> {
        FilterState::new(ImuNominal::at_rest(9.81), Pose::identity(), 0.0, 10)
    }

    #[test]
    fn scalar_kalman_oracle() {
        // One state observed directly: textbook scalar update.
        let mut s = base_state();
        let (p0, r0, y) = (0.04, 0.01, 0.1);
        s.covariance[(TIME_DELAY, TIME_DELAY)] = p0;
        let mut hrow = DVector::zeros(BASE_DIM);
        hrow[TIME_DELAY] = 1.0;
        measurement_update(&mut s, &[meas(hrow, y, r0)]).unwrap();
        let k = p0 / (p0 + r0);
        assert!((s.time_delay - k * y).abs() < 1e-15);
        assert!((s.covariance[(TIME_DELAY, TIME_DELAY)] - (1.0 - k) * p0).abs() < 1e-15);
    }

    fn random_problem(seed: u64, rows: usize) -> (FilterState<f64>, Vec<LsppMeasurement<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = base_state();
        s.augment_keyframe(0, 0.0).unwrap();
        s.augment_keyframe(1, 0.1).unwrap();
        s.covariance = crate::msckf::tests::random_psd(s.dim(), &mut rng) + DMatrix::identity(s.dim(), s.dim()) * 1e-4;
        let n = s.dim();
        let ms = (0..rows)
            .map(|_| {
                let h = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                meas(h, rng.random_range(-0.01..0.01), rng.random_range(1e-4..1e-3))
            })
            .collect();
        (s, ms)
    }

    #[test]
    fn joseph_matches_simple_form_and_stays_psd() {
        for seed in 0..10 {
            let (mut s, ms) = random_problem(seed, 7);
            let p = s.covariance.clone();
            let h = DMatrix::from_fn(ms.len(), s.dim(), |i, j| ms[i].jacobian[j]);
            let rn = DMatrix::from_diagonal(&DVector::from_iterator(ms.len(), ms.iter().map(|m| m.variance)));
            let sinv = (&h * &p * h.transpose() + rn).try_inverse().unwrap();
            let k = &p * h.transpose() * sinv;
            let simple = &p - &k * &h * &p;
            measurement_update(&mut s, &ms).unwrap();
            assert!((&s.covariance - simple).amax() < 1e-10);
            assert_eq!(s.covariance, s.covariance.transpose());
            assert!(s.health().min_eigenvalue >= -1e-12);
        }
    }

    #[test]
    fn compressed_update_matches_direct() {
        for seed in 0..5 {
            let (s, ms) = random_problem(100 + seed, 80);
            let mut a = s.clone();
            let summary = measurement_update(&mut a, &ms).unwrap();
            assert!(summary.compressed);
            let mut c = s.clone();
            let direct = direct_update(&mut c, &ms);
            assert!((&a.covariance - &c.covariance).amax() < 1e-10);
            assert!((&summary.correction - direct).amax() < 1e-10);
        }
    }

    fn direct_update(s: &mut FilterState<f64>, ms: &[LsppMeasurement<f64>]) -> DVector<f64> {
        let p = s.covariance.clone();
        let h = DMatrix::from_fn(ms.len(), s.dim(), |i, j| ms[i].jacobian[j]);
        let r = DVector::from_iterator(ms.len(), ms.iter().map(|m| m.residual));
        let rn = DMatrix::from_diagonal(&DVector::from_iterator(ms.len(), ms.iter().map(|m| m.variance)));
        let k = &p * h.transpose() * (&h * &p * h.transpose() + rn).try_inverse().unwrap();
        s.covariance = &p - &k * &h * &p;
        k * r
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut s = base_state();
        assert_eq!(measurement_update(&mut s, &[]).unwrap_err(), FilterError::NoMeasurements);
        let m = meas(DVector::zeros(3), 0.0, 1.0);
        assert_eq!(
            measurement_update(&mut s, &[m]).unwrap_err(),
            FilterError::DimensionMismatch { got: 3, expected: BASE_DIM }
        );
        let m = meas(DVector::zeros(BASE_DIM), 0.0, -1.0);
        assert_eq!(measurement_update(&mut s, &[m]).unwrap_err(), FilterError::InnovationNotPD);
    }
}
