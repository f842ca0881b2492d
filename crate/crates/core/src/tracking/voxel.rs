use std::collections::BTreeMap;

use crate::geometry::Vec3;
use crate::scalar::{to_f64, Real};

pub type VoxelKey = (i64, i64, i64);

pub fn voxel_key<T: Real>(p: &Vec3<T>, size: T) -> VoxelKey {
    let k = |v: T| to_f64((v / size).floor()) as i64;
    (k(p.x), k(p.y), k(p.z))
}

/// Keeps, per occupied voxel, the input point closest to the voxel centre.
/// Output is ordered by voxel key; ties keep the earliest input point.
pub fn voxel_downsample<T: Real>(points: &[Vec3<T>], voxel_size: T) -> Vec<Vec3<T>> {
    assert!(voxel_size > T::zero(), "voxel size must be positive");
    let half = voxel_size * T::from_f64(0.5).unwrap();
    let mut cells: BTreeMap<VoxelKey, (T, usize)> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        if !p.iter().all(|v| v.is_finite()) {
            continue;
        }
        let key = voxel_key(p, voxel_size);
        let centre = Vec3::new(
            T::from_i64(key.0).unwrap() * voxel_size + half,
            T::from_i64(key.1).unwrap() * voxel_size + half,
            T::from_i64(key.2).unwrap() * voxel_size + half,
        );
        let d = (p - centre).norm_squared();
        cells
            .entry(key)
            .and_modify(|best| {
                if d < best.0 {
                    *best = (d, i);
                }
            })
            .or_insert((d, i));
    }
    cells.values().map(|&(_, i)| points[i]).collect()
}
