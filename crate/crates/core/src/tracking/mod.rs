//! Frame-to-frame same-plane point tracking.
//!
//! A cluster holds at most one point per keyframe, all believed to lie on the
//! same physical plane. Each new keyframe extends the live clusters by
//! nearest-neighbour search in its own map and seeds new clusters where the
//! map is not yet covered.

mod kdtree;
mod voxel;

pub use kdtree::{KdTree, Neighbor};
pub use voxel::{voxel_downsample, voxel_key, VoxelKey};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fit_plane_with_ratio, Plane, Pose, Vec3};
use crate::msckf::{
    lspp_measurement, ClusterPoint, FilterState, KeyframeId, LsppMeasurement, MeasurementConfig, NoiseModel,
    Rejection,
};
use crate::scalar::{lit, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackingError {
    #[error("scan has no points")]
    EmptyScan,
    #[error("time step must be positive")]
    ZeroDt,
    #[error("invalid tracking config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingConfig {
    pub map_voxel_size: f64,
    pub supplement_voxel_size: f64,
    pub knn: usize,
    /// Largest allowed neighbour distance to the local 5-NN plane.
    pub point_plane_gate: f64,
    pub min_cluster_points: usize,
    /// Clusters last extended more than this many keyframes ago are dropped.
    pub stale_window: u64,
    pub max_match_distance: f64,
    /// Matches farther than this from the projection get no velocity.
    pub velocity_match_distance: f64,
    pub planarity_ratio: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            map_voxel_size: 0.5,
            supplement_voxel_size: 2.0,
            knn: 5,
            point_plane_gate: 0.1,
            min_cluster_points: 5,
            stale_window: 5,
            max_match_distance: 1.0,
            velocity_match_distance: 0.2,
            planarity_ratio: crate::geometry::DEFAULT_PLANARITY_RATIO,
        }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<(), TrackingError> {
        let positive = [
            self.map_voxel_size,
            self.supplement_voxel_size,
            self.point_plane_gate,
            self.max_match_distance,
            self.velocity_match_distance,
            self.planarity_ratio,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.knn < 3 || self.min_cluster_points == 0 || self.stale_window == 0 {
            return Err(TrackingError::InvalidConfig("all values must be positive and knn >= 3"));
        }
        if self.supplement_voxel_size <= self.map_voxel_size {
            return Err(TrackingError::InvalidConfig("supplement voxel must be larger than map voxel"));
        }
        Ok(())
    }
}

/// Downsampled keyframe cloud in its own LiDAR frame.
#[derive(Debug, Clone)]
pub struct KeyframeMap<T: Real> {
    pub id: KeyframeId,
    pub tree: KdTree<T>,
}

impl<T: Real> KeyframeMap<T> {
    pub fn points(&self) -> &[Vec3<T>] {
        self.tree.points()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }
}

pub fn build_keyframe_map<T: Real>(
    id: KeyframeId,
    deskewed: &[Vec3<T>],
    config: &TrackingConfig,
) -> Result<KeyframeMap<T>, TrackingError> {
    let points = voxel_downsample(deskewed, lit(config.map_voxel_size));
    if points.is_empty() {
        return Err(TrackingError::EmptyScan);
    }
    Ok(KeyframeMap { id, tree: KdTree::build(points) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + for<'a> Deserialize<'a>")]
pub struct LsppCluster<T: Real> {
    pub id: u64,
    pub points: Vec<ClusterPoint<T>>,
    /// Thickness of the neighbourhood each point was matched in, when known.
    pub thickness: Vec<Option<T>>,
    pub last_associated_keyframe: KeyframeId,
}

impl<T: Real> LsppCluster<T> {
    pub fn seed(id: u64, keyframe: KeyframeId, point: Vec3<T>, thickness: Option<T>) -> Self {
        Self {
            id,
            points: vec![ClusterPoint { keyframe, point, velocity: None }],
            thickness: vec![thickness],
            last_associated_keyframe: keyframe,
        }
    }

    pub fn newest(&self) -> &ClusterPoint<T> {
        self.points.last().expect("clusters are never empty")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn thickness_history(&self) -> impl Iterator<Item = T> + '_ {
        self.thickness.iter().flatten().copied()
    }

    /// Appends a point from a newer keyframe.
    pub fn push(&mut self, point: ClusterPoint<T>, thickness: T) {
        assert!(point.keyframe > self.newest().keyframe, "cluster points must come from increasing keyframes");
        self.last_associated_keyframe = point.keyframe;
        self.points.push(point);
        self.thickness.push(Some(thickness));
    }

    /// Removes the point observed in `keyframe`, if any.
    pub fn drop_keyframe(&mut self, keyframe: KeyframeId) {
        if let Some(i) = self.points.iter().position(|p| p.keyframe == keyframe) {
            self.points.remove(i);
            self.thickness.remove(i);
            if i == 0 {
                if let Some(first) = self.points.first_mut() {
                    first.velocity = None;
                }
            }
        }
    }
}

/// Mean squared distance of `points` to `plane`.
pub fn plane_thickness<T: Real>(points: &[Vec3<T>], plane: &Plane<T>) -> T {
    let n = T::from_usize(points.len()).unwrap();
    points.iter().map(|p| plane.distance(p).powi(2)).fold(T::zero(), |a, b| a + b) / n
}

/// Measurement variance from the mean squared thickness, and the implied
/// per-point distance sigma. `None` when no thickness is known.
pub fn adaptive_sigma<T: Real>(cluster: &LsppCluster<T>) -> Option<NoiseModel<T>> {
    let (sum, count) = cluster.thickness_history().fold((T::zero(), 0usize), |(s, c), g| (s + g * g, c + 1));
    (count > 0).then(|| NoiseModel::from_variance(sum / T::from_usize(count).unwrap()))
}

/// Apparent LiDAR-frame velocity between two observations of a point.
pub fn point_velocity<T: Real>(earlier: &Vec3<T>, later: &Vec3<T>, dt: T) -> Result<Vec3<T>, TrackingError> {
    if !(dt > T::zero()) {
        return Err(TrackingError::ZeroDt);
    }
    Ok((later - earlier) / dt)
}

/// Local plane through the `knn` map points nearest to `query`; the query
/// itself must also lie within the point-plane gate.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPlane<T: Real> {
    pub nearest: Vec3<T>,
    /// Index of `nearest` in the map.
    pub nearest_index: usize,
    pub nearest_distance: T,
    pub plane: Plane<T>,
    pub thickness: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LostReason {
    TooFewNeighbors,
    TooFar,
    NotPlanar,
}

pub fn local_plane<T: Real>(map: &KeyframeMap<T>, query: &Vec3<T>, config: &TrackingConfig) -> Result<LocalPlane<T>, LostReason> {
    let neighbors = map.tree.knn(query, config.knn);
    if neighbors.len() < config.knn {
        return Err(LostReason::TooFewNeighbors);
    }
    let nearest_distance = neighbors[0].distance_squared.sqrt();
    if nearest_distance > lit(config.max_match_distance) {
        return Err(LostReason::TooFar);
    }
    let pts: Vec<Vec3<T>> = neighbors.iter().map(|n| map.points()[n.index]).collect();
    let plane = fit_plane_with_ratio(&pts, lit(config.planarity_ratio)).map_err(|_| LostReason::NotPlanar)?;
    let gate = lit::<T>(config.point_plane_gate);
    if pts.iter().chain(std::iter::once(query)).any(|p| plane.distance(p).abs() >= gate) {
        return Err(LostReason::NotPlanar);
    }
    Ok(LocalPlane { nearest: pts[0], nearest_index: neighbors[0].index, nearest_distance, thickness: plane_thickness(&pts, &plane), plane })
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackResult<T: Real> {
    Tracked { point: ClusterPoint<T>, map_index: usize, thickness: T },
    Lost(LostReason),
}

/// Pose taking LiDAR coordinates of keyframe `from` into those of keyframe `to`.
pub fn relative_lidar_pose<T: Real>(state: &FilterState<T>, from: KeyframeId, to: KeyframeId) -> Option<Pose<T>> {
    let a = state.pose_ref(from)?;
    let b = state.pose_ref(to)?;
    let lidar = |p: &Pose<T>| p.compose(&state.extrinsic);
    Some(lidar(&b.pose).inverse().compose(&lidar(&a.pose)))
}

/// Extends a cluster into `map`.
///
/// `relative` maps the newest cluster point's LiDAR frame into the map's and
/// `dt` is the LiDAR-clock time between the two keyframes.
pub fn track_cluster<T: Real>(
    cluster: &LsppCluster<T>,
    map: &KeyframeMap<T>,
    relative: &Pose<T>,
    dt: T,
    config: &TrackingConfig,
) -> TrackResult<T> {
    let newest = cluster.newest();
    let projected = relative.transform_point(&newest.point);
    match local_plane(map, &projected, config) {
        Err(reason) => TrackResult::Lost(reason),
        Ok(local) => {
            let velocity = if local.nearest_distance < lit(config.velocity_match_distance) {
                point_velocity(&newest.point, &local.nearest, dt).ok()
            } else {
                None
            };
            TrackResult::Tracked {
                point: ClusterPoint { keyframe: map.id, point: local.nearest, velocity },
                map_index: local.nearest_index,
                thickness: local.thickness,
            }
        }
    }
}

/// Tracks every cluster whose newest keyframe is still in the state into the
/// current keyframe's map. Returns the number of clusters extended.
///
/// A map point joins at most one cluster: when several clusters land on the
/// same point the longest (then oldest) one keeps it and the others are
/// dropped, since from there on they would carry the same points.
pub fn track_all<T: Real>(
    clusters: &mut Vec<LsppCluster<T>>,
    state: &FilterState<T>,
    map: &KeyframeMap<T>,
    config: &TrackingConfig,
) -> usize {
    let Some(current) = state.pose_ref(map.id) else { return 0 };
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    let mut results = Vec::with_capacity(clusters.len());
    for (i, cluster) in clusters.iter().enumerate() {
        let newest = *cluster.newest();
        if newest.keyframe >= map.id {
            results.push(None);
            continue;
        }
        let (Some(prev), Some(relative)) = (state.pose_ref(newest.keyframe), relative_lidar_pose(state, newest.keyframe, map.id)) else {
            results.push(None);
            continue;
        };
        let dt = current.lidar_timestamp - prev.lidar_timestamp;
        match track_cluster(cluster, map, &relative, dt, config) {
            TrackResult::Tracked { point, map_index, thickness } => {
                let better = |j: usize| (cluster.len(), std::cmp::Reverse(cluster.id)) > (clusters[j].len(), std::cmp::Reverse(clusters[j].id));
                match owner.get(&map_index) {
                    Some(&j) if !better(j) => {}
                    _ => {
                        owner.insert(map_index, i);
                    }
                }
                results.push(Some((map_index, point, thickness)));
            }
            TrackResult::Lost(_) => results.push(None),
        }
    }
    let mut keep = vec![true; clusters.len()];
    let mut tracked = 0;
    for (i, result) in results.into_iter().enumerate() {
        if let Some((map_index, point, thickness)) = result {
            if owner[&map_index] == i {
                clusters[i].push(point, thickness);
                tracked += 1;
            } else {
                keep[i] = false;
            }
        }
    }
    let mut k = keep.into_iter();
    clusters.retain(|_| k.next().unwrap());
    tracked
}

/// Seeds single-point clusters at coarse-voxel representatives of `map` not
/// already covered by a cluster point from the same keyframe.
///
/// A representative is covered when such a point lies within one map voxel of
/// it or anywhere in its coarse voxel.
pub fn supplement_clusters<T: Real>(
    map: &KeyframeMap<T>,
    clusters: &[LsppCluster<T>],
    config: &TrackingConfig,
    next_id: &mut u64,
) -> Vec<LsppCluster<T>> {
    let coarse = lit::<T>(config.supplement_voxel_size);
    let covered: Vec<Vec3<T>> =
        clusters.iter().map(|c| c.newest()).filter(|p| p.keyframe == map.id).map(|p| p.point).collect();
    let occupied: BTreeSet<VoxelKey> = covered.iter().map(|p| voxel_key(p, coarse)).collect();
    let covered = KdTree::build(covered);
    let reach = lit::<T>(config.map_voxel_size);
    let mut out = Vec::new();
    for rep in voxel_downsample(map.points(), coarse) {
        let is_covered = occupied.contains(&voxel_key(&rep, coarse))
            || covered.knn(&rep, 1).first().is_some_and(|n| n.distance_squared.sqrt() <= reach);
        if is_covered {
            continue;
        }
        let thickness = local_plane(map, &rep, config).ok().map(|l| l.thickness);
        out.push(LsppCluster::seed(*next_id, map.id, rep, thickness));
        *next_id += 1;
    }
    out
}

/// Drops clusters not extended within the last `stale_window` keyframes
/// (age equal to the window is kept).
pub fn prune_clusters<T: Real>(clusters: &mut Vec<LsppCluster<T>>, current: KeyframeId, config: &TrackingConfig) {
    clusters.retain(|c| current.saturating_sub(c.last_associated_keyframe) <= config.stale_window);
}

/// Removes a marginalized keyframe's points; clusters left empty are dropped.
pub fn drop_keyframe<T: Real>(clusters: &mut Vec<LsppCluster<T>>, keyframe: KeyframeId) {
    for c in clusters.iter_mut() {
        c.drop_keyframe(keyframe);
    }
    clusters.retain(|c| !c.is_empty());
}

/// Builds the measurement for a cluster, applying the size, currency, plane
/// and 3σ checks.
pub fn cluster_measurement<T: Real>(
    cluster: &LsppCluster<T>,
    state: &FilterState<T>,
    config: &MeasurementConfig,
) -> Result<LsppMeasurement<T>, Rejection> {
    if cluster.len() < config.min_points {
        return Err(Rejection::TooFewPoints(cluster.len()));
    }
    let noise = adaptive_sigma(cluster).unwrap_or(NoiseModel { variance: T::zero(), sigma: T::zero() });
    lspp_measurement(state, &cluster.points, noise, config)
}

pub fn validate_for_measurement<T: Real>(cluster: &LsppCluster<T>, state: &FilterState<T>, config: &MeasurementConfig) -> bool {
    cluster_measurement(cluster, state, config).is_ok()
}

/// Association used when tracking is disabled: coarse samples of the current
/// map are projected into every keyframe map of the window and matched there.
///
/// `window_maps` must be ordered by keyframe id and exclude `current`.
pub fn associate_without_tracking<T: Real>(
    current: &KeyframeMap<T>,
    window_maps: &[&KeyframeMap<T>],
    state: &FilterState<T>,
    config: &TrackingConfig,
    next_id: &mut u64,
) -> Vec<LsppCluster<T>> {
    let Some(cur) = state.pose_ref(current.id) else { return Vec::new() };
    let velocity_gate = lit::<T>(config.velocity_match_distance);
    let mut out = Vec::new();
    for rep in voxel_downsample(current.points(), lit(config.supplement_voxel_size)) {
        // (keyframe, lidar time, point, thickness, matched closely enough for a velocity)
        let mut chain: Vec<(KeyframeId, T, Vec3<T>, Option<T>, bool)> = Vec::new();
        for map in window_maps {
            let (Some(kf), Some(rel)) = (state.pose_ref(map.id), relative_lidar_pose(state, current.id, map.id)) else {
                continue;
            };
            if let Ok(local) = local_plane(map, &rel.transform_point(&rep), config) {
                chain.push((map.id, kf.lidar_timestamp, local.nearest, Some(local.thickness), local.nearest_distance < velocity_gate));
            }
        }
        if chain.is_empty() {
            continue;
        }
        let own = local_plane(current, &rep, config).ok().map(|l| l.thickness);
        chain.push((current.id, cur.lidar_timestamp, rep, own, true));
        let mut cluster = LsppCluster {
            id: *next_id,
            points: Vec::with_capacity(chain.len()),
            thickness: Vec::with_capacity(chain.len()),
            last_associated_keyframe: current.id,
        };
        *next_id += 1;
        for (i, &(kf, t, p, g, close)) in chain.iter().enumerate() {
            let velocity = (i > 0 && close && chain[i - 1].4)
                .then(|| point_velocity(&chain[i - 1].2, &p, t - chain[i - 1].1).ok())
                .flatten();
            cluster.points.push(ClusterPoint { keyframe: kf, point: p, velocity });
            cluster.thickness.push(g);
        }
        out.push(cluster);
    }
    out
}
