//! Static 3-D kd-tree with exact k-nearest-neighbour queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Vec3;
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct KdTree<T: Real> {
    points: Vec<Vec3<T>>,
    /// Point indices in tree order; node `[lo, hi)` splits at `mid = (lo+hi)/2`.
    order: Vec<usize>,
    axes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T: Real> {
    pub index: usize,
    pub distance_squared: T,
}

struct Candidate<T: Real>(T, usize);

impl<T: Real> PartialEq for Candidate<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Real> Eq for Candidate<T> {}
impl<T: Real> PartialOrd for Candidate<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Real> Ord for Candidate<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).unwrap_or(Ordering::Equal).then(self.1.cmp(&other.1))
    }
}

impl<T: Real> KdTree<T> {
    pub fn build(points: Vec<Vec3<T>>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        Self::split(&points, &mut order, &mut axes);
        Self { points, order, axes }
    }

    fn split(points: &[Vec3<T>], order: &mut [usize], axes: &mut [u8]) {
        if order.len() <= 1 {
            return;
        }
        let axis = widest_axis(points, order);
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].partial_cmp(&points[b][axis]).unwrap_or(Ordering::Equal).then(a.cmp(&b))
        });
        axes[mid] = axis as u8;
        let (left, right) = order.split_at_mut(mid);
        let (left_axes, right_axes) = axes.split_at_mut(mid);
        Self::split(points, left, left_axes);
        Self::split(points, &mut right[1..], &mut right_axes[1..]);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3<T>] {
        &self.points
    }

    /// The `k` nearest points sorted by distance, ties broken by index.
    pub fn knn(&self, query: &Vec3<T>, k: usize) -> Vec<Neighbor<T>> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(query, k, 0, self.order.len(), &mut heap);
        let mut out: Vec<Neighbor<T>> =
            heap.into_iter().map(|Candidate(d, i)| Neighbor { index: i, distance_squared: d }).collect();
        out.sort_by_key(|n| Candidate(n.distance_squared, n.index));
        out
    }

    fn search(&self, q: &Vec3<T>, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate<T>>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = Candidate((p - q).norm_squared(), idx);
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().unwrap() {
            heap.pop();
            heap.push(cand);
        }
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, k, near.0, near.1, heap);
        let plane = diff * diff;
        if heap.len() < k || plane <= heap.peek().unwrap().0 {
            self.search(q, k, far.0, far.1, heap);
        }
    }
}

fn widest_axis<T: Real>(points: &[Vec3<T>], order: &[usize]) -> usize {
    let mut lo = points[order[0]];
    let mut hi = lo;
    for &i in order {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    (hi - lo).imax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn brute(points: &[Vec3<f64>], q: &Vec3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    proptest! {
        #[test]
        fn knn_matches_brute_force(
            pts in prop::collection::vec((-5i32..5, -5i32..5, -5i32..5), 1..200),
            q in (-60i32..60, -60i32..60, -60i32..60),
            k in 1usize..12,
        ) {
            // Integer grid coordinates produce many exact ties.
            let points: Vec<Vec3<f64>> = pts.iter().map(|&(x, y, z)| Vector3::new(x as f64, y as f64, z as f64)).collect();
            let query = Vector3::new(q.0 as f64 / 10.0, q.1 as f64 / 10.0, q.2 as f64 / 10.0);
            let tree = KdTree::build(points.clone());
            let got: Vec<(usize, f64)> = tree.knn(&query, k).iter().map(|n| (n.index, n.distance_squared)).collect();
            prop_assert_eq!(got, brute(&points, &query, k));
        }
    }

    #[test]
    fn empty_and_zero_k() {
        let tree = KdTree::<f64>::build(Vec::new());
        assert!(tree.knn(&Vector3::zeros(), 3).is_empty());
        let tree = KdTree::build(vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert!(tree.knn(&Vector3::zeros(), 0).is_empty());
        assert_eq!(tree.knn(&Vector3::zeros(), 5).len(), 1);
    }
}
