//! Worlds made of finite rectangular plane patches.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type V3 = Vector3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("patch {0} has non-perpendicular edges")]
    NotRectangular(usize),
    #[error("patch {0} has zero area")]
    ZeroArea(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub id: usize,
    pub corner: V3,
    pub edge_u: V3,
    pub edge_v: V3,
}

impl Patch {
    pub fn normal(&self) -> V3 {
        self.edge_u.cross(&self.edge_v).normalize()
    }

    /// Ray parameter of the hit, if the ray meets the patch beyond `min_t`.
    pub fn intersect(&self, origin: &V3, dir: &V3, min_t: f64) -> Option<f64> {
        let n = self.edge_u.cross(&self.edge_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.corner - origin)) / denom;
        if t <= min_t {
            return None;
        }
        let rel = origin + dir * t - self.corner;
        let a = rel.dot(&self.edge_u) / self.edge_u.norm_squared();
        let b = rel.dot(&self.edge_v) / self.edge_v.norm_squared();
        ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some(t)
    }

    /// Signed distance of `p` to the patch's supporting plane.
    pub fn plane_distance(&self, p: &V3) -> f64 {
        self.normal().dot(&(p - self.corner))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PlaneWorld {
    pub patches: Vec<Patch>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub patch: usize,
}

impl PlaneWorld {
    pub fn add_patch(&mut self, corner: V3, edge_u: V3, edge_v: V3) -> &mut Self {
        let id = self.patches.len();
        self.patches.push(Patch { id, corner, edge_u, edge_v });
        self
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        for p in &self.patches {
            if p.edge_u.cross(&p.edge_v).norm() <= 0.0 {
                return Err(WorldError::ZeroArea(p.id));
            }
            if p.edge_u.dot(&p.edge_v).abs() > 1e-9 * p.edge_u.norm() * p.edge_v.norm() {
                return Err(WorldError::NotRectangular(p.id));
            }
        }
        Ok(())
    }

    /// Nearest patch hit along a unit-direction ray.
    pub fn raycast(&self, origin: &V3, dir: &V3, min_range: f64, max_range: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for p in &self.patches {
            if let Some(t) = p.intersect(origin, dir, min_range) {
                if t <= max_range && best.is_none_or(|b| t < b.range) {
                    best = Some(Hit { range: t, patch: p.id });
                }
            }
        }
        best
    }

    /// Axis-aligned box given by its minimum corner and size. With `inward`
    /// the faces point into the box (room), otherwise outward (obstacle).
    pub fn add_box(&mut self, min: V3, size: V3, inward: bool) -> &mut Self {
        let (ex, ey, ez) = (V3::x() * size.x, V3::y() * size.y, V3::z() * size.z);
        let max = min + size;
        let mut faces = vec![
            (min, ey, ex),
            (V3::new(min.x, min.y, max.z), ex, ey),
            (min, ex, ez),
            (V3::new(min.x, max.y, min.z), ez, ex),
            (min, ez, ey),
            (V3::new(max.x, min.y, min.z), ey, ez),
        ];
        if inward {
            for f in &mut faces {
                std::mem::swap(&mut f.1, &mut f.2);
            }
        }
        for (c, u, v) in faces {
            self.add_patch(c, u, v);
        }
        self
    }

    /// Six-patch room.
    pub fn room(min: V3, size: V3) -> Self {
        let mut w = Self::default();
        w.add_box(min, size, true);
        w
    }

    /// Room with box obstacles and thin poles, laid out deterministically.
    pub fn furnished_room(min: V3, size: V3) -> Self {
        let mut w = Self::room(min, size);
        let at = |fx: f64, fy: f64| V3::new(min.x + fx * size.x, min.y + fy * size.y, min.z);
        w.add_box(at(0.12, 0.15), V3::new(1.2, 0.8, 1.0), false);
        w.add_box(at(0.8, 0.75), V3::new(0.9, 1.4, 1.6), false);
        w.add_box(at(0.75, 0.12), V3::new(1.5, 0.6, 0.8), false);
        for (fx, fy) in [(0.3, 0.85), (0.5, 0.88), (0.92, 0.4), (0.06, 0.55)] {
            w.add_box(at(fx, fy), V3::new(0.25, 0.25, size.z), false);
        }
        w
    }

    /// Corridor along +x with end walls and a row of poles on one side.
    pub fn corridor(length: f64, width: f64, height: f64, start_x: f64) -> Self {
        let min = V3::new(start_x, -width / 2.0, -1.0);
        let mut w = Self::room(min, V3::new(length, width, height));
        let mut x = start_x + 2.0;
        while x < start_x + length - 2.0 {
            w.add_box(V3::new(x, width / 2.0 - 0.5, -1.0), V3::new(0.2, 0.2, height), false);
            x += 3.0;
        }
        w
    }
}
