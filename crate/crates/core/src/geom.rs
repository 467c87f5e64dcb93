//! Planar geometry primitives shared by the simulator, the grid encoder,
//! and recording playback.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product `self × o`.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Unit vector, or `(1, 0)` for a near-zero input.
    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        if n < 1e-12 {
            Vec2::new(1.0, 0.0)
        } else {
            Vec2::new(self.x / n, self.y / n)
        }
    }

    /// Left-hand normal (rotate +90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Axis-aligned rectangle given by two corners with `min <= max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Aabb { min, max }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new((self.min.x + self.max.x) * 0.5, (self.min.y + self.max.y) * 0.5)
    }

    pub fn as_obb(&self) -> Obb {
        Obb {
            center: self.center(),
            axis: Vec2::new(1.0, 0.0),
            half_len: (self.max.x - self.min.x) * 0.5,
            half_wid: (self.max.y - self.min.y) * 0.5,
        }
    }
}

/// Oriented rectangle: `axis` is the unit heading of the long side.
#[derive(Clone, Copy, Debug)]
pub struct Obb {
    pub center: Vec2,
    pub axis: Vec2,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    pub fn new(center: Vec2, axis: Vec2, length: f64, width: f64) -> Self {
        Obb {
            center,
            axis: axis.normalized(),
            half_len: length * 0.5,
            half_wid: width * 0.5,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let u = self.axis * self.half_len;
        let v = self.axis.perp() * self.half_wid;
        [
            self.center + u + v,
            self.center + u - v,
            self.center - u - v,
            self.center - u + v,
        ]
    }

    /// Separating-axis overlap test between two oriented rectangles.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let axes = [self.axis, self.axis.perp(), other.axis, other.axis.perp()];
        let a = self.corners();
        let b = other.corners();
        for ax in axes {
            let (a_lo, a_hi) = project(&a, ax);
            let (b_lo, b_hi) = project(&b, ax);
            if a_hi < b_lo || b_hi < a_lo {
                return false;
            }
        }
        true
    }

    pub fn overlaps_aabb(&self, zone: &Aabb) -> bool {
        self.overlaps(&zone.as_obb())
    }
}

fn project(pts: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in pts {
        let t = p.dot(axis);
        lo = lo.min(t);
        hi = hi.max(t);
    }
    (lo, hi)
}

/// Piecewise-linear curve with arclength parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    points: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    /// Requires at least two points and a strictly positive total length.
    pub fn new(points: Vec<Vec2>) -> Result<Self, String> {
        if points.len() < 2 {
            return Err(format!("polyline needs >= 2 points, got {}", points.len()));
        }
        let mut cum = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in points.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        if acc <= 0.0 {
            return Err("polyline has zero length".into());
        }
        Ok(Polyline { points, cum })
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        // Index of the segment containing s; the last point maps to the last segment.
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i - 1,
        };
        let seg_len = self.cum[i + 1] - self.cum[i];
        let t = if seg_len > 0.0 { (s - self.cum[i]) / seg_len } else { 0.0 };
        (i, t)
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        self.points[i] + (self.points[i + 1] - self.points[i]) * t
    }

    /// Unit tangent of the segment containing `s`.
    pub fn tangent_at(&self, s: f64) -> Vec2 {
        let (i, _) = self.segment_at(s);
        (self.points[i + 1] - self.points[i]).normalized()
    }

    /// Minimum distance from `p` to the curve.
    pub fn distance_to(&self, p: Vec2) -> f64 {
        self.project(p).1
    }

    /// Arclength of the point on the curve closest to `p`, plus that distance.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (0.0, f64::INFINITY);
        for (i, w) in self.points.windows(2).enumerate() {
            let ab = w[1] - w[0];
            let len2 = ab.dot(ab);
            let t = if len2 > 0.0 { ((p - w[0]).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let d = p.dist(w[0] + ab * t);
            if d < best.1 {
                best = (self.cum[i] + (self.cum[i + 1] - self.cum[i]) * t, d);
            }
        }
        best
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Sampled circular arc from `a0` to `a1` radians around `center`.
/// Traversal direction follows the sign of `a1 - a0`.
pub fn arc_points(center: Vec2, radius: f64, a0: f64, a1: f64, step_deg: f64) -> Vec<Vec2> {
    let step = step_deg.to_radians() * (a1 - a0).signum();
    let n = ((a1 - a0).abs() / step.abs()).ceil() as usize;
    let mut pts = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let a = if k == n { a1 } else { a0 + step * k as f64 };
        pts.push(center + Vec2::new(a.cos(), a.sin()) * radius);
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polyline_arclength_queries() {
        let p = Polyline::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(3.0, 0.0),
            Vec2::new(3.0, 4.0),
        ])
        .unwrap();
        assert_relative_eq!(p.length(), 7.0);
        assert_relative_eq!(p.point_at(3.0).x, 3.0);
        assert_relative_eq!(p.point_at(5.0).y, 2.0);
        assert_eq!(p.tangent_at(1.0), Vec2::new(1.0, 0.0));
        assert_eq!(p.tangent_at(6.0), Vec2::new(0.0, 1.0));
        // Clamped beyond the ends.
        assert_relative_eq!(p.point_at(99.0).y, 4.0);
    }

    #[test]
    fn polyline_rejects_degenerate_input() {
        assert!(Polyline::new(vec![Vec2::ZERO]).is_err());
        assert!(Polyline::new(vec![Vec2::ZERO, Vec2::ZERO]).is_err());
    }

    #[test]
    fn obb_overlap_cases() {
        let a = Obb::new(Vec2::ZERO, Vec2::new(1.0, 0.0), 5.0, 2.0);
        let b = Obb::new(Vec2::new(4.0, 0.0), Vec2::new(1.0, 0.0), 5.0, 2.0);
        assert!(a.overlaps(&b));
        let c = Obb::new(Vec2::new(6.0, 0.0), Vec2::new(1.0, 0.0), 5.0, 2.0);
        assert!(!a.overlaps(&c));
        // Rotated rectangle slipping between two axis-aligned ones.
        let d = Obb::new(Vec2::new(0.0, 2.1), Vec2::new(1.0, 1.0).normalized(), 5.0, 2.0);
        assert!(a.overlaps(&d));
    }

    #[test]
    fn arc_endpoint_is_exact() {
        let pts = arc_points(Vec2::new(4.0, -6.0), 4.0, std::f64::consts::PI, std::f64::consts::FRAC_PI_2, 15.0);
        let first = pts.first().unwrap();
        let last = pts.last().unwrap();
        assert_relative_eq!(first.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(first.y, -6.0, epsilon = 1e-9);
        assert_relative_eq!(last.x, 4.0, epsilon = 1e-9);
        assert_relative_eq!(last.y, -2.0, epsilon = 1e-9);
    }
}
