//! Planar geometry: poses, the ego frame, oriented boxes and polygons.
//!
//! Ego-frame coordinates use `x` to the right of the ego vehicle and `y`
//! forward, so the ego heading points "up" in every raster.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Slack applied to box-membership tests so that pixel centers lying exactly
/// on a box edge resolve the same way regardless of rotation round-off.
const EDGE_EPS: f64 = 1e-9;

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Shortest signed angular difference `b - a` in `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(b - a)
}

/// A planar pose: position in meters and heading in radians, CCW from +x.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }
}

impl From<[f64; 3]> for Pose {
    fn from(v: [f64; 3]) -> Self {
        Pose::new(v[0], v[1], v[2])
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.yaw]
    }
}

/// Rigid transform between the world frame and an ego-centric frame
/// (`x` right, `y` forward) anchored at `origin`.
#[derive(Debug, Clone, Copy)]
pub struct EgoFrame {
    origin: Pose,
    // rotation by pi/2 - yaw
    cos: f64,
    sin: f64,
}

impl EgoFrame {
    pub fn new(origin: Pose) -> Self {
        let theta = PI / 2.0 - origin.yaw;
        Self {
            origin,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    pub fn origin(&self) -> Pose {
        self.origin
    }

    /// Rotates a world-frame direction into the ego frame.
    #[inline]
    pub fn rotate(&self, vx: f64, vy: f64) -> (f64, f64) {
        (vx * self.cos - vy * self.sin, vx * self.sin + vy * self.cos)
    }

    /// World point to ego-frame meters.
    #[inline]
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        self.rotate(x - self.origin.x, y - self.origin.y)
    }

    /// Ego-frame meters to world point.
    #[inline]
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let wx = lx * self.cos + ly * self.sin;
        let wy = -lx * self.sin + ly * self.cos;
        (wx + self.origin.x, wy + self.origin.y)
    }

    /// Expresses a world box in this frame.
    pub fn box_to_local(&self, b: &OrientedBox) -> OrientedBox {
        let (cx, cy) = self.to_local(b.cx, b.cy);
        let (hx, hy) = self.rotate(b.hx, b.hy);
        OrientedBox {
            cx,
            cy,
            hx,
            hy,
            length: b.length,
            width: b.width,
        }
    }
}

/// A rectangle of `length × width` centered at a point, long axis along a
/// unit heading vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    hx: f64,
    hy: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(pose: Pose, length: f64, width: f64) -> Self {
        Self {
            cx: pose.x,
            cy: pose.y,
            hx: pose.yaw.cos(),
            hy: pose.yaw.sin(),
            length,
            width,
        }
    }

    /// Membership of a point. Half-open in the box frame: the rear and right
    /// edges are included, the front and left edges are not, so that boxes
    /// aligned with the pixel lattice cover exactly `length/res × width/res`
    /// pixel centers.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.hx + dy * self.hy;
        let v = -dx * self.hy + dy * self.hx;
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        u >= -hl - EDGE_EPS && u < hl - EDGE_EPS && v >= -hw - EDGE_EPS && v < hw - EDGE_EPS
    }

    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        let (ux, uy) = (self.hx * hl, self.hy * hl);
        let (vx, vy) = (-self.hy * hw, self.hx * hw);
        [
            [self.cx + ux + vx, self.cy + uy + vy],
            [self.cx - ux + vx, self.cy - uy + vy],
            [self.cx - ux - vx, self.cy - uy - vy],
            [self.cx + ux - vx, self.cy + uy - vy],
        ]
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let c = self.corners();
        let mut b = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in c {
            b.0 = b.0.min(p[0]);
            b.1 = b.1.min(p[1]);
            b.2 = b.2.max(p[0]);
            b.3 = b.3.max(p[1]);
        }
        b
    }

    /// Separating-axis test against an axis-aligned rectangle.
    pub fn intersects_rect(&self, rect: &Rect) -> bool {
        let (xmin, ymin, xmax, ymax) = self.bounds();
        if xmax < rect.xmin || xmin > rect.xmax || ymax < rect.ymin || ymin > rect.ymax {
            return false;
        }
        // remaining candidate axes are the box's own two axes
        let rc = [
            [rect.xmin, rect.ymin],
            [rect.xmax, rect.ymin],
            [rect.xmax, rect.ymax],
            [rect.xmin, rect.ymax],
        ];
        let axes = [(self.hx, self.hy, 0.5 * self.length), (-self.hy, self.hx, 0.5 * self.width)];
        for (ax, ay, half) in axes {
            let centre = self.cx * ax + self.cy * ay;
            let (mut lo, mut hi) = (f64::MAX, f64::MIN);
            for p in rc {
                let d = p[0] * ax + p[1] * ay;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            if hi < centre - half || lo > centre + half {
                return false;
            }
        }
        true
    }
}

/// Axis-aligned rectangle with inclusive bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

/// A simple polygon given by its vertices (either winding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon(pub Vec<[f64; 2]>);

impl Polygon {
    pub fn rect(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Polygon(vec![[xmin, ymin], [xmax, ymin], [xmax, ymax], [xmin, ymax]])
    }

    /// Even-odd ray casting.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.0;
        let n = v.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = (v[i][0], v[i][1]);
            let (xj, yj) = (v[j][0], v[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    /// True when no two non-adjacent edges intersect.
    pub fn is_simple(&self) -> bool {
        let v = &self.0;
        let n = v.len();
        if n < 3 {
            return false;
        }
        for i in 0..n {
            let a = (v[i], v[(i + 1) % n]);
            for j in (i + 1)..n {
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let b = (v[j], v[(j + 1) % n]);
                if segments_intersect(a.0, a.1, b.0, b.1) {
                    return false;
                }
            }
        }
        true
    }
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// Distance from a point to the segment `a`–`b`.
pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_wraps_into_half_open_interval() {
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        assert!((angle_diff(170f64.to_radians(), (-170f64).to_radians()) - 20f64.to_radians()).abs() < 1e-12);
    }

    #[test]
    fn frame_round_trip_and_axes() {
        let f = EgoFrame::new(Pose::new(3.0, -2.0, 0.7));
        let (lx, ly) = f.to_local(10.0, 5.0);
        let (wx, wy) = f.to_world(lx, ly);
        assert!((wx - 10.0).abs() < 1e-12 && (wy - 5.0).abs() < 1e-12);

        // heading maps to +y, left maps to -x
        let f = EgoFrame::new(Pose::new(0.0, 0.0, 0.0));
        let (x, y) = f.to_local(1.0, 0.0);
        assert!(x.abs() < 1e-12 && (y - 1.0).abs() < 1e-12);
        let (x, y) = f.to_local(0.0, 1.0);
        assert!((x + 1.0).abs() < 1e-12 && y.abs() < 1e-12);
    }

    #[test]
    fn box_membership_is_half_open() {
        let b = OrientedBox::new(Pose::new(0.0, 0.0, 0.0), 4.0, 2.0);
        assert!(b.contains(-2.0, -1.0));
        assert!(!b.contains(2.0, 0.0));
        assert!(!b.contains(0.0, 1.0));
        assert!(b.contains(1.999, 0.999));
    }

    #[test]
    fn sat_handles_rotated_boxes() {
        let r = Rect { xmin: 0.0, ymin: 0.0, xmax: 10.0, ymax: 10.0 };
        // diamond whose bounding box overlaps the corner but the box does not
        let b = OrientedBox::new(Pose::new(-1.5, -1.5, PI / 4.0), 2.0, 2.0);
        assert!(!b.intersects_rect(&r));
        let b = OrientedBox::new(Pose::new(-0.5, -0.5, PI / 4.0), 2.0, 2.0);
        assert!(b.intersects_rect(&r));
        let b = OrientedBox::new(Pose::new(5.0, 5.0, 1.0), 2.0, 2.0);
        assert!(b.intersects_rect(&r));
    }

    #[test]
    fn polygon_tests() {
        let sq = Polygon::rect(0.0, 0.0, 2.0, 2.0);
        assert!(sq.contains(1.0, 1.0));
        assert!(!sq.contains(3.0, 1.0));
        assert!(sq.is_simple());
        let bowtie = Polygon(vec![[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]]);
        assert!(!bowtie.is_simple());
    }
}
