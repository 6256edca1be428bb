//! Planar geometry: vectors, angles and arc-length parameterized polylines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_heading(h: f64) -> Self {
        Self::new(h.cos(), h.sin())
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3D cross product; positive when `o` is to the left.
    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Self) -> f64 {
        (self - o).norm()
    }

    /// Rotated a quarter turn counter-clockwise.
    pub fn left(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn heading(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut r = a.rem_euclid(TAU);
    if r > PI {
        r -= TAU;
    }
    r
}

/// Result of projecting a point onto a polyline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Arc length of the foot point.
    pub s: f64,
    /// Signed perpendicular distance, left of the travel direction positive.
    pub offset: f64,
    pub distance: f64,
}

/// Polyline with cumulative arc lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    /// Fails on fewer than two points, non-finite or repeated consecutive points.
    pub fn new(pts: Vec<Vec2>) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::MalformedRoute(format!("{} waypoint(s), need at least 2", pts.len())));
        }
        if let Some(i) = pts.iter().position(|p| !p.is_finite()) {
            return Err(Error::MalformedRoute(format!("waypoint {i} is not finite")));
        }
        let mut cum = Vec::with_capacity(pts.len());
        cum.push(0.0);
        for (i, w) in pts.windows(2).enumerate() {
            let d = w[0].dist(w[1]);
            if d <= 0.0 {
                return Err(Error::MalformedRoute(format!("waypoints {i} and {} coincide", i + 1)));
            }
            cum.push(cum[i] + d);
        }
        Ok(Self { pts, cum })
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cum
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn segments(&self) -> usize {
        self.pts.len() - 1
    }

    fn segment_at(&self, s: f64) -> usize {
        let i = self.cum.partition_point(|&c| c <= s);
        i.clamp(1, self.pts.len() - 1) - 1
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.pts[i], self.pts[i + 1]);
        let t = (s - self.cum[i]) / (self.cum[i + 1] - self.cum[i]);
        a + (b - a) * t
    }

    /// Unit direction of the segment containing `s`.
    pub fn direction_at(&self, s: f64) -> Vec2 {
        let i = self.segment_at(s.clamp(0.0, self.length()));
        let d = self.pts[i + 1] - self.pts[i];
        d * (1.0 / d.norm())
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        self.direction_at(s).heading()
    }

    /// Projection onto segments overlapping the arc window `[lo, hi]`.
    pub fn project_window(&self, p: Vec2, lo: f64, hi: f64) -> Projection {
        let first = self.segment_at(lo.max(0.0));
        let last = self.segment_at(hi.min(self.length()));
        let mut best: Option<Projection> = None;
        for i in first..=last {
            let (a, b) = (self.pts[i], self.pts[i + 1]);
            let d = b - a;
            let len = self.cum[i + 1] - self.cum[i];
            let t = ((p - a).dot(d) / (len * len)).clamp(0.0, 1.0);
            let foot = a + d * t;
            let distance = p.dist(foot);
            if best.is_none_or(|b| distance < b.distance) {
                let side = d.cross(p - a);
                let offset = if side >= 0.0 { distance } else { -distance };
                best = Some(Projection {
                    s: self.cum[i] + t * len,
                    offset,
                    distance,
                });
            }
        }
        best.unwrap()
    }

    pub fn project(&self, p: Vec2) -> Projection {
        self.project_window(p, 0.0, self.length())
    }

    /// Sub-polyline between arc lengths `s0 < s1`, with interpolated end points.
    pub fn slice(&self, s0: f64, s1: f64) -> Polyline {
        let (s0, s1) = (s0.clamp(0.0, self.length()), s1.clamp(0.0, self.length()));
        assert!(s1 > s0, "empty polyline slice");
        let mut pts = vec![self.point_at(s0)];
        for (i, &c) in self.cum.iter().enumerate() {
            if c > s0 && c < s1 {
                pts.push(self.pts[i]);
            }
        }
        pts.push(self.point_at(s1));
        pts.dedup_by(|a, b| a.dist(*b) < 1e-12);
        Polyline::new(pts).expect("slice of a valid polyline")
    }

    /// Polyline displaced laterally by `offset(s)` meters (left positive).
    pub fn offset_by(&self, offset: impl Fn(f64) -> f64) -> Polyline {
        let n = self.pts.len();
        let mut pts = Vec::with_capacity(n);
        for i in 0..n {
            let dir = if i == 0 {
                self.pts[1] - self.pts[0]
            } else if i == n - 1 {
                self.pts[n - 1] - self.pts[n - 2]
            } else {
                let a = self.pts[i] - self.pts[i - 1];
                let b = self.pts[i + 1] - self.pts[i];
                a * (1.0 / a.norm()) + b * (1.0 / b.norm())
            };
            let nrm = dir.left() * (1.0 / dir.norm());
            pts.push(self.pts[i] + nrm * offset(self.cum[i]));
        }
        pts.dedup_by(|a, b| a.dist(*b) < 1e-9);
        Polyline::new(pts).expect("offset of a valid polyline")
    }

    pub fn reversed(&self) -> Polyline {
        let mut pts = self.pts.clone();
        pts.reverse();
        Polyline::new(pts).expect("reverse of a valid polyline")
    }
}
