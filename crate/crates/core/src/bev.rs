//! Ego-centric bird's-eye-view rasterization with temporal history, the
//! measurement vector, and PGM dumps for inspection.
//!
//! Masks are stored channel-major (`C x H x W`). Pixel `(r, c)` covers the
//! ground point `forward = (ay - r - 0.5) * mpp`, `left = (ax - c - 0.5) * mpp`
//! relative to the ego, where `(ax, ay) = (0.5 W, 0.75 H)` is the ego anchor.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Polyline, Vec2};
use crate::nn::Tensor;
use crate::scenario::ControlKind;
use crate::sim::{ActorKind, Control, LightState, MarkingKind, Pose, World};

pub const STATIC_CHANNELS: usize = 6;
pub const DYNAMIC_KINDS: usize = 7;
/// History offsets of the dynamic planes, oldest first; `-1` is the latest
/// snapshot.
pub const HISTORY_OFFSETS: [i32; 4] = [-16, -11, -6, -1];
pub const HISTORY: usize = HISTORY_OFFSETS.len();
pub const NUM_CHANNELS: usize = STATIC_CHANNELS + DYNAMIC_KINDS * HISTORY;
/// Per history step: speed, throttle, steer, brake, relative height.
pub const MEASUREMENT_STRIDE: usize = 5;
pub const MEASUREMENT_LEN: usize = MEASUREMENT_STRIDE * HISTORY;

pub const STATIC_NAMES: [&str; STATIC_CHANNELS] = ["road", "route", "ego", "lane", "yellow-line", "white-line"];
pub const DYNAMIC_NAMES: [&str; DYNAMIC_KINDS] = [
    "vehicle",
    "walker",
    "emergency-car",
    "obstacle",
    "green-traffic-light",
    "yellow-red-traffic-light",
    "stop-sign",
];

const ROAD: usize = 0;
const ROUTE: usize = 1;
const EGO: usize = 2;
const LANE: usize = 3;
const YELLOW: usize = 4;
const WHITE: usize = 5;

const VEHICLE: usize = 0;
const WALKER: usize = 1;
const EMERGENCY: usize = 2;
const OBSTACLE: usize = 3;
const GREEN_LIGHT: usize = 4;
const STOP_LIGHT: usize = 5;
const STOP_SIGN: usize = 6;

/// Half length and half width of drawn vehicle footprints.
const CAR_HALF: (f64, f64) = (2.2, 1.0);
/// Half depth of a stop-line bar along the road.
const BAR_HALF_DEPTH: f64 = 0.4;
/// Line half-width in pixels.
const LINE_HALF_PX: f64 = 0.6;

/// Name of channel `c`, e.g. `road` or `vehicle@-16`.
pub fn channel_name(c: usize) -> String {
    if c < STATIC_CHANNELS {
        STATIC_NAMES[c].to_string()
    } else {
        let d = c - STATIC_CHANNELS;
        format!("{}@{}", DYNAMIC_NAMES[d / HISTORY], HISTORY_OFFSETS[d % HISTORY])
    }
}

pub fn dynamic_channel(kind: usize, step: usize) -> usize {
    STATIC_CHANNELS + kind * HISTORY + step
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct BevConfig {
    /// Raster height and width in pixels.
    pub size: usize,
    pub meters_per_pixel: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self {
            size: 64,
            meters_per_pixel: 0.8,
        }
    }
}

impl BevConfig {
    /// Full-resolution layout: 128 x 128 at 0.4 m per pixel.
    pub fn full() -> Self {
        Self {
            size: 128,
            meters_per_pixel: 0.4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 16 != 0 || !(self.meters_per_pixel > 0.0) {
            return Err(Error::Validation(format!(
                "bev size must be a positive multiple of 16 and meters-per-pixel positive, got {} / {}",
                self.size, self.meters_per_pixel
            )));
        }
        Ok(())
    }

    /// Ego anchor in continuous pixel coordinates `(column, row)`.
    pub fn anchor(&self) -> (f64, f64) {
        (0.5 * self.size as f64, 0.75 * self.size as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Disc { center: Vec2, radius: f64 },
    Rect { center: Vec2, heading: f64, half_len: f64, half_wid: f64 },
}

/// Dynamic content of one tick.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub ego: Pose,
    pub control: Control,
    /// `(dynamic kind index, footprint)`.
    pub marks: Vec<(usize, Shape)>,
}

impl Snapshot {
    pub fn capture(world: &World) -> Self {
        let mut marks = Vec::new();
        for n in world.npcs().iter().filter(|n| n.active) {
            let center = n.pose.pos();
            let (kind, shape) = match n.kind {
                ActorKind::Vehicle | ActorKind::Emergency | ActorKind::Bicycle => {
                    let kind = if n.kind == ActorKind::Emergency { EMERGENCY } else { VEHICLE };
                    let (half_len, half_wid) = if n.kind == ActorKind::Bicycle { (0.9, 0.4) } else { CAR_HALF };
                    let rect = Shape::Rect {
                        center,
                        heading: n.pose.heading,
                        half_len,
                        half_wid,
                    };
                    (kind, rect)
                }
                ActorKind::Pedestrian => (WALKER, Shape::Disc { center, radius: n.radius }),
                ActorKind::Obstacle => (OBSTACLE, Shape::Disc { center, radius: n.radius }),
            };
            marks.push((kind, shape));
        }
        let half_road = 0.5 * world.route().lane_width;
        for c in world.controls() {
            let kind = match (c.kind, c.light) {
                (ControlKind::StopSign, _) => STOP_SIGN,
                (ControlKind::TrafficLight, LightState::Green) => GREEN_LIGHT,
                (ControlKind::TrafficLight, _) => STOP_LIGHT,
            };
            let shape = Shape::Rect {
                center: c.pos,
                heading: world.reference_path().heading_at(c.at),
                half_len: BAR_HALF_DEPTH,
                half_wid: half_road,
            };
            marks.push((kind, shape));
        }
        Self {
            ego: *world.ego(),
            control: world.last_control(),
            marks,
        }
    }
}

/// The last 16 snapshots of an episode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HistoryRing {
    snaps: VecDeque<Snapshot>,
}

impl HistoryRing {
    pub const CAPACITY: usize = 16;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.snaps.clear();
    }

    pub fn push(&mut self, s: Snapshot) {
        if self.snaps.len() == Self::CAPACITY {
            self.snaps.pop_front();
        }
        self.snaps.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.snaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snaps.is_empty()
    }

    /// Snapshot at a negative offset; offsets older than the recorded
    /// history return the oldest snapshot.
    pub fn at(&self, offset: i32) -> &Snapshot {
        assert!(!self.snaps.is_empty(), "history is empty");
        assert!(offset < 0, "offsets are negative");
        let back = (-offset) as usize;
        let idx = self.snaps.len().saturating_sub(back);
        &self.snaps[idx]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BevObservation {
    pub size: usize,
    /// `C x H x W` values in `{0, 1}`.
    pub masks: Vec<u8>,
    pub measurements: [f32; MEASUREMENT_LEN],
}

impl BevObservation {
    pub fn plane(&self, c: usize) -> &[u8] {
        let n = self.size * self.size;
        &self.masks[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, r: usize, col: usize) -> u8 {
        self.masks[(c * self.size + r) * self.size + col]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let data = self.masks.iter().map(|&m| m as f32).collect();
        Tensor::new(&[NUM_CHANNELS, self.size, self.size], data)
    }

    pub fn measurement_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[MEASUREMENT_LEN], self.measurements.to_vec())
    }
}

/// Maps world points into continuous pixel coordinates of the ego frame.
struct Canvas<'a> {
    size: usize,
    mpp: f64,
    anchor: (f64, f64),
    origin: Vec2,
    fwd: Vec2,
    left: Vec2,
    masks: &'a mut [u8],
}

impl Canvas<'_> {
    fn to_px(&self, p: Vec2) -> (f64, f64) {
        let rel = p - self.origin;
        (self.anchor.0 - rel.dot(self.left) / self.mpp, self.anchor.1 - rel.dot(self.fwd) / self.mpp)
    }

    /// Pixel index range covering `[lo, hi]` in continuous coordinates.
    fn span(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let a = (lo - 0.5).ceil().max(0.0);
        let b = (hi - 0.5).floor().min(self.size as f64 - 1.0);
        (a <= b).then_some((a as usize, b as usize))
    }

    fn fill_where(&mut self, c: usize, bbox: (f64, f64, f64, f64), inside: impl Fn(f64, f64) -> bool) {
        let (Some((c0, c1)), Some((r0, r1))) = (self.span(bbox.0, bbox.2), self.span(bbox.1, bbox.3)) else {
            return;
        };
        let base = c * self.size * self.size;
        for r in r0..=r1 {
            for col in c0..=c1 {
                if inside(col as f64 + 0.5, r as f64 + 0.5) {
                    self.masks[base + r * self.size + col] = 1;
                }
            }
        }
    }

    /// Fills a convex polygon given in world coordinates (either winding).
    fn convex(&mut self, c: usize, pts: &[Vec2]) {
        let px: Vec<(f64, f64)> = pts.iter().map(|&p| self.to_px(p)).collect();
        let bbox = px.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |b, &(x, y)| {
            (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y))
        });
        let n = px.len();
        let area: f64 = (0..n)
            .map(|i| {
                let (a, b) = (px[i], px[(i + 1) % n]);
                a.0 * b.1 - b.0 * a.1
            })
            .sum();
        if area.abs() < 1e-12 {
            return;
        }
        let sign = area.signum();
        self.fill_where(c, bbox, |x, y| {
            (0..n).all(|i| {
                let (a, b) = (px[i], px[(i + 1) % n]);
                sign * ((b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0)) >= 0.0
            })
        });
    }

    fn disc(&mut self, c: usize, center: Vec2, radius: f64) {
        let (cx, cy) = self.to_px(center);
        // small footprints still cover the pixel they stand on
        let r = (radius / self.mpp).max(0.75);
        self.fill_where(c, (cx - r, cy - r, cx + r, cy + r), |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r);
    }

    fn rect(&mut self, c: usize, center: Vec2, heading: f64, half_len: f64, half_wid: f64) {
        let u = Vec2::from_heading(heading);
        let n = u.left();
        let corners = [
            center + u * half_len + n * half_wid,
            center - u * half_len + n * half_wid,
            center - u * half_len - n * half_wid,
            center + u * half_len - n * half_wid,
        ];
        self.convex(c, &corners);
    }

    fn shape(&mut self, c: usize, s: &Shape) {
        match *s {
            Shape::Disc { center, radius } => self.disc(c, center, radius),
            Shape::Rect {
                center,
                heading,
                half_len,
                half_wid,
            } => self.rect(c, center, heading, half_len, half_wid),
        }
    }

    fn visible(&self, a: Vec2, b: Vec2, margin: f64) -> bool {
        let (pa, pb) = (self.to_px(a), self.to_px(b));
        let m = margin / self.mpp + 1.0;
        let s = self.size as f64;
        !(pa.0.max(pb.0) < -m || pa.0.min(pb.0) > s + m || pa.1.max(pb.1) < -m || pa.1.min(pb.1) > s + m)
    }

    /// Fills the strip `lo..hi` meters left of `line`, one quad per segment.
    fn band(&mut self, c: usize, line: &Polyline, lo: f64, hi: f64) {
        let pts = line.points();
        let margin = lo.abs().max(hi.abs());
        for w in pts.windows(2) {
            if !self.visible(w[0], w[1], margin) {
                continue;
            }
            let d = w[1] - w[0];
            let n = d.left() * (1.0 / d.norm());
            self.convex(c, &[w[0] + n * lo, w[1] + n * lo, w[1] + n * hi, w[0] + n * hi]);
        }
    }

    fn polyline(&mut self, c: usize, line: &Polyline) {
        let hw = LINE_HALF_PX;
        for w in line.points().windows(2) {
            if !self.visible(w[0], w[1], 0.0) {
                continue;
            }
            let (a, b) = (self.to_px(w[0]), self.to_px(w[1]));
            let bbox = (a.0.min(b.0) - hw, a.1.min(b.1) - hw, a.0.max(b.0) + hw, a.1.max(b.1) + hw);
            let d = (b.0 - a.0, b.1 - a.1);
            let len2 = d.0 * d.0 + d.1 * d.1;
            self.fill_where(c, bbox, |x, y| {
                let t = (((x - a.0) * d.0 + (y - a.1) * d.1) / len2).clamp(0.0, 1.0);
                let (fx, fy) = (a.0 + t * d.0 - x, a.1 + t * d.1 - y);
                fx * fx + fy * fy <= hw * hw
            });
        }
    }
}

/// Rasterizes the current world with dynamic history from `history`, which
/// must already contain the snapshot of the current tick.
pub fn rasterize(world: &World, history: &HistoryRing, cfg: &BevConfig) -> BevObservation {
    let size = cfg.size;
    let mut masks = vec![0u8; NUM_CHANNELS * size * size];
    let ego = *world.ego();
    let fwd = ego.forward();
    let mut canvas = Canvas {
        size,
        mpp: cfg.meters_per_pixel,
        anchor: cfg.anchor(),
        origin: ego.pos(),
        fwd,
        left: fwd.left(),
        masks: &mut masks,
    };
    let road = world.road();
    for b in &road.bands {
        canvas.band(ROAD, &b.line, b.lo, b.hi);
    }
    let half = 0.5 * world.route().lane_width;
    canvas.band(ROUTE, world.reference_path(), -half, half);
    for m in &road.markings {
        let c = match m.kind {
            MarkingKind::Edge => LANE,
            MarkingKind::Yellow => YELLOW,
            MarkingKind::White => WHITE,
        };
        canvas.polyline(c, &m.line);
    }
    canvas.rect(EGO, ego.pos(), ego.heading, CAR_HALF.0, CAR_HALF.1);
    for (step, &off) in HISTORY_OFFSETS.iter().enumerate() {
        for (kind, shape) in &history.at(off).marks {
            canvas.shape(dynamic_channel(*kind, step), shape);
        }
    }
    BevObservation {
        size,
        masks,
        measurements: measurement_vector(history),
    }
}

/// `(speed, throttle, steer, brake, relative height)` for each history
/// offset, oldest first.
pub fn measurement_vector(history: &HistoryRing) -> [f32; MEASUREMENT_LEN] {
    let mut v = [0f32; MEASUREMENT_LEN];
    for (i, &off) in HISTORY_OFFSETS.iter().enumerate() {
        let s = history.at(off);
        let row = [s.ego.speed, s.control.throttle, s.control.steer, s.control.brake, 0.0];
        for (k, x) in row.into_iter().enumerate() {
            v[i * MEASUREMENT_STRIDE + k] = x as f32;
        }
    }
    v
}

/// Writes one binary PGM (P5) image.
pub fn write_pgm(path: &Path, size: usize, plane: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|&m| if m > 0 { 255u8 } else { 0 }));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Dumps every channel of every frame as `frame{NNNN}-c{CC}.pgm` into `dir`
/// plus `index.txt` with `file frame channel-name` lines.
pub fn dump_frames(dir: &Path, frames: &[(usize, &[u8], usize)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for &(frame, masks, size) in frames {
        let n = size * size;
        for c in 0..masks.len() / n {
            let name = format!("frame{frame:04}-c{c:02}.pgm");
            write_pgm(&dir.join(&name), size, &masks[c * n..(c + 1) * n])?;
            let _ = writeln!(index, "{name} {frame} {}", channel_name(c));
        }
    }
    let path = dir.join("index.txt");
    std::fs::write(&path, index).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::RouteSpec;
    use crate::sim::create_world;

    fn route() -> RouteSpec {
        RouteSpec {
            id: "s".into(),
            waypoints: (0..=40).map(|i| Vec2::new(i as f64 * 5.0, 0.0)).collect(),
            lane_width: 3.5,
            layout: Default::default(),
            controls: Vec::new(),
            junctions: Vec::new(),
        }
    }

    #[test]
    fn channel_layout() {
        assert_eq!(NUM_CHANNELS, 34);
        assert_eq!(channel_name(0), "road");
        assert_eq!(channel_name(6), "vehicle@-16");
        assert_eq!(channel_name(9), "vehicle@-1");
        assert_eq!(channel_name(33), "stop-sign@-1");
    }

    #[test]
    fn empty_world_has_only_static_content() {
        let w = create_world(&route(), &[], 0).unwrap();
        let mut h = HistoryRing::new();
        h.push(Snapshot::capture(&w));
        let cfg = BevConfig::default();
        let obs = rasterize(&w, &h, &cfg);
        for c in STATIC_CHANNELS..NUM_CHANNELS {
            assert!(obs.plane(c).iter().all(|&m| m == 0), "{}", channel_name(c));
        }
        for c in [ROAD, ROUTE, EGO, LANE, YELLOW] {
            assert!(obs.plane(c).iter().any(|&m| m == 1), "{}", channel_name(c));
        }
        let (ax, ay) = cfg.anchor();
        assert_eq!(obs.get(EGO, ay as usize, ax as usize), 1);
        assert_eq!(obs.measurements, [0.0; MEASUREMENT_LEN]);
    }

    #[test]
    fn history_fills_from_oldest() {
        let w = create_world(&route(), &[], 0).unwrap();
        let mut h = HistoryRing::new();
        for i in 0..3 {
            let mut s = Snapshot::capture(&w);
            s.ego.speed = i as f64;
            h.push(s);
        }
        assert_eq!(h.at(-1).ego.speed, 2.0);
        assert_eq!(h.at(-6).ego.speed, 0.0);
        for i in 3..40 {
            let mut s = Snapshot::capture(&w);
            s.ego.speed = i as f64;
            h.push(s);
        }
        assert_eq!(h.len(), 16);
        assert_eq!(h.at(-16).ego.speed, 24.0);
        assert_eq!(h.at(-11).ego.speed, 29.0);
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, 16, &[1u8; 256]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 256);
        assert!(bytes[13..].iter().all(|&b| b == 255));
    }
}
