//! Box representations and exact intersection-over-union.
//!
//! Axis-aligned boxes are held in corner form (`x_min, y_min, x_max, y_max`);
//! the file layer uses COCO's `[x, y, width, height]`. Rotated boxes are
//! `(cx, cy, w, h, theta)` with `theta` in radians, positive rotation taking
//! the +x axis towards +y (counter-clockwise in a y-up frame).
//!
//! Zero-area boxes are legal and have IoU 0 against every box, themselves
//! included.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cross products below this magnitude are treated as collinear.
const COLLINEAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeometryKind {
    AxisAligned,
    Rotated,
}

impl fmt::Display for GeometryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryKind::AxisAligned => f.write_str("axis-aligned"),
            GeometryKind::Rotated => f.write_str("rotated"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Cross product of `(b - a) x (c - a)`; positive when `c` lies left of `a -> b`.
fn cross(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

#[derive(Debug, Clone, Copy)]
pub struct AxisAlignedBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    /// Width and height as read from `[x, y, w, h]`, so that writing the box
    /// back reproduces the input bits even when `x + w - x != w`.
    wire_size: [f64; 2],
}

impl PartialEq for AxisAlignedBox {
    fn eq(&self, other: &Self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            == [other.x_min, other.y_min, other.x_max, other.y_max]
    }
}

impl AxisAlignedBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let all_finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !all_finite || x_min > x_max || y_min > y_max {
            return Err(Error::Domain(format!(
                "invalid box corners [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
            wire_size: [x_max - x_min, y_max - y_min],
        })
    }

    /// Builds a box from COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w >= 0.0 && h >= 0.0) {
            return Err(Error::Domain(format!(
                "box width and height must be non-negative, got {w} x {h}"
            )));
        }
        let mut b = Self::new(x, y, x + w, y + h)?;
        b.wire_size = [w, h];
        Ok(b)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.wire_size[0], self.wire_size[1]]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }
}

/// Intersection over union of two axis-aligned boxes.
pub fn iou_aabb(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl RotatedBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let all_finite = [cx, cy, w, h, theta].iter().all(|v| v.is_finite());
        if !all_finite || w < 0.0 || h < 0.0 {
            return Err(Error::Domain(format!(
                "invalid rotated box [{cx}, {cy}, {w}, {h}, {theta}]"
            )));
        }
        Ok(Self {
            cx,
            cy,
            w,
            h,
            theta,
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in counter-clockwise order (positive signed area).
    pub fn vertices(&self) -> [Point; 4] {
        let (sin, cos) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(dx, dy)| {
            Point::new(self.cx + dx * cos - dy * sin, self.cy + dx * sin + dy * cos)
        })
    }

    fn key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }
}

/// Signed polygon area by the shoelace formula; positive for counter-clockwise input.
pub fn polygon_area(poly: &[Point]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, p) in poly.iter().enumerate() {
        let q = poly[(i + 1) % poly.len()];
        acc += p.x * q.y - q.x * p.y;
    }
    acc / 2.0
}

/// Sutherland-Hodgman clipping of `subject` against the convex, counter-clockwise `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for (i, &edge_start) in clip.iter().enumerate() {
        if output.is_empty() {
            break;
        }
        let edge_end = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        let inside = |p: Point| cross(edge_start, edge_end, p) >= -COLLINEAR_EPS;
        for (j, &current) in input.iter().enumerate() {
            let previous = input[(j + input.len() - 1) % input.len()];
            match (inside(previous), inside(current)) {
                (true, true) => output.push(current),
                (true, false) => output.extend(segment_line_intersection(
                    previous, current, edge_start, edge_end,
                )),
                (false, true) => {
                    output.extend(segment_line_intersection(
                        previous, current, edge_start, edge_end,
                    ));
                    output.push(current);
                }
                (false, false) => {}
            }
        }
    }
    output
}

fn segment_line_intersection(s: Point, e: Point, p: Point, q: Point) -> Option<Point> {
    let ds = cross(p, q, s);
    let de = cross(p, q, e);
    let denom = ds - de;
    if denom.abs() < COLLINEAR_EPS {
        return None;
    }
    let t = ds / denom;
    Some(Point::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y)))
}

/// Intersection over union of two rotated boxes via convex polygon clipping.
pub fn iou_rotated(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    // Clip in a canonical order so that iou(a, b) and iou(b, a) agree bit-for-bit.
    let (first, second) = match total_cmp_slices(&a.key(), &b.key()) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let inter = polygon_area(&clip_convex(&first.vertices(), &second.vertices())).max(0.0);
    let union = area_a + area_b - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

fn total_cmp_slices(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// A box of either geometry kind; a detection store holds only one kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BBox {
    Axis(AxisAlignedBox),
    Rotated(RotatedBox),
}

impl BBox {
    pub fn kind(&self) -> GeometryKind {
        match self {
            BBox::Axis(_) => GeometryKind::AxisAligned,
            BBox::Rotated(_) => GeometryKind::Rotated,
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            BBox::Axis(b) => b.area(),
            BBox::Rotated(b) => b.area(),
        }
    }

    /// IoU between boxes of the same kind. Mixed kinds never overlap.
    pub fn iou(&self, other: &BBox) -> f64 {
        match (self, other) {
            (BBox::Axis(a), BBox::Axis(b)) => iou_aabb(a, b),
            (BBox::Rotated(a), BBox::Rotated(b)) => iou_rotated(a, b),
            _ => 0.0,
        }
    }

    /// Parses the wire representation: `[x, y, w, h]` or `[cx, cy, w, h, theta]`.
    pub fn from_wire(kind: GeometryKind, values: &[f64]) -> Result<Self> {
        match (kind, values) {
            (GeometryKind::AxisAligned, &[x, y, w, h]) => {
                AxisAlignedBox::from_xywh(x, y, w, h).map(BBox::Axis)
            }
            (GeometryKind::Rotated, &[cx, cy, w, h, theta]) => {
                RotatedBox::new(cx, cy, w, h, theta).map(BBox::Rotated)
            }
            _ => Err(Error::Parse(format!(
                "{kind} bbox expects {} numbers, got {}",
                match kind {
                    GeometryKind::AxisAligned => 4,
                    GeometryKind::Rotated => 5,
                },
                values.len()
            ))),
        }
    }

    pub fn to_wire(&self) -> Vec<f64> {
        match self {
            BBox::Axis(b) => b.to_xywh().to_vec(),
            BBox::Rotated(b) => vec![b.cx, b.cy, b.w, b.h, b.theta],
        }
    }
}
