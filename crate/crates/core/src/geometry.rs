//! Oriented rectangles and the separating-axis overlap test.

use serde::{Deserialize, Serialize};

/// An oriented rectangle in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(cx: f64, cy: f64, heading: f64, length: f64, width: f64) -> Self {
        debug_assert!(length > 0.0 && width > 0.0);
        Self { cx, cy, heading, length, width }
    }

    /// Corners in a fixed order: front-left, front-right, rear-right, rear-left.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.heading.sin_cos();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
        local.map(|(lx, ly)| (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly))
    }

    /// Unit axes of the box: longitudinal and lateral.
    fn axes(&self) -> [(f64, f64); 2] {
        let (s, c) = self.heading.sin_cos();
        [(c, s), (-s, c)]
    }

    /// Half-extent of the box projected on a unit axis.
    fn radius_on(&self, axis: (f64, f64)) -> f64 {
        let (s, c) = self.heading.sin_cos();
        let lon = (c * axis.0 + s * axis.1).abs() * 0.5 * self.length;
        let lat = (-s * axis.0 + c * axis.1).abs() * 0.5 * self.width;
        lon + lat
    }
}

/// Separating-axis test for two oriented rectangles. Shared boundary counts
/// as overlap (closed boxes).
pub fn box_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    separation_distance(a, b) <= 0.0
}

/// Maximum over the four candidate axes of the signed gap between the two
/// boxes. Negative values mean the projections overlap on every axis
/// (penetration); zero means touching.
pub fn separation_distance(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let dx = b.cx - a.cx;
    let dy = b.cy - a.cy;
    let mut worst = f64::NEG_INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let center_dist = (dx * axis.0 + dy * axis.1).abs();
        let gap = center_dist - a.radius_on(axis) - b.radius_on(axis);
        if gap > worst {
            worst = gap;
        }
    }
    worst
}

/// Distance along direction `dir` (unit vector) at which box `b`, translated
/// from sharing `a`'s center, first loses contact with `a`. Used to place a
/// box in exact contact along a ray.
pub fn contact_distance_along(a: &OrientedBox, b: &OrientedBox, dir: (f64, f64)) -> f64 {
    let mut d_touch = f64::INFINITY;
    for axis in a.axes().into_iter().chain(b.axes()) {
        let speed = (dir.0 * axis.0 + dir.1 * axis.1).abs();
        if speed < 1e-12 {
            continue;
        }
        let reach = a.radius_on(axis) + b.radius_on(axis);
        let d = reach / speed;
        if d < d_touch {
            d_touch = d;
        }
    }
    d_touch
}

/// Mean distance between the four corresponding corners of two boxes.
pub fn contour_error(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let mut sum = 0.0;
    for i in 0..4 {
        sum += ((ca[i].0 - cb[i].0).powi(2) + (ca[i].1 - cb[i].1).powi(2)).sqrt();
    }
    sum / 4.0
}
