//! Oriented box geometry.
//!
//! Frame convention: right-handed, camera aligned. `x` points right, `y`
//! points down (the vertical axis) and `z` points forward along the optical
//! axis. A box heading rotates its local frame about `y`:
//!
//! ```text
//! world = R_y(heading) * local + center
//! R_y(t) = [[cos t, 0, sin t], [0, 1, 0], [-sin t, 0, cos t]]
//! ```
//!
//! Size is `(h, w, l)`: `h` spans local `y`, `l` spans local `x` and `w`
//! spans local `z`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::GeometryError;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other end.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// Rotates `p` about the vertical axis by `angle`.
#[inline]
pub fn rotate_y(p: [f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * p[0] + s * p[2], p[1], -s * p[0] + c * p[2]]
}

/// Oriented 3D box with a heading about the vertical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    /// `(h, w, l)` in meters.
    pub size: [f64; 3],
    pub heading: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], heading: f64) -> Self {
        Self {
            center,
            size,
            heading,
        }
    }

    /// Packs the box as `(x, y, z, h, w, l, heading)`.
    pub fn to_array(&self) -> [f64; 7] {
        [
            self.center[0],
            self.center[1],
            self.center[2],
            self.size[0],
            self.size[1],
            self.size[2],
            self.heading,
        ]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self {
            center: [a[0], a[1], a[2]],
            size: [a[3], a[4], a[5]],
            heading: a[6],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.size.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.center.iter().all(|c| c.is_finite())
            && self.heading.is_finite()
    }

    pub fn normalized(mut self) -> Self {
        self.heading = normalize_angle(self.heading);
        self
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The same box with heading advanced by pi.
    pub fn flipped(&self) -> Self {
        Self {
            heading: normalize_angle(self.heading + PI),
            ..*self
        }
    }

    /// Applies a rigid rotation about the vertical axis through the origin.
    pub fn rotated_y(&self, angle: f64) -> Self {
        Self {
            center: rotate_y(self.center, angle),
            size: self.size,
            heading: normalize_angle(self.heading + angle),
        }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            center: [
                self.center[0] + t[0],
                self.center[1] + t[1],
                self.center[2] + t[2],
            ],
            ..*self
        }
    }

    /// Expresses a world point in the box's local frame.
    #[inline]
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        rotate_y(d, -self.heading)
    }

    /// Top-down footprint as 4 `(x, z)` vertices, counter-clockwise when
    /// viewed from above (in the same order as the top corners).
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let c = box_corners(self);
        [
            [c[0][0], c[0][2]],
            [c[1][0], c[1][2]],
            [c[2][0], c[2][2]],
            [c[3][0], c[3][2]],
        ]
    }
}

/// Local `(x, z)` sign pattern of the footprint corners.
pub const FOOTPRINT_SIGNS: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];

/// The 8 box vertices.
///
/// Order: indices 0..4 are the top face (`y = -h/2` locally, the camera `y`
/// axis points down), 4..8 the bottom face, each counter-clockwise viewed
/// from above starting at local `(+l/2, +w/2)`. Corner `i + 4` sits directly
/// below corner `i`.
pub fn box_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let [h, w, l] = b.size;
    let mut out = [[0.0; 3]; 8];
    for (i, corner) in out.iter_mut().enumerate() {
        let sy = if i < 4 { -1.0 } else { 1.0 };
        let [sx, sz] = FOOTPRINT_SIGNS[i % 4];
        let local = [sx * l / 2.0, sy * h / 2.0, sz * w / 2.0];
        let r = rotate_y(local, b.heading);
        *corner = [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]];
    }
    out
}

/// Signed distances from a point to the six face planes, positive on the
/// interior side. Face order: top, bottom, +w, -w, +l, -l.
#[inline]
pub fn plane_features_single(p: [f64; 3], b: &Box3D) -> [f64; 6] {
    let [lx, ly, lz] = b.to_local(p);
    let [h, w, l] = b.size;
    [
        ly + h / 2.0,
        h / 2.0 - ly,
        w / 2.0 - lz,
        lz + w / 2.0,
        l / 2.0 - lx,
        lx + l / 2.0,
    ]
}

/// Row-wise [`plane_features_single`].
pub fn point_plane_features(points: &[[f64; 3]], b: &Box3D) -> Vec<[f64; 6]> {
    points.iter().map(|&p| plane_features_single(p, b)).collect()
}

#[inline]
pub fn point_in_box(p: [f64; 3], b: &Box3D) -> bool {
    plane_features_single(p, b).iter().all(|&f| f >= 0.0)
}

pub fn points_in_box(points: &[[f64; 3]], b: &Box3D) -> Vec<bool> {
    points.iter().map(|&p| point_in_box(p, b)).collect()
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc.abs()
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc
}

/// Sutherland-Hodgman clipping of `subject` against the convex `clip`
/// polygon. Both polygons must be convex.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    // Orientation of the clip polygon decides which side is "inside".
    let orient = if signed_area(clip) >= 0.0 { 1.0 } else { -1.0 };
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: [f64; 2]| orient * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let sc = side(cur);
            let sp = side(prev);
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

#[inline]
fn intersect(p: [f64; 2], q: [f64; 2], sp: f64, sq: f64) -> [f64; 2] {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Volume of the intersection of two yaw-rotated boxes.
pub fn intersection_volume(a: &Box3D, b: &Box3D) -> f64 {
    let ya = (a.center[1] - a.size[0] / 2.0, a.center[1] + a.size[0] / 2.0);
    let yb = (b.center[1] - b.size[0] / 2.0, b.center[1] + b.size[0] / 2.0);
    let dy = ya.1.min(yb.1) - ya.0.max(yb.0);
    if dy <= 0.0 {
        return 0.0;
    }
    let inter = clip_convex(&a.footprint(), &b.footprint());
    polygon_area(&inter) * dy
}

/// 3D intersection-over-union of two yaw-rotated boxes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = intersection_volume(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Image-plane box in pixels, origin at the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl Box2D {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.left, self.top, self.right, self.bottom]
    }

    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.left + self.right),
            0.5 * (self.top + self.bottom),
        ]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.left && u <= self.right && v >= self.top && v <= self.bottom
    }

    /// Same center, width and height multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let [cu, cv] = self.center();
        let hw = 0.5 * self.width() * s;
        let hh = 0.5 * self.height() * s;
        Self::new(cu - hw, cv - hh, cu + hw, cv + hh)
    }

    pub fn clipped(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.left.clamp(0.0, width),
            self.top.clamp(0.0, height),
            self.right.clamp(0.0, width),
            self.bottom.clamp(0.0, height),
        )
    }
}

/// Pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.width).contains(&self.cx)
            && (0.0..=self.height).contains(&self.cy)
    }

    /// Projects a camera-frame point; `None` when it is not in front of the
    /// camera.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        if p[2] <= 0.0 {
            return None;
        }
        Some([
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        ])
    }

    /// Horizontal bearing of the viewing ray through pixel column `u`.
    pub fn bearing(&self, u: f64) -> f64 {
        ((u - self.cx) / self.fx).atan()
    }
}

/// Axis-aligned image box enclosing the projections of the 8 box corners.
/// Not clipped to the image.
pub fn project_box_to_image(b: &Box3D, cam: &Camera) -> Result<Box2D, GeometryError> {
    let mut out = Box2D::new(f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in box_corners(b) {
        let [u, v] = cam.project(c).ok_or(GeometryError::BehindCamera { depth: c[2] })?;
        out.left = out.left.min(u);
        out.top = out.top.min(v);
        out.right = out.right.max(u);
        out.bottom = out.bottom.max(v);
    }
    Ok(out)
}
