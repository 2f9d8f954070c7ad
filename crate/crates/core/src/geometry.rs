//! Camera model, KITTI cuboids and rotated-box overlap.
//!
//! Camera frame: x right, y down, z forward. A cuboid's `location` is the
//! center of its bottom face; its top face sits at `y - h`. Yaw rotates
//! about the camera y axis.

use std::f64::consts::PI;

pub type Point2 = [f64; 2];

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Rectified left-color camera, from the KITTI `P2` row-major 3×4 matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraCalib {
    pub p2: [[f64; 4]; 3],
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid calibration: {0}")]
    InvalidCalib(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
}

impl CameraCalib {
    pub fn new(p2: [[f64; 4]; 3]) -> Result<Self, GeometryError> {
        if !(p2[0][0] > 0.0 && p2[1][1] > 0.0) {
            return Err(GeometryError::InvalidCalib(format!(
                "focal lengths must be positive (f_u = {}, f_v = {})",
                p2[0][0], p2[1][1]
            )));
        }
        if p2[2][0] != 0.0 || p2[2][1] != 0.0 {
            return Err(GeometryError::InvalidCalib("third row of P2 must be (0, 0, *, *)".into()));
        }
        Ok(Self { p2 })
    }

    /// Pinhole camera with zero translation terms.
    pub fn from_intrinsics(f: f64, cu: f64, cv: f64) -> Self {
        Self { p2: [[f, 0.0, cu, 0.0], [0.0, f, cv, 0.0], [0.0, 0.0, 1.0, 0.0]] }
    }

    pub fn fu(&self) -> f64 {
        self.p2[0][0]
    }

    pub fn fv(&self) -> f64 {
        self.p2[1][1]
    }

    pub fn cu(&self) -> f64 {
        self.p2[0][2]
    }

    pub fn cv(&self) -> f64 {
        self.p2[1][2]
    }

    /// Projects a camera-frame point; `None` when it is not in front of the
    /// camera.
    pub fn project(&self, p: [f64; 3]) -> Option<Point2> {
        let m = &self.p2;
        let w = m[2][2] * p[2] + m[2][3];
        if w <= 1e-9 {
            return None;
        }
        let u = (m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3]) / w;
        let v = (m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3]) / w;
        Some([u, v])
    }

    /// Inverse of [`Self::project`] for a known depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let m = &self.p2;
        let w = m[2][2] * z + m[2][3];
        let a = u * w - m[0][2] * z - m[0][3];
        let b = v * w - m[1][2] * z - m[1][3];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [(a * m[1][1] - m[0][1] * b) / det, (m[0][0] * b - m[1][0] * a) / det, z]
    }
}

/// Ground-truth or predicted cuboid.
#[derive(Clone, Debug, PartialEq)]
pub struct Box3D {
    /// Bottom-face center `(x, y, z)`, meters.
    pub location: [f64; 3],
    /// `(h, w, l)`, meters.
    pub dimensions: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: Option<f64>,
}

impl Box3D {
    pub fn height(&self) -> f64 {
        self.dimensions[0]
    }

    pub fn volume(&self) -> f64 {
        self.dimensions.iter().product()
    }

    /// Geometric center of the cuboid.
    pub fn center(&self) -> [f64; 3] {
        [self.location[0], self.location[1] - self.dimensions[0] / 2.0, self.location[2]]
    }
}

/// The eight corners: indices 0–3 on the bottom face (y = location.y),
/// 4–7 on the top face, corner 0 at (+l/2, +w/2) in the object frame.
pub fn box3d_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let [h, w, l] = b.dimensions;
    let xs = [l / 2.0, l / 2.0, -l / 2.0, -l / 2.0];
    let zs = [w / 2.0, -w / 2.0, -w / 2.0, w / 2.0];
    let (s, c) = b.yaw.sin_cos();
    let mut out = [[0.0; 3]; 8];
    for i in 0..8 {
        let (x, z) = (xs[i % 4], zs[i % 4]);
        let y = if i < 4 { 0.0 } else { -h };
        out[i] = [c * x + s * z + b.location[0], y + b.location[1], -s * x + c * z + b.location[2]];
    }
    out
}

/// Bird's-eye footprint in the `(x, z)` plane, counter-clockwise.
pub fn bev_footprint(b: &Box3D) -> [Point2; 4] {
    let c = box3d_corners(b);
    let mut poly = [[c[0][0], c[0][2]], [c[1][0], c[1][2]], [c[2][0], c[2][2]], [c[3][0], c[3][2]]];
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Shoelace area, positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

pub fn polygon_area(poly: &[Point2]) -> f64 {
    signed_area(poly).abs()
}

fn cross(a: Point2, b: Point2, p: Point2) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Sutherland–Hodgman: clips `subject` to the convex, counter-clockwise
/// `clip` polygon. Inputs with fewer than three vertices give an empty
/// result.
pub fn convex_clip(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    if subject.len() < 3 || clip.len() < 3 {
        return Vec::new();
    }
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        if input.is_empty() {
            break;
        }
        for j in 0..input.len() {
            let (s, e) = (input[j], input[(j + 1) % input.len()]);
            let (ds, de) = (cross(a, b, s), cross(a, b, e));
            let (s_in, e_in) = (ds >= 0.0, de >= 0.0);
            if s_in != e_in {
                let t = ds / (ds - de);
                out.push([s[0] + (e[0] - s[0]) * t, s[1] + (e[1] - s[1]) * t]);
            }
            if e_in {
                out.push(e);
            }
        }
    }
    if out.len() < 3 {
        out.clear();
    }
    out
}

fn bev_intersection(a: &Box3D, b: &Box3D) -> (f64, f64, f64) {
    let (pa, pb) = (bev_footprint(a), bev_footprint(b));
    let inter = polygon_area(&convex_clip(&pa, &pb));
    (inter, polygon_area(&pa), polygon_area(&pb))
}

/// Footprint IoU in bird's-eye view.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, area_a, area_b) = bev_intersection(a, b);
    let union = area_a + area_b - inter;
    if area_a <= 0.0 || area_b <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (inter, area_a, area_b) = bev_intersection(a, b);
    let top = (a.location[1] - a.dimensions[0]).max(b.location[1] - b.dimensions[0]);
    let bottom = a.location[1].min(b.location[1]);
    let overlap = (bottom - top).max(0.0);
    let inter_vol = inter * overlap;
    let (va, vb) = (area_a * a.dimensions[0], area_b * b.dimensions[0]);
    let union = va + vb - inter_vol;
    if va <= 0.0 || vb <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter_vol / union).clamp(0.0, 1.0)
}

/// Image-plane envelope of a projected cuboid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedBox {
    /// `[left, top, right, bottom]` before clamping.
    pub full: [f64; 4],
    /// Same box clamped to `[0, width-1] × [0, height-1]`.
    pub clamped: [f64; 4],
}

impl ProjectedBox {
    /// Fraction of the unclamped envelope area lying outside the image.
    pub fn truncation(&self) -> f64 {
        let area = |b: &[f64; 4]| (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
        let full = area(&self.full);
        if full <= 0.0 {
            return 1.0;
        }
        (1.0 - area(&self.clamped) / full).clamp(0.0, 1.0)
    }
}

/// Projects all corners; `None` if any corner is behind the camera.
pub fn project_box(b: &Box3D, calib: &CameraCalib, image_size: (usize, usize)) -> Option<ProjectedBox> {
    let (h, w) = image_size;
    let mut full = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in box3d_corners(b) {
        let [u, v] = calib.project(c)?;
        full[0] = full[0].min(u);
        full[1] = full[1].min(v);
        full[2] = full[2].max(u);
        full[3] = full[3].max(v);
    }
    let (mw, mh) = ((w - 1) as f64, (h - 1) as f64);
    let clamped = [full[0].clamp(0.0, mw), full[1].clamp(0.0, mh), full[2].clamp(0.0, mw), full[3].clamp(0.0, mh)];
    Some(ProjectedBox { full, clamped })
}
