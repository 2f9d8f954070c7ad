//! Wireframe overlays of 3D boxes on `[3, H, W]` images.

use crate::geometry::{box3d_corners, Box3D, CameraCalib};
use crate::tensor::Tensor;

/// Corner pairs of the 12 box edges: bottom face, top face, verticals.
pub const EDGES: [(usize, usize); 12] =
    [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)];

/// Corners closer than this to the camera plane are not drawn.
const NEAR: f64 = 0.1;

pub const PREDICTION_COLOR: [f64; 3] = [1.0, 0.95, 0.1];

/// Clips the segment to `[0, w] × [0, h]` (Liang–Barsky).
fn clip(p0: [f64; 2], p1: [f64; 2], w: f64, h: f64) -> Option<([f64; 2], [f64; 2])> {
    let d = [p1[0] - p0[0], p1[1] - p0[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [(-d[0], p0[0]), (d[0], w - p0[0]), (-d[1], p0[1]), (d[1], h - p0[1])] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
            continue;
        }
        let r = q / p;
        if p < 0.0 {
            t0 = t0.max(r);
        } else {
            t1 = t1.min(r);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some(([p0[0] + t0 * d[0], p0[1] + t0 * d[1]], [p0[0] + t1 * d[0], p0[1] + t1 * d[1]]))
}

/// Draws a one-pixel line between two `(u, v)` points.
pub fn draw_line(image: &mut Tensor, p0: [f64; 2], p1: [f64; 2], color: [f64; 3]) {
    let s = image.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let Some((a, b)) = clip(p0, p1, w as f64, h as f64) else { return };
    let steps = (b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil().max(1.0) as usize;
    let d = image.data_mut();
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = ((a[0] + t * (b[0] - a[0])).floor(), (a[1] + t * (b[1] - a[1])).floor());
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let (x, y) = (x as usize, y as usize);
        for (c, v) in color.iter().enumerate() {
            d[(c * h + y) * w + x] = *v;
        }
    }
}

/// Draws the projected edges of `b`; edges with a corner near or behind the
/// camera are skipped. Returns the number of edges drawn.
pub fn draw_box(image: &mut Tensor, b: &Box3D, calib: &CameraCalib, color: [f64; 3]) -> usize {
    let corners = box3d_corners(b);
    let proj: Vec<Option<[f64; 2]>> = corners
        .iter()
        .map(|c| if c[2] > NEAR { calib.project(*c) } else { None })
        .collect();
    let mut drawn = 0;
    for (i, j) in EDGES {
        if let (Some(a), Some(b)) = (proj[i], proj[j]) {
            draw_line(image, a, b, color);
            drawn += 1;
        }
    }
    drawn
}

/// Copy of `image` with every box drawn in `color`.
pub fn overlay(image: &Tensor, boxes: &[Box3D], calib: &CameraCalib, color: [f64; 3]) -> Tensor {
    let mut out = image.clone();
    for b in boxes {
        draw_box(&mut out, b, calib, color);
    }
    out
}
