//! Seeded synthetic scenes: shaded cuboids on a noise background with exact
//! labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{box3d_corners, iou_bev, project_box, wrap_angle, Box3D, CameraCalib, Point2};
use crate::kitti::{LabelRecord, ObjectClass};
use crate::tensor::Tensor;

/// Sampling ranges for [`synth_scene_with`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    /// Depth range of object centers, meters.
    pub z_range: (f64, f64),
    /// Relative class frequencies in class-id order.
    pub class_weights: [f64; 3],
    /// Relative jitter applied to each class-mean dimension.
    pub dim_jitter: f64,
    pub max_truncation: f64,
    /// Minimum clamped 2D box height, pixels.
    pub min_box_height: f64,
    /// Vertical band (fractions of the image height) for projected centers.
    pub center_band: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            z_range: (5.0, 60.0),
            class_weights: [0.6, 0.2, 0.2],
            dim_jitter: 0.1,
            max_truncation: 0.5,
            min_box_height: 4.0,
            center_band: (0.3, 0.8),
        }
    }
}

const MAX_ATTEMPTS: usize = 400;

fn class_color(c: ObjectClass) -> [f64; 3] {
    match c {
        ObjectClass::Car => [0.85, 0.2, 0.2],
        ObjectClass::Pedestrian => [0.2, 0.8, 0.3],
        ObjectClass::Cyclist => [0.25, 0.35, 0.9],
    }
}

/// Face corner indices with a brightness factor; the +x (front) face is
/// brightest so heading is visible in the image.
const FACES: [([usize; 4], f64); 6] = [
    ([0, 1, 5, 4], 1.0),
    ([2, 3, 7, 6], 0.55),
    ([3, 0, 4, 7], 0.75),
    ([1, 2, 6, 5], 0.7),
    ([4, 5, 6, 7], 0.9),
    ([0, 1, 2, 3], 0.4),
];

fn sample_class(rng: &mut ChaCha8Rng, weights: &[f64; 3]) -> ObjectClass {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return ObjectClass::ALL[i];
        }
        r -= w;
    }
    ObjectClass::Car
}

fn fill_convex(poly: &[Point2], h: usize, w: usize, mut put: impl FnMut(usize, usize)) {
    let n = poly.len();
    let area: f64 = (0..n).map(|i| poly[i][0] * poly[(i + 1) % n][1] - poly[(i + 1) % n][0] * poly[i][1]).sum();
    if area.abs() < 1e-12 {
        return;
    }
    let sign = area.signum();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poly {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    let xa = (x0.floor().max(0.0)) as usize;
    let ya = (y0.floor().max(0.0)) as usize;
    let xb = (x1.ceil().min(w as f64 - 1.0)).max(-1.0);
    let yb = (y1.ceil().min(h as f64 - 1.0)).max(-1.0);
    if xb < 0.0 || yb < 0.0 {
        return;
    }
    for py in ya..=yb as usize {
        for px in xa..=xb as usize {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let inside = (0..n).all(|i| {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                sign * ((b[0] - a[0]) * (cy - a[1]) - (b[1] - a[1]) * (cx - a[0])) >= 0.0
            });
            if inside {
                put(py, px);
            }
        }
    }
}

fn occlusion_level(visible: usize, total: usize) -> i32 {
    if total == 0 {
        return 3;
    }
    let frac = visible as f64 / total as f64;
    if frac >= 0.9 {
        0
    } else if frac >= 0.5 {
        1
    } else if visible > 0 {
        2
    } else {
        3
    }
}

/// [`synth_scene_with`] using the default ranges.
pub fn synth_scene(seed: u64, n_objects: usize, calib: &CameraCalib, image_size: (usize, usize)) -> (Tensor, Vec<LabelRecord>) {
    synth_scene_with(&SynthConfig::default(), seed, n_objects, calib, image_size)
}

/// Renders a scene of up to `n_objects` non-overlapping cuboids. Objects that
/// cannot be placed within the attempt budget are left out.
pub fn synth_scene_with(
    cfg: &SynthConfig,
    seed: u64,
    n_objects: usize,
    calib: &CameraCalib,
    image_size: (usize, usize),
) -> (Tensor, Vec<LabelRecord>) {
    let (h, w) = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = Tensor::from_fn(&[3, h, w], |i| {
        let row = (i % (h * w)) / w;
        0.3 + 0.15 * row as f64 / h as f64
    });
    for v in image.data_mut() {
        *v += rng.random_range(-0.04..0.04);
    }

    let mut placed: Vec<(ObjectClass, Box3D, crate::geometry::ProjectedBox)> = Vec::new();
    'objects: for _ in 0..n_objects {
        for _ in 0..MAX_ATTEMPTS {
            let class = sample_class(&mut rng, &cfg.class_weights);
            let prior = class.mean_dimensions();
            let mut dims = [0.0; 3];
            for (d, p) in dims.iter_mut().zip(prior) {
                *d = p * (1.0 + rng.random_range(-cfg.dim_jitter..=cfg.dim_jitter));
            }
            let z = rng.random_range(cfg.z_range.0..=cfg.z_range.1);
            let u = rng.random_range(0.0..w as f64);
            let v = rng.random_range(cfg.center_band.0 * h as f64..cfg.center_band.1 * h as f64);
            let center = calib.unproject(u, v, z);
            let yaw = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let b = Box3D {
                location: [center[0], center[1] + dims[0] / 2.0, z],
                dimensions: dims,
                yaw,
                class_id: class.id(),
                score: None,
            };
            if box3d_corners(&b).iter().any(|c| c[2] < 0.5) {
                continue;
            }
            let Some(proj) = project_box(&b, calib, image_size) else { continue };
            if proj.truncation() > cfg.max_truncation || proj.clamped[3] - proj.clamped[1] < cfg.min_box_height {
                continue;
            }
            if placed.iter().any(|(_, o, _)| iou_bev(o, &b) > 0.0) {
                continue;
            }
            placed.push((class, b, proj));
            continue 'objects;
        }
        log::debug!("synth scene {seed}: could not place object after {MAX_ATTEMPTS} attempts");
    }

    // painter's order, far to near
    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.sort_by(|&a, &b| placed[b].1.location[2].total_cmp(&placed[a].1.location[2]));
    let mut owner = vec![usize::MAX; h * w];
    let mut silhouette = vec![0usize; placed.len()];
    let hw = h * w;
    for &i in &order {
        let (class, b, _) = &placed[i];
        let corners = box3d_corners(b);
        let c = b.center();
        let color = class_color(*class);
        for (idx, shade) in FACES {
            let fc: [f64; 3] = std::array::from_fn(|k| idx.iter().map(|&j| corners[j][k]).sum::<f64>() / 4.0);
            let normal = [fc[0] - c[0], fc[1] - c[1], fc[2] - c[2]];
            if normal[0] * fc[0] + normal[1] * fc[1] + normal[2] * fc[2] >= 0.0 {
                continue;
            }
            let poly: Vec<Point2> = idx.iter().filter_map(|&j| calib.project(corners[j])).collect();
            if poly.len() != 4 {
                continue;
            }
            let data = image.data_mut();
            fill_convex(&poly, h, w, |py, px| {
                let p = py * w + px;
                for ch in 0..3 {
                    data[ch * hw + p] = color[ch] * shade;
                }
                owner[p] = i;
            });
        }
        silhouette[i] = owner.iter().filter(|&&o| o == i).count();
    }
    let mut visible = vec![0usize; placed.len()];
    for &o in &owner {
        if o != usize::MAX {
            visible[o] += 1;
        }
    }

    let labels = placed
        .iter()
        .enumerate()
        .map(|(i, (class, b, proj))| LabelRecord {
            kind: class.name().to_string(),
            truncated: proj.truncation(),
            occluded: occlusion_level(visible[i], silhouette[i]),
            alpha: wrap_angle(b.yaw - b.location[0].atan2(b.location[2])),
            bbox: proj.clamped,
            dimensions: b.dimensions,
            location: b.location,
            rotation_y: b.yaw,
            score: None,
        })
        .collect();
    (image, labels)
}
