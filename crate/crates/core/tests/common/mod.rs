//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use mono3d::eval::{Difficulty, Frame, Metric};
use mono3d::geometry::{bev_footprint, Box3D};
use mono3d::geometry::CameraCalib;
use mono3d::kitti::{LabelRecord, ObjectClass};
use mono3d::synth::{synth_scene_with, SynthConfig};
use rand::{Rng, SeedableRng};

/// Horizontal extent of a convex polygon at height `z`, if any.
fn row_span(poly: &[[f64; 2]], z: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (zmin, zmax) = (a[1].min(b[1]), a[1].max(b[1]));
        if z < zmin || z > zmax || a[1] == b[1] {
            continue;
        }
        let x = a[0] + (b[0] - a[0]) * (z - a[1]) / (b[1] - a[1]);
        lo = lo.min(x);
        hi = hi.max(x);
    }
    (lo <= hi).then_some((lo, hi))
}

/// Number of cell centers `x0 + (j + 0.5)·dx`, `j < n`, inside `[lo, hi]`.
fn centers_in(lo: f64, hi: f64, x0: f64, dx: f64, n: usize) -> usize {
    let first = ((lo - x0) / dx - 0.5).ceil().max(0.0);
    let last = ((hi - x0) / dx - 0.5).floor().min(n as f64 - 1.0);
    if last < first {
        0
    } else {
        (last - first) as usize + 1
    }
}

/// BEV IoU by counting the centers of an `n × n` grid over the joint
/// bounding rectangle. Rows are scanned analytically.
pub fn raster_iou_bev(a: &Box3D, b: &Box3D, n: usize) -> f64 {
    let (pa, pb) = (bev_footprint(a), bev_footprint(b));
    let all = pa.iter().chain(pb.iter());
    let (mut x0, mut z0, mut x1, mut z1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in all {
        x0 = x0.min(p[0]);
        z0 = z0.min(p[1]);
        x1 = x1.max(p[0]);
        z1 = z1.max(p[1]);
    }
    let (dx, dz) = ((x1 - x0) / n as f64, (z1 - z0) / n as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..n {
        let z = z0 + (i as f64 + 0.5) * dz;
        let sa = row_span(&pa, z);
        let sb = row_span(&pb, z);
        let ca = sa.map_or(0, |(l, h)| centers_in(l, h, x0, dx, n));
        let cb = sb.map_or(0, |(l, h)| centers_in(l, h, x0, dx, n));
        let ci = match (sa, sb) {
            (Some(a), Some(b)) => centers_in(a.0.max(b.0), a.1.min(b.1), x0, dx, n),
            _ => 0,
        };
        inter += ci;
        union += ca + cb - ci;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn to_box(r: &LabelRecord) -> Box3D {
    Box3D {
        location: r.location,
        dimensions: r.dimensions,
        yaw: r.rotation_y,
        class_id: r.class().unwrap().id(),
        score: r.score,
    }
}

fn ok_for(r: &LabelRecord, d: Difficulty) -> bool {
    let h = r.bbox[3] - r.bbox[1];
    match d {
        Difficulty::Easy => h >= 40.0 && r.occluded <= 0 && r.truncated <= 0.15,
        Difficulty::Moderate => h >= 25.0 && r.occluded <= 1 && r.truncated <= 0.30,
        Difficulty::Hard => h >= 25.0 && r.occluded <= 2 && r.truncated <= 0.50,
    }
}

/// Re-runs matching from scratch for every distinct score cut-off and takes
/// the precision envelope at each of the 40 recall levels.
pub fn brute_force_ap(frames: &[Frame], class: ObjectClass, diff: Difficulty, metric: Metric, thr: f64) -> Option<f64> {
    let iou = |a: &Box3D, b: &Box3D| match metric {
        Metric::ThreeD => mono3d::geometry::iou_3d(a, b),
        Metric::Bev => mono3d::geometry::iou_bev(a, b),
    };
    let n_gt: usize = frames
        .iter()
        .map(|f| f.gt.iter().filter(|g| g.class() == Some(class) && ok_for(g, diff)).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut cuts: Vec<f64> = frames
        .iter()
        .flat_map(|f| f.det.iter().filter(|d| d.class() == Some(class)).map(|d| d.score.unwrap_or(1.0)))
        .collect();
    cuts.sort_by(|a, b| b.total_cmp(a));
    cuts.dedup();
    let mut curve = Vec::new();
    for &cut in &cuts {
        let (mut tp, mut fp) = (0usize, 0usize);
        for f in frames {
            let gts: Vec<(Box3D, bool)> = f
                .gt
                .iter()
                .filter(|g| g.class() == Some(class))
                .map(|g| (to_box(g), ok_for(g, diff)))
                .collect();
            let mut dets: Vec<(usize, f64, Box3D)> = f
                .det
                .iter()
                .filter(|d| d.class() == Some(class) && d.score.unwrap_or(1.0) >= cut)
                .enumerate()
                .map(|(i, d)| (i, d.score.unwrap_or(1.0), to_box(d)))
                .collect();
            dets.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut used = vec![false; gts.len()];
            for (_, _, d) in &dets {
                let pick = |want_valid: bool, used: &Vec<bool>| {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, (g, valid)) in gts.iter().enumerate() {
                        if used[gi] || *valid != want_valid {
                            continue;
                        }
                        let v = iou(d, g);
                        if v >= thr && best.is_none_or(|b| v > b.1) {
                            best = Some((gi, v));
                        }
                    }
                    best
                };
                if let Some((gi, _)) = pick(true, &used) {
                    used[gi] = true;
                    tp += 1;
                } else if let Some((gi, _)) = pick(false, &used) {
                    used[gi] = true;
                } else {
                    fp += 1;
                }
            }
        }
        curve.push((tp, tp as f64 / (tp + fp) as f64));
    }
    let mut sum = 0.0;
    for r in 1..=40usize {
        let mut best: f64 = 0.0;
        for &(tp, p) in &curve {
            if tp * 40 >= r * n_gt && p > best {
                best = p;
            }
        }
        sum += best;
    }
    Some(sum / 40.0 * 100.0)
}

pub fn gt_record(kind: &str, loc: [f64; 3], dims: [f64; 3], ry: f64, bbox_h: f64) -> LabelRecord {
    LabelRecord {
        kind: kind.into(),
        truncated: 0.0,
        occluded: 0,
        alpha: 0.0,
        bbox: [100.0, 100.0, 150.0, 100.0 + bbox_h],
        dimensions: dims,
        location: loc,
        rotation_y: ry,
        score: None,
    }
}

/// Up to `per_param` seeded element positions from every parameter.
pub fn sample_params(store: &mono3d::nn::ParamStore, per_param: usize, seed: u64) -> Vec<(mono3d::nn::ParamId, usize)> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (id, _, t) in store.iter() {
        let n = t.numel();
        for _ in 0..per_param.min(n) {
            out.push((id, rng.random_range(0..n)));
        }
    }
    out
}

/// Seeded uniform values in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> mono3d::tensor::Tensor {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    mono3d::tensor::Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Synthetic corpus: GT from rendered scenes, predictions jittered, dropped,
/// duplicated and padded with false positives.
pub fn perturbed_corpus(seed: u64, n: usize) -> Vec<Frame> {
    let calib = CameraCalib::from_intrinsics(721.5, 609.6, 172.9);
    let cfg = SynthConfig { z_range: (5.0, 45.0), ..SynthConfig::default() };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (_, gt) = synth_scene_with(&cfg, seed * 1000 + i as u64, 6, &calib, (375, 1242));
            let mut det = Vec::new();
            for g in &gt {
                if rng.random::<f64>() < 0.15 {
                    continue;
                }
                let mut d = g.clone();
                let s = rng.random_range(0.0..0.6);
                d.location[0] += rng.random_range(-s..=s) * 0.5;
                d.location[2] += rng.random_range(-s..=s);
                d.rotation_y += rng.random_range(-s..=s) * 0.3;
                d.dimensions[2] *= 1.0 + rng.random_range(-0.1..0.1);
                d.score = Some((rng.random_range(0..20) as f64) / 20.0);
                if rng.random::<f64>() < 0.1 {
                    det.push(LabelRecord { score: Some(0.3), ..d.clone() });
                }
                det.push(d);
            }
            for _ in 0..rng.random_range(0..3) {
                let mut fp = gt.first().cloned().unwrap_or_else(|| gt_record("Car", [0.0, 1.5, 10.0], [1.5, 1.6, 3.9], 0.0, 50.0));
                fp.location = [rng.random_range(-10.0..10.0), 1.6, rng.random_range(5.0..50.0)];
                fp.kind = ObjectClass::ALL[rng.random_range(0..3)].name().into();
                fp.score = Some(rng.random::<f64>());
                det.push(fp);
            }
            Frame { gt, det }
        })
        .collect()
}
