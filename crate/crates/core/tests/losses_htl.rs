mod common;

use common::random_tensor;
use mono3d::geometry::{Box3D, CameraCalib};
use mono3d::heads::{Heads2DVars, Heads3DVars, ObjectTargets};
use mono3d::losses::{
    angle_loss, assign_targets, depth_loss, focal_loss, gaussian_radius, htl_weights, l1_masked, total_loss, AssignedObject, HtlConfig,
    ImageObjects, TargetMaps, TaskWeights, Term, NUM_TERMS,
};
use mono3d::nn::{Graph, ParamStore};
use mono3d::tensor::{Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn calib() -> CameraCalib {
    CameraCalib::from_intrinsics(200.0, 96.0, 32.0)
}

fn car_at(x: f64, z: f64) -> Box3D {
    Box3D { location: [x, 1.5, z], dimensions: [1.5, 1.6, 3.9], yaw: 0.3, class_id: 0, score: None }
}

fn image(boxes: Vec<(Box3D, [f64; 4])>) -> ImageObjects {
    ImageObjects { boxes, calib: calib() }
}

fn at(t: &Tensor, idx: &[usize]) -> f64 {
    t.at(idx)
}

#[test]
fn center_on_the_grid() {
    let t = assign_targets(&[image(vec![(car_at(0.0, 10.0), [30.0, 70.0, 50.0, 90.0])])], (128, 192), 3, 12);
    assert_eq!(t.heatmap.shape(), &[1, 3, 32, 48]);
    assert_eq!(t.objects.len(), 1);
    assert_eq!(t.objects[0].cell, (20, 10));
    assert_eq!(t.objects[0].offset2d, [0.0, 0.0]);
    assert_eq!(at(&t.heatmap, &[0, 0, 20, 10]), 1.0);
    assert_eq!(t.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 1);
    assert!(t.heatmap.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn fractional_center_gives_remainder_offsets() {
    let t = assign_targets(&[image(vec![(car_at(0.0, 10.0), [31.0, 72.0, 51.0, 92.0])])], (128, 192), 3, 12);
    assert_eq!(t.objects[0].cell, (20, 10));
    assert_eq!(t.objects[0].offset2d, [0.25, 0.5]);
    assert_eq!(at(&t.heatmap, &[0, 0, 20, 10]), 1.0);
}

#[test]
fn distant_objects_max_combine() {
    let a = (car_at(-2.0, 10.0), [10.0, 20.0, 30.0, 40.0]);
    let b = (car_at(2.0, 10.0), [150.0, 80.0, 170.0, 100.0]);
    let both = assign_targets(&[image(vec![a.clone(), b.clone()])], (128, 192), 3, 12);
    let ta = assign_targets(&[image(vec![a])], (128, 192), 3, 12);
    let tb = assign_targets(&[image(vec![b])], (128, 192), 3, 12);
    assert_eq!(both.heatmap.data().iter().filter(|&&v| v == 1.0).count(), 2);
    for i in 0..both.heatmap.numel() {
        assert_eq!(both.heatmap.data()[i], ta.heatmap.data()[i].max(tb.heatmap.data()[i]));
    }
    let mask = both.regression_mask();
    assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
}

#[test]
fn centers_outside_the_image_are_skipped() {
    let t = assign_targets(&[image(vec![(car_at(0.0, 10.0), [-30.0, 10.0, -2.0, 30.0])])], (128, 192), 3, 12);
    assert!(t.objects.is_empty());
    assert_eq!(t.skipped, 1);
    assert!(t.heatmap.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gaussian_radius_reference_values() {
    let r = gaussian_radius(10.0, 10.0, 0.7);
    assert!(r > 0.0 && r < 5.0);
    assert!(gaussian_radius(20.0, 20.0, 0.7) > r);
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.tape.value(v).item()
}

#[test]
fn focal_single_cell() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let p = g.input(Tensor::new(&[1, 1, 1, 1], vec![0.5]).unwrap());
    let l = focal_loss(&mut g, p, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
    assert!((scalar(&g, l) - 0.25 * 2f64.ln()).abs() < 1e-15);
    assert!((scalar(&g, l) - 0.1733).abs() < 1e-4);
}

#[test]
fn focal_matches_a_pixel_loop() {
    let store = ParamStore::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = 2 * 3 * 5 * 7;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let gt: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.05 { 1.0 } else { rng.random_range(0.0..0.95) }).collect();
        let mut sum = 0.0;
        let mut pos = 0.0;
        for i in 0..n {
            let (p, y) = (pred[i], gt[i]);
            if y == 1.0 {
                sum -= (1.0 - p) * (1.0 - p) * p.ln();
                pos += 1.0;
            } else {
                sum -= (1.0 - y).powi(4) * p * p * (1.0 - p).ln();
            }
        }
        let want = sum / f64::max(pos, 1.0);
        let mut g = Graph::new(&store, false);
        let p = g.input(Tensor::new(&[2, 3, 5, 7], pred).unwrap());
        let l = focal_loss(&mut g, p, &Tensor::new(&[2, 3, 5, 7], gt).unwrap()).unwrap();
        assert!((scalar(&g, l) - want).abs() < 1e-10);
    }
}

#[test]
fn l1_masked_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let t = random_tensor(&[2, 4], 1);
    let p = g.tape.leaf(t.clone().with_grad());
    let l = l1_masked(&mut g, p, &t, &[true; 8]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);

    let mut shifted = t.clone();
    shifted.data_mut()[5] += 0.3;
    let l = l1_masked(&mut g, p, &shifted, &[false, false, false, false, false, true, false, false]).unwrap();
    assert!((scalar(&g, l) - 0.3).abs() < 1e-15);

    let l = l1_masked(&mut g, p, &shifted, &[false; 8]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    g.tape.backward(l).unwrap();
    assert!(g.tape.grad(p).is_none_or(|gr| gr.iter().all(|&v| v == 0.0)));
}

#[test]
fn angle_loss_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let logits = g.input(Tensor::zeros(&[1, 12]));
    let res = g.input(Tensor::zeros(&[1, 12]));
    let l = angle_loss(&mut g, logits, res, &[4], &[0.0]).unwrap();
    assert!((scalar(&g, l) - 12f64.ln()).abs() < 1e-12);
    assert!((scalar(&g, l) - 2.4849).abs() < 1e-4);

    let logits = g.input(Tensor::from_fn(&[1, 12], |i| if i == 4 { 60.0 } else { -60.0 }));
    let res = g.input(Tensor::from_fn(&[1, 12], |i| if i == 4 { 0.1 } else { 9.0 }));
    let l = angle_loss(&mut g, logits, res, &[4], &[0.1]).unwrap();
    assert!(scalar(&g, l) < 1e-40);
}

#[test]
fn angle_loss_matches_scalar_oracle_and_routes_residual_grads() {
    let store = ParamStore::new();
    let (r, b) = (5, 12);
    let lt = random_tensor(&[r, b], 2);
    let rt = random_tensor(&[r, b], 3);
    let bins = [0, 11, 3, 3, 7];
    let gt = [0.1, -0.2, 0.05, 0.0, 0.25];
    let mut want = 0.0;
    for i in 0..r {
        let row = &lt.data()[i * b..(i + 1) * b];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        want += (lse - row[bins[i]]) / r as f64;
        want += (rt.data()[i * b + bins[i]] - gt[i]).abs() / r as f64;
    }
    let mut g = Graph::new(&store, false);
    let logits = g.input(lt);
    let res = g.tape.leaf(rt.with_grad());
    let l = angle_loss(&mut g, logits, res, &bins, &gt).unwrap();
    assert!((scalar(&g, l) - want).abs() < 1e-12);
    g.tape.backward(l).unwrap();
    let gr = g.tape.grad(res).unwrap();
    for i in 0..r {
        for k in 0..b {
            assert_eq!(gr[i * b + k] != 0.0, k == bins[i]);
        }
    }
}

#[test]
fn depth_loss_examples() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let mu = g.input(Tensor::new(&[1], vec![12.0]).unwrap());
    let s1 = g.input(Tensor::new(&[1], vec![1.0]).unwrap());
    let se = g.input(Tensor::new(&[1], vec![std::f64::consts::E]).unwrap());
    let l = depth_loss(&mut g, mu, s1, &[12.0]).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let l = depth_loss(&mut g, mu, se, &[12.0]).unwrap();
    assert!((scalar(&g, l) - 1.0).abs() < 1e-15);
    let tiny = g.input(Tensor::new(&[1], vec![1e-9]).unwrap());
    let l = depth_loss(&mut g, mu, tiny, &[12.0]).unwrap();
    assert!((scalar(&g, l) - 1e-6f64.ln()).abs() < 1e-12);
}

#[test]
fn depth_loss_minimizer_over_sigma() {
    let store = ParamStore::new();
    let (mu, d) = (14.0, 12.5);
    let loss = |s: f64| {
        let mut g = Graph::new(&store, false);
        let m = g.input(Tensor::new(&[1], vec![mu]).unwrap());
        let s = g.input(Tensor::new(&[1], vec![s]).unwrap());
        let l = depth_loss(&mut g, m, s, &[d]).unwrap();
        scalar(&g, l)
    };
    let star = 2f64.sqrt() * (mu - d).abs();
    let h = 1e-5;
    let slope = |s: f64| (loss(s + h) - loss(s - h)) / (2.0 * h);
    assert!(slope(star).abs() < 1e-8);
    for k in 1..20 {
        let s = star * k as f64 / 10.0;
        if k < 10 {
            assert!(slope(s) < 0.0);
        } else if k > 10 {
            assert!(slope(s) > 0.0);
        }
        assert!(loss(s) >= loss(star) - 1e-12);
    }
    assert!((loss(star) - (1.0 + star.ln())).abs() < 1e-12);
}

struct Fixture {
    targets: TargetMaps,
    priors: Vec<[f64; 3]>,
    heat: Tensor,
    off2: Tensor,
    size2: Tensor,
    off3: Tensor,
    logits: Tensor,
    res: Tensor,
    sizes: Tensor,
    h_ls: Tensor,
    bias: Tensor,
    b_ls: Tensor,
}

fn object(batch: usize, cell: (usize, usize), class_id: usize, bin: usize, focal: f64) -> AssignedObject {
    AssignedObject {
        batch,
        cell,
        offset2d: [0.25, 0.75],
        targets: ObjectTargets {
            class_id,
            box2d: [0.0, 0.0, 40.0, 100.0],
            center2d: [20.0, 50.0],
            size2d: [40.0, 100.0],
            offset3d: [1.5, -2.0],
            angle_bin: bin,
            angle_residual: 0.1,
            dimensions: [1.5, 1.6, 3.9],
            depth: 5.0,
        },
        focal,
    }
}

/// Predictions that reproduce every target; σ_h = 1 and the bias σ chosen
/// so the depth σ is 1 as well.
fn perfect() -> Fixture {
    let priors = vec![[1.4, 1.5, 3.5], [1.7, 0.6, 0.8], [1.7, 0.6, 1.8]];
    let (h, w) = (6, 8);
    let objs = vec![object(0, (2, 3), 0, 4, 50.0), object(1, (4, 1), 2, 9, 50.0)];
    let mut heat = Tensor::zeros(&[2, 3, h, w]);
    let mut off2 = Tensor::zeros(&[2, 2, h, w]);
    let mut size2 = Tensor::zeros(&[2, 2, h, w]);
    for o in &objs {
        heat.data_mut()[((o.batch * 3 + o.targets.class_id) * h + o.cell.0) * w + o.cell.1] = 1.0;
        for ch in 0..2 {
            let i = ((o.batch * 2 + ch) * h + o.cell.0) * w + o.cell.1;
            off2.data_mut()[i] = o.offset2d[ch];
            size2.data_mut()[i] = o.targets.size2d[ch];
        }
    }
    let m = objs.len();
    let off3 = Tensor::from_fn(&[m, 2], |i| objs[i / 2].targets.offset3d[i % 2]);
    let logits = Tensor::from_fn(&[m, 12], |i| if i % 12 == objs[i / 12].targets.angle_bin { 80.0 } else { -80.0 });
    let res = Tensor::from_fn(&[m, 12], |i| if i % 12 == objs[i / 12].targets.angle_bin { 0.1 } else { 0.0 });
    let sizes = Tensor::from_fn(&[m, 9], |i| {
        let o = &objs[i / 9];
        let (c, k) = ((i % 9) / 3, i % 3);
        if c == o.targets.class_id {
            o.targets.dimensions[k] - priors[c][k]
        } else {
            0.0
        }
    });
    let k = 50.0 / 100.0;
    let bias = Tensor::from_fn(&[m, 1], |i| objs[i].targets.depth - k * objs[i].targets.dimensions[0]);
    let b_ls = Tensor::full(&[m, 1], (1.0 - k * k).sqrt().ln());
    let heatmap = heat.clone();
    Fixture {
        targets: TargetMaps { heatmap, objects: objs, skipped: 0 },
        priors,
        heat,
        off2,
        size2,
        off3,
        logits,
        res,
        sizes,
        h_ls: Tensor::zeros(&[m, 1]),
        bias,
        b_ls,
    }
}

fn vars(g: &mut Graph, f: &Fixture) -> (Heads2DVars, Heads3DVars) {
    let h2 = Heads2DVars { heatmap: g.input(f.heat.clone()), offset2d: g.input(f.off2.clone()), size2d: g.input(f.size2.clone()) };
    let m = f.targets.objects.len();
    let h3 = Heads3DVars {
        offset3d: g.input(f.off3.clone()),
        angle_logits: g.input(f.logits.clone()),
        angle_residuals: g.input(f.res.clone()),
        size_residuals: g.input(f.sizes.clone()),
        h3d_log_sigma: g.input(f.h_ls.clone()),
        depth_bias: g.input(f.bias.clone()),
        depth_log_sigma: g.input(f.b_ls.clone()),
    };
    assert_eq!(g.tape.shape(h3.depth_bias), &[m, 1]);
    (h2, h3)
}

#[test]
fn perfect_predictions_give_zero_total() {
    let f = perfect();
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let (h2, h3) = vars(&mut g, &f);
    let r = total_loss(&mut g, &h2, Some(&h3), &f.targets, &f.priors, &TaskWeights::ones()).unwrap();
    for (t, v) in Term::ALL.iter().zip(r.values) {
        assert!(v.abs() < 1e-12, "{} = {v}", t.name());
    }
    assert!(scalar(&g, r.total).abs() < 1e-12);
}

fn perturbed(seed: u64) -> Fixture {
    let mut f = perfect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for t in [&mut f.off2, &mut f.size2, &mut f.off3, &mut f.logits, &mut f.res, &mut f.sizes, &mut f.h_ls, &mut f.bias, &mut f.b_ls] {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
    }
    f.logits.data_mut().iter_mut().for_each(|v| *v /= 40.0);
    f.heat.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.1..0.9));
    f.targets.heatmap.data_mut().iter_mut().for_each(|v| {
        if *v != 1.0 {
            *v = rng.random_range(0.0..0.6)
        }
    });
    f
}

#[test]
fn heatmap_only_weights_give_the_focal_term() {
    let f = perturbed(7);
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let (h2, h3) = vars(&mut g, &f);
    let mut w = [0.0; NUM_TERMS];
    w[0] = 1.0;
    let r = total_loss(&mut g, &h2, Some(&h3), &f.targets, &f.priors, &TaskWeights(w)).unwrap();
    let solo = focal_loss(&mut g, h2.heatmap, &f.targets.heatmap).unwrap();
    assert_eq!(scalar(&g, r.total), scalar(&g, solo));
}

#[test]
fn total_is_the_weighted_sum_of_terms() {
    for seed in 0..20 {
        let f = perturbed(seed);
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let (h2, h3) = vars(&mut g, &f);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
        let w = TaskWeights(std::array::from_fn(|_| rng.random_range(0.0..1.0)));
        let r = total_loss(&mut g, &h2, Some(&h3), &f.targets, &f.priors, &w).unwrap();
        let sum = (0..NUM_TERMS).fold(0.0, |acc, i| acc + w.0[i] * r.values[i]);
        assert!((scalar(&g, r.total) - sum).abs() < 1e-12);

        let mut g2 = Graph::new(&store, false);
        let (h2, h3) = vars(&mut g2, &f);
        let m = f.targets.objects.len();
        let bins: Vec<usize> = f.targets.objects.iter().map(|o| o.targets.angle_bin).collect();
        let res: Vec<f64> = f.targets.objects.iter().map(|o| o.targets.angle_residual).collect();
        let solo_angle = angle_loss(&mut g2, h3.angle_logits, h3.angle_residuals, &bins, &res).unwrap();
        assert_eq!(g2.tape.value(solo_angle).item(), r.values[Term::Angle.index()]);
        let solo_focal = focal_loss(&mut g2, h2.heatmap, &f.targets.heatmap).unwrap();
        assert_eq!(g2.tape.value(solo_focal).item(), r.values[Term::Heatmap.index()]);

        let mut off3 = 0.0;
        let mut w3d = 0.0;
        for (i, o) in f.targets.objects.iter().enumerate() {
            for k in 0..2 {
                off3 += (f.off3.data()[2 * i + k] - o.targets.offset3d[k]).abs() / (2 * m) as f64;
            }
            let c = o.targets.class_id;
            w3d += (f.priors[c][1] + f.sizes.data()[9 * i + 3 * c + 1] - o.targets.dimensions[1]).abs() / m as f64;
        }
        assert!((off3 - r.values[Term::Offset3d.index()]).abs() < 1e-12);
        assert!((w3d - r.values[Term::W3d.index()]).abs() < 1e-12);

        let mut depth = 0.0;
        for (i, o) in f.targets.objects.iter().enumerate() {
            let c = o.targets.class_id;
            let hmu = f.priors[c][0] + f.sizes.data()[9 * i + 3 * c];
            let k = o.focal / o.targets.size2d[1];
            let mu = k * hmu + f.bias.data()[i];
            let s = ((k * f.h_ls.data()[i].exp()).powi(2) + f.b_ls.data()[i].exp().powi(2)).sqrt();
            depth += (2f64.sqrt() * (mu - o.targets.depth).abs() / s + s.ln()) / m as f64;
        }
        assert!((depth - r.values[Term::Depth.index()]).abs() < 1e-12);
    }
}

#[test]
fn no_objects_leaves_only_the_heatmap_term() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let heat = g.input(Tensor::full(&[1, 3, 4, 4], 0.2));
    let z = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    let t = TargetMaps { heatmap: Tensor::zeros(&[1, 3, 4, 4]), objects: vec![], skipped: 0 };
    let r = total_loss(&mut g, &Heads2DVars { heatmap: heat, offset2d: z, size2d: z }, None, &t, &[[1.0; 3]; 3], &TaskWeights::ones()).unwrap();
    assert!(r.values[0] > 0.0);
    assert!(r.values[1..].iter().all(|&v| v == 0.0));
}

fn flat(v: f64) -> [f64; NUM_TERMS] {
    [v; NUM_TERMS]
}

#[test]
fn htl_examples() {
    let cfg = HtlConfig::default();
    assert_eq!(htl_weights(0, &[], &cfg).tiers(), (1.0, 0.0, 0.0));
    let same: Vec<_> = (0..20).map(|_| flat(3.0)).collect();
    assert_eq!(htl_weights(20, &same, &cfg).tiers(), (1.0, 0.0, 0.0));
    let mut vanishing = vec![flat(3.0)];
    vanishing.extend((1..20).map(|_| flat(0.0)));
    assert_eq!(htl_weights(20, &vanishing, &cfg).0, [1.0; NUM_TERMS]);

    let mut tier1_only = vec![flat(3.0)];
    tier1_only.extend((1..20).map(|_| {
        let mut r = flat(3.0);
        r[..3].iter_mut().for_each(|v| *v = 0.0);
        r
    }));
    let w = htl_weights(20, &tier1_only, &cfg);
    assert_eq!(w.tiers(), (1.0, 1.0, 3.0 / 8.0));
    for t in Term::ALL {
        let want = match t.tier() {
            1 | 2 => 1.0,
            _ => 3.0 / 8.0,
        };
        assert_eq!(w.get(t), want, "{}", t.name());
    }
    let half = vec![flat(2.0), flat(1.0), flat(1.0), flat(1.0), flat(1.0), flat(1.0)];
    assert_eq!(htl_weights(6, &half, &cfg).tiers(), (1.0, 0.5, 0.5));
    let eased = HtlConfig { target_drop: 0.5, ..cfg };
    assert_eq!(htl_weights(6, &half, &eased).tiers(), (1.0, 1.0, 1.0));
}

proptest! {
    #[test]
    fn htl_weights_are_monotone(rows in prop::collection::vec(prop::array::uniform9(0.0f64..5.0), 1..30), ramp in 0usize..8, window in 1usize..4) {
        let cfg = HtlConfig { ramp_epochs: ramp, recent_window: window, target_drop: 1.0 };
        let mut prev = htl_weights(0, &rows[..0], &cfg);
        for e in 1..=rows.len() {
            let w = htl_weights(e, &rows[..e], &cfg);
            for i in 0..NUM_TERMS {
                prop_assert!(w.0[i] >= prev.0[i]);
                prop_assert!((0.0..=1.0).contains(&w.0[i]));
            }
            prop_assert_eq!(w.tiers().0, 1.0);
            prev = w;
        }
    }
}

#[test]
fn every_term_passes_a_gradient_check() {
    let f = perturbed(3);
    let mut store = ParamStore::new();
    let ids: Vec<_> = [&f.heat, &f.off2, &f.size2, &f.off3, &f.logits, &f.res, &f.sizes, &f.h_ls, &f.bias, &f.b_ls]
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(&format!("out{i}"), (*t).clone()).unwrap())
        .collect();
    let samples: Vec<_> = store.iter().flat_map(|(id, _, t)| (0..t.numel()).map(move |j| (id, j))).collect();
    for term in Term::ALL {
        let mut w = [0.0; NUM_TERMS];
        w[term.index()] = 1.0;
        let report = mono3d::nn::check_param_grads(
            &store,
            |g| {
                let p: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let h2 = Heads2DVars { heatmap: p[0], offset2d: p[1], size2d: p[2] };
                let h3 = Heads3DVars {
                    offset3d: p[3],
                    angle_logits: p[4],
                    angle_residuals: p[5],
                    size_residuals: p[6],
                    h3d_log_sigma: p[7],
                    depth_bias: p[8],
                    depth_log_sigma: p[9],
                };
                Ok(total_loss(g, &h2, Some(&h3), &f.targets, &f.priors, &TaskWeights(w))?.total)
            },
            1e-6,
            &samples,
            None,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {report:?}", term.name());
    }
}
