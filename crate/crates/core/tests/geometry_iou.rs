mod common;

use mono3d::geometry::{bev_footprint, convex_clip, iou_3d, iou_bev, polygon_area, Box3D};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bx(x: f64, z: f64, w: f64, l: f64, yaw: f64) -> Box3D {
    Box3D { location: [x, 1.0, z], dimensions: [1.5, w, l], yaw, class_id: 0, score: None }
}

fn arb_box() -> impl Strategy<Value = Box3D> {
    (-3.0..3.0f64, 5.0..11.0f64, 0.3..4.0f64, 0.3..5.0f64, -3.1..3.1f64).prop_map(|(x, z, w, l, yaw)| bx(x, z, w, l, yaw))
}

#[test]
fn octagon_via_rasterization() {
    let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
    let b = bx(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
    let raster = common::raster_iou_bev(&a, &b, 2000);
    assert!((raster - iou_bev(&a, &b)).abs() < 2e-3);
    let inter = polygon_area(&convex_clip(&bev_footprint(&a), &bev_footprint(&b)));
    assert!((inter - 0.828427).abs() < 1e-6);
}

#[test]
fn raster_agreement_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let a = bx(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), rng.random_range(-3.1..3.1));
        let b = bx(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), rng.random_range(-3.1..3.1));
        let (exact, raster) = (iou_bev(&a, &b), common::raster_iou_bev(&a, &b, 2000));
        assert!((exact - raster).abs() < 2e-3, "{exact} vs {raster}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn bev_iou_symmetric(a in arb_box(), b in arb_box()) {
        prop_assert!((iou_bev(&a, &b) - iou_bev(&b, &a)).abs() < 1e-12);
        prop_assert!((iou_3d(&a, &b) - iou_3d(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn bev_iou_rigid_invariant(a in arb_box(), b in arb_box(), tx in -5.0..5.0f64, tz in -5.0..5.0f64, rot in -3.0..3.0f64) {
        let (s, c) = rot.sin_cos();
        let mv = |o: &Box3D| {
            let [x, y, z] = o.location;
            let mut m = o.clone();
            // y-axis rotation as used for yaw: x' = c x + s z, z' = -s x + c z
            m.location = [c * x + s * z + tx, y, -s * x + c * z + tz];
            m.yaw += rot;
            m
        };
        prop_assert!((iou_bev(&a, &b) - iou_bev(&mv(&a), &mv(&b))).abs() < 1e-9);
    }

    #[test]
    fn clip_area_bounded(a in arb_box(), b in arb_box()) {
        let (pa, pb) = (bev_footprint(&a), bev_footprint(&b));
        let inter = polygon_area(&convex_clip(&pa, &pb));
        prop_assert!(inter <= polygon_area(&pa).min(polygon_area(&pb)) + 1e-12);
        let v = iou_bev(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn iou3d_never_exceeds_bev_for_equal_heights(a in arb_box(), b in arb_box()) {
        prop_assert!(iou_3d(&a, &b) <= iou_bev(&a, &b) + 1e-12);
    }
}
