//! Oracle-backed tests of the warp kernels: transcription equivalence, rigid
//! reproduction, grid fidelity and raster resampling against dense references.

mod common;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackstab_core::bench::{sinusoidal_displacement, smooth_node_field};
use trackstab_core::geom::{Point2, PointSet, Similarity2};
use trackstab_core::mls::{
    build_grid, dense_warp_field, grid_warp_point, mls_warp_point, mls_warp_points, warp_grid,
    MlsConfig, NodePair,
};
use trackstab_core::raster::{checkerboard, resample_frame, resample_frame_dense};

fn random_points(n: usize, rng: &mut ChaCha8Rng) -> PointSet {
    Array2::from_shape_fn((n, 2), |(_, c)| {
        if c == 0 {
            rng.gen_range(0.0..832.0)
        } else {
            rng.gen_range(0.0..448.0)
        }
    })
}

fn as_tuples(set: &PointSet) -> Vec<(f64, f64)> {
    set.rows().into_iter().map(|r| (r[0], r[1])).collect()
}

#[test]
fn warp_matches_literal_transcription() {
    let cfg = MlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let n = [8, 32, 128, 512][case % 4];
        let q = random_points(n, &mut rng);
        let mut qh = q.clone();
        for mut r in qh.rows_mut() {
            r[0] += rng.gen_range(-6.0..6.0);
            r[1] += rng.gen_range(-6.0..6.0);
        }
        let pair = NodePair::new(q.clone(), qh.clone()).unwrap();
        let qt = as_tuples(&q);
        let qht = as_tuples(&qh);
        for _ in 0..20 {
            let v = (rng.gen_range(-50.0..900.0), rng.gen_range(-50.0..500.0));
            let got = mls_warp_point(Point2::new(v.0, v.1), &pair, &cfg).unwrap();
            let want = common::mls_reference(v, &qt, &qht, cfg.alpha, cfg.epsilon_snap);
            assert!(
                (got.x - want.0).abs() <= 1e-9 && (got.y - want.1).abs() <= 1e-9,
                "case {case}, v {v:?}: got ({}, {}), oracle {want:?}",
                got.x,
                got.y
            );
        }
    }
}

#[test]
fn rigid_transforms_are_reproduced() {
    let cfg = MlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..50 {
        let q = random_points(128, &mut rng);
        let s = Similarity2::rotation_about(
            rng.gen_range(-0.5..0.5),
            Point2::new(rng.gen_range(0.0..832.0), rng.gen_range(0.0..448.0)),
            Point2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)),
        );
        let qh = s.apply_set(&q);
        let pair = NodePair::new(q, qh).unwrap();
        let v = Point2::new(rng.gen_range(0.0..832.0), rng.gen_range(0.0..448.0));
        let got = mls_warp_point(v, &pair, &cfg).unwrap();
        let want = s.apply(v);
        let scale = want.x.abs().max(want.y.abs()).max(1.0);
        assert!(
            (got.x - want.x).abs() <= 1e-9 * scale && (got.y - want.y).abs() <= 1e-9 * scale,
            "case {case}: got ({}, {}), want ({}, {})",
            got.x,
            got.y,
            want.x,
            want.y
        );
    }
}

fn max_grid_deviation(w: usize, h: usize, nodes: &NodePair, cfg: &MlsConfig) -> f64 {
    let grid = warp_grid(&build_grid(w as f64, h as f64, 20, 20).unwrap(), nodes, cfg).unwrap();
    let dense = dense_warp_field(w, h, nodes, cfg).unwrap();
    let mut max_dev = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let approx = grid_warp_point(Point2::new(x as f64, y as f64), &grid).unwrap();
            let exact = dense[y * w + x];
            max_dev = max_dev.max((approx.x - exact[0]).hypot(approx.y - exact[1]));
        }
    }
    max_dev
}

#[test]
fn grid_deviation_scales_with_field_amplitude() {
    // The dense field pins an interpolation spike at every node; the bilinear
    // grid misses the spikes, so the deviation tracks the field's non-rigid
    // amplitude. Small raster here; the full 448x832 case runs in the
    // acceptance suite.
    let (w, h) = (208, 112);
    let cfg = MlsConfig::default();
    let dev_at = |amp: f64| {
        let nodes = smooth_node_field(256, w as f64, h as f64, amp, 5);
        max_grid_deviation(w, h, &nodes, &cfg)
    };
    let d_small = dev_at(0.5);
    let d1 = dev_at(1.0);
    let d2 = dev_at(2.0);
    assert!(d_small < 0.5, "half-pixel field deviates by {d_small}");
    let ratio = d2 / d1;
    assert!((1.5..=2.5).contains(&ratio), "amplitude scaling broke: {d1} -> {d2}");
}

#[test]
fn near_rigid_fields_have_negligible_grid_error() {
    // A rigid carrier with a small sinusoidal residual is what solved
    // stabilization warps look like; the approximation is far below the
    // visual threshold there.
    let (w, h) = (208, 112);
    let cfg = MlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let rigid = Similarity2::rotation_about(
        0.02,
        Point2::new(w as f64 / 2.0, h as f64 / 2.0),
        Point2::new(9.0, -4.0),
    );
    let mut src = Array2::zeros((256, 2));
    let mut dst = Array2::zeros((256, 2));
    for i in 0..256 {
        let x = rng.gen_range(0.0..w as f64);
        let y = rng.gen_range(0.0..h as f64);
        src[[i, 0]] = x;
        src[[i, 1]] = y;
        let r = rigid.apply(Point2::new(x, y));
        let (dx, dy) = sinusoidal_displacement(x, y, w as f64, h as f64, 0.5);
        dst[[i, 0]] = r.x + dx;
        dst[[i, 1]] = r.y + dy;
    }
    let nodes = NodePair::new(src, dst).unwrap();
    let dev = max_grid_deviation(w, h, &nodes, &cfg);
    assert!(dev < 0.5, "near-rigid field deviates by {dev} px");
}

#[test]
fn checkerboard_resampling_matches_dense_backward_oracle() {
    let (w, h) = (160, 96);
    let img = checkerboard(w, h, 8);
    let cfg = MlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // Near-rigid warp: grid and dense coordinates agree to float noise, so
    // every pixel lands within one intensity level of the dense render.
    let rigid = Similarity2::rotation_about(
        0.03,
        Point2::new(w as f64 / 2.0, h as f64 / 2.0),
        Point2::new(6.0, -2.5),
    );
    let mut src = Array2::zeros((96, 2));
    for i in 0..96 {
        src[[i, 0]] = rng.gen_range(0.0..w as f64);
        src[[i, 1]] = rng.gen_range(0.0..h as f64);
    }
    let nodes = NodePair::new(src.clone(), rigid.apply_set(&src)).unwrap();
    let fast = resample_frame(&img, &nodes, 20, 20, &cfg).unwrap();
    let exact = resample_frame_dense(&img, &nodes, &cfg).unwrap();
    let mut worst = 0i32;
    for (a, b) in fast.data.iter().zip(&exact.data) {
        worst = worst.max((*a as i32 - *b as i32).abs());
    }
    assert!(worst <= 1, "rigid-field grid render differs from dense oracle by {worst} levels");

    // A genuinely sinusoidal field puts interpolation spikes at nodes; at a
    // checkerboard edge any sub-pixel coordinate gap flips the full contrast,
    // so the comparison is on the fraction of disagreeing pixels.
    let mut dst = src.clone();
    for i in 0..96 {
        let (dx, dy) =
            sinusoidal_displacement(src[[i, 0]], src[[i, 1]], w as f64, h as f64, 1.5);
        dst[[i, 0]] += dx;
        dst[[i, 1]] += dy;
    }
    let nodes = NodePair::new(src, dst).unwrap();
    let fast = resample_frame(&img, &nodes, 20, 20, &cfg).unwrap();
    let exact = resample_frame_dense(&img, &nodes, &cfg).unwrap();
    let disagreeing = fast
        .data
        .iter()
        .zip(&exact.data)
        .filter(|(a, b)| (**a as i32 - **b as i32).abs() > 1)
        .count();
    let frac = disagreeing as f64 / fast.data.len() as f64;
    assert!(frac < 0.05, "{:.2}% of pixels differ from the dense render", frac * 100.0);
}

#[test]
fn joint_rigid_reproduction_with_batch_path() {
    // Identity, translation and rotation exercised jointly through the batch
    // warp, against the closed-form transform.
    let cfg = MlsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let q = random_points(64, &mut rng);
    let pts = random_points(40, &mut rng);
    for (theta, d) in [(0.0, (0.0, 0.0)), (0.0, (12.0, -3.0)), (0.3, (5.0, 8.0))] {
        let s = Similarity2::rotation_about(theta, Point2::new(416.0, 224.0), Point2::new(d.0, d.1));
        let pair = NodePair::new(q.clone(), s.apply_set(&q)).unwrap();
        let got = mls_warp_points(&pts, &pair, &cfg).unwrap();
        let want = s.apply_set(&pts);
        for i in 0..pts.nrows() {
            assert!(
                (got[[i, 0]] - want[[i, 0]]).abs() < 1e-9 * want[[i, 0]].abs().max(1.0),
                "theta {theta}, point {i}"
            );
            assert!((got[[i, 1]] - want[[i, 1]]).abs() < 1e-9 * want[[i, 1]].abs().max(1.0));
        }
    }
}

mod proptests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Determinism: the same inputs give bit-identical outputs, and the
        /// batch path equals the single-point path exactly.
        #[test]
        fn warp_is_deterministic_and_consistent(seed in 0u64..1000, dx in -20.0f64..20.0, dy in -20.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_points(32, &mut rng);
            let mut qh = q.clone();
            for mut r in qh.rows_mut() {
                r[0] += dx + rng.gen_range(-1.0..1.0);
                r[1] += dy + rng.gen_range(-1.0..1.0);
            }
            let pair = NodePair::new(q, qh).unwrap();
            let cfg = MlsConfig::default();
            let pts = random_points(16, &mut rng);
            let a = mls_warp_points(&pts, &pair, &cfg).unwrap();
            let b = mls_warp_points(&pts, &pair, &cfg).unwrap();
            prop_assert_eq!(&a, &b);
            for i in 0..pts.nrows() {
                let one = mls_warp_point(
                    Point2::new(pts[[i, 0]], pts[[i, 1]]), &pair, &cfg).unwrap();
                prop_assert_eq!(a[[i, 0]], one.x);
                prop_assert_eq!(a[[i, 1]], one.y);
            }
        }

        /// Warping the node sources themselves lands exactly on the targets.
        #[test]
        fn node_interpolation_property(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_points(24, &mut rng);
            let mut qh = q.clone();
            for mut r in qh.rows_mut() {
                r[0] += rng.gen_range(-5.0..5.0);
                r[1] += rng.gen_range(-5.0..5.0);
            }
            let pair = NodePair::new(q.clone(), qh.clone()).unwrap();
            let warped = mls_warp_points(&q, &pair, &MlsConfig::default()).unwrap();
            prop_assert_eq!(&warped, &qh);
        }
    }
}
