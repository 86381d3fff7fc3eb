//! Naive reference evaluation of the two-branch linear network: direct
//! nested-loop convolutions and hand-wired skip concatenation, independently
//! coded against the layer table, compared to the production forward pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trackstab_core::solvers::{net_forward, NetConfig, NetInput, NetWeights};

/// (kernel size, stride, dilation, padding) of encoder layers 1-10.
const ENC: [(usize, usize, usize, usize); 10] = [
    (3, 1, 1, 1),
    (4, 2, 1, 1),
    (3, 1, 1, 1),
    (4, 2, 1, 1),
    (3, 1, 1, 1),
    (3, 1, 1, 1),
    (4, 2, 1, 1),
    (3, 1, 1, 1),
    (3, 1, 2, 2),
    (3, 1, 2, 2),
];

/// Encoder output channels as multiples of C.
const ENC_OUT: [usize; 10] = [1, 2, 2, 4, 4, 4, 8, 8, 8, 8];

/// Decoder layers 11-18: (transposed, k, s, d, p, c_in multiple, c_out multiple).
const DEC: [(bool, usize, usize, usize, usize, usize, usize); 8] = [
    (true, 4, 2, 1, 1, 32, 8),
    (false, 3, 1, 1, 1, 8, 8),
    (false, 3, 1, 1, 1, 8, 8),
    (true, 4, 2, 1, 1, 16, 4),
    (false, 3, 1, 1, 1, 4, 4),
    (true, 4, 2, 1, 1, 8, 2),
    (false, 3, 1, 1, 1, 2, 2),
    (false, 1, 1, 1, 0, 2, 0), // c_out = 2(T-2), patched at runtime
];

fn conv_ref(
    x: &Array2<f64>,
    kernel: &Array2<f64>, // (c_out, c_in * k)
    k: usize,
    s: usize,
    d: usize,
    p: usize,
) -> Array2<f64> {
    let (c_in, l) = x.dim();
    let c_out = kernel.nrows();
    let l_out = (l + 2 * p - d * (k - 1) - 1) / s + 1;
    let mut out = Array2::zeros((c_out, l_out));
    for co in 0..c_out {
        for o in 0..l_out {
            let mut acc = 0.0;
            for ci in 0..c_in {
                for t in 0..k {
                    let j = (o * s + t * d) as isize - p as isize;
                    if j >= 0 && (j as usize) < l {
                        acc += kernel[[co, ci * k + t]] * x[[ci, j as usize]];
                    }
                }
            }
            out[[co, o]] = acc;
        }
    }
    out
}

fn convt_ref(
    x: &Array2<f64>,
    kernel: &Array2<f64>, // (c_in, c_out * k)
    k: usize,
    s: usize,
    d: usize,
    p: usize,
) -> Array2<f64> {
    let (c_in, l) = x.dim();
    let c_out = kernel.ncols() / k;
    let l_out = (l - 1) * s + d * (k - 1) + 1 - 2 * p;
    let mut out = Array2::zeros((c_out, l_out));
    for ci in 0..c_in {
        for o in 0..l {
            for co in 0..c_out {
                for t in 0..k {
                    let i = (o * s + t * d) as isize - p as isize;
                    if i >= 0 && (i as usize) < l_out {
                        out[[co, i as usize]] += kernel[[ci, co * k + t]] * x[[ci, o]];
                    }
                }
            }
        }
    }
    out
}

fn vcat(parts: &[&Array2<f64>]) -> Array2<f64> {
    let cols = parts[0].ncols();
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut r = 0;
    for p in parts {
        for i in 0..p.nrows() {
            for j in 0..cols {
                out[[r + i, j]] = p[[i, j]];
            }
        }
        r += p.nrows();
    }
    out
}

/// Reference forward pass: both branches encoded independently, skips from
/// layers 10+7 (bottleneck), 5 and 3, feature side weighted by 1-lambda and
/// face side by lambda.
fn reference_forward(weights: &NetWeights, input: &NetInput) -> Vec<Array2<f64>> {
    let lambda = input.lambda;
    let encode = |x0: &Array2<f64>, kernels: &[Array2<f64>]| -> Vec<Array2<f64>> {
        let mut acts = Vec::new();
        let mut cur = x0.clone();
        for (i, &(k, s, d, p)) in ENC.iter().enumerate() {
            cur = conv_ref(&cur, &kernels[i], k, s, d, p);
            acts.push(cur.clone());
        }
        acts
    };
    let fa = encode(&input.features, &weights.encoder_feat);
    let ga = encode(&input.faces, &weights.encoder_face);
    let wf = |a: &Array2<f64>| a * (1.0 - lambda);
    let wg = |a: &Array2<f64>| a * lambda;

    let mut cur = vcat(&[&wf(&fa[9]), &wg(&ga[9]), &wf(&fa[6]), &wg(&ga[6])]);
    for (j, &(transposed, k, s, d, p, _, _)) in DEC.iter().enumerate() {
        if j == 3 {
            cur = vcat(&[&cur, &wf(&fa[4]), &wg(&ga[4])]);
        }
        if j == 5 {
            cur = vcat(&[&cur, &wf(&fa[2]), &wg(&ga[2])]);
        }
        cur = if transposed {
            convt_ref(&cur, &weights.decoder[j], k, s, d, p)
        } else {
            conv_ref(&cur, &weights.decoder[j], k, s, d, p)
        };
    }
    let t = weights.config.window;
    (0..t - 2)
        .map(|j| {
            let mut d = Array2::zeros((2, cur.ncols()));
            for col in 0..cur.ncols() {
                d[[0, col]] = cur[[2 * j, col]];
                d[[1, col]] = cur[[2 * j + 1, col]];
            }
            d
        })
        .collect()
}

#[test]
fn production_forward_matches_reference_evaluation() {
    let cfg = NetConfig { base_filters: 4, window: 5 };
    let weights = NetWeights::random(cfg, 31).unwrap();
    assert_eq!(ENC_OUT.len(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for lambda in [0.1, 0.5, 0.9] {
        let n = 64;
        let input = NetInput {
            features: Array2::from_shape_fn((16, n), |_| rng.gen_range(-100.0..100.0)),
            faces: Array2::from_shape_fn((16, n), |_| rng.gen_range(-100.0..100.0)),
            lambda,
        };
        let got = net_forward(&weights, &input).unwrap();
        let want = reference_forward(&weights, &input);
        assert_eq!(got.deltas().len(), want.len());
        for (j, (g, w)) in got.deltas().iter().zip(&want).enumerate() {
            for i in 0..g.nrows() {
                for (r, c) in [(0usize, i), (1, i)] {
                    let gv = g[[i, r]]; // got is (N, 2)
                    let wv = w[[r, c]];
                    assert!(
                        (gv - wv).abs() <= 1e-10 * wv.abs().max(1.0),
                        "lambda {lambda}, frame {j}, point {i}, axis {r}: {gv} vs {wv}"
                    );
                }
            }
        }
    }
}

#[test]
fn trained_window_matches_reference_on_window_input() {
    // Same comparison through the window-assembly path.
    use trackstab_core::tracks::{synthesize_scene, JitterSpec, SyntheticSceneSpec};
    let spec = SyntheticSceneSpec {
        frame_count: 5,
        camera: JitterSpec { translation_std: 2.0, ..JitterSpec::default() },
        seed: 51,
        ..SyntheticSceneSpec::default()
    };
    let (frames, _) = synthesize_scene(&spec).unwrap();
    let window = trackstab_core::tracks::TrackWindow::from_frames(frames).unwrap();
    let cfg = NetConfig { base_filters: 4, window: 5 };
    let weights = NetWeights::random(cfg, 8).unwrap();
    let input = NetInput::from_window(&window, 0.3).unwrap();
    let got = net_forward(&weights, &input).unwrap();
    let want = reference_forward(&weights, &input);
    for (g, w) in got.deltas().iter().zip(&want) {
        for i in 0..g.nrows() {
            assert!((g[[i, 0]] - w[[0, i]]).abs() <= 1e-10 * w[[0, i]].abs().max(1.0));
            assert!((g[[i, 1]] - w[[1, i]]).abs() <= 1e-10 * w[[1, i]].abs().max(1.0));
        }
    }
}
