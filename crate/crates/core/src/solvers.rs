//! Per-window displacement solvers: the direct Adam optimizer over warp node
//! displacements, and the linear two-branch 1D convolutional network
//! (inference, desk-scale training and weight serialization).
//!
//! The network is an 18-layer 1D autoencoder with two input branches and no
//! bias or activation anywhere, so the displacement output is exactly
//! homogeneous in the input coordinates. Skip tensors from both branches are
//! weighted by the foreground/background focus λ (face branch × λ, feature
//! branch × 1−λ) and concatenated into the decoder at each upsampling stage.

use std::io::{Read, Write};
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{adam_step_arrays, AdamParams, AdamState, ConvSpec, Tape, ValueId};
use crate::error::{Error, Result};
use crate::mls::MlsConfig;
use crate::objective::{
    effective_lambda, loss_graph, to_graph_layout, LossBreakdown, NormKind,
    WindowDisplacements, WindowPrecomps,
};
use crate::tracks::{augment_window, validate_lambda, FrameTracks, TrackWindow};

/// Network shape parameters: the base filter count C and window length T.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub base_filters: usize,
    pub window: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { base_filters: 128, window: 5 }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return Err(Error::Param("base_filters must be >= 1".into()));
        }
        if self.window < 3 {
            return Err(Error::Param(format!(
                "window length must be >= 3, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// One layer of the network table.
#[derive(Clone, Copy, Debug)]
pub struct LayerSpec {
    /// 1-based layer id (1..=18).
    pub index: usize,
    pub transposed: bool,
    pub spec: ConvSpec,
}

fn conv(index: usize, c_in: usize, c_out: usize, k: usize, s: usize, d: usize, p: usize) -> LayerSpec {
    LayerSpec {
        index,
        transposed: false,
        spec: ConvSpec { c_in, c_out, k, stride: s, dilation: d, padding: p },
    }
}

fn convt(index: usize, c_in: usize, c_out: usize, k: usize, s: usize, d: usize, p: usize) -> LayerSpec {
    LayerSpec {
        index,
        transposed: true,
        spec: ConvSpec { c_in, c_out, k, stride: s, dilation: d, padding: p },
    }
}

/// Encoder layers 1-10 (instantiated once per branch).
pub fn encoder_layers(cfg: &NetConfig) -> Vec<LayerSpec> {
    let c = cfg.base_filters;
    let in_rows = 4 * (cfg.window - 1);
    vec![
        conv(1, in_rows, c, 3, 1, 1, 1),
        conv(2, c, 2 * c, 4, 2, 1, 1),
        conv(3, 2 * c, 2 * c, 3, 1, 1, 1),
        conv(4, 2 * c, 4 * c, 4, 2, 1, 1),
        conv(5, 4 * c, 4 * c, 3, 1, 1, 1),
        conv(6, 4 * c, 4 * c, 3, 1, 1, 1),
        conv(7, 4 * c, 8 * c, 4, 2, 1, 1),
        conv(8, 8 * c, 8 * c, 3, 1, 1, 1),
        conv(9, 8 * c, 8 * c, 3, 1, 2, 2),
        conv(10, 8 * c, 8 * c, 3, 1, 2, 2),
    ]
}

/// Decoder layers 11-18. Layer 11 as printed (k=4, s=2, p=2, d=2) yields
/// length 129 instead of 128; the amended d=1, p=1 form matching layers
/// 14/16 is used.
pub fn decoder_layers(cfg: &NetConfig) -> Vec<LayerSpec> {
    let c = cfg.base_filters;
    let out_rows = 2 * (cfg.window - 2);
    vec![
        convt(11, 32 * c, 8 * c, 4, 2, 1, 1),
        conv(12, 8 * c, 8 * c, 3, 1, 1, 1),
        conv(13, 8 * c, 8 * c, 3, 1, 1, 1),
        convt(14, 16 * c, 4 * c, 4, 2, 1, 1),
        conv(15, 4 * c, 4 * c, 3, 1, 1, 1),
        convt(16, 8 * c, 2 * c, 4, 2, 1, 1),
        conv(17, 2 * c, 2 * c, 3, 1, 1, 1),
        conv(18, 2 * c, out_rows, 1, 1, 1, 0),
    ]
}

/// The full 18-layer parameter set: two independent encoder branches and a
/// shared decoder. Kernels are stored as flattened matrices (see ConvSpec).
#[derive(Clone, Debug)]
pub struct NetWeights {
    pub config: NetConfig,
    pub encoder_feat: Vec<Array2<f64>>,
    pub encoder_face: Vec<Array2<f64>>,
    pub decoder: Vec<Array2<f64>>,
}

fn kernel_dims(layer: &LayerSpec) -> (usize, usize) {
    if layer.transposed {
        layer.spec.transposed_kernel_dims()
    } else {
        layer.spec.conv_kernel_dims()
    }
}

impl NetWeights {
    /// Zero-initialized weights (the network then outputs zero displacements
    /// for any input).
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let make = |layers: &[LayerSpec]| -> Vec<Array2<f64>> {
            layers.iter().map(|l| Array2::zeros(kernel_dims(l))).collect()
        };
        let enc = encoder_layers(&config);
        let dec = decoder_layers(&config);
        Ok(Self {
            config,
            encoder_feat: make(&enc),
            encoder_face: make(&enc),
            decoder: make(&dec),
        })
    }

    /// Variance-preserving random init: N(0, 1/sqrt(c_in * k)) per layer. The
    /// output layer is scaled down so a fresh network emits near-zero
    /// displacements instead of coordinate-scale noise (inputs are raw pixel
    /// coordinates, hundreds of pixels in magnitude).
    pub fn random(config: NetConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = encoder_layers(&config);
        let dec = decoder_layers(&config);
        let mut fill = |mats: &mut [Array2<f64>], layers: &[LayerSpec]| {
            for (mat, layer) in mats.iter_mut().zip(layers) {
                let gain = if layer.index == 18 { 0.01 } else { 1.0 };
                let std = gain / ((layer.spec.c_in * layer.spec.k) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                mat.mapv_inplace(|_| dist.sample(&mut rng));
            }
        };
        fill(&mut w.encoder_feat, &enc);
        fill(&mut w.encoder_face, &enc);
        fill(&mut w.decoder, &dec);
        Ok(w)
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder_feat.iter().map(|m| m.len()).sum::<usize>()
            + self.encoder_face.iter().map(|m| m.len()).sum::<usize>()
            + self.decoder.iter().map(|m| m.len()).sum::<usize>()
    }

    fn all_mats(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.encoder_feat.iter().chain(self.encoder_face.iter()).chain(self.decoder.iter())
    }

    fn all_mats_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.encoder_feat
            .iter_mut()
            .chain(self.encoder_face.iter_mut())
            .chain(self.decoder.iter_mut())
    }
}

// ---------------------------------------------------------------------------
// Network input assembly
// ---------------------------------------------------------------------------

/// The two branch input tensors of one window: per frame slot t = 1..T-1 the
/// feature branch stacks [P_t.x; P_t.y; Q_{t+1}.x; Q_{t+1}.y] and the face
/// branch [F_t.x; F_t.y; F_{t+1}.x; F_{t+1}.y]; slots with a missing face
/// are zero-filled (a bias-free linear branch then contributes nothing).
#[derive(Clone, Debug)]
pub struct NetInput {
    pub features: Array2<f64>,
    pub faces: Array2<f64>,
    pub lambda: f64,
}

impl NetInput {
    pub fn from_window(window: &TrackWindow, lambda: f64) -> Result<Self> {
        let t_len = window.len();
        let n = window.point_count();
        let mut features = Array2::zeros((4 * (t_len - 1), n));
        let mut faces = Array2::zeros((4 * (t_len - 1), n));
        for slot in 1..t_len {
            let r = 4 * (slot - 1);
            let p = to_graph_layout(window.points_p(slot));
            let q = to_graph_layout(window.nodes_q(slot + 1));
            features.slice_mut(s![r..r + 2, ..]).assign(&p);
            features.slice_mut(s![r + 2..r + 4, ..]).assign(&q);
            if let (Some(fa), Some(fb)) = (window.face(slot), window.face(slot + 1)) {
                faces.slice_mut(s![r..r + 2, ..]).assign(&to_graph_layout(fa));
                faces.slice_mut(s![r + 2..r + 4, ..]).assign(&to_graph_layout(fb));
            }
        }
        Ok(Self { features, faces, lambda })
    }
}

// ---------------------------------------------------------------------------
// Forward graph
// ---------------------------------------------------------------------------

/// Weight leaves registered on a tape.
pub struct NetWeightIds {
    pub encoder_feat: Vec<ValueId>,
    pub encoder_face: Vec<ValueId>,
    pub decoder: Vec<ValueId>,
}

impl NetWeightIds {
    pub fn register(tape: &mut Tape, weights: &NetWeights, trainable: bool) -> Self {
        let mut reg = |mats: &[Array2<f64>]| -> Vec<ValueId> {
            mats.iter()
                .map(|m| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) })
                .collect()
        };
        Self {
            encoder_feat: reg(&weights.encoder_feat),
            encoder_face: reg(&weights.encoder_face),
            decoder: reg(&weights.decoder),
        }
    }

    pub fn flat(&self) -> Vec<ValueId> {
        self.encoder_feat
            .iter()
            .chain(self.encoder_face.iter())
            .chain(self.decoder.iter())
            .copied()
            .collect()
    }
}

/// Recorded (layer label, input shape, output shape) triples of one forward.
pub type ShapeTrace = Vec<(String, (usize, usize), (usize, usize))>;

fn layer_err(e: Error, index: usize) -> Error {
    match e {
        Error::Shape { detail, .. } => Error::Shape { layer: format!("layer {index}"), detail },
        other => other,
    }
}

fn apply_layer(
    tape: &mut Tape,
    layer: &LayerSpec,
    x: ValueId,
    kernel: ValueId,
    label: &str,
    trace: &mut ShapeTrace,
) -> Result<ValueId> {
    let in_dim = tape.mat(x).dim();
    let out = if layer.transposed {
        tape.conv1d_transposed(x, kernel, layer.spec)
    } else {
        tape.conv1d(x, kernel, layer.spec)
    }
    .map_err(|e| layer_err(e, layer.index))?;
    trace.push((label.to_string(), in_dim, tape.mat(out).dim()));
    Ok(out)
}

/// Encoder pass of one branch; returns (layer-3 out, layer-5 out, layer-7
/// out, layer-10 out) — the skip sources and the bottleneck.
fn encode_branch(
    tape: &mut Tape,
    layers: &[LayerSpec],
    kernels: &[ValueId],
    input: ValueId,
    branch: &str,
    trace: &mut ShapeTrace,
) -> Result<(ValueId, ValueId, ValueId, ValueId)> {
    let mut cur = input;
    let mut skip3 = None;
    let mut skip5 = None;
    let mut skip7 = None;
    for (layer, &kernel) in layers.iter().zip(kernels) {
        let label = format!("{branch} layer {}", layer.index);
        cur = apply_layer(tape, layer, cur, kernel, &label, trace)?;
        match layer.index {
            3 => skip3 = Some(cur),
            5 => skip5 = Some(cur),
            7 => skip7 = Some(cur),
            _ => {}
        }
    }
    Ok((skip3.unwrap(), skip5.unwrap(), skip7.unwrap(), cur))
}

/// Build the network forward graph. Returns one (2, N) displacement value per
/// interior frame t = 2..T-1.
pub fn net_graph(
    tape: &mut Tape,
    weights: &NetWeights,
    ids: &NetWeightIds,
    input: &NetInput,
    trace: &mut ShapeTrace,
) -> Result<Vec<ValueId>> {
    let cfg = &weights.config;
    cfg.validate()?;
    validate_net_input(cfg, input)?;
    let lambda = input.lambda;

    let enc = encoder_layers(cfg);
    let dec = decoder_layers(cfg);

    let feat_in = tape.constant(input.features.clone());
    let face_in = tape.constant(input.faces.clone());

    let (f3, f5, f7, f10) =
        encode_branch(tape, &enc, &ids.encoder_feat, feat_in, "feature", trace)?;
    let (g3, g5, g7, g10) = encode_branch(tape, &enc, &ids.encoder_face, face_in, "face", trace)?;

    // λ-weighted concatenation: feature tensors × (1-λ), face tensors × λ.
    let weighted = |tape: &mut Tape, feat: ValueId, face: ValueId| -> (ValueId, ValueId) {
        (tape.scale(feat, 1.0 - lambda), tape.scale(face, lambda))
    };

    let (wf10, wg10) = weighted(tape, f10, g10);
    let (wf7, wg7) = weighted(tape, f7, g7);
    let bottleneck = tape.concat_rows(&[wf10, wg10, wf7, wg7])?;

    let mut cur = apply_layer(tape, &dec[0], bottleneck, ids.decoder[0], "decoder layer 11", trace)?;
    cur = apply_layer(tape, &dec[1], cur, ids.decoder[1], "decoder layer 12", trace)?;
    cur = apply_layer(tape, &dec[2], cur, ids.decoder[2], "decoder layer 13", trace)?;

    let (wf5, wg5) = weighted(tape, f5, g5);
    let in14 = tape.concat_rows(&[cur, wf5, wg5])?;
    cur = apply_layer(tape, &dec[3], in14, ids.decoder[3], "decoder layer 14", trace)?;
    cur = apply_layer(tape, &dec[4], cur, ids.decoder[4], "decoder layer 15", trace)?;

    let (wf3, wg3) = weighted(tape, f3, g3);
    let in16 = tape.concat_rows(&[cur, wf3, wg3])?;
    cur = apply_layer(tape, &dec[5], in16, ids.decoder[5], "decoder layer 16", trace)?;
    cur = apply_layer(tape, &dec[6], cur, ids.decoder[6], "decoder layer 17", trace)?;
    let out = apply_layer(tape, &dec[7], cur, ids.decoder[7], "decoder layer 18", trace)?;

    // Rows (2j, 2j+1) are the (x, y) displacement rows of frame j+2.
    let mut deltas = Vec::with_capacity(cfg.window - 2);
    for j in 0..cfg.window - 2 {
        deltas.push(tape.slice_rows(out, 2 * j, 2)?);
    }
    Ok(deltas)
}

fn validate_net_input(cfg: &NetConfig, input: &NetInput) -> Result<()> {
    let rows = 4 * (cfg.window - 1);
    if input.features.nrows() != rows || input.faces.nrows() != rows {
        return Err(Error::Shape {
            layer: "input".into(),
            detail: format!(
                "branch inputs must have {rows} rows for T={}, got {} / {}",
                cfg.window,
                input.features.nrows(),
                input.faces.nrows()
            ),
        });
    }
    let n = input.features.ncols();
    if input.faces.ncols() != n {
        return Err(Error::Shape {
            layer: "input".into(),
            detail: format!("branch lengths differ: {} vs {}", n, input.faces.ncols()),
        });
    }
    if n == 0 || n % 8 != 0 {
        return Err(Error::Shape {
            layer: "input".into(),
            detail: format!("point count {n} must be a positive multiple of 8"),
        });
    }
    if !(0.0..1.0).contains(&input.lambda) {
        return Err(Error::Param(format!("lambda must lie in [0,1), got {}", input.lambda)));
    }
    Ok(())
}

/// Run the network on a window input. Pure inference; thread-safe for shared
/// immutable weights.
pub fn net_forward(weights: &NetWeights, input: &NetInput) -> Result<WindowDisplacements> {
    Ok(net_forward_traced(weights, input)?.0)
}

/// [`net_forward`] that also reports every layer's input/output shape.
pub fn net_forward_traced(
    weights: &NetWeights,
    input: &NetInput,
) -> Result<(WindowDisplacements, ShapeTrace)> {
    let mut tape = Tape::new();
    let ids = NetWeightIds::register(&mut tape, weights, false);
    let mut trace = ShapeTrace::new();
    let deltas = net_graph(&mut tape, weights, &ids, input, &mut trace)?;
    let out = deltas
        .iter()
        .map(|&d| crate::objective::from_graph_layout(tape.mat(d)))
        .collect::<Vec<_>>();
    Ok((WindowDisplacements::new(out), trace))
}

// ---------------------------------------------------------------------------
// Solvers
// ---------------------------------------------------------------------------

/// Result of one window solve.
#[derive(Clone, Debug)]
pub struct SolverReport {
    pub displacements: WindowDisplacements,
    pub loss_before: LossBreakdown,
    pub loss_after: LossBreakdown,
    pub iterations: usize,
    pub wall_ms: f64,
}

/// Options of the direct per-window optimizer.
#[derive(Clone, Copy, Debug)]
pub struct DirectOptions {
    pub iterations: usize,
    pub adam: AdamParams,
    pub norm: NormKind,
    /// Stop early once the loss drops below this floor.
    pub loss_floor: f64,
}

impl Default for DirectOptions {
    fn default() -> Self {
        Self {
            iterations: 1000,
            adam: AdamParams { lr: 1e-1, beta1: 0.9, beta2: 0.99, eps: 1e-8 },
            norm: NormKind::PerPoint,
            loss_floor: 1e-9,
        }
    }
}

/// Optimize the window loss directly over the warp node displacements,
/// starting from zero, returning the best-seen displacements.
pub fn solve_direct(
    window: &TrackWindow,
    lambda: f64,
    mls: &MlsConfig,
    opts: &DirectOptions,
) -> Result<SolverReport> {
    validate_lambda(lambda)?;
    if window.len() < 3 {
        return Err(Error::Param(format!(
            "direct solver needs window length >= 3, got {}",
            window.len()
        )));
    }
    let start = Instant::now();
    let lambda_eff = effective_lambda(window, lambda);
    let precomps = WindowPrecomps::build(window, mls)?;
    let n = window.point_count();
    let n_interior = window.len() - 2;

    let mut params: Vec<Array2<f64>> = (0..n_interior).map(|_| Array2::zeros((2, n))).collect();
    let mut adam = AdamState::new(&vec![2 * n; n_interior], opts.adam);

    let mut best_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut loss_before = 0.0;
    let mut iterations = 0;

    for it in 0..=opts.iterations {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let graph = loss_graph(&mut tape, window, &precomps, &ids, lambda_eff, opts.norm)?;
        let value = tape.scalar(graph.total)?;
        if !value.is_finite() {
            return Err(Error::Divergence { context: format!("direct solver iterate {it}") });
        }
        if it == 0 {
            loss_before = value;
        }
        if value < best_loss {
            best_loss = value;
            best_params = params.clone();
        }
        iterations = it;
        if value < opts.loss_floor || it == opts.iterations {
            break;
        }
        let grads = tape.backward(graph.total)?;
        let gvec: Vec<Array2<f64>> = ids
            .iter()
            .map(|&id| grads.mat(id).cloned().unwrap_or_else(|| Array2::zeros((2, n))))
            .collect();
        adam_step_arrays(&mut adam, &mut params, &gvec)?;
    }

    let displacements = WindowDisplacements::new(
        best_params.iter().map(crate::objective::from_graph_layout).collect(),
    );
    let report_loss = |disp: &WindowDisplacements| -> Result<LossBreakdown> {
        breakdown(window, disp, lambda_eff, mls, opts.norm)
    };
    let zero = WindowDisplacements::zeros(window.len(), n);
    Ok(SolverReport {
        loss_before: LossBreakdown {
            total: loss_before,
            ..report_loss(&zero)?
        },
        loss_after: LossBreakdown { total: best_loss, ..report_loss(&displacements)? },
        displacements,
        iterations,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Loss breakdown at a possibly-zero effective lambda.
fn breakdown(
    window: &TrackWindow,
    disp: &WindowDisplacements,
    lambda_eff: f64,
    mls: &MlsConfig,
    norm: NormKind,
) -> Result<LossBreakdown> {
    let background = crate::objective::background_loss(window, disp, mls, norm)?;
    let foreground = if lambda_eff > 0.0 {
        crate::objective::foreground_loss(window, disp, mls, norm)?
    } else {
        0.0
    };
    Ok(LossBreakdown {
        background,
        foreground,
        total: (1.0 - lambda_eff) * background + lambda_eff * foreground,
    })
}

/// Infer displacements with the network and report the loss change.
pub fn solve_net(
    window: &TrackWindow,
    lambda: f64,
    weights: &NetWeights,
    mls: &MlsConfig,
    norm: NormKind,
) -> Result<SolverReport> {
    validate_lambda(lambda)?;
    if window.len() != weights.config.window {
        return Err(Error::Param(format!(
            "window length {} does not match the network's T = {}",
            window.len(),
            weights.config.window
        )));
    }
    let start = Instant::now();
    let lambda_eff = effective_lambda(window, lambda);
    let input = NetInput::from_window(window, lambda_eff)?;
    let displacements = net_forward(weights, &input)?;
    let zero = WindowDisplacements::zeros(window.len(), window.point_count());
    Ok(SolverReport {
        loss_before: breakdown(window, &zero, lambda_eff, mls, norm)?,
        loss_after: breakdown(window, &displacements, lambda_eff, mls, norm)?,
        displacements,
        iterations: 1,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Training options; the paper-style defaults are lr = 1e-4 and a uniform
/// random λ per sample.
#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub adam: AdamParams,
    pub norm: NormKind,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 30, adam: AdamParams::with_lr(1e-4), norm: NormKind::PerPoint, seed: 0 }
    }
}

/// Joint permutation of each frame-pair slot plus a shared face permutation;
/// the warp-node ordering of frame t follows slot t-1's permutation, which is
/// exactly what the loss consumes.
fn permute_window<R: Rng>(window: &TrackWindow, rng: &mut R) -> Result<TrackWindow> {
    let n = window.point_count();
    let mut face_perm: Vec<usize> = (0..n).collect();
    face_perm.shuffle(rng);
    let mut frames: Vec<FrameTracks> = window.frames().to_vec();
    for frame in frames.iter_mut() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        frame.points = permute_rows(&frame.points, &perm);
        if let Some(q) = &frame.nodes_q_next {
            frame.nodes_q_next = Some(permute_rows(q, &perm));
        }
        if let Some(f) = &frame.face {
            frame.face = Some(permute_rows(f, &face_perm));
        }
    }
    TrackWindow::from_frames(frames)
}

fn permute_rows(set: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(set.dim());
    for (dst, &src) in perm.iter().enumerate() {
        out[[dst, 0]] = set[[src, 0]];
        out[[dst, 1]] = set[[src, 1]];
    }
    out
}

/// Mean training loss of one epoch next to the zero-displacement loss of the
/// very same augmented samples, the comparable do-nothing baseline.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_zero_loss: f64,
}

/// Unsupervised training: per sample, augment the window, draw λ ~ U(0,1),
/// permute the points, run the network, minimize the window loss. Returns the
/// trained weights and per-epoch statistics.
pub fn train(
    windows: &[TrackWindow],
    mut weights: NetWeights,
    mls: &MlsConfig,
    opts: &TrainOptions,
) -> Result<(NetWeights, Vec<EpochStats>)> {
    if windows.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for w in windows {
        if w.len() != weights.config.window {
            return Err(Error::Param(format!(
                "training window length {} does not match the network's T = {}",
                w.len(),
                weights.config.window
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shapes: Vec<usize> = weights.all_mats().map(|m| m.len()).collect();
    let mut adam = AdamState::new(&shapes, opts.adam);
    let mut curve = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut zero_sum = 0.0;
        for (k, &wi) in order.iter().enumerate() {
            let window = augment_window(&windows[wi], &mut rng)?;
            let window = permute_window(&window, &mut rng)?;
            let lambda = loop {
                let l: f64 = rng.gen();
                if l > 0.0 && l < 1.0 {
                    break l;
                }
            };
            let lambda_eff = effective_lambda(&window, lambda);
            let zero = WindowDisplacements::zeros(window.len(), window.point_count());
            zero_sum += breakdown(&window, &zero, lambda_eff, mls, opts.norm)?.total;
            let input = NetInput::from_window(&window, lambda_eff)?;
            let precomps = WindowPrecomps::build(&window, mls)?;

            let mut tape = Tape::new();
            let ids = NetWeightIds::register(&mut tape, &weights, true);
            let mut trace = ShapeTrace::new();
            let deltas = net_graph(&mut tape, &weights, &ids, &input, &mut trace)?;
            let graph = loss_graph(&mut tape, &window, &precomps, &deltas, lambda_eff, opts.norm)?;
            let value = tape.scalar(graph.total)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    context: format!("training epoch {epoch}, sample {k}"),
                });
            }
            epoch_sum += value;

            let grads = tape.backward(graph.total)?;
            let flat_ids = ids.flat();
            let gvec: Vec<Array2<f64>> = flat_ids
                .iter()
                .map(|&id| {
                    grads
                        .mat(id)
                        .cloned()
                        .unwrap_or_else(|| Array2::zeros(tape.mat(id).dim()))
                })
                .collect();
            let mut pvec: Vec<Array2<f64>> = weights.all_mats().cloned().collect();
            adam_step_arrays(&mut adam, &mut pvec, &gvec)?;
            for (dst, src) in weights.all_mats_mut().zip(pvec) {
                *dst = src;
            }
        }
        curve.push(EpochStats {
            mean_loss: epoch_sum / windows.len() as f64,
            mean_zero_loss: zero_sum / windows.len() as f64,
        });
    }
    Ok((weights, curve))
}

// ---------------------------------------------------------------------------
// Weight serialization
// ---------------------------------------------------------------------------

const WEIGHT_MAGIC: &[u8; 8] = b"TSTABNET";
const WEIGHT_VERSION: u32 = 1;

/// Predicted byte length of a serialized weight file for a configuration.
pub fn weight_file_len(config: &NetConfig) -> Result<usize> {
    config.validate()?;
    let enc = encoder_layers(config);
    let dec = decoder_layers(config);
    let layer_count = enc.len() * 2 + dec.len();
    let params: usize = enc
        .iter()
        .map(|l| {
            let (r, c) = kernel_dims(l);
            r * c
        })
        .sum::<usize>()
        * 2
        + dec
            .iter()
            .map(|l| {
                let (r, c) = kernel_dims(l);
                r * c
            })
            .sum::<usize>();
    // magic + version + C + T + layer count + manifest + f32 blob + digest
    Ok(8 + 4 + 4 + 4 + 4 + layer_count * 26 + params * 4 + 32)
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn manifest_entry(buf: &mut Vec<u8>, role: u8, layer: &LayerSpec) {
    buf.push(role);
    buf.push(layer.transposed as u8);
    push_u32(buf, layer.spec.c_in as u32);
    push_u32(buf, layer.spec.c_out as u32);
    push_u32(buf, layer.spec.k as u32);
    push_u32(buf, layer.spec.stride as u32);
    push_u32(buf, layer.spec.dilation as u32);
    push_u32(buf, layer.spec.padding as u32);
}

/// Serialize weights: magic, version, manifest, little-endian f32 parameter
/// blob, SHA-256 checksum. Parameters are quantized to f32 on save.
pub fn save_weights<W: Write>(weights: &NetWeights, writer: &mut W) -> Result<()> {
    let mut buf = Vec::with_capacity(weight_file_len(&weights.config)?);
    buf.extend_from_slice(WEIGHT_MAGIC);
    push_u32(&mut buf, WEIGHT_VERSION);
    push_u32(&mut buf, weights.config.base_filters as u32);
    push_u32(&mut buf, weights.config.window as u32);
    let enc = encoder_layers(&weights.config);
    let dec = decoder_layers(&weights.config);
    push_u32(&mut buf, (enc.len() * 2 + dec.len()) as u32);
    for l in &enc {
        manifest_entry(&mut buf, 0, l);
    }
    for l in &enc {
        manifest_entry(&mut buf, 1, l);
    }
    for l in &dec {
        manifest_entry(&mut buf, 2, l);
    }
    for mat in weights.all_mats() {
        for &v in mat.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    writer.write_all(&buf)?;
    Ok(())
}

fn u32_at(buf: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(buf[off..off + 4].try_into().expect("4 bytes"))
}

/// Load and validate a serialized weight stream.
pub fn load_weights<R: Read>(reader: &mut R) -> Result<NetWeights> {
    let mut data = Vec::new();
    reader.read_to_end(&mut data)?;
    if data.len() < 8 + 4 + 4 + 4 + 4 + 32 {
        return Err(Error::WeightFormat("stream too short".into()));
    }
    let (body, digest) = data.split_at(data.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(Error::WeightFormat("checksum mismatch".into()));
    }
    if &body[..8] != WEIGHT_MAGIC {
        return Err(Error::WeightFormat("bad magic bytes".into()));
    }
    let version = u32_at(body, 8);
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFormat(format!(
            "unsupported version {version}, expected {WEIGHT_VERSION}"
        )));
    }
    let config = NetConfig {
        base_filters: u32_at(body, 12) as usize,
        window: u32_at(body, 16) as usize,
    };
    config.validate().map_err(|e| Error::WeightFormat(e.to_string()))?;
    let layer_count = u32_at(body, 20) as usize;
    let enc = encoder_layers(&config);
    let dec = decoder_layers(&config);
    if layer_count != enc.len() * 2 + dec.len() {
        return Err(Error::WeightFormat(format!("manifest lists {layer_count} layers")));
    }
    // Validate the manifest against the expected table.
    let mut expected_manifest = Vec::new();
    for l in &enc {
        manifest_entry(&mut expected_manifest, 0, l);
    }
    for l in &enc {
        manifest_entry(&mut expected_manifest, 1, l);
    }
    for l in &dec {
        manifest_entry(&mut expected_manifest, 2, l);
    }
    let manifest_off = 24;
    let blob_off = manifest_off + expected_manifest.len();
    if body.len() < blob_off {
        return Err(Error::WeightFormat("truncated manifest".into()));
    }
    if &body[manifest_off..blob_off] != expected_manifest.as_slice() {
        return Err(Error::WeightFormat(
            "manifest does not match the layer table for this C and T".into(),
        ));
    }

    let mut weights = NetWeights::zeros(config)?;
    let mut off = blob_off;
    for mat in weights.all_mats_mut() {
        for v in mat.iter_mut() {
            if off + 4 > body.len() {
                return Err(Error::WeightFormat("parameter blob too short".into()));
            }
            *v = f32::from_le_bytes(body[off..off + 4].try_into().expect("4 bytes")) as f64;
            off += 4;
        }
    }
    if off != body.len() {
        return Err(Error::WeightFormat(format!(
            "{} trailing bytes after the parameter blob",
            body.len() - off
        )));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracks::{synthesize_scene, JitterSpec, SyntheticSceneSpec};
    use ndarray::Array2;

    /// Subsample every point set of a synthetic scene down to `n` points so
    /// module tests stay fast. Keeps correspondence alignment.
    fn small_window(spec: &SyntheticSceneSpec, n: usize) -> TrackWindow {
        let (frames, _) = synthesize_scene(spec).unwrap();
        shrink(frames, n)
    }

    fn shrink(frames: Vec<FrameTracks>, n: usize) -> TrackWindow {
        let step = frames[0].points.nrows() / n;
        let pick = |set: &Array2<f64>| -> Array2<f64> {
            let mut out = Array2::zeros((n, 2));
            for i in 0..n {
                out[[i, 0]] = set[[i * step, 0]];
                out[[i, 1]] = set[[i * step, 1]];
            }
            out
        };
        let frames = frames
            .into_iter()
            .map(|f| FrameTracks {
                frame_index: f.frame_index,
                points: pick(&f.points),
                nodes_q_next: f.nodes_q_next.as_ref().map(&pick),
                face: f.face.as_ref().map(&pick),
            })
            .collect();
        TrackWindow::from_frames(frames).unwrap()
    }

    fn jitter_spec(trans: f64, seed: u64, frames: usize) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            frame_count: frames,
            camera: JitterSpec { translation_std: trans, ..JitterSpec::default() },
            seed,
            ..SyntheticSceneSpec::default()
        }
    }

    #[test]
    fn zero_weights_give_zero_displacements() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let weights = NetWeights::zeros(cfg).unwrap();
        let window = small_window(&jitter_spec(3.0, 1, 5), 64);
        let input = NetInput::from_window(&window, 0.3).unwrap();
        let disp = net_forward(&weights, &input).unwrap();
        for d in disp.deltas() {
            assert!(d.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn net_output_is_homogeneous_in_coordinates() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let weights = NetWeights::random(cfg, 7).unwrap();
        let window = small_window(&jitter_spec(2.0, 2, 5), 64);
        let input = NetInput::from_window(&window, 0.4).unwrap();
        let base = net_forward(&weights, &input).unwrap();
        let scaled_in = NetInput {
            features: &input.features * 2.0,
            faces: &input.faces * 2.0,
            lambda: input.lambda,
        };
        let scaled = net_forward(&weights, &scaled_in).unwrap();
        for (a, b) in base.deltas().iter().zip(scaled.deltas()) {
            for (x, y) in a.iter().zip(b.iter()) {
                let rel = (y - 2.0 * x).abs() / x.abs().max(1e-12);
                assert!(rel < 1e-6, "{y} vs 2*{x}");
            }
        }
    }

    #[test]
    fn net_is_additive_in_inputs() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let weights = NetWeights::random(cfg, 8).unwrap();
        let wa = small_window(&jitter_spec(2.0, 3, 5), 64);
        let wb = small_window(&jitter_spec(3.0, 4, 5), 64);
        let ia = NetInput::from_window(&wa, 0.25).unwrap();
        let ib = NetInput::from_window(&wb, 0.25).unwrap();
        let isum = NetInput {
            features: &ia.features + &ib.features,
            faces: &ia.faces + &ib.faces,
            lambda: 0.25,
        };
        let da = net_forward(&weights, &ia).unwrap();
        let db = net_forward(&weights, &ib).unwrap();
        let dsum = net_forward(&weights, &isum).unwrap();
        for ((a, b), s) in da.deltas().iter().zip(db.deltas()).zip(dsum.deltas()) {
            let lhs = a + b;
            for (x, y) in lhs.iter().zip(s.iter()) {
                let rel = (x - y).abs() / x.abs().max(1e-9);
                assert!(rel < 1e-6);
            }
        }
    }

    #[test]
    fn shape_trace_matches_table_for_small_net() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let weights = NetWeights::zeros(cfg).unwrap();
        let window = small_window(&jitter_spec(1.0, 5, 5), 512);
        let input = NetInput::from_window(&window, 0.3).unwrap();
        let (_, trace) = net_forward_traced(&weights, &input).unwrap();
        let c = 4;
        // Feature branch encoder shapes per the layer table at L=512.
        let expect = [
            (16, 512, c, 512),
            (c, 512, 2 * c, 256),
            (2 * c, 256, 2 * c, 256),
            (2 * c, 256, 4 * c, 128),
            (4 * c, 128, 4 * c, 128),
            (4 * c, 128, 4 * c, 128),
            (4 * c, 128, 8 * c, 64),
            (8 * c, 64, 8 * c, 64),
            (8 * c, 64, 8 * c, 64),
            (8 * c, 64, 8 * c, 64),
        ];
        for (i, &(ci, li, co, lo)) in expect.iter().enumerate() {
            let (label, ind, outd) = &trace[i];
            assert_eq!(label, &format!("feature layer {}", i + 1));
            assert_eq!(*ind, (ci, li), "layer {} in", i + 1);
            assert_eq!(*outd, (co, lo), "layer {} out", i + 1);
        }
        // Decoder: trace entries 20..28.
        let dec_expect = [
            (32 * c, 64, 8 * c, 128),
            (8 * c, 128, 8 * c, 128),
            (8 * c, 128, 8 * c, 128),
            (16 * c, 128, 4 * c, 256),
            (4 * c, 256, 4 * c, 256),
            (8 * c, 256, 2 * c, 512),
            (2 * c, 512, 2 * c, 512),
            (2 * c, 512, 6, 512),
        ];
        for (j, &(ci, li, co, lo)) in dec_expect.iter().enumerate() {
            let (label, ind, outd) = &trace[20 + j];
            assert_eq!(label, &format!("decoder layer {}", 11 + j));
            assert_eq!(*ind, (ci, li));
            assert_eq!(*outd, (co, lo));
        }
    }

    #[test]
    fn weight_round_trip_is_bit_identical() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let w0 = NetWeights::random(cfg, 99).unwrap();
        let mut bytes0 = Vec::new();
        save_weights(&w0, &mut bytes0).unwrap();
        assert_eq!(bytes0.len(), weight_file_len(&cfg).unwrap());

        let w1 = load_weights(&mut bytes0.as_slice()).unwrap();
        let mut bytes1 = Vec::new();
        save_weights(&w1, &mut bytes1).unwrap();
        assert_eq!(bytes0, bytes1);
        let w2 = load_weights(&mut bytes1.as_slice()).unwrap();
        for (a, b) in w1.all_mats().zip(w2.all_mats()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_or_corrupt_weight_streams_are_rejected() {
        let cfg = NetConfig { base_filters: 4, window: 5 };
        let w = NetWeights::random(cfg, 1).unwrap();
        let mut bytes = Vec::new();
        save_weights(&w, &mut bytes).unwrap();

        let truncated = &bytes[..bytes.len() - 10];
        assert!(matches!(
            load_weights(&mut &truncated[..]),
            Err(Error::WeightFormat(msg)) if msg.contains("checksum")
        ));

        let mut corrupt = bytes.clone();
        corrupt[100] ^= 0xff;
        assert!(load_weights(&mut corrupt.as_slice()).is_err());

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(load_weights(&mut wrong_magic.as_slice()).is_err());
    }

    #[test]
    fn direct_solver_static_scene_early_exits_at_zero() {
        let spec = SyntheticSceneSpec {
            frame_count: 5,
            camera: JitterSpec::default(),
            seed: 10,
            ..SyntheticSceneSpec::default()
        };
        let window = small_window(&spec, 64);
        let report =
            solve_direct(&window, 0.3, &MlsConfig::default(), &DirectOptions::default()).unwrap();
        assert!(report.loss_after.total < 1e-9);
        assert!(report.iterations < 5, "early exit expected, ran {}", report.iterations);
        for d in report.displacements.deltas() {
            assert!(d.iter().all(|&v| v.abs() < 1e-6));
        }
    }

    /// A translation-jitter window whose first and last frames share the base
    /// pose: frames 1 and T are never warped, so only such windows admit a
    /// near-zero optimum with the negative cumulative jitter as ground truth.
    fn endpoint_matched_window(jitter: &[[f64; 2]], seed: u64, n: usize) -> TrackWindow {
        use crate::tracks::{identity_sample, synthesize_with_transforms};
        let spec = SyntheticSceneSpec { frame_count: jitter.len(), seed, ..SyntheticSceneSpec::default() };
        let samples = jitter
            .iter()
            .enumerate()
            .map(|(t, d)| crate::tracks::JitterSample {
                camera_translation: *d,
                ..identity_sample((t + 1) as u64)
            })
            .collect();
        let (frames, _) = synthesize_with_transforms(&spec, samples).unwrap();
        shrink(frames, n)
    }

    #[test]
    fn direct_solver_recovers_translation_jitter() {
        let jitter = [[0.0, 0.0], [3.5, -2.0], [-1.5, 4.0], [2.0, 2.5], [0.0, 0.0]];
        let window = endpoint_matched_window(&jitter, 21, 64);
        let report =
            solve_direct(&window, 0.3, &MlsConfig::default(), &DirectOptions::default()).unwrap();
        assert!(
            report.loss_after.total <= 0.01 * report.loss_before.total,
            "loss {} -> {}",
            report.loss_before.total,
            report.loss_after.total
        );
        assert!(report.loss_after.total <= report.loss_before.total);
        // Ground truth: interior displacements cancel the cumulative jitter.
        for (j, d) in report.displacements.deltas().iter().enumerate() {
            let expected = jitter[j + 1];
            for i in 0..d.nrows() {
                assert!(
                    (d[[i, 0]] + expected[0]).abs() < 0.5,
                    "frame {} point {i}: {} vs {}",
                    j + 2,
                    d[[i, 0]],
                    -expected[0]
                );
                assert!((d[[i, 1]] + expected[1]).abs() < 0.5);
            }
        }
    }

    #[test]
    fn direct_solver_rejects_short_windows_and_bad_lambda() {
        let window = small_window(&jitter_spec(1.0, 1, 2), 64);
        assert!(solve_direct(&window, 0.3, &MlsConfig::default(), &DirectOptions::default())
            .is_err());
        let window = small_window(&jitter_spec(1.0, 1, 5), 64);
        assert!(solve_direct(&window, 0.0, &MlsConfig::default(), &DirectOptions::default())
            .is_err());
    }

    #[test]
    fn training_smoke_run() {
        // A few samples only: verifies the loop runs, produces finite losses
        // and actually moves the weights. Learning quality is covered by the
        // toy-training acceptance test.
        let mut windows = Vec::new();
        for seed in 0..6 {
            windows.push(small_window(&jitter_spec(2.5, 100 + seed, 5), 64));
        }
        let cfg = NetConfig { base_filters: 2, window: 5 };
        // Zero init is a stationary point of a bias-free linear network, so
        // training always starts from random weights.
        let weights = NetWeights::random(cfg, 42).unwrap();
        let before: Vec<Array2<f64>> = weights.all_mats().cloned().collect();
        let opts = TrainOptions {
            epochs: 4,
            adam: AdamParams::with_lr(1e-3),
            norm: NormKind::PerPoint,
            seed: 3,
        };
        let (trained, curve) = train(&windows, weights, &MlsConfig::default(), &opts).unwrap();
        assert_eq!(curve.len(), 4);
        assert!(curve.iter().all(|s| s.mean_loss.is_finite() && s.mean_zero_loss > 0.0));
        assert!(before.iter().zip(trained.all_mats()).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_epochs_keep_weights() {
        let windows = vec![small_window(&jitter_spec(1.0, 7, 5), 64)];
        let cfg = NetConfig { base_filters: 2, window: 5 };
        let weights = NetWeights::random(cfg, 5).unwrap();
        let before: Vec<Array2<f64>> = weights.all_mats().cloned().collect();
        let opts = TrainOptions { epochs: 0, ..TrainOptions::default() };
        let (after, curve) = train(&windows, weights, &MlsConfig::default(), &opts).unwrap();
        assert!(curve.is_empty());
        for (a, b) in before.iter().zip(after.all_mats()) {
            assert_eq!(a, b);
        }
    }
}
