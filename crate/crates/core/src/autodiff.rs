//! Reverse-mode differentiation over the primitive set the solvers need:
//! 1D convolution and its transpose, row concatenation/slicing, scalar
//! scaling, addition, the rigid MLS warp, per-column L2 norms and summation,
//! plus an Adam stepper.
//!
//! Values are eager: each op computes its result when recorded on the tape.
//! Matrices are (rows, cols) with coordinate sets laid out (2, N).

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mls::{WarpForward, WarpPrecomp};

/// Hyperparameters of a 1D (transposed) convolution layer. Kernels are stored
/// as flattened matrices: conv (c_out, c_in*k), transposed (c_in, c_out*k),
/// with the tap index fastest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn out_len(&self, l_in: usize) -> Result<usize> {
        let span = self.dilation * (self.k - 1) + 1;
        let padded = l_in + 2 * self.padding;
        if padded < span {
            return Err(Error::Shape {
                layer: "conv1d".into(),
                detail: format!("input length {l_in} too short for kernel span {span}"),
            });
        }
        Ok((padded - span) / self.stride + 1)
    }

    pub fn transposed_out_len(&self, l_in: usize) -> Result<usize> {
        let grow = (l_in - 1) * self.stride + self.dilation * (self.k - 1) + 1;
        if grow < 2 * self.padding + 1 {
            return Err(Error::Shape {
                layer: "conv1d_transposed".into(),
                detail: format!("padding {} too large for input length {l_in}", self.padding),
            });
        }
        Ok(grow - 2 * self.padding)
    }

    /// The same hyperparameters with input/output channel roles swapped; a
    /// transposed convolution is the adjoint of this conv.
    fn swapped(&self) -> ConvSpec {
        ConvSpec { c_in: self.c_out, c_out: self.c_in, ..*self }
    }

    pub fn conv_kernel_dims(&self) -> (usize, usize) {
        (self.c_out, self.c_in * self.k)
    }

    pub fn transposed_kernel_dims(&self) -> (usize, usize) {
        (self.c_in, self.c_out * self.k)
    }
}

// ---------------------------------------------------------------------------
// Convolution kernels (im2col / col2im + blocked matmul)
// ---------------------------------------------------------------------------

/// Deterministic parallel matmul: fixed 64-row blocks of `a`, each computed
/// by a sequential GEMM, so results do not depend on the thread count.
fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    const BLOCK: usize = 64;
    let (m, _) = a.dim();
    let n = b.ncols();
    if m <= BLOCK {
        return a.dot(&b);
    }
    let mut out = Array2::zeros((m, n));
    let blocks: Vec<(usize, Array2<f64>)> = (0..m)
        .step_by(BLOCK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|r0| {
            let r1 = (r0 + BLOCK).min(m);
            (r0, a.slice(s![r0..r1, ..]).dot(&b))
        })
        .collect();
    for (r0, block) in blocks {
        let r1 = r0 + block.nrows();
        out.slice_mut(s![r0..r1, ..]).assign(&block);
    }
    out
}

fn im2col(x: &Array2<f64>, spec: &ConvSpec, l_out: usize) -> Array2<f64> {
    let (c, l) = x.dim();
    let mut cols = Array2::zeros((c * spec.k, l_out));
    for ci in 0..c {
        for t in 0..spec.k {
            let row = ci * spec.k + t;
            for o in 0..l_out {
                let j = (o * spec.stride + t * spec.dilation) as isize - spec.padding as isize;
                if j >= 0 && (j as usize) < l {
                    cols[[row, o]] = x[[ci, j as usize]];
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, l: usize, spec: &ConvSpec) -> Array2<f64> {
    let l_out = cols.ncols();
    let mut x = Array2::zeros((c, l));
    for ci in 0..c {
        for t in 0..spec.k {
            let row = ci * spec.k + t;
            for o in 0..l_out {
                let j = (o * spec.stride + t * spec.dilation) as isize - spec.padding as isize;
                if j >= 0 && (j as usize) < l {
                    x[[ci, j as usize]] += cols[[row, o]];
                }
            }
        }
    }
    x
}

fn conv_fwd(x: &Array2<f64>, kernel: &Array2<f64>, spec: &ConvSpec) -> Result<Array2<f64>> {
    let l_out = spec.out_len(x.ncols())?;
    let cols = im2col(x, spec, l_out);
    Ok(par_matmul(kernel.view(), cols.view()))
}

fn conv_bwd_data(
    g: &Array2<f64>,
    kernel: &Array2<f64>,
    spec: &ConvSpec,
    l_in: usize,
) -> Array2<f64> {
    let cols = par_matmul(kernel.t(), g.view());
    col2im(&cols, spec.c_in, l_in, spec)
}

fn conv_bwd_kernel(x: &Array2<f64>, g: &Array2<f64>, spec: &ConvSpec) -> Array2<f64> {
    let cols = im2col(x, spec, g.ncols());
    par_matmul(g.view(), cols.t())
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

/// Index of a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Clone, Debug)]
enum Payload {
    Mat(Array2<f64>),
    Scalar(f64),
}

enum Op {
    Leaf,
    Conv { x: ValueId, kernel: ValueId, spec: ConvSpec },
    ConvT { x: ValueId, kernel: ValueId, spec: ConvSpec },
    ConcatRows { parts: Vec<ValueId> },
    SliceRows { x: ValueId, start: usize, len: usize },
    Scale { x: ValueId, factor: f64 },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    ColNorms { x: ValueId },
    Sum { x: ValueId },
    FrobNorm { x: ValueId },
    MlsWarp { qhat: ValueId, precomp: Rc<WarpPrecomp>, fwd: Box<WarpForward> },
}

struct Node {
    payload: Payload,
    needs_grad: bool,
    op: Op,
}

/// A topologically ordered record of primitive applications with cached
/// forward values. Build a graph, then call [`Tape::backward`] once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass. Constant leaves that no
/// parameter flows through carry no gradient.
pub struct Gradients {
    grads: Vec<Option<Payload>>,
}

impl Gradients {
    pub fn mat(&self, id: ValueId) -> Option<&Array2<f64>> {
        match self.grads.get(id.0)? {
            Some(Payload::Mat(m)) => Some(m),
            _ => None,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, payload: Payload, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { payload, needs_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a constant; the backward pass allocates no gradient for it.
    pub fn constant(&mut self, value: Array2<f64>) -> ValueId {
        self.push(Payload::Mat(value), false, Op::Leaf)
    }

    /// Record a differentiable parameter leaf.
    pub fn param(&mut self, value: Array2<f64>) -> ValueId {
        self.push(Payload::Mat(value), true, Op::Leaf)
    }

    pub fn mat(&self, id: ValueId) -> &Array2<f64> {
        match &self.nodes[id.0].payload {
            Payload::Mat(m) => m,
            Payload::Scalar(_) => panic!("value {} is a scalar", id.0),
        }
    }

    pub fn scalar(&self, id: ValueId) -> Result<f64> {
        match &self.nodes[id.0].payload {
            Payload::Scalar(v) => Ok(*v),
            Payload::Mat(_) => {
                Err(Error::Param(format!("value {} is not a scalar", id.0)))
            }
        }
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Cross-correlation with zero padding; input (c_in, L), kernel
    /// (c_out, c_in*k), output (c_out, L_out). No bias term.
    pub fn conv1d(&mut self, x: ValueId, kernel: ValueId, spec: ConvSpec) -> Result<ValueId> {
        let xv = self.mat(x);
        let kv = self.mat(kernel);
        if xv.nrows() != spec.c_in {
            return Err(Error::Shape {
                layer: "conv1d".into(),
                detail: format!("input has {} channels, spec wants {}", xv.nrows(), spec.c_in),
            });
        }
        if kv.dim() != spec.conv_kernel_dims() {
            return Err(Error::Shape {
                layer: "conv1d".into(),
                detail: format!("kernel shape {:?}, spec wants {:?}", kv.dim(), spec.conv_kernel_dims()),
            });
        }
        let out = conv_fwd(xv, kv, &spec)?;
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(Payload::Mat(out), needs, Op::Conv { x, kernel, spec }))
    }

    /// Adjoint of [`Tape::conv1d`] with the same hyperparameters; input
    /// (c_in, L), kernel (c_in, c_out*k), output (c_out, L_out).
    pub fn conv1d_transposed(
        &mut self,
        x: ValueId,
        kernel: ValueId,
        spec: ConvSpec,
    ) -> Result<ValueId> {
        let xv = self.mat(x);
        let kv = self.mat(kernel);
        if xv.nrows() != spec.c_in {
            return Err(Error::Shape {
                layer: "conv1d_transposed".into(),
                detail: format!("input has {} channels, spec wants {}", xv.nrows(), spec.c_in),
            });
        }
        if kv.dim() != spec.transposed_kernel_dims() {
            return Err(Error::Shape {
                layer: "conv1d_transposed".into(),
                detail: format!(
                    "kernel shape {:?}, spec wants {:?}",
                    kv.dim(),
                    spec.transposed_kernel_dims()
                ),
            });
        }
        let l_out = spec.transposed_out_len(xv.ncols())?;
        let swapped = spec.swapped();
        // Adjoint consistency: the virtual forward conv must map L_out back
        // to this input length.
        let back = swapped.out_len(l_out)?;
        if back != xv.ncols() {
            return Err(Error::Shape {
                layer: "conv1d_transposed".into(),
                detail: format!("output length {l_out} maps back to {back}, not {}", xv.ncols()),
            });
        }
        let out = conv_bwd_data(xv, kv, &swapped, l_out);
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(Payload::Mat(out), needs, Op::ConvT { x, kernel, spec }))
    }

    /// Stack matrices vertically (shared column count).
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Param("concat_rows needs at least one part".into()));
        }
        let ncols = self.mat(parts[0]).ncols();
        let mut rows = 0;
        for &p in parts {
            let m = self.mat(p);
            if m.ncols() != ncols {
                return Err(Error::Shape {
                    layer: "concat".into(),
                    detail: format!("column counts differ: {} vs {}", m.ncols(), ncols),
                });
            }
            rows += m.nrows();
        }
        let mut out = Array2::zeros((rows, ncols));
        let mut r = 0;
        for &p in parts {
            let m = self.mat(p);
            out.slice_mut(s![r..r + m.nrows(), ..]).assign(m);
            r += m.nrows();
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Payload::Mat(out), needs, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let m = self.mat(x);
        if start + len > m.nrows() {
            return Err(Error::Shape {
                layer: "slice".into(),
                detail: format!("rows {start}..{} out of {}", start + len, m.nrows()),
            });
        }
        let out = m.slice(s![start..start + len, ..]).to_owned();
        let needs = self.needs(x);
        Ok(self.push(Payload::Mat(out), needs, Op::SliceRows { x, start, len }))
    }

    /// Multiply by a constant scalar factor.
    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        let payload = match &self.nodes[x.0].payload {
            Payload::Mat(m) => Payload::Mat(m * factor),
            Payload::Scalar(v) => Payload::Scalar(v * factor),
        };
        let needs = self.needs(x);
        self.push(payload, needs, Op::Scale { x, factor })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let payload = self.elementwise(a, b, false)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(payload, needs, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let payload = self.elementwise(a, b, true)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(payload, needs, Op::Sub { a, b }))
    }

    fn elementwise(&self, a: ValueId, b: ValueId, sub: bool) -> Result<Payload> {
        match (&self.nodes[a.0].payload, &self.nodes[b.0].payload) {
            (Payload::Mat(ma), Payload::Mat(mb)) => {
                if ma.dim() != mb.dim() {
                    return Err(Error::Shape {
                        layer: "add".into(),
                        detail: format!("shapes {:?} vs {:?}", ma.dim(), mb.dim()),
                    });
                }
                Ok(Payload::Mat(if sub { ma - mb } else { ma + mb }))
            }
            (Payload::Scalar(va), Payload::Scalar(vb)) => {
                Ok(Payload::Scalar(if sub { va - vb } else { va + vb }))
            }
            _ => Err(Error::Shape {
                layer: "add".into(),
                detail: "cannot mix scalar and matrix operands".into(),
            }),
        }
    }

    /// Euclidean norm of each column of a (2, N) matrix, as a (1, N) row.
    pub fn col_norms(&mut self, x: ValueId) -> Result<ValueId> {
        let m = self.mat(x);
        if m.nrows() != 2 {
            return Err(Error::Shape {
                layer: "col_norms".into(),
                detail: format!("expected 2 rows, got {}", m.nrows()),
            });
        }
        let mut out = Array2::zeros((1, m.ncols()));
        for j in 0..m.ncols() {
            out[[0, j]] = (m[[0, j]] * m[[0, j]] + m[[1, j]] * m[[1, j]]).sqrt();
        }
        let needs = self.needs(x);
        Ok(self.push(Payload::Mat(out), needs, Op::ColNorms { x }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let m = self.mat(x);
        let total = m.sum();
        let needs = self.needs(x);
        Ok(self.push(Payload::Scalar(total), needs, Op::Sum { x }))
    }

    /// Frobenius norm of a matrix, as a scalar.
    pub fn frobenius_norm(&mut self, x: ValueId) -> Result<ValueId> {
        let m = self.mat(x);
        let total = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let needs = self.needs(x);
        Ok(self.push(Payload::Scalar(total), needs, Op::FrobNorm { x }))
    }

    /// Rigid MLS warp with precomputed weights; `qhat` is (2, n_nodes), the
    /// output is (2, n_points). Differentiable in the target nodes only.
    pub fn mls_warp(&mut self, precomp: Rc<WarpPrecomp>, qhat: ValueId) -> Result<ValueId> {
        let fwd = precomp.forward(self.mat(qhat))?;
        let needs = self.needs(qhat);
        let out = fwd.output.clone();
        Ok(self.push(Payload::Mat(out), needs, Op::MlsWarp { qhat, precomp, fwd: Box::new(fwd) }))
    }

    /// Reverse pass from a scalar loss. Errors when `loss` is not a scalar.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        match &self.nodes[loss.0].payload {
            Payload::Scalar(_) => {}
            Payload::Mat(_) => {
                return Err(Error::Param("backward requires a scalar loss output".into()))
            }
        }
        let mut grads: Vec<Option<Payload>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Payload::Scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for extraction
                    continue;
                }
                Op::Conv { x, kernel, spec } => {
                    let gm = as_mat(&g);
                    let xv = self.mat(*x);
                    let kv = self.mat(*kernel);
                    if self.needs(*x) {
                        let gx = conv_bwd_data(gm, kv, spec, xv.ncols());
                        accumulate(&mut grads, *x, Payload::Mat(gx));
                    }
                    if self.needs(*kernel) {
                        let gk = conv_bwd_kernel(xv, gm, spec);
                        accumulate(&mut grads, *kernel, Payload::Mat(gk));
                    }
                }
                Op::ConvT { x, kernel, spec } => {
                    let gm = as_mat(&g);
                    let xv = self.mat(*x);
                    let kv = self.mat(*kernel);
                    let swapped = spec.swapped();
                    if self.needs(*x) {
                        let gx = conv_fwd(gm, kv, &swapped)?;
                        accumulate(&mut grads, *x, Payload::Mat(gx));
                    }
                    if self.needs(*kernel) {
                        let gk = conv_bwd_kernel(gm, xv, &swapped);
                        accumulate(&mut grads, *kernel, Payload::Mat(gk));
                    }
                }
                Op::ConcatRows { parts } => {
                    let gm = as_mat(&g);
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.mat(p).nrows();
                        if self.needs(p) {
                            let slice = gm.slice(s![r..r + rows, ..]).to_owned();
                            accumulate(&mut grads, p, Payload::Mat(slice));
                        }
                        r += rows;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let gm = as_mat(&g);
                    let full = self.mat(*x);
                    let mut gx = Array2::zeros(full.dim());
                    gx.slice_mut(s![*start..*start + *len, ..]).assign(gm);
                    accumulate(&mut grads, *x, Payload::Mat(gx));
                }
                Op::Scale { x, factor } => {
                    let gx = match &g {
                        Payload::Mat(m) => Payload::Mat(m * *factor),
                        Payload::Scalar(v) => Payload::Scalar(v * factor),
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        let neg = match &g {
                            Payload::Mat(m) => Payload::Mat(m * -1.0),
                            Payload::Scalar(v) => Payload::Scalar(-v),
                        };
                        accumulate(&mut grads, *b, neg);
                    }
                }
                Op::ColNorms { x } => {
                    let gm = as_mat(&g);
                    let xv = self.mat(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for j in 0..xv.ncols() {
                        let r = (xv[[0, j]] * xv[[0, j]] + xv[[1, j]] * xv[[1, j]]).sqrt();
                        if r > 0.0 {
                            gx[[0, j]] = gm[[0, j]] * xv[[0, j]] / r;
                            gx[[1, j]] = gm[[0, j]] * xv[[1, j]] / r;
                        }
                    }
                    accumulate(&mut grads, *x, Payload::Mat(gx));
                }
                Op::Sum { x } => {
                    let gv = as_scalar(&g);
                    let xv = self.mat(*x);
                    accumulate(&mut grads, *x, Payload::Mat(Array2::from_elem(xv.dim(), gv)));
                }
                Op::FrobNorm { x } => {
                    let gv = as_scalar(&g);
                    let xv = self.mat(*x);
                    let norm = xv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gx = if norm > 0.0 { xv * (gv / norm) } else { Array2::zeros(xv.dim()) };
                    accumulate(&mut grads, *x, Payload::Mat(gx));
                }
                Op::MlsWarp { qhat, precomp, fwd } => {
                    let gm = as_mat(&g);
                    let gq = precomp.backward(fwd, gm);
                    accumulate(&mut grads, *qhat, Payload::Mat(gq));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn as_mat(p: &Payload) -> &Array2<f64> {
    match p {
        Payload::Mat(m) => m,
        Payload::Scalar(_) => unreachable!("matrix gradient expected"),
    }
}

fn as_scalar(p: &Payload) -> f64 {
    match p {
        Payload::Scalar(v) => *v,
        Payload::Mat(_) => unreachable!("scalar gradient expected"),
    }
}

fn accumulate(grads: &mut [Option<Payload>], id: ValueId, g: Payload) {
    match (&mut grads[id.0], g) {
        (slot @ None, g) => *slot = Some(g),
        (Some(Payload::Mat(acc)), Payload::Mat(m)) => *acc += &m,
        (Some(Payload::Scalar(acc)), Payload::Scalar(v)) => *acc += v,
        _ => unreachable!("gradient kind mismatch"),
    }
}

/// Evaluate `build` over parameter leaves and return the scalar loss and the
/// gradient for every parameter (zeros when a parameter does not reach the
/// loss).
pub fn value_and_grad<F>(params: &[Array2<f64>], build: F) -> Result<(f64, Vec<Array2<f64>>)>
where
    F: FnOnce(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    let mut tape = Tape::new();
    let ids: Vec<ValueId> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let value = tape.scalar(loss).map_err(|_| {
        Error::Param("value_and_grad requires the built graph to output a scalar".into())
    })?;
    let grads = tape.backward(loss)?;
    let out = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| grads.mat(id).cloned().unwrap_or_else(|| Array2::zeros(p.dim())))
        .collect();
    Ok((value, out))
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam hyperparameters. The epsilon guard is the standard 1e-8.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    hp: AdamParams,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(shapes: &[usize], hp: AdamParams) -> Self {
        Self {
            hp,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with bias correction. `params` and `grads` must match the
    /// shapes the state was created with.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                layer: "adam".into(),
                detail: format!(
                    "expected {} parameter tensors, got {} params / {} grads",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.hp.beta1.powi(t);
        let bc2 = 1.0 - self.hp.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape {
                    layer: "adam".into(),
                    detail: format!("tensor length {} vs state {}", p.len(), m.len()),
                });
            }
            for i in 0..p.len() {
                m[i] = self.hp.beta1 * m[i] + (1.0 - self.hp.beta1) * g[i];
                v[i] = self.hp.beta2 * v[i] + (1.0 - self.hp.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.hp.lr * mhat / (vhat.sqrt() + self.hp.eps);
            }
        }
        Ok(())
    }
}

/// Flatten-and-step helper for `ndarray` parameters.
pub fn adam_step_arrays(
    state: &mut AdamState,
    params: &mut [Array2<f64>],
    grads: &[Array2<f64>],
) -> Result<()> {
    let g: Vec<&[f64]> = grads.iter().map(|g| g.as_slice().expect("standard layout")).collect();
    let mut p: Vec<&mut [f64]> =
        params.iter_mut().map(|p| p.as_slice_mut().expect("standard layout")).collect();
    state.step(&mut p, &g)
}

/// Used by `Axis`-free callers; re-exported for convenience in tests.
pub fn mean_axis0(x: &Array2<f64>) -> Vec<f64> {
    x.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default()
}
