//! Rigid moving-least-squares warping of points and rasters, plus the sparse
//! grid approximation used for real-time frame rendering.
//!
//! The per-point kernel follows the rigid MLS construction: inverse-distance
//! weights w_i = 1/|v - q_i|^(2α), weighted centroids of source and target
//! nodes, and a normalized rotation estimated from the centered node pairs.
//! Treating 2D vectors as complex numbers, the per-node rotation sum collapses
//! to a single complex accumulator z = Σ w_i (q̂_i - ĉ) conj(q_i - c), and the
//! warped point is v̂ = ĉ + |v - c| · z(v - c)/|z(v - c)|.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{validate_finite, Point2, PointSet};

/// Parameters of the rigid MLS kernel.
#[derive(Clone, Copy, Debug)]
pub struct MlsConfig {
    /// Weight exponent; small values keep the warp field smooth.
    pub alpha: f64,
    /// Radius below which a query point snaps to the nearest node.
    pub epsilon_snap: f64,
}

impl Default for MlsConfig {
    fn default() -> Self {
        Self { alpha: 0.3, epsilon_snap: 1e-6 }
    }
}

impl MlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Param(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.epsilon_snap > 0.0) {
            return Err(Error::Param(format!(
                "epsilon_snap must be > 0, got {}",
                self.epsilon_snap
            )));
        }
        Ok(())
    }
}

/// Index-aligned source and target warp nodes (Q, Q̂).
#[derive(Clone, Debug)]
pub struct NodePair {
    source: PointSet,
    target: PointSet,
}

impl NodePair {
    pub fn new(source: PointSet, target: PointSet) -> Result<Self> {
        if source.nrows() != target.nrows() {
            return Err(Error::Data(format!(
                "node counts differ: {} source vs {} target",
                source.nrows(),
                target.nrows()
            )));
        }
        if source.nrows() == 0 {
            return Err(Error::Data("node pair is empty".into()));
        }
        validate_finite(&source, "source nodes")?;
        validate_finite(&target, "target nodes")?;
        Ok(Self { source, target })
    }

    /// Identity pair: every node maps to itself.
    pub fn identity(nodes: PointSet) -> Result<Self> {
        Self::new(nodes.clone(), nodes)
    }

    pub fn from_displacement(source: PointSet, displacement: &Array2<f64>) -> Result<Self> {
        if displacement.dim() != source.dim() {
            return Err(Error::Data(format!(
                "displacement shape {:?} does not match nodes {:?}",
                displacement.dim(),
                source.dim()
            )));
        }
        let target = &source + displacement;
        Self::new(source, target)
    }

    pub fn source(&self) -> &PointSet {
        &self.source
    }

    pub fn target(&self) -> &PointSet {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.source.nrows() == 0
    }

    /// Swap source and target roles (used for backward frame mapping).
    pub fn swapped(&self) -> NodePair {
        NodePair { source: self.target.clone(), target: self.source.clone() }
    }

    /// True when target equals source bit for bit, i.e. the warp is exactly
    /// the identity map.
    pub fn is_identity(&self) -> bool {
        self.source == self.target
    }
}

/// Flat [x0, y0, x1, y1, ...] views of a node pair, the layout the kernel
/// iterates over.
fn flat(set: &PointSet) -> &[f64] {
    set.as_slice().expect("point sets are standard layout")
}

pub(crate) enum WarpOutcome {
    Snap(usize),
    Point([f64; 2]),
    Degenerate,
}

/// Single-point rigid MLS kernel. `w_buf` is scratch for the per-node weights
/// so bulk callers can reuse one allocation per thread.
pub(crate) fn warp_kernel(
    vx: f64,
    vy: f64,
    src: &[f64],
    dst: &[f64],
    cfg: &MlsConfig,
    w_buf: &mut Vec<f64>,
) -> WarpOutcome {
    let n = src.len() / 2;
    let eps2 = cfg.epsilon_snap * cfg.epsilon_snap;
    w_buf.clear();
    w_buf.reserve(n);

    let mut sw = 0.0;
    let mut swq = [0.0f64; 2];
    let mut swqh = [0.0f64; 2];
    for i in 0..n {
        let qx = src[2 * i];
        let qy = src[2 * i + 1];
        let dx = vx - qx;
        let dy = vy - qy;
        let d2 = dx * dx + dy * dy;
        if d2 < eps2 {
            return WarpOutcome::Snap(i);
        }
        let w = d2.powf(-cfg.alpha);
        w_buf.push(w);
        sw += w;
        swq[0] += w * qx;
        swq[1] += w * qy;
        swqh[0] += w * dst[2 * i];
        swqh[1] += w * dst[2 * i + 1];
    }

    let cx = swq[0] / sw;
    let cy = swq[1] / sw;
    let chx = swqh[0] / sw;
    let chy = swqh[1] / sw;
    let ux = vx - cx;
    let uy = vy - cy;
    let nu = (ux * ux + uy * uy).sqrt();
    if nu == 0.0 {
        // v coincides with the weighted centroid; the normalized direction is
        // scaled by |v - c| = 0, so the limit is the target centroid.
        return WarpOutcome::Point([chx, chy]);
    }

    // z = Σ w_i (q̂*_i) conj(q*_i), accumulated with explicit centering.
    let mut zr = 0.0;
    let mut zi = 0.0;
    for i in 0..n {
        let w = w_buf[i];
        let qsx = src[2 * i] - cx;
        let qsy = src[2 * i + 1] - cy;
        let qhx = dst[2 * i] - chx;
        let qhy = dst[2 * i + 1] - chy;
        // (qhx + i qhy) * (qsx - i qsy)
        zr += w * (qhx * qsx + qhy * qsy);
        zi += w * (qhy * qsx - qhx * qsy);
    }
    // s = z * u
    let sx = zr * ux - zi * uy;
    let sy = zi * ux + zr * uy;
    let ns = (sx * sx + sy * sy).sqrt();
    if ns < 1e-12 {
        return WarpOutcome::Degenerate;
    }
    WarpOutcome::Point([chx + nu * sx / ns, chy + nu * sy / ns])
}

/// Warp a single point by the rigid MLS transform defined by `nodes`.
pub fn mls_warp_point(v: Point2, nodes: &NodePair, cfg: &MlsConfig) -> Result<Point2> {
    cfg.validate()?;
    if nodes.is_identity() {
        return Ok(v);
    }
    let src = flat(nodes.source());
    let dst = flat(nodes.target());
    let mut w_buf = Vec::new();
    match warp_kernel(v.x, v.y, src, dst, cfg, &mut w_buf) {
        WarpOutcome::Snap(i) => Ok(Point2::new(dst[2 * i], dst[2 * i + 1])),
        WarpOutcome::Point([x, y]) => Ok(Point2::new(x, y)),
        WarpOutcome::Degenerate => Err(Error::DegenerateWarp {
            context: format!("point ({:.3}, {:.3})", v.x, v.y),
        }),
    }
}

/// Element-wise [`mls_warp_point`] over a point set; output is index-aligned
/// with the input. Evaluation is data-parallel with a fixed per-point node
/// order, so results are identical under any thread schedule.
pub fn mls_warp_points(points: &PointSet, nodes: &NodePair, cfg: &MlsConfig) -> Result<PointSet> {
    cfg.validate()?;
    if nodes.is_identity() {
        return Ok(points.clone());
    }
    let src = flat(nodes.source());
    let dst = flat(nodes.target());
    let n = points.nrows();
    let pts = flat(points);

    let results: Vec<std::result::Result<[f64; 2], usize>> = (0..n)
        .into_par_iter()
        .map_init(Vec::new, |w_buf, i| {
            match warp_kernel(pts[2 * i], pts[2 * i + 1], src, dst, cfg, w_buf) {
                WarpOutcome::Snap(j) => Ok([dst[2 * j], dst[2 * j + 1]]),
                WarpOutcome::Point(p) => Ok(p),
                WarpOutcome::Degenerate => Err(i),
            }
        })
        .collect();

    let mut out = Array2::zeros((n, 2));
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok([x, y]) => {
                out[[i, 0]] = x;
                out[[i, 1]] = y;
            }
            Err(idx) => {
                return Err(Error::DegenerateWarp { context: format!("point index {idx}") })
            }
        }
    }
    Ok(out)
}

/// A regular lattice over [0, width] x [0, height] whose vertices carry the
/// MLS warp, approximating the dense field by bilinear interpolation.
#[derive(Clone, Debug)]
pub struct WarpGrid {
    cols: usize,
    rows: usize,
    width: f64,
    height: f64,
    vertices: PointSet,
    warped: Option<PointSet>,
}

impl WarpGrid {
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn vertex_count(&self) -> usize {
        (self.cols + 1) * (self.rows + 1)
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (self.width / self.cols as f64, self.height / self.rows as f64)
    }

    pub fn vertices(&self) -> &PointSet {
        &self.vertices
    }

    pub fn warped_vertices(&self) -> Option<&PointSet> {
        self.warped.as_ref()
    }

    /// Enclosing cell of `v` and its four bilinear weights, ordered
    /// (top-left, top-right, bottom-left, bottom-right). Out-of-coverage
    /// queries are clamped to the boundary cell.
    pub fn cell_and_weights(&self, v: Point2) -> ((usize, usize), [f64; 4]) {
        let (cw, ch) = self.cell_size();
        // Snap to the lattice when the division lands within float noise of a
        // vertex, so lattice queries reproduce vertex values exactly.
        let snap = |g: f64| {
            let r = g.round();
            if (g - r).abs() < 1e-9 {
                r
            } else {
                g
            }
        };
        let gx = snap(v.x / cw).clamp(0.0, self.cols as f64);
        let gy = snap(v.y / ch).clamp(0.0, self.rows as f64);
        let ix = (gx.floor() as usize).min(self.cols - 1);
        let iy = (gy.floor() as usize).min(self.rows - 1);
        let fx = (gx - ix as f64).clamp(0.0, 1.0);
        let fy = (gy - iy as f64).clamp(0.0, 1.0);
        (
            (ix, iy),
            [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        )
    }

    fn vertex_index(&self, ix: usize, iy: usize) -> usize {
        iy * (self.cols + 1) + ix
    }
}

/// Build the source lattice; `cols` x `rows` counts cells, so the grid has
/// (cols+1)(rows+1) vertices.
pub fn build_grid(width: f64, height: f64, cols: usize, rows: usize) -> Result<WarpGrid> {
    if cols < 1 || rows < 1 {
        return Err(Error::Param(format!("grid must have at least 1x1 cells, got {cols}x{rows}")));
    }
    if !(width > 0.0) || !(height > 0.0) {
        return Err(Error::Param(format!("grid extent must be positive, got {width}x{height}")));
    }
    let mut vertices = Array2::zeros(((cols + 1) * (rows + 1), 2));
    for iy in 0..=rows {
        for ix in 0..=cols {
            let j = iy * (cols + 1) + ix;
            vertices[[j, 0]] = width * ix as f64 / cols as f64;
            vertices[[j, 1]] = height * iy as f64 / rows as f64;
        }
    }
    Ok(WarpGrid { cols, rows, width, height, vertices, warped: None })
}

/// Warp every lattice vertex through the dense MLS kernel; the source lattice
/// is unchanged.
pub fn warp_grid(grid: &WarpGrid, nodes: &NodePair, cfg: &MlsConfig) -> Result<WarpGrid> {
    let warped = mls_warp_points(&grid.vertices, nodes, cfg).map_err(|e| match e {
        Error::DegenerateWarp { context } => {
            Error::DegenerateWarp { context: format!("grid vertex {context}") }
        }
        other => other,
    })?;
    Ok(WarpGrid { warped: Some(warped), ..grid.clone() })
}

/// Bilinear interpolation of the four enclosing warped vertices.
pub fn grid_warp_point(v: Point2, grid: &WarpGrid) -> Result<Point2> {
    let warped = grid
        .warped
        .as_ref()
        .ok_or_else(|| Error::Param("grid has not been warped yet".into()))?;
    let ((ix, iy), w) = grid.cell_and_weights(v);
    let idx = [
        grid.vertex_index(ix, iy),
        grid.vertex_index(ix + 1, iy),
        grid.vertex_index(ix, iy + 1),
        grid.vertex_index(ix + 1, iy + 1),
    ];
    let mut x = 0.0;
    let mut y = 0.0;
    for k in 0..4 {
        x += w[k] * warped[[idx[k], 0]];
        y += w[k] * warped[[idx[k], 1]];
    }
    Ok(Point2::new(x, y))
}

/// Iteration-invariant part of warping a fixed point set by a fixed source
/// node set: the weights and centroids depend only on (points, Q), so a
/// solver that repeatedly re-evaluates the warp for varying targets Q̂ builds
/// this once. Complex 2-vectors are stored as (re, im) pairs.
#[derive(Debug)]
pub struct WarpPrecomp {
    n_points: usize,
    n_nodes: usize,
    /// Snap target index for points inside the snap radius of a node.
    snap: Vec<Option<usize>>,
    /// Per-(point, node) weights w_i; rows of snapped points are zero.
    w: Array2<f64>,
    /// Per-(point, node) w_i * conj(q_i - c) as interleaved (re, im).
    wcq: Array2<f64>,
    sum_w: Vec<f64>,
    /// u = v - c per point.
    u: Vec<[f64; 2]>,
    norm_u: Vec<f64>,
    /// S2 = Σ wcq_i per point; zero in exact arithmetic, kept so the backward
    /// pass is the exact adjoint of the implemented forward.
    s2: Vec<[f64; 2]>,
}

/// Values cached by a precomputed forward pass, consumed by the backward.
#[derive(Clone, Debug)]
pub struct WarpForward {
    /// Warped points, (2, n_points): row 0 x, row 1 y.
    pub output: Array2<f64>,
    pub(crate) m: Vec<[f64; 2]>,
    pub(crate) norm_m: Vec<f64>,
}

impl WarpPrecomp {
    /// Precompute for warping `points` with source nodes `source_q`.
    pub fn new(points: &PointSet, source_q: &PointSet, cfg: &MlsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = points.nrows();
        let m = source_q.nrows();
        if m == 0 {
            return Err(Error::Data("node set is empty".into()));
        }
        let pts = flat(points);
        let src = flat(source_q);
        let eps2 = cfg.epsilon_snap * cfg.epsilon_snap;

        struct Row {
            w: Vec<f64>,
            wcq: Vec<f64>,
            snap: Option<usize>,
            sum_w: f64,
            u: [f64; 2],
            norm_u: f64,
            s2: [f64; 2],
        }

        // The weight computation is the expensive part (one powf per
        // point-node pair); rows are independent, so compute them in parallel.
        let rows: Vec<Row> = (0..n)
            .into_par_iter()
            .map(|p| {
                let vx = pts[2 * p];
                let vy = pts[2 * p + 1];
                let mut row = Row {
                    w: vec![0.0; m],
                    wcq: vec![0.0; 2 * m],
                    snap: None,
                    sum_w: 0.0,
                    u: [0.0; 2],
                    norm_u: 0.0,
                    s2: [0.0; 2],
                };
                let mut sw = 0.0;
                let mut swq = [0.0f64; 2];
                for i in 0..m {
                    let dx = vx - src[2 * i];
                    let dy = vy - src[2 * i + 1];
                    let d2 = dx * dx + dy * dy;
                    if d2 < eps2 {
                        row.w.iter_mut().for_each(|v| *v = 0.0);
                        row.snap = Some(i);
                        return row;
                    }
                    let wi = d2.powf(-cfg.alpha);
                    row.w[i] = wi;
                    sw += wi;
                    swq[0] += wi * src[2 * i];
                    swq[1] += wi * src[2 * i + 1];
                }
                let cx = swq[0] / sw;
                let cy = swq[1] / sw;
                row.sum_w = sw;
                row.u = [vx - cx, vy - cy];
                row.norm_u = (row.u[0] * row.u[0] + row.u[1] * row.u[1]).sqrt();
                for i in 0..m {
                    let wi = row.w[i];
                    // conj(q - c)
                    let re = wi * (src[2 * i] - cx);
                    let im = -wi * (src[2 * i + 1] - cy);
                    row.wcq[2 * i] = re;
                    row.wcq[2 * i + 1] = im;
                    row.s2[0] += re;
                    row.s2[1] += im;
                }
                row
            })
            .collect();

        let mut snap = vec![None; n];
        let mut w = Array2::zeros((n, m));
        let mut wcq = Array2::zeros((n, 2 * m));
        let mut sum_w = vec![0.0; n];
        let mut u = vec![[0.0; 2]; n];
        let mut norm_u = vec![0.0; n];
        let mut s2 = vec![[0.0; 2]; n];
        for (p, row) in rows.into_iter().enumerate() {
            w.row_mut(p).as_slice_mut().expect("standard layout").copy_from_slice(&row.w);
            wcq.row_mut(p).as_slice_mut().expect("standard layout").copy_from_slice(&row.wcq);
            snap[p] = row.snap;
            sum_w[p] = row.sum_w;
            u[p] = row.u;
            norm_u[p] = row.norm_u;
            s2[p] = row.s2;
        }
        Ok(Self { n_points: n, n_nodes: m, snap, w, wcq, sum_w, u, norm_u, s2 })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Evaluate the warp for target nodes `qhat`, laid out (2, n_nodes):
    /// row 0 holds x coordinates, row 1 holds y. Points are processed in
    /// fixed-size chunks in parallel; per-point node sums are sequential, so
    /// results do not depend on the thread schedule.
    pub fn forward(&self, qhat: &Array2<f64>) -> Result<WarpForward> {
        if qhat.dim() != (2, self.n_nodes) {
            return Err(Error::Data(format!(
                "qhat shape {:?} does not match (2, {})",
                qhat.dim(),
                self.n_nodes
            )));
        }
        let qh = flat_any(qhat);
        let m = self.n_nodes;
        let n = self.n_points;

        struct ChunkOut {
            start: usize,
            out: Vec<[f64; 2]>,
            mm: Vec<[f64; 2]>,
            norm_m: Vec<f64>,
        }

        let chunks: Vec<std::result::Result<ChunkOut, usize>> = (0..n)
            .step_by(PAR_CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + PAR_CHUNK).min(n);
                let len = end - start;
                let mut co = ChunkOut {
                    start,
                    out: vec![[0.0; 2]; len],
                    mm: vec![[0.0; 2]; len],
                    norm_m: vec![0.0; len],
                };
                for p in start..end {
                    let l = p - start;
                    if let Some(i) = self.snap[p] {
                        co.out[l] = [qh[i], qh[m + i]];
                        continue;
                    }
                    let wrow = &self.w.as_slice().expect("standard layout")[p * m..(p + 1) * m];
                    let wcq =
                        &self.wcq.as_slice().expect("standard layout")[p * 2 * m..(p + 1) * 2 * m];
                    let mut swqh = [0.0f64; 2];
                    let mut z = [0.0f64; 2];
                    for i in 0..m {
                        let wi = wrow[i];
                        let qx = qh[i];
                        let qy = qh[m + i];
                        swqh[0] += wi * qx;
                        swqh[1] += wi * qy;
                        // z += wcq_i * (qx + i qy)
                        let (re, im) = (wcq[2 * i], wcq[2 * i + 1]);
                        z[0] += re * qx - im * qy;
                        z[1] += re * qy + im * qx;
                    }
                    let chx = swqh[0] / self.sum_w[p];
                    let chy = swqh[1] / self.sum_w[p];
                    // z -= chat * S2
                    let s2 = self.s2[p];
                    z[0] -= chx * s2[0] - chy * s2[1];
                    z[1] -= chx * s2[1] + chy * s2[0];

                    let [ux, uy] = self.u[p];
                    let mx = z[0] * ux - z[1] * uy;
                    let my = z[1] * ux + z[0] * uy;
                    let nm = (mx * mx + my * my).sqrt();
                    if self.norm_u[p] == 0.0 {
                        co.out[l] = [chx, chy];
                        co.norm_m[l] = f64::INFINITY; // direction term unused
                        continue;
                    }
                    if nm < 1e-12 {
                        return Err(p);
                    }
                    co.out[l] = [chx + self.norm_u[p] * mx / nm, chy + self.norm_u[p] * my / nm];
                    co.mm[l] = [mx, my];
                    co.norm_m[l] = nm;
                }
                Ok(co)
            })
            .collect();

        let mut output = Array2::zeros((2, n));
        let mut mm = vec![[0.0f64; 2]; n];
        let mut norm_m = vec![0.0f64; n];
        for chunk in chunks {
            let co = chunk
                .map_err(|p| Error::DegenerateWarp { context: format!("point index {p}") })?;
            for l in 0..co.out.len() {
                let p = co.start + l;
                output[[0, p]] = co.out[l][0];
                output[[1, p]] = co.out[l][1];
                mm[p] = co.mm[l];
                norm_m[p] = co.norm_m[l];
            }
        }
        Ok(WarpForward { output, m: mm, norm_m })
    }

    /// Accumulate the gradient with respect to `qhat` (2, n_nodes) given the
    /// upstream gradient on the warped points (2, n_points). Chunked like the
    /// forward pass; chunk results are reduced in fixed order.
    pub fn backward(&self, fwd: &WarpForward, grad_out: &Array2<f64>) -> Array2<f64> {
        let m = self.n_nodes;
        let n = self.n_points;

        let partials: Vec<Vec<f64>> = (0..n)
            .step_by(PAR_CHUNK)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let end = (start + PAR_CHUNK).min(n);
                // Local gq as [x0..xm, y0..ym].
                let mut gq = vec![0.0f64; 2 * m];
                for p in start..end {
                    let gx = grad_out[[0, p]];
                    let gy = grad_out[[1, p]];
                    if gx == 0.0 && gy == 0.0 {
                        continue;
                    }
                    if let Some(i) = self.snap[p] {
                        gq[i] += gx;
                        gq[m + i] += gy;
                        continue;
                    }
                    let gz = if fwd.norm_m[p].is_finite() {
                        // Through y = chat + |u| m/|m|.
                        let nm = fwd.norm_m[p];
                        let [mx, my] = fwd.m[p];
                        let (mhx, mhy) = (mx / nm, my / nm);
                        let dot = mhx * gx + mhy * gy;
                        let scale = self.norm_u[p] / nm;
                        let gmx = scale * (gx - mhx * dot);
                        let gmy = scale * (gy - mhy * dot);
                        // m = z * u  =>  gz = conj(u) * gm
                        let [ux, uy] = self.u[p];
                        (ux * gmx + uy * gmy, ux * gmy - uy * gmx)
                    } else {
                        (0.0, 0.0)
                    };
                    // chat total gradient: direct + through z's centering term
                    // (z -= chat * S2  =>  g_chat += conj(-S2) * gz).
                    let s2 = self.s2[p];
                    let gchx = gx + (-s2[0] * gz.0 - s2[1] * gz.1);
                    let gchy = gy + (-s2[0] * gz.1 + s2[1] * gz.0);
                    let wrow = &self.w.as_slice().expect("standard layout")[p * m..(p + 1) * m];
                    let wcq =
                        &self.wcq.as_slice().expect("standard layout")[p * 2 * m..(p + 1) * 2 * m];
                    let inv_sw = 1.0 / self.sum_w[p];
                    for i in 0..m {
                        let cw = wrow[i] * inv_sw;
                        // conj(wcq_i) * gz
                        let (re, im) = (wcq[2 * i], -wcq[2 * i + 1]);
                        gq[i] += cw * gchx + re * gz.0 - im * gz.1;
                        gq[m + i] += cw * gchy + re * gz.1 + im * gz.0;
                    }
                }
                gq
            })
            .collect();

        let mut gq = Array2::zeros((2, m));
        for part in partials {
            for i in 0..m {
                gq[[0, i]] += part[i];
                gq[[1, i]] += part[m + i];
            }
        }
        gq
    }
}

/// Fixed parallel chunk size; results are identical for any thread count.
const PAR_CHUNK: usize = 128;

fn flat_any(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Dense per-pixel MLS field over a raster: entry (y*width + x) holds the
/// warped coordinate of integer pixel (x, y). This is the slow exact path the
/// grid approximation is benchmarked against.
pub fn dense_warp_field(
    width: usize,
    height: usize,
    nodes: &NodePair,
    cfg: &MlsConfig,
) -> Result<Vec<[f64; 2]>> {
    cfg.validate()?;
    let src = flat(nodes.source());
    let dst = flat(nodes.target());
    let results: Vec<std::result::Result<[f64; 2], usize>> = (0..width * height)
        .into_par_iter()
        .map_init(Vec::new, |w_buf, p| {
            let vx = (p % width) as f64;
            let vy = (p / width) as f64;
            match warp_kernel(vx, vy, src, dst, cfg, w_buf) {
                WarpOutcome::Snap(j) => Ok([dst[2 * j], dst[2 * j + 1]]),
                WarpOutcome::Point(pt) => Ok(pt),
                WarpOutcome::Degenerate => Err(p),
            }
        })
        .collect();
    let mut out = Vec::with_capacity(width * height);
    for r in results {
        match r {
            Ok(p) => out.push(p),
            Err(p) => {
                return Err(Error::DegenerateWarp {
                    context: format!("pixel ({}, {})", p % width, p / width),
                })
            }
        }
    }
    Ok(out)
}

/// Grid-approximated warp field over a raster, same layout as
/// [`dense_warp_field`].
pub fn grid_warp_field(
    width: usize,
    height: usize,
    nodes: &NodePair,
    cols: usize,
    rows: usize,
    cfg: &MlsConfig,
) -> Result<Vec<[f64; 2]>> {
    let grid = warp_grid(&build_grid(width as f64, height as f64, cols, rows)?, nodes, cfg)?;
    let field: Vec<[f64; 2]> = (0..width * height)
        .into_par_iter()
        .map(|p| {
            let v = Point2::new((p % width) as f64, (p / width) as f64);
            let out = grid_warp_point(v, &grid).expect("grid is warped");
            [out.x, out.y]
        })
        .collect();
    Ok(field)
}
