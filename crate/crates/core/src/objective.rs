//! The λ-weighted stabilization loss over a window, shared by both solvers
//! and the trainer.
//!
//! Background term, summed over t = 1..T-1:
//!     ‖W(P_t; Q_t, Q̂_t) − Q̂_{t+1}‖
//! Foreground term:
//!     ‖W(F_t; Q_t, Q̂_t) − W(F_{t+1}; Q_{t+1}, Q̂_{t+1})‖
//! Frames 1 and T are never warped: Δ_1 = 0 via the identity warp and
//! Q̂_T = Q_T, so a window of length T carries T-2 displacement sets.

use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::geom::PointSet;
use crate::mls::{mls_warp_points, MlsConfig, NodePair, WarpPrecomp};
use crate::tracks::{validate_lambda, TrackWindow};

/// Norm applied to each frame residual (a 2xN point-pair difference).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormKind {
    /// Sum of per-point Euclidean norms; keeps the loss in pixel units.
    #[default]
    PerPoint,
    /// Frobenius norm of the whole residual matrix.
    Frobenius,
}

/// Per-frame warp node displacements Δ_t = Q̂_t − Q_t for the interior frames
/// t = 2..T-1, each (N, 2). Frames 1 and T implicitly carry Δ = 0.
#[derive(Clone, Debug)]
pub struct WindowDisplacements {
    deltas: Vec<PointSet>,
}

impl WindowDisplacements {
    pub fn new(deltas: Vec<PointSet>) -> Self {
        Self { deltas }
    }

    pub fn zeros(window_len: usize, points: usize) -> Self {
        Self { deltas: (0..window_len.saturating_sub(2)).map(|_| Array2::zeros((points, 2))).collect() }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Δ_t for frame t in 2..=T-1.
    pub fn delta(&self, t: usize) -> &PointSet {
        &self.deltas[t - 2]
    }

    pub fn deltas(&self) -> &[PointSet] {
        &self.deltas
    }

    pub fn validate_for(&self, window: &TrackWindow) -> Result<()> {
        if self.deltas.len() + 2 != window.len() {
            return Err(Error::Data(format!(
                "window of length {} needs {} displacement sets, got {}",
                window.len(),
                window.len() - 2,
                self.deltas.len()
            )));
        }
        let n = window.point_count();
        for (i, d) in self.deltas.iter().enumerate() {
            if d.dim() != (n, 2) {
                return Err(Error::Data(format!(
                    "displacement set {i} has shape {:?}, expected ({n}, 2)",
                    d.dim()
                )));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("displacement set {i} contains non-finite values")));
            }
        }
        Ok(())
    }

    /// The node pair (Q_t, Q_t + Δ_t) of frame t in 2..=T. Frame T gets the
    /// identity pair.
    pub fn node_pair(&self, window: &TrackWindow, t: usize) -> Result<NodePair> {
        let q = window.nodes_q(t).clone();
        if t == window.len() {
            NodePair::identity(q)
        } else {
            NodePair::from_displacement(q, self.delta(t))
        }
    }
}

/// Loss components in pixels; total = (1-λ) L_b + λ L_f.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub background: f64,
    pub foreground: f64,
    pub total: f64,
}

fn residual_norm(diff: &Array2<f64>, norm: NormKind) -> f64 {
    match norm {
        NormKind::PerPoint => diff
            .rows()
            .into_iter()
            .map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt())
            .sum(),
        NormKind::Frobenius => diff.iter().map(|v| v * v).sum::<f64>().sqrt(),
    }
}

fn frame_context(e: Error, t: usize) -> Error {
    match e {
        Error::DegenerateWarp { context } => {
            Error::DegenerateWarp { context: format!("frame {t}: {context}") }
        }
        other => other,
    }
}

/// Warped P_t under the window displacements; frame 1 uses the identity warp.
fn warped_points(
    window: &TrackWindow,
    disp: &WindowDisplacements,
    t: usize,
    cfg: &MlsConfig,
) -> Result<PointSet> {
    if t == 1 {
        return Ok(window.points_p(1).clone());
    }
    let pair = disp.node_pair(window, t)?;
    mls_warp_points(window.points_p(t), &pair, cfg).map_err(|e| frame_context(e, t))
}

/// Eq-1 style background loss over the window.
pub fn background_loss(
    window: &TrackWindow,
    disp: &WindowDisplacements,
    cfg: &MlsConfig,
    norm: NormKind,
) -> Result<f64> {
    disp.validate_for(window)?;
    let t_len = window.len();
    let mut total = 0.0;
    for t in 1..t_len {
        let warped = warped_points(window, disp, t, cfg)?;
        let next_pair = disp.node_pair(window, t + 1)?;
        let diff = &warped - next_pair.target();
        total += residual_norm(&diff, norm);
    }
    Ok(total)
}

/// Eq-2 style foreground loss; frames without valid face vertices
/// contribute zero.
pub fn foreground_loss(
    window: &TrackWindow,
    disp: &WindowDisplacements,
    cfg: &MlsConfig,
    norm: NormKind,
) -> Result<f64> {
    disp.validate_for(window)?;
    let t_len = window.len();

    let warped_face = |t: usize| -> Result<Option<PointSet>> {
        let Some(face) = window.face(t) else { return Ok(None) };
        if t == 1 || t == t_len {
            return Ok(Some(face.clone()));
        }
        let pair = disp.node_pair(window, t)?;
        mls_warp_points(face, &pair, cfg).map(Some).map_err(|e| frame_context(e, t))
    };

    let mut total = 0.0;
    let mut prev: Option<PointSet> = warped_face(1)?;
    for t in 1..t_len {
        let next = warped_face(t + 1)?;
        if let (Some(a), Some(b)) = (&prev, &next) {
            let diff = a - b;
            total += residual_norm(&diff, norm);
        }
        prev = next;
    }
    Ok(total)
}

/// Eq-3: the exact affine combination of the two losses, with breakdown.
pub fn total_loss(
    window: &TrackWindow,
    disp: &WindowDisplacements,
    lambda: f64,
    cfg: &MlsConfig,
    norm: NormKind,
) -> Result<LossBreakdown> {
    validate_lambda(lambda)?;
    let background = background_loss(window, disp, cfg, norm)?;
    let foreground = foreground_loss(window, disp, cfg, norm)?;
    Ok(LossBreakdown {
        background,
        foreground,
        total: (1.0 - lambda) * background + lambda * foreground,
    })
}

/// The λ actually used for a window solve: when any frame lacks face
/// vertices, the foreground term is undefined and the window degrades to a
/// background-only objective.
pub fn effective_lambda(window: &TrackWindow, lambda: f64) -> f64 {
    if window.frames().iter().all(|f| f.face_valid()) {
        lambda
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Differentiable loss graph
// ---------------------------------------------------------------------------

/// Iteration-invariant warp precomputations for one window: background and
/// face warps of the interior frames t = 2..T-1, keyed by t - 2.
pub struct WindowPrecomps {
    background: Vec<Rc<WarpPrecomp>>,
    face: Vec<Option<Rc<WarpPrecomp>>>,
}

impl WindowPrecomps {
    pub fn build(window: &TrackWindow, cfg: &MlsConfig) -> Result<Self> {
        let t_len = window.len();
        let mut background = Vec::with_capacity(t_len.saturating_sub(2));
        let mut face = Vec::with_capacity(t_len.saturating_sub(2));
        for t in 2..t_len {
            let q = window.nodes_q(t);
            background.push(Rc::new(
                WarpPrecomp::new(window.points_p(t), q, cfg).map_err(|e| frame_context(e, t))?,
            ));
            face.push(match window.face(t) {
                Some(f) => Some(Rc::new(
                    WarpPrecomp::new(f, q, cfg).map_err(|e| frame_context(e, t))?,
                )),
                None => None,
            });
        }
        Ok(Self { background, face })
    }
}

/// Value ids of the loss components built on a tape.
pub struct LossGraph {
    pub background: ValueId,
    pub foreground: Option<ValueId>,
    pub total: ValueId,
}

/// Transpose an (N, 2) point set into the graph's (2, N) layout.
pub fn to_graph_layout(set: &PointSet) -> Array2<f64> {
    let mut out = Array2::zeros((2, set.nrows()));
    for (i, row) in set.rows().into_iter().enumerate() {
        out[[0, i]] = row[0];
        out[[1, i]] = row[1];
    }
    out
}

/// Back from (2, N) graph layout to an (N, 2) point set.
pub fn from_graph_layout(mat: &Array2<f64>) -> PointSet {
    let mut out = Array2::zeros((mat.ncols(), 2));
    for i in 0..mat.ncols() {
        out[[i, 0]] = mat[[0, i]];
        out[[i, 1]] = mat[[1, i]];
    }
    out
}

/// Build the window loss on `tape` over displacement values `deltas`
/// ((2, N) each, one per interior frame t = 2..T-1, typically parameters or
/// network outputs). `lambda` may be 0 here: the foreground branch is then
/// omitted entirely (background-only objective).
pub fn loss_graph(
    tape: &mut Tape,
    window: &TrackWindow,
    precomps: &WindowPrecomps,
    deltas: &[ValueId],
    lambda: f64,
    norm: NormKind,
) -> Result<LossGraph> {
    let t_len = window.len();
    if deltas.len() + 2 != t_len {
        return Err(Error::Data(format!(
            "window of length {t_len} needs {} displacement values, got {}",
            t_len - 2,
            deltas.len()
        )));
    }
    let n = window.point_count();
    for &d in deltas {
        if tape.mat(d).dim() != (2, n) {
            return Err(Error::Data(format!(
                "displacement value has shape {:?}, expected (2, {n})",
                tape.mat(d).dim()
            )));
        }
    }

    // Q̂_t = Q_t + Δ_t for interior frames; frame T stays at Q_T.
    let mut qhat: Vec<ValueId> = Vec::with_capacity(t_len - 1);
    for t in 2..t_len {
        let q = tape.constant(to_graph_layout(window.nodes_q(t)));
        qhat.push(tape.add(q, deltas[t - 2])?);
    }
    let q_last = tape.constant(to_graph_layout(window.nodes_q(t_len)));
    qhat.push(q_last);
    let qhat_of = |t: usize| qhat[t - 2]; // valid for t = 2..=T

    let reduce = |tape: &mut Tape, diff: ValueId| -> Result<ValueId> {
        match norm {
            NormKind::PerPoint => {
                let norms = tape.col_norms(diff)?;
                tape.sum(norms)
            }
            NormKind::Frobenius => tape.frobenius_norm(diff),
        }
    };

    // Background: Σ_t ‖warped(P_t) − Q̂_{t+1}‖.
    let mut bg_terms = Vec::with_capacity(t_len - 1);
    for t in 1..t_len {
        let warped = if t == 1 {
            tape.constant(to_graph_layout(window.points_p(1)))
        } else {
            tape.mls_warp(precomps.background[t - 2].clone(), qhat_of(t))
                .map_err(|e| frame_context(e, t))?
        };
        let diff = tape.sub(warped, qhat_of(t + 1))?;
        bg_terms.push(reduce(tape, diff)?);
    }
    let mut background = bg_terms[0];
    for &term in &bg_terms[1..] {
        background = tape.add(background, term)?;
    }

    // Foreground: Σ_t ‖warped(F_t) − warped(F_{t+1})‖ over valid face pairs.
    let foreground = if lambda > 0.0 {
        let warped_face = |tape: &mut Tape, t: usize| -> Result<Option<ValueId>> {
            let Some(face) = window.face(t) else { return Ok(None) };
            if t == 1 || t == t_len {
                return Ok(Some(tape.constant(to_graph_layout(face))));
            }
            match &precomps.face[t - 2] {
                Some(pre) => Ok(Some(
                    tape.mls_warp(pre.clone(), qhat_of(t)).map_err(|e| frame_context(e, t))?,
                )),
                None => Ok(None),
            }
        };
        let mut terms = Vec::new();
        let mut prev = warped_face(tape, 1)?;
        for t in 1..t_len {
            let next = warped_face(tape, t + 1)?;
            if let (Some(a), Some(b)) = (prev, next) {
                let diff = tape.sub(a, b)?;
                terms.push(reduce(tape, diff)?);
            }
            prev = next;
        }
        match terms.split_first() {
            Some((&first, rest)) => {
                let mut fg = first;
                for &term in rest {
                    fg = tape.add(fg, term)?;
                }
                Some(fg)
            }
            None => None,
        }
    } else {
        None
    };

    let total = match foreground {
        Some(fg) => {
            let bg_scaled = tape.scale(background, 1.0 - lambda);
            let fg_scaled = tape.scale(fg, lambda);
            tape.add(bg_scaled, fg_scaled)?
        }
        None => {
            // Background-only objective; keep the (1-λ) weighting so values
            // stay comparable with the full loss at the same λ.
            tape.scale(background, 1.0 - lambda)
        }
    };

    Ok(LossGraph { background, foreground, total })
}
