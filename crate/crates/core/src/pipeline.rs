//! Online sliding-window stabilization: buffer T frames, solve the window,
//! warp only the second frame, update its points, advance one frame.
//!
//! The first frame of a stream is never warped. Each solve queues exactly one
//! new output; emission is in frame order, so after warm-up every push emits
//! exactly one frame and trailing frames are flushed unwarped at end of
//! stream.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mls::{mls_warp_points, MlsConfig, NodePair};
use crate::objective::NormKind;
use crate::solvers::{solve_direct, solve_net, DirectOptions, NetWeights};
use crate::tracks::{validate_lambda, FrameTracks, TrackWindow};

/// Which per-window solver drives the stream.
#[derive(Clone)]
pub enum SolverKind {
    Direct(DirectOptions),
    Net(Arc<NetWeights>),
}

impl std::fmt::Debug for SolverKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverKind::Direct(o) => f.debug_tuple("Direct").field(o).finish(),
            SolverKind::Net(w) => f.debug_tuple("Net").field(&w.config).finish(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StabilizerConfig {
    pub window_len: usize,
    pub lambda: f64,
    pub mls: MlsConfig,
    pub norm: NormKind,
    pub solver: SolverKind,
    /// Report real per-frame timings; off by default so output artifacts are
    /// byte-reproducible.
    pub record_timings: bool,
}

impl StabilizerConfig {
    pub fn new(solver: SolverKind) -> Self {
        Self {
            window_len: 5,
            lambda: 0.3,
            mls: MlsConfig::default(),
            norm: NormKind::PerPoint,
            solver,
            record_timings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 3 {
            return Err(Error::Param(format!(
                "window length must be >= 3, got {}",
                self.window_len
            )));
        }
        validate_lambda(self.lambda)?;
        self.mls.validate()?;
        if let SolverKind::Net(w) = &self.solver {
            if w.config.window != self.window_len {
                return Err(Error::Param(format!(
                    "network expects T = {}, stream uses T = {}",
                    w.config.window, self.window_len
                )));
            }
        }
        Ok(())
    }
}

/// One emitted frame: its warp node pair (source and solved target), the λ
/// used by the window that produced it, and timing diagnostics.
#[derive(Clone, Debug)]
pub struct StabilizedFrame {
    pub frame_index: u64,
    /// None on the first frame of a stream: its warp nodes are undefined and
    /// the frame passes through under the identity warp.
    pub nodes: Option<NodePair>,
    pub lambda: f64,
    pub warped: bool,
    pub solve_ms: f64,
    pub warp_ms: f64,
}

impl StabilizedFrame {
    fn identity(frame_index: u64, nodes: Option<NodePair>, lambda: f64) -> Self {
        Self { frame_index, nodes, lambda, warped: false, solve_ms: 0.0, warp_ms: 0.0 }
    }
}

/// Ring-buffered stream state; one stream, one owner.
pub struct Stabilizer {
    cfg: StabilizerConfig,
    buffer: VecDeque<FrameTracks>,
    pending: VecDeque<StabilizedFrame>,
    expected_next: Option<u64>,
    solved_any: bool,
    frames_in: u64,
    frames_out: u64,
}

impl Stabilizer {
    pub fn new(cfg: StabilizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            buffer: VecDeque::new(),
            pending: VecDeque::new(),
            expected_next: None,
            solved_any: false,
            frames_in: 0,
            frames_out: 0,
        })
    }

    pub fn frames_in(&self) -> u64 {
        self.frames_in
    }

    pub fn frames_out(&self) -> u64 {
        self.frames_out
    }

    pub fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    /// Push the next frame in order. Once T frames are buffered the window is
    /// solved, its second frame warped and one output emitted; λ_override
    /// takes effect for the window being solved and stays in effect.
    pub fn push_frame(
        &mut self,
        frame: FrameTracks,
        lambda_override: Option<f64>,
    ) -> Result<Option<StabilizedFrame>> {
        if let Some(expected) = self.expected_next {
            if frame.frame_index != expected {
                return Err(Error::Sequencing { expected, got: frame.frame_index });
            }
        }
        self.expected_next = Some(frame.frame_index + 1);
        if let Some(lambda) = lambda_override {
            validate_lambda(lambda)?;
            self.cfg.lambda = lambda;
        }
        self.frames_in += 1;
        self.buffer.push_back(frame);

        if self.buffer.len() == self.cfg.window_len {
            self.solve_window()?;
        }
        Ok(self.pop_output())
    }

    fn pop_output(&mut self) -> Option<StabilizedFrame> {
        let out = self.pending.pop_front();
        if out.is_some() {
            self.frames_out += 1;
        }
        out
    }

    fn solve_window(&mut self) -> Result<()> {
        let window = TrackWindow::from_frames(self.buffer.iter().cloned().collect())?;
        let lambda = self.cfg.lambda;
        let t0 = Instant::now();
        let solved = match &self.cfg.solver {
            SolverKind::Direct(opts) => solve_direct(&window, lambda, &self.cfg.mls, opts),
            SolverKind::Net(weights) => {
                solve_net(&window, lambda, weights, &self.cfg.mls, self.cfg.norm)
            }
        };
        let solve_ms = t0.elapsed().as_secs_f64() * 1e3;

        let first_index = self.buffer[0].frame_index;
        if !self.solved_any {
            // The stream's first frame is final the moment the first window
            // resolves; it has no warp nodes of its own.
            self.pending.push_back(StabilizedFrame::identity(first_index, None, lambda));
            self.solved_any = true;
        }

        let q2 = self.buffer[0]
            .nodes_q_next
            .clone()
            .expect("validated: interior frames carry Qnext");
        let second = &mut self.buffer[1];
        let output = match solved {
            Ok(report) => {
                let pair = NodePair::from_displacement(q2, report.displacements.delta(2))?;
                let t1 = Instant::now();
                second.points = mls_warp_points(&second.points, &pair, &self.cfg.mls)?;
                if let Some(face) = &second.face {
                    second.face = Some(mls_warp_points(face, &pair, &self.cfg.mls)?);
                }
                let warp_ms = t1.elapsed().as_secs_f64() * 1e3;
                StabilizedFrame {
                    frame_index: second.frame_index,
                    nodes: Some(pair),
                    lambda,
                    warped: true,
                    solve_ms: if self.cfg.record_timings { solve_ms } else { 0.0 },
                    warp_ms: if self.cfg.record_timings { warp_ms } else { 0.0 },
                }
            }
            Err(err) => {
                // Online streams must not drop frames: pass the frame through
                // unwarped and keep going.
                log::warn!(
                    "solver failed on window at frame {}: {err}; passing frame through unwarped",
                    second.frame_index
                );
                StabilizedFrame::identity(
                    second.frame_index,
                    Some(NodePair::identity(q2)?),
                    lambda,
                )
            }
        };
        self.pending.push_back(output);
        self.buffer.pop_front();
        Ok(())
    }

    /// End of stream: emit everything still held, trailing frames unwarped.
    pub fn flush(mut self) -> Result<Vec<StabilizedFrame>> {
        let mut out: Vec<StabilizedFrame> = self.pending.drain(..).collect();
        let lambda = self.cfg.lambda;
        let buffered: Vec<FrameTracks> = self.buffer.drain(..).collect();
        for (i, frame) in buffered.iter().enumerate() {
            if i == 0 && self.solved_any {
                continue; // already emitted as the last solved output
            }
            let nodes = if i == 0 {
                None // stream never formed a window; first frame has no nodes
            } else {
                buffered[i - 1].nodes_q_next.clone().map(NodePair::identity).transpose()?
            };
            out.push(StabilizedFrame::identity(frame.frame_index, nodes, lambda));
        }
        self.frames_out += out.len() as u64;
        Ok(out)
    }
}
