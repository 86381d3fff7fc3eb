//! Quantitative stabilization metrics computed from input/output tracks:
//! cropping (frame size preservation), distortion (anisotropic scaling) and
//! stability (low-frequency energy ratio of the camera path), plus the
//! residual-motion diagnostics used by the λ study. Larger is better for all
//! three; each lies in (0, 1].

use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geom::{fit_affine, fit_similarity, Point2};
use crate::mls::{mls_warp_points, MlsConfig, NodePair};
use crate::pipeline::StabilizedFrame;
use crate::tracks::{ref_center, FrameTracks};

/// Metric values and their per-frame series.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub cropping: f64,
    pub distortion: f64,
    pub stability: f64,
    /// Stability of the unstabilized input path, for comparison.
    pub input_stability: f64,
    pub per_frame: Vec<FrameMetrics>,
}

#[derive(Clone, Copy, Debug)]
pub struct FrameMetrics {
    pub frame: u64,
    pub cropping: f64,
    pub distortion: f64,
    pub path_x: f64,
    pub path_y: f64,
}

/// Cumulative 2D translation series of a track sequence: one least-squares
/// similarity fit per consecutive frame pair, translation taken at the frame
/// center, summed over time. Entry 0 is the origin.
pub fn camera_path(frames: &[FrameTracks]) -> Result<Vec<[f64; 2]>> {
    if frames.len() < 2 {
        return Err(Error::Param(format!("camera path needs >= 2 frames, got {}", frames.len())));
    }
    let mut path = vec![[0.0f64; 2]];
    let mut acc = [0.0f64; 2];
    for f in frames.iter() {
        let Some(q) = &f.nodes_q_next else { break };
        let fit = fit_similarity(&f.points, q)
            .map_err(|e| Error::Fit(format!("frame {}: {e}", f.frame_index)))?;
        let d = fit.translation_at(ref_center());
        acc[0] += d.x;
        acc[1] += d.y;
        path.push(acc);
    }
    Ok(path)
}

/// Low-frequency energy ratio of a camera path: after removing a per-axis
/// linear trend (intentional motion), the DFT energy in bins 2-6 over the
/// energy in bins 2..N/2, pooled over both axes so the value is invariant to
/// a global rotation of the path. A residual-free path scores 1.
pub fn stability(path: &[[f64; 2]]) -> Result<f64> {
    let n = path.len();
    if n < 12 {
        return Err(Error::Param(format!("stability needs a path of >= 12 samples, got {n}")));
    }
    let mut low = 0.0;
    let mut total = 0.0;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    for axis in 0..2 {
        let series: Vec<f64> = path.iter().map(|p| p[axis]).collect();
        let detrended = detrend(&series);
        let mut buf: Vec<Complex64> =
            detrended.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        for (k, v) in buf.iter().enumerate().take(n / 2 + 1).skip(2) {
            let e = v.norm_sqr();
            if k <= 6 {
                low += e;
            }
            total += e;
        }
    }
    if total < 1e-18 {
        return Ok(1.0);
    }
    Ok(low / total)
}

/// Subtract the least-squares line a + b*t.
fn detrend(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mean_t = (n - 1.0) / 2.0;
    let mean_x = series.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var = 0.0;
    for (t, &x) in series.iter().enumerate() {
        let dt = t as f64 - mean_t;
        cov += dt * (x - mean_x);
        var += dt * dt;
    }
    let b = if var > 0.0 { cov / var } else { 0.0 };
    series
        .iter()
        .enumerate()
        .map(|(t, &x)| x - mean_x - b * (t as f64 - mean_t))
        .collect()
}

/// Per-frame full-affine fits from warp node sources to their solved targets.
/// Cropping is the mean clamped scale, distortion the worst singular-value
/// ratio. Frames without nodes (or with identity pairs) score 1; failed fits
/// are skipped with a warning.
pub fn cropping_distortion(outputs: &[StabilizedFrame]) -> Result<(f64, f64, Vec<(u64, f64, f64)>)> {
    let mut per_frame = Vec::with_capacity(outputs.len());
    let mut crop_sum = 0.0;
    let mut crop_n = 0usize;
    let mut worst_ratio = f64::INFINITY;
    for out in outputs {
        let frame = out.frame_index;
        let (c, d) = match &out.nodes {
            None => (1.0, 1.0),
            Some(pair) if pair.is_identity() => (1.0, 1.0),
            Some(pair) => match fit_affine(pair.source(), pair.target()) {
                Ok(aff) => (aff.scale().min(1.0), aff.singular_ratio()),
                Err(e) => {
                    log::warn!("frame {frame}: affine fit failed ({e}); skipping");
                    continue;
                }
            },
        };
        crop_sum += c;
        crop_n += 1;
        worst_ratio = worst_ratio.min(d);
        per_frame.push((frame, c, d));
    }
    if crop_n == 0 {
        return Err(Error::Fit("no frame admitted an affine fit".into()));
    }
    Ok((crop_sum / crop_n as f64, worst_ratio, per_frame))
}

/// Reconstruct the stabilized track sequence from the input tracks and the
/// emitted node pairs: P and F are warped by their frame's pair, and frame
/// t's correspondences become frame t+1's warped nodes (exactly Q̂_{t+1}).
pub fn apply_node_pairs(
    frames: &[FrameTracks],
    outputs: &[StabilizedFrame],
    cfg: &MlsConfig,
) -> Result<Vec<FrameTracks>> {
    if frames.len() != outputs.len() {
        return Err(Error::Data(format!(
            "{} input frames vs {} outputs",
            frames.len(),
            outputs.len()
        )));
    }
    let mut stabilized = Vec::with_capacity(frames.len());
    for (k, (f, out)) in frames.iter().zip(outputs).enumerate() {
        if f.frame_index != out.frame_index {
            return Err(Error::Data(format!(
                "frame index mismatch: tracks {} vs outputs {}",
                f.frame_index, out.frame_index
            )));
        }
        let (points, face) = match &out.nodes {
            Some(pair) if !pair.is_identity() => {
                let p = mls_warp_points(&f.points, pair, cfg)?;
                let face = f.face.as_ref().map(|x| mls_warp_points(x, pair, cfg)).transpose()?;
                (p, face)
            }
            _ => (f.points.clone(), f.face.clone()),
        };
        let nodes_q_next = match (f.nodes_q_next.as_ref(), outputs.get(k + 1)) {
            (Some(_), Some(next_out)) => match &next_out.nodes {
                Some(pair) => Some(pair.target().clone()),
                None => f.nodes_q_next.clone(),
            },
            _ => f.nodes_q_next.clone(),
        };
        stabilized.push(FrameTracks { frame_index: f.frame_index, points, nodes_q_next, face });
    }
    Ok(stabilized)
}

/// Mean per-step residual motion of background correspondences and face
/// vertices after stabilization, in pixels. Used for the λ-direction study.
pub fn residual_motion(stabilized: &[FrameTracks]) -> (f64, f64) {
    let mut bg_sum = 0.0;
    let mut bg_n = 0usize;
    let mut face_sum = 0.0;
    let mut face_n = 0usize;
    for (k, f) in stabilized.iter().enumerate() {
        if let Some(q) = &f.nodes_q_next {
            for i in 0..f.points.nrows() {
                let dx = q[[i, 0]] - f.points[[i, 0]];
                let dy = q[[i, 1]] - f.points[[i, 1]];
                bg_sum += (dx * dx + dy * dy).sqrt();
                bg_n += 1;
            }
        }
        if let (Some(a), Some(b)) = (&f.face, stabilized.get(k + 1).and_then(|n| n.face.as_ref()))
        {
            for i in 0..a.nrows() {
                let dx = b[[i, 0]] - a[[i, 0]];
                let dy = b[[i, 1]] - a[[i, 1]];
                face_sum += (dx * dx + dy * dy).sqrt();
                face_n += 1;
            }
        }
    }
    (
        if bg_n > 0 { bg_sum / bg_n as f64 } else { 0.0 },
        if face_n > 0 { face_sum / face_n as f64 } else { 0.0 },
    )
}

/// Full metric report for a stabilized stream.
pub fn compute_report(
    frames: &[FrameTracks],
    outputs: &[StabilizedFrame],
    cfg: &MlsConfig,
) -> Result<MetricReport> {
    let stabilized = apply_node_pairs(frames, outputs, cfg)?;
    let in_path = camera_path(frames)?;
    let out_path = camera_path(&stabilized)?;
    let input_stability = stability(&in_path)?;
    let out_stability = stability(&out_path)?;
    let (cropping, distortion, per) = cropping_distortion(outputs)?;

    let mut per_frame = Vec::with_capacity(per.len());
    for (i, &(frame, c, d)) in per.iter().enumerate() {
        let p = out_path.get(i).copied().unwrap_or([f64::NAN, f64::NAN]);
        per_frame.push(FrameMetrics { frame, cropping: c, distortion: d, path_x: p[0], path_y: p[1] });
    }
    Ok(MetricReport {
        cropping,
        distortion,
        stability: out_stability,
        input_stability,
        per_frame,
    })
}

/// CSV: `frame,crop,distort,path_x,path_y` rows plus a summary row carrying
/// the aggregate metrics (stability in path_x, input stability in path_y).
pub fn write_csv<W: Write>(report: &MetricReport, writer: &mut W) -> Result<()> {
    writeln!(writer, "frame,crop,distort,path_x,path_y")?;
    for m in &report.per_frame {
        writeln!(
            writer,
            "{},{},{},{},{}",
            m.frame, m.cropping, m.distortion, m.path_x, m.path_y
        )?;
    }
    writeln!(
        writer,
        "summary,{},{},{},{}",
        report.cropping, report.distortion, report.stability, report.input_stability
    )?;
    Ok(())
}

/// Centered moving average used by smoothing-based tests and diagnostics.
pub fn moving_average(series: &[[f64; 2]], taps: usize) -> Vec<[f64; 2]> {
    let half = taps / 2;
    let n = series.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut acc = [0.0f64; 2];
            for p in &series[lo..hi] {
                acc[0] += p[0];
                acc[1] += p[1];
            }
            [acc[0] / (hi - lo) as f64, acc[1] / (hi - lo) as f64]
        })
        .collect()
}
