//! Point-track data model, JSONL ingestion, synthetic shaky-scene generation
//! and training-time affine augmentation.
//!
//! All solvers operate in a fixed reference frame of 832x448 pixels; tracks
//! recorded at other resolutions are rescaled on load.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{point_set_from_pairs, point_set_to_pairs, validate_finite, Point2, PointSet, Similarity2};

/// Reference frame width in pixels.
pub const REF_WIDTH: f64 = 832.0;
/// Reference frame height in pixels.
pub const REF_HEIGHT: f64 = 448.0;
/// Feature points / warp nodes / face vertices per frame.
pub const POINTS_PER_FRAME: usize = 512;

/// Center of the reference frame.
pub fn ref_center() -> Point2 {
    Point2::new(REF_WIDTH / 2.0, REF_HEIGHT / 2.0)
}

/// Tracks attached to one frame: the features detected in this frame (P_t),
/// their correspondences in the next frame (Q_{t+1}) and, when a face was
/// fitted, the sampled face vertices (F_t).
#[derive(Clone, Debug)]
pub struct FrameTracks {
    pub frame_index: u64,
    pub points: PointSet,
    /// Correspondences of `points` in the next frame; absent on the last
    /// frame of a stream. These are the warp nodes of frame t+1.
    pub nodes_q_next: Option<PointSet>,
    pub face: Option<PointSet>,
}

impl FrameTracks {
    pub fn face_valid(&self) -> bool {
        self.face.is_some()
    }

    pub fn point_count(&self) -> usize {
        self.points.nrows()
    }
}

/// A T-frame window over consecutive frames. Using 1-based frame positions
/// t = 1..=T inside the window: P_t and F_t live on frames()[t-1], and the
/// warp nodes Q_t of frame t (t >= 2) are frames()[t-2].nodes_q_next.
#[derive(Clone, Debug)]
pub struct TrackWindow {
    frames: Vec<FrameTracks>,
}

impl TrackWindow {
    pub fn from_frames(frames: Vec<FrameTracks>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Structure(format!(
                "a window needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let n = frames[0].point_count();
        for (k, f) in frames.iter().enumerate() {
            if k > 0 && f.frame_index != frames[k - 1].frame_index + 1 {
                return Err(Error::Structure(format!(
                    "non-consecutive frame indices {} -> {}",
                    frames[k - 1].frame_index,
                    f.frame_index
                )));
            }
            if f.point_count() != n {
                return Err(Error::Structure(format!(
                    "frame {} has {} points, expected {}",
                    f.frame_index,
                    f.point_count(),
                    n
                )));
            }
            let is_last = k + 1 == frames.len();
            match &f.nodes_q_next {
                Some(q) if q.nrows() != n => {
                    return Err(Error::Structure(format!(
                        "frame {}: Qnext has {} entries, expected {}",
                        f.frame_index,
                        q.nrows(),
                        n
                    )))
                }
                None if !is_last => {
                    return Err(Error::Structure(format!(
                        "frame {} is missing Qnext but is not the last frame",
                        f.frame_index
                    )))
                }
                _ => {}
            }
            if let Some(face) = &f.face {
                if face.nrows() != n {
                    return Err(Error::Structure(format!(
                        "frame {}: face has {} entries, expected {}",
                        f.frame_index,
                        face.nrows(),
                        n
                    )));
                }
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[FrameTracks] {
        &self.frames
    }

    pub fn point_count(&self) -> usize {
        self.frames[0].point_count()
    }

    /// P_t for t in 1..=T.
    pub fn points_p(&self, t: usize) -> &PointSet {
        &self.frames[t - 1].points
    }

    /// Warp nodes Q_t for t in 2..=T.
    pub fn nodes_q(&self, t: usize) -> &PointSet {
        self.frames[t - 2]
            .nodes_q_next
            .as_ref()
            .expect("validated: interior frames carry Qnext")
    }

    /// F_t for t in 1..=T, when the face was detected.
    pub fn face(&self, t: usize) -> Option<&PointSet> {
        self.frames[t - 1].face.as_ref()
    }
}

/// Sliding windows of length `len` over a frame sequence.
pub fn windows(frames: &[FrameTracks], len: usize) -> Result<Vec<TrackWindow>> {
    if len < 2 {
        return Err(Error::Param(format!("window length must be >= 2, got {len}")));
    }
    let mut out = Vec::new();
    if frames.len() < len {
        return Ok(out);
    }
    for start in 0..=frames.len() - len {
        out.push(TrackWindow::from_frames(frames[start..start + len].to_vec())?);
    }
    Ok(out)
}

/// Per-frame foreground/background focus weights, strictly inside (0, 1).
#[derive(Clone, Debug)]
pub struct LambdaSchedule {
    entries: BTreeMap<u64, f64>,
    default: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self { entries: BTreeMap::new(), default: 0.3 }
    }
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Result<Self> {
        validate_lambda(lambda)?;
        Ok(Self { entries: BTreeMap::new(), default: lambda })
    }

    pub fn insert(&mut self, frame: u64, lambda: f64) -> Result<()> {
        validate_lambda(lambda)?;
        self.entries.insert(frame, lambda);
        Ok(())
    }

    /// Step function: the entry at the largest frame index <= `frame`, or the
    /// default before the first entry.
    pub fn value_at(&self, frame: u64) -> f64 {
        self.entries
            .range(..=frame)
            .next_back()
            .map(|(_, &l)| l)
            .unwrap_or(self.default)
    }

    /// Parse a two-column `frame,lambda` CSV. A header line is permitted.
    pub fn from_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut schedule = LambdaSchedule::default();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut parts = trimmed.split(',');
            let first = parts.next().unwrap_or("").trim();
            let second = parts.next().unwrap_or("").trim();
            if lineno == 0 && first.parse::<u64>().is_err() {
                continue; // header row
            }
            let frame: u64 = first.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("invalid frame index {first:?}"),
            })?;
            let lambda: f64 = second.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("invalid lambda {second:?}"),
            })?;
            schedule.insert(frame, lambda)?;
        }
        Ok(schedule)
    }
}

pub fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Param(format!("lambda must lie strictly in (0,1), got {lambda}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Track file I/O (JSON Lines)
// ---------------------------------------------------------------------------

/// Header record preceding frame records in a track file.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrackHeader {
    pub width: u32,
    pub height: u32,
}

/// One frame record of the JSONL track format. Coordinates are in
/// source-resolution pixels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: u64,
    #[serde(rename = "P")]
    pub points: Vec<[f64; 2]>,
    #[serde(rename = "Qnext", skip_serializing_if = "Option::is_none", default)]
    pub q_next: Option<Vec<[f64; 2]>>,
    #[serde(rename = "F")]
    pub face: Option<Vec<[f64; 2]>>,
}

/// Parse a JSONL track stream and rescale it into the reference frame.
/// Frames with fewer than [`POINTS_PER_FRAME`] points are padded by sampling
/// with replacement (deterministic for a given `seed`); frames with more are
/// subsampled without replacement.
pub fn load_tracks<R: BufRead>(reader: R, seed: u64) -> Result<(TrackHeader, Vec<FrameTracks>)> {
    let mut lines = reader.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty stream, expected header".into() })?;
    let header: TrackHeader = serde_json::from_str(&header_line?)
        .map_err(|e| Error::Parse { line: 1, msg: format!("bad header: {e}") })?;
    if header.width == 0 || header.height == 0 {
        return Err(Error::Parse { line: 1, msg: "frame size must be positive".into() });
    }
    let sx = REF_WIDTH / header.width as f64;
    let sy = REF_HEIGHT / header.height as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames: Vec<FrameTracks> = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno, msg: e.to_string() })?;
        if let Some(prev) = frames.last() {
            if rec.frame != prev.frame_index + 1 {
                return Err(Error::Structure(format!(
                    "non-consecutive frame indices: {} followed by {}",
                    prev.frame_index, rec.frame
                )));
            }
        }
        if rec.points.is_empty() {
            return Err(Error::Data(format!("frame {}: zero points", rec.frame)));
        }
        if let Some(q) = &rec.q_next {
            if q.len() != rec.points.len() {
                return Err(Error::Structure(format!(
                    "frame {}: P has {} points but Qnext has {}",
                    rec.frame,
                    rec.points.len(),
                    q.len()
                )));
            }
        }

        let scale = |pairs: &[[f64; 2]]| -> Vec<[f64; 2]> {
            pairs.iter().map(|p| [p[0] * sx, p[1] * sy]).collect()
        };
        let p_scaled = scale(&rec.points);
        let q_scaled = rec.q_next.as_deref().map(scale);
        let f_scaled = rec.face.as_deref().map(scale);

        // P and Qnext stay index-aligned through resampling.
        let idx_pq = resample_indices(p_scaled.len(), POINTS_PER_FRAME, &mut rng);
        let points = point_set_from_pairs(&select(&p_scaled, &idx_pq));
        let nodes_q_next = q_scaled.map(|q| point_set_from_pairs(&select(&q, &idx_pq)));
        let face = match f_scaled {
            Some(f) if f.is_empty() => None,
            Some(f) => {
                let idx_f = resample_indices(f.len(), POINTS_PER_FRAME, &mut rng);
                Some(point_set_from_pairs(&select(&f, &idx_f)))
            }
            None => None,
        };

        let tracks = FrameTracks { frame_index: rec.frame, points, nodes_q_next, face };
        validate_finite(&tracks.points, "P")?;
        if let Some(q) = &tracks.nodes_q_next {
            validate_finite(q, "Qnext")?;
        }
        if let Some(f) = &tracks.face {
            validate_finite(f, "F")?;
        }
        frames.push(tracks);
    }
    Ok((header, frames))
}

fn resample_indices(n: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use std::cmp::Ordering::*;
    match n.cmp(&target) {
        Equal => (0..n).collect(),
        // Keep every original point, pad by sampling with replacement.
        Less => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.extend((0..target - n).map(|_| rng.gen_range(0..n)));
            idx
        }
        Greater => {
            let mut idx = index_sample(rng, n, target).into_vec();
            idx.sort_unstable();
            idx
        }
    }
}

fn select(pairs: &[[f64; 2]], idx: &[usize]) -> Vec<[f64; 2]> {
    idx.iter().map(|&i| pairs[i]).collect()
}

/// Write frames as the JSONL track format, in reference-frame coordinates
/// (header 832x448).
pub fn save_tracks<W: Write>(writer: &mut W, frames: &[FrameTracks]) -> Result<()> {
    let header = TrackHeader { width: REF_WIDTH as u32, height: REF_HEIGHT as u32 };
    serde_json::to_writer(&mut *writer, &header).map_err(io_err)?;
    writer.write_all(b"\n")?;
    for f in frames {
        let rec = FrameRecord {
            frame: f.frame_index,
            points: point_set_to_pairs(&f.points),
            q_next: f.nodes_q_next.as_ref().map(point_set_to_pairs),
            face: f.face.as_ref().map(point_set_to_pairs),
        };
        serde_json::to_writer(&mut *writer, &rec).map_err(io_err)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

/// Zero-mean jitter model for a camera or face: per-frame translation and
/// rotation noise plus an optional constant-velocity drift.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JitterSpec {
    pub translation_std: f64,
    pub rotation_std_deg: f64,
    pub drift: [f64; 2],
}

impl Default for JitterSpec {
    fn default() -> Self {
        Self { translation_std: 0.0, rotation_std_deg: 0.0, drift: [0.0, 0.0] }
    }
}

/// Specification of a synthetic shaky scene standing in for tracked video.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub frame_count: usize,
    pub background_count: usize,
    /// Bounding box (x0, y0, x1, y1) of the background cloud.
    pub background_box: [f64; 4],
    pub face_count: usize,
    pub face_center: [f64; 2],
    pub face_radius: f64,
    /// Generate frames without face vertices.
    pub omit_face: bool,
    pub camera: JitterSpec,
    pub face_jitter: JitterSpec,
    /// Gaussian noise added to correspondences; 0 keeps oracles exact.
    pub correspondence_noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            frame_count: 30,
            background_count: 2048,
            background_box: [0.0, 0.0, REF_WIDTH, REF_HEIGHT],
            face_count: POINTS_PER_FRAME,
            face_center: [REF_WIDTH / 2.0, REF_HEIGHT / 2.0],
            face_radius: 80.0,
            omit_face: false,
            camera: JitterSpec { translation_std: 3.0, ..JitterSpec::default() },
            face_jitter: JitterSpec::default(),
            correspondence_noise_std: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frame_count < 2 {
            return Err(Error::Param("frame_count must be >= 2".into()));
        }
        if self.background_count < POINTS_PER_FRAME {
            return Err(Error::Param(format!(
                "background_count must be >= {POINTS_PER_FRAME}, got {}",
                self.background_count
            )));
        }
        if !self.omit_face && self.face_count < POINTS_PER_FRAME {
            return Err(Error::Param(format!(
                "face_count must be >= {POINTS_PER_FRAME}, got {}",
                self.face_count
            )));
        }
        for v in [
            self.camera.translation_std,
            self.camera.rotation_std_deg,
            self.face_jitter.translation_std,
            self.face_jitter.rotation_std_deg,
            self.correspondence_noise_std,
        ] {
            if !(v >= 0.0) {
                return Err(Error::Param(format!("std values must be >= 0, got {v}")));
            }
        }
        if !(self.face_radius > 0.0) && !self.omit_face {
            return Err(Error::Param("face_radius must be positive".into()));
        }
        let [x0, y0, x1, y1] = self.background_box;
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::Param("background_box must have positive extent".into()));
        }
        Ok(())
    }
}

/// Exact per-frame transforms applied by the generator, for oracle checks.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JitterSample {
    pub frame: u64,
    pub camera_rotation_deg: f64,
    pub camera_translation: [f64; 2],
    pub face_rotation_deg: f64,
    pub face_translation: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JitterLog {
    pub samples: Vec<JitterSample>,
}

impl JitterLog {
    /// The camera transform of a 1-based frame as a similarity about the
    /// reference frame center.
    pub fn camera_transform(&self, frame: u64) -> Similarity2 {
        let s = &self.samples[(frame - 1) as usize];
        Similarity2::rotation_about(
            s.camera_rotation_deg.to_radians(),
            ref_center(),
            Point2::new(s.camera_translation[0], s.camera_translation[1]),
        )
    }
}

/// Generate a jittering observation of a static world point cloud. Each frame
/// detects its own 512 background features (a fresh draw from the cloud);
/// their correspondences in the next frame are exact projections of the same
/// world points, so frame-to-frame similarity fits recover the logged camera
/// motion exactly when the noise knob is zero.
pub fn synthesize_scene(spec: &SyntheticSceneSpec) -> Result<(Vec<FrameTracks>, JitterLog)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (world, face_world) = draw_world(spec, &mut rng);

    // Per-frame transform draws.
    let cam_rot = Normal::new(0.0, spec.camera.rotation_std_deg)
        .map_err(|e| Error::Param(e.to_string()))?;
    let cam_trans = Normal::new(0.0, spec.camera.translation_std)
        .map_err(|e| Error::Param(e.to_string()))?;
    let face_rot = Normal::new(0.0, spec.face_jitter.rotation_std_deg)
        .map_err(|e| Error::Param(e.to_string()))?;
    let face_trans = Normal::new(0.0, spec.face_jitter.translation_std)
        .map_err(|e| Error::Param(e.to_string()))?;

    let mut samples = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let cam_theta = cam_rot.sample(&mut rng);
        let cam_d = [
            spec.camera.drift[0] * t as f64 + cam_trans.sample(&mut rng),
            spec.camera.drift[1] * t as f64 + cam_trans.sample(&mut rng),
        ];
        let f_theta = face_rot.sample(&mut rng);
        let f_d = [
            spec.face_jitter.drift[0] * t as f64 + face_trans.sample(&mut rng),
            spec.face_jitter.drift[1] * t as f64 + face_trans.sample(&mut rng),
        ];
        samples.push(JitterSample {
            frame: (t + 1) as u64,
            camera_rotation_deg: cam_theta,
            camera_translation: cam_d,
            face_rotation_deg: f_theta,
            face_translation: f_d,
        });
    }
    let log = JitterLog { samples };
    let frames = observe_world(spec, &world, &face_world, &log, &mut rng)?;
    Ok((frames, log))
}

/// Synthesize a scene observed through explicitly given per-frame transforms
/// instead of random draws; the world geometry and per-frame feature sampling
/// still come from the spec's seed.
pub fn synthesize_with_transforms(
    spec: &SyntheticSceneSpec,
    samples: Vec<JitterSample>,
) -> Result<(Vec<FrameTracks>, JitterLog)> {
    if samples.len() != spec.frame_count {
        return Err(Error::Param(format!(
            "expected {} transform samples, got {}",
            spec.frame_count,
            samples.len()
        )));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (world, face_world) = draw_world(spec, &mut rng);
    let log = JitterLog { samples };
    let frames = observe_world(spec, &world, &face_world, &log, &mut rng)?;
    Ok((frames, log))
}

fn draw_world(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    let [x0, y0, x1, y1] = spec.background_box;
    let ux = Uniform::new(x0, x1);
    let uy = Uniform::new(y0, y1);
    let world: Vec<[f64; 2]> =
        (0..spec.background_count).map(|_| [ux.sample(rng), uy.sample(rng)]).collect();
    let face_world: Vec<[f64; 2]> = (0..spec.face_count)
        .map(|_| {
            let r = spec.face_radius * rng.gen::<f64>().sqrt();
            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
            [spec.face_center[0] + r * phi.cos(), spec.face_center[1] + r * phi.sin()]
        })
        .collect();
    (world, face_world)
}

fn observe_world(
    spec: &SyntheticSceneSpec,
    world: &[[f64; 2]],
    face_world: &[[f64; 2]],
    log: &JitterLog,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameTracks>> {

    let cameras: Vec<Similarity2> =
        (1..=spec.frame_count as u64).map(|f| log.camera_transform(f)).collect();
    let face_centre = Point2::new(spec.face_center[0], spec.face_center[1]);
    let face_transforms: Vec<Similarity2> = log
        .samples
        .iter()
        .map(|s| {
            let own = Similarity2::rotation_about(
                s.face_rotation_deg.to_radians(),
                face_centre,
                Point2::new(s.face_translation[0], s.face_translation[1]),
            );
            cameras[(s.frame - 1) as usize].compose(&own)
        })
        .collect();

    // Face vertices are the same world points in every frame, so F_t and
    // F_{t+1} stay index-aligned.
    let face_idx = if spec.omit_face {
        Vec::new()
    } else {
        let mut idx = index_sample(rng, spec.face_count, POINTS_PER_FRAME).into_vec();
        idx.sort_unstable();
        idx
    };

    let corr_noise = Normal::new(0.0, spec.correspondence_noise_std)
        .map_err(|e| Error::Param(e.to_string()))?;
    let mut frames = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let mut idx = index_sample(rng, spec.background_count, POINTS_PER_FRAME).into_vec();
        idx.sort_unstable();
        let project = |cam: &Similarity2| -> Vec<[f64; 2]> {
            idx.iter()
                .map(|&i| {
                    let p = cam.apply(Point2::new(world[i][0], world[i][1]));
                    [p.x, p.y]
                })
                .collect()
        };
        let points = point_set_from_pairs(&project(&cameras[t]));
        let nodes_q_next = if t + 1 < spec.frame_count {
            let mut q = project(&cameras[t + 1]);
            if spec.correspondence_noise_std > 0.0 {
                for p in &mut q {
                    p[0] += corr_noise.sample(rng);
                    p[1] += corr_noise.sample(rng);
                }
            }
            Some(point_set_from_pairs(&q))
        } else {
            None
        };
        let face = if spec.omit_face {
            None
        } else {
            let ft = &face_transforms[t];
            let pairs: Vec<[f64; 2]> = face_idx
                .iter()
                .map(|&i| {
                    let p = ft.apply(Point2::new(face_world[i][0], face_world[i][1]));
                    [p.x, p.y]
                })
                .collect();
            Some(point_set_from_pairs(&pairs))
        };
        frames.push(FrameTracks { frame_index: (t + 1) as u64, points, nodes_q_next, face });
    }
    Ok(frames)
}

/// A zero jitter sample for a 1-based frame index.
pub fn identity_sample(frame: u64) -> JitterSample {
    JitterSample {
        frame,
        camera_rotation_deg: 0.0,
        camera_translation: [0.0, 0.0],
        face_rotation_deg: 0.0,
        face_translation: [0.0, 0.0],
    }
}

// ---------------------------------------------------------------------------
// Training augmentation
// ---------------------------------------------------------------------------

/// Rotation range of the augmentation draw, degrees.
pub const AUGMENT_ROTATION_DEG: f64 = 10.0;
/// Translation range of the augmentation draw, pixels.
pub const AUGMENT_TRANSLATION_PX: f64 = 50.0;

/// Perturb every interior frame of a window by a random rotation+translation
/// about the frame center; the first and last frames are untouched. "Frame t"
/// here means every coordinate expressed in frame t's image plane: P_t, F_t
/// and the warp nodes Q_t (stored as frame t-1's Qnext).
pub fn augment_window<R: Rng>(window: &TrackWindow, rng: &mut R) -> Result<TrackWindow> {
    let t_len = window.len();
    if t_len < 3 {
        return Err(Error::Param(format!("augmentation needs window length >= 3, got {t_len}")));
    }
    let mut frames = window.frames().to_vec();
    for t in 2..t_len {
        let theta = rng.gen_range(-AUGMENT_ROTATION_DEG..=AUGMENT_ROTATION_DEG).to_radians();
        let dx = rng.gen_range(-AUGMENT_TRANSLATION_PX..=AUGMENT_TRANSLATION_PX);
        let dy = rng.gen_range(-AUGMENT_TRANSLATION_PX..=AUGMENT_TRANSLATION_PX);
        let s = Similarity2::rotation_about(theta, ref_center(), Point2::new(dx, dy));
        frames[t - 1].points = s.apply_set(&frames[t - 1].points);
        if let Some(face) = &frames[t - 1].face {
            frames[t - 1].face = Some(s.apply_set(face));
        }
        if let Some(q) = &frames[t - 2].nodes_q_next {
            frames[t - 2].nodes_q_next = Some(s.apply_set(q));
        }
    }
    TrackWindow::from_frames(frames)
}
