//! Training-sample assembly: multi-view frames from camera trajectories,
//! single-view replication, static-camera filtering, source mixing and the
//! azimuth curriculum.

use nalgebra::Vector3;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::LatentVideo;
use crate::geometry::{azimuth_difference, normalize_rig, CameraExtrinsics, CameraIntrinsics, CameraRig};
use crate::scene::{TrajectorySequence, DESK_FOV_DEG};

/// Upper bound on the frame-index span of sampled multi-view images.
pub const DEFAULT_MAX_GAP: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceKind {
    MultiViewVideo,
    MultiViewImage,
    SingleViewVideo,
}

impl SourceKind {
    pub const ALL: [SourceKind; 3] = [SourceKind::MultiViewVideo, SourceKind::MultiViewImage, SourceKind::SingleViewVideo];
}

/// One training example: `n` videos (colors in `[0, 1]`), their cameras and a caption.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub kind: SourceKind,
    pub videos: LatentVideo,
    pub cams: CameraRig,
    pub prompt: String,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        let [n, f, ..] = self.videos.dims();
        if self.cams.len() != n {
            return Err(Error::CountMismatch {
                what: "sample cameras",
                expected: n,
                got: self.cams.len(),
            });
        }
        match self.kind {
            SourceKind::MultiViewImage if f != 1 => {
                return Err(Error::Constraint(format!("multi-view image sample has {f} frames")));
            }
            SourceKind::SingleViewVideo => {
                let c0 = &self.cams.cameras[0];
                if self.cams.cameras.iter().any(|c| c != c0) {
                    return Err(Error::Constraint("replicated sample has distinct cameras".into()));
                }
                if (1..n).any(|i| self.videos.view(i) != self.videos.view(0)) {
                    return Err(Error::Constraint("replicated sample has distinct videos".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// `v` distinct frames spanning at most `max_gap` indices, cameras normalized
/// to the earliest selected frame.
pub fn sample_multiview_frames<R: Rng + ?Sized>(seq: &TrajectorySequence, v: usize, max_gap: usize, rng: &mut R) -> Result<TrainSample> {
    seq.validate()?;
    let len = seq.len();
    if v == 0 || v > len || max_gap < v - 1 {
        return Err(Error::Sampling(format!(
            "cannot pick {v} distinct frames within a gap of {max_gap} from {len}"
        )));
    }
    let first = rng.random_range(0..=len - v);
    let last = first.saturating_add(max_gap).min(len - 1);
    let mut picked: Vec<usize> = sample_indices(rng, last - first, v - 1)
        .into_iter()
        .map(|i| first + 1 + i)
        .collect();
    picked.push(first);
    picked.sort_unstable();
    let (h, w) = (seq.height, seq.width);
    let mut data = Vec::with_capacity(v * 3 * h * w);
    for &i in &picked {
        data.extend_from_slice(&seq.frames[i]);
    }
    let cams = CameraRig::new(picked.iter().map(|&i| seq.poses[i]).collect(), seq.intrinsics)?;
    Ok(TrainSample {
        kind: SourceKind::MultiViewImage,
        videos: LatentVideo::from_vec([v, 1, 3, h, w], data)?,
        cams: normalize_rig(&cams)?,
        prompt: seq.prompt.clone(),
    })
}

/// `v` copies of one video, every camera the identity.
pub fn replicate_single_view(video: &LatentVideo, v: usize, prompt: &str) -> Result<TrainSample> {
    let [n, _, _, h, w] = video.dims();
    if n != 1 || v == 0 {
        return Err(Error::Constraint(format!("replication needs one input view and v >= 1 (got {n}, {v})")));
    }
    let cams = CameraRig::new(vec![CameraExtrinsics::identity(); v], CameraIntrinsics::from_fov(h, w, DESK_FOV_DEG))?;
    Ok(TrainSample {
        kind: SourceKind::SingleViewVideo,
        videos: video.select_views(&vec![0; v]),
        cams,
        prompt: prompt.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticFilterConfig {
    pub grid: usize,
    /// Displacement threshold as a fraction of the image diagonal.
    pub thresh_frac: f64,
    /// Fraction of textured anchors that must stay within the threshold.
    pub quorum: f64,
    /// Search radius around the previous position, pixels.
    pub search: usize,
    /// Template half-size; windows are `2 r + 1` wide.
    pub half_window: usize,
    /// Minimum structure-tensor eigenvalue for an anchor to be trackable.
    pub min_texture: f64,
}

impl Default for StaticFilterConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            thresh_frac: 0.02,
            quorum: 0.9,
            search: 8,
            half_window: 3,
            min_texture: 2e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticFilterResult {
    pub is_static: bool,
    /// Largest displacement over the tracked anchors.
    pub max_disp_px: f64,
    /// No anchor had enough texture to track; counted as not static.
    pub inconclusive: bool,
    pub tracked_anchors: usize,
    pub static_fraction: f64,
    /// Maximum displacement of each tracked anchor, row-major over the grid.
    pub displacements: Vec<f64>,
}

struct Frames<'a> {
    data: &'a [f64],
    c: usize,
    h: usize,
    w: usize,
}

impl Frames<'_> {
    fn at(&self, frame: usize, ch: usize, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[((frame * self.c + ch) * self.h + y) * self.w + x]
    }

    fn gray(&self, frame: usize, y: isize, x: isize) -> f64 {
        (0..self.c).map(|ch| self.at(frame, ch, y, x)).sum::<f64>() / self.c as f64
    }

    /// Smallest eigenvalue of the mean structure tensor around `(y, x)`.
    fn texture(&self, y: isize, x: isize, r: isize) -> f64 {
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        let mut count = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y + dy, x + dx);
                let gx = (self.gray(0, yy, xx + 1) - self.gray(0, yy, xx - 1)) / 2.0;
                let gy = (self.gray(0, yy + 1, xx) - self.gray(0, yy - 1, xx)) / 2.0;
                a += gx * gx;
                b += gx * gy;
                c += gy * gy;
                count += 1.0;
            }
        }
        let (a, b, c) = (a / count, b / count, c / count);
        let tr = (a + c) / 2.0;
        tr - ((a - c) * (a - c) / 4.0 + b * b).sqrt()
    }

    fn ssd(&self, frame: usize, anchor: (isize, isize), at: (isize, isize), r: isize) -> f64 {
        let mut s = 0.0;
        for ch in 0..self.c {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = self.at(0, ch, anchor.0 + dy, anchor.1 + dx) - self.at(frame, ch, at.0 + dy, at.1 + dx);
                    s += d * d;
                }
            }
        }
        s
    }
}

/// Tracks a grid of anchors through the video by block matching against the
/// first frame and decides whether the camera is still.
pub fn static_filter(video: &[f64], dims: [usize; 4], cfg: &StaticFilterConfig) -> Result<StaticFilterResult> {
    let [f, c, h, w] = dims;
    if f < 2 {
        return Err(Error::Constraint("static filter needs at least two frames".into()));
    }
    if video.len() != f * c * h * w || cfg.grid == 0 {
        return Err(Error::ShapeMismatch {
            expected: vec![f, c, h, w],
            got: vec![video.len()],
        });
    }
    let frames = Frames { data: video, c, h, w };
    let thresh = cfg.thresh_frac * ((h * h + w * w) as f64).sqrt();
    let r = cfg.half_window as isize;
    let s = cfg.search as isize;
    let mut tracked = 0usize;
    let mut still = 0usize;
    let mut max_disp: f64 = 0.0;
    let mut displacements = Vec::new();
    for gy in 0..cfg.grid {
        for gx in 0..cfg.grid {
            let ay = (((gy as f64 + 0.5) * h as f64 / cfg.grid as f64) - 0.5).round() as isize;
            let ax = (((gx as f64 + 0.5) * w as f64 / cfg.grid as f64) - 0.5).round() as isize;
            if frames.texture(ay, ax, r) < cfg.min_texture {
                continue;
            }
            tracked += 1;
            let mut pos = (ay, ax);
            let mut disp: f64 = 0.0;
            for k in 1..f {
                let mut best = (f64::INFINITY, 0isize, pos);
                for dy in -s..=s {
                    for dx in -s..=s {
                        let cand = (pos.0 + dy, pos.1 + dx);
                        if cand.0 < 0 || cand.1 < 0 || cand.0 >= h as isize || cand.1 >= w as isize {
                            continue;
                        }
                        let e = frames.ssd(k, (ay, ax), cand, r);
                        let moved = (cand.0 - ay).pow(2) + (cand.1 - ax).pow(2);
                        if e < best.0 - 1e-12 || ((e - best.0).abs() <= 1e-12 && moved < best.1) {
                            best = (e, moved, cand);
                        }
                    }
                }
                pos = best.2;
                disp = disp.max(((best.1) as f64).sqrt());
            }
            max_disp = max_disp.max(disp);
            displacements.push(disp);
            if disp <= thresh {
                still += 1;
            }
        }
    }
    if tracked == 0 {
        return Ok(StaticFilterResult {
            is_static: false,
            max_disp_px: 0.0,
            inconclusive: true,
            tracked_anchors: 0,
            static_fraction: 0.0,
            displacements,
        });
    }
    let frac = still as f64 / tracked as f64;
    Ok(StaticFilterResult {
        is_static: frac >= cfg.quorum,
        max_disp_px: max_disp,
        inconclusive: false,
        tracked_anchors: tracked,
        static_fraction: frac,
        displacements,
    })
}

/// I.i.d. categorical choice of the data source for each step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HybridSampler {
    pub probs: [f64; 3],
}

impl Default for HybridSampler {
    fn default() -> Self {
        Self { probs: [0.6, 0.2, 0.2] }
    }
}

impl HybridSampler {
    pub fn new(probs: [f64; 3]) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Simplex(format!("{probs:?} is not a probability vector")));
        }
        Ok(Self { probs })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> SourceKind {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (kind, p) in SourceKind::ALL.iter().zip(self.probs) {
            acc += p;
            if u < acc {
                return *kind;
            }
        }
        // u landed in the rounding slack above the cumulative sum
        *SourceKind::ALL
            .iter()
            .zip(self.probs)
            .rev()
            .find(|(_, p)| *p > 0.0)
            .map(|(k, _)| k)
            .expect("simplex has a positive entry")
    }
}

/// Free-function form of [`HybridSampler::draw`].
pub fn hybrid_sampler<R: Rng + ?Sized>(probs: [f64; 3], rng: &mut R) -> Result<SourceKind> {
    Ok(HybridSampler::new(probs)?.draw(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub fraction_end: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<CurriculumStage>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        let st = |fraction_end, theta_lo, theta_hi| CurriculumStage {
            fraction_end,
            theta_lo,
            theta_hi,
        };
        Self {
            stages: vec![st(0.2, 0.0, 60.0), st(0.4, 30.0, 90.0), st(1.0, 60.0, 120.0)],
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::EmptySchedule);
        }
        let mut prev = 0.0;
        for s in &self.stages {
            if !(s.fraction_end > prev && s.fraction_end <= 1.0) || !(s.theta_lo < s.theta_hi) {
                return Err(Error::Constraint(format!("invalid curriculum stage {s:?}")));
            }
            prev = s.fraction_end;
        }
        if prev != 1.0 {
            return Err(Error::Constraint("curriculum must end at fraction 1.0".into()));
        }
        Ok(())
    }
}

/// Azimuth bounds active at `step` of `total_steps`.
pub fn curriculum_stage(schedule: &CurriculumSchedule, step: usize, total_steps: usize) -> Result<(f64, f64)> {
    if schedule.stages.is_empty() {
        return Err(Error::EmptySchedule);
    }
    if step >= total_steps {
        return Err(Error::Constraint(format!("step {step} outside 0..{total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    let stage = schedule
        .stages
        .iter()
        .find(|s| frac < s.fraction_end)
        .unwrap_or(schedule.stages.last().expect("non-empty"));
    Ok((stage.theta_lo, stage.theta_hi))
}

/// All `v`-subsets of a rig whose pairwise azimuth differences lie in `[lo, hi]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmissibleSubsets {
    pub subsets: Vec<Vec<usize>>,
    pub bounds: (f64, f64),
}

impl AdmissibleSubsets {
    pub fn new(rig: &CameraRig, v: usize, lo: f64, hi: f64, center: &Vector3<f64>) -> Result<Self> {
        let n = rig.len();
        if v == 0 || v > n {
            return Err(Error::Sampling(format!("cannot choose {v} of {n} cameras")));
        }
        let mut diff = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = azimuth_difference(&rig.cameras[i], &rig.cameras[j], center)?;
                diff[i * n + j] = d;
                diff[j * n + i] = d;
            }
        }
        let ok = |i: usize, j: usize| (lo..=hi).contains(&diff[i * n + j]);
        let mut subsets = Vec::new();
        let mut combo: Vec<usize> = (0..v).collect();
        loop {
            if (0..v).all(|a| (a + 1..v).all(|b| ok(combo[a], combo[b]))) {
                subsets.push(combo.clone());
            }
            // advance to the next combination in lexicographic order
            let Some(pos) = (0..v).rev().find(|&i| combo[i] < n - v + i) else { break };
            combo[pos] += 1;
            for i in pos + 1..v {
                combo[i] = combo[i - 1] + 1;
            }
        }
        if subsets.is_empty() {
            return Err(Error::CurriculumExhausted { lo, hi });
        }
        Ok(Self { subsets, bounds: (lo, hi) })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[usize] {
        &self.subsets[rng.random_range(0..self.subsets.len())]
    }
}

/// Uniformly chosen admissible subset of `v` cameras and its indices.
pub fn select_view_subset<R: Rng + ?Sized>(
    rig: &CameraRig,
    v: usize,
    lo: f64,
    hi: f64,
    center: &Vector3<f64>,
    rng: &mut R,
) -> Result<(CameraRig, Vec<usize>)> {
    let table = AdmissibleSubsets::new(rig, v, lo, hi, center)?;
    let idx = table.sample(rng).to_vec();
    Ok((rig.subset(&idx), idx))
}
