//! Procedural scenes and an analytic ray-caster.
//!
//! Scenes hold one or two moving primitives over a checkered ground plane
//! under a sky gradient. Every view of a frame is rendered from the same
//! world state, and surface hits are tracked across views to produce exact
//! ground-truth correspondences.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::PromptSpec;
use crate::error::{Error, Result};
use crate::flow::LatentVideo;
use crate::geometry::{CameraExtrinsics, CameraIntrinsics, CameraRig, SphericalPose};

/// Scene time advanced per rendered frame.
pub const FRAME_DT: f64 = 0.25;
/// Desk field of view for every generated camera, degrees.
pub const DESK_FOV_DEG: f64 = 60.0;
const LIGHT: [f64; 3] = [0.4, 0.3, 0.85];
const AMBIENT: f64 = 0.35;
/// Two hits closer than this are treated as the same surface point.
pub const SAME_POINT_TOL: f64 = 0.1;

pub fn scene_center() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
}

impl Shape {
    fn rest_height(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => half[2],
        }
    }

    pub fn noun(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
        }
    }
}

/// Circular motion on the ground around the scene center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub radius: f64,
    pub phase: f64,
    /// Radians per unit scene time; zero keeps the subject still.
    pub angular_speed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub shape: Shape,
    pub color: [f64; 3],
    pub color_name: String,
    pub trajectory: Trajectory,
}

impl Subject {
    pub fn position(&self, center: &Vector3<f64>, time: f64) -> Vector3<f64> {
        let a = self.trajectory.phase + self.trajectory.angular_speed * time;
        Vector3::new(
            center.x + self.trajectory.radius * a.cos(),
            center.y + self.trajectory.radius * a.sin(),
            self.shape.rest_height(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub ground: [f64; 3],
    /// Peak-to-peak brightness swing of the checker pattern.
    pub checker_contrast: f64,
    pub checker_cell: f64,
    pub horizon: [f64; 3],
    pub zenith: [f64; 3],
}

impl Default for Background {
    fn default() -> Self {
        Self {
            ground: [0.5, 0.5, 0.5],
            checker_contrast: 0.06,
            checker_cell: 0.5,
            horizon: [0.78, 0.82, 0.9],
            zenith: [0.35, 0.5, 0.85],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub subjects: Vec<Subject>,
    pub background: Background,
    pub center: [f64; 3],
    pub seed: u64,
}

const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.15, 0.12]),
    ("green", [0.2, 0.7, 0.25]),
    ("blue", [0.15, 0.3, 0.85]),
    ("yellow", [0.9, 0.85, 0.2]),
    ("orange", [0.95, 0.55, 0.1]),
    ("purple", [0.55, 0.2, 0.7]),
    ("white", [0.95, 0.95, 0.95]),
    ("black", [0.08, 0.08, 0.08]),
];

impl SceneSpec {
    /// Random scene with one or two subjects moving within one unit of the center.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=2);
        let subjects = (0..count).map(|_| random_subject(&mut rng, true)).collect();
        let c = scene_center();
        Self {
            subjects,
            background: Background::default(),
            center: [c.x, c.y, c.z],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.subjects.len()) {
            return Err(Error::Constraint(format!("scene needs 1 or 2 subjects, got {}", self.subjects.len())));
        }
        Ok(())
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }

    /// Templated caption, e.g. "a red sphere and a blue box moving on a gray plane".
    pub fn caption(&self) -> String {
        let parts: Vec<String> = self
            .subjects
            .iter()
            .map(|s| format!("a {} {}", s.color_name, s.shape.noun()))
            .collect();
        let moving = self.subjects.iter().any(|s| s.trajectory.angular_speed != 0.0);
        format!("{} {} on a gray plane", parts.join(" and "), if moving { "moving" } else { "resting" })
    }

    pub fn prompt(&self, vocab: usize, max_len: usize) -> PromptSpec {
        PromptSpec::encode(&self.caption(), vocab, max_len)
    }

    /// Copy with every subject frozen in place.
    pub fn frozen(&self) -> Self {
        let mut s = self.clone();
        for sub in &mut s.subjects {
            sub.trajectory.angular_speed = 0.0;
        }
        s
    }
}

fn random_subject<R: Rng + ?Sized>(rng: &mut R, moving: bool) -> Subject {
    let shape = if rng.random_bool(0.5) {
        Shape::Sphere {
            radius: rng.random_range(0.3..0.5),
        }
    } else {
        Shape::Box {
            half: [
                rng.random_range(0.25..0.45),
                rng.random_range(0.25..0.45),
                rng.random_range(0.25..0.45),
            ],
        }
    };
    let (name, color) = PALETTE[rng.random_range(0..PALETTE.len())];
    let speed = if moving {
        let s = rng.random_range(0.6..1.4);
        if rng.random_bool(0.5) {
            s
        } else {
            -s
        }
    } else {
        0.0
    };
    Subject {
        shape,
        color,
        color_name: name.to_string(),
        trajectory: Trajectory {
            radius: rng.random_range(0.0..0.8),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            angular_speed: speed,
        },
    }
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    dist: f64,
    point: Vector3<f64>,
    normal: Vector3<f64>,
    /// 0 is the ground, `k + 1` the k-th subject.
    object: usize,
}

fn intersect_sphere(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.dot(&oc) - r * r;
    let disc = b * b - cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    if t0 > 1e-9 {
        return Some(t0);
    }
    let t1 = -b + sq;
    (t1 > 1e-9).then_some(t1)
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, c: &Vector3<f64>, half: &[f64; 3]) -> Option<(f64, Vector3<f64>)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0;
    let mut sign = 1.0;
    for a in 0..3 {
        let (lo, hi) = (c[a] - half[a], c[a] + half[a]);
        if d[a].abs() < 1e-15 {
            if o[a] < lo || o[a] > hi {
                return None;
            }
            continue;
        }
        let (mut t1, mut t2) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
        let mut s = -1.0;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
            s = 1.0;
        }
        if t1 > t_near {
            t_near = t1;
            axis = a;
            sign = s;
        }
        t_far = t_far.min(t2);
        if t_near > t_far {
            return None;
        }
    }
    if t_near <= 1e-9 {
        return None;
    }
    let mut n = Vector3::zeros();
    n[axis] = sign;
    Some((t_near, n))
}

/// World state of a scene at one instant.
struct Frame<'a> {
    spec: &'a SceneSpec,
    positions: Vec<Vector3<f64>>,
}

impl<'a> Frame<'a> {
    fn at(spec: &'a SceneSpec, frame: usize) -> Self {
        let center = spec.center();
        let time = frame as f64 * FRAME_DT;
        Self {
            spec,
            positions: spec.subjects.iter().map(|s| s.position(&center, time)).collect(),
        }
    }

    fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |dist: f64, normal: Vector3<f64>, object: usize| {
            if best.is_none_or(|b| dist < b.dist) {
                best = Some(Hit {
                    dist,
                    point: o + d * dist,
                    normal,
                    object,
                });
            }
        };
        if d.z < -1e-12 && o.z > 0.0 {
            consider(-o.z / d.z, Vector3::z(), 0);
        }
        for (k, (sub, pos)) in self.spec.subjects.iter().zip(&self.positions).enumerate() {
            match sub.shape {
                Shape::Sphere { radius } => {
                    if let Some(t) = intersect_sphere(o, d, pos, radius) {
                        let p = o + d * t;
                        consider(t, (p - pos) / radius, k + 1);
                    }
                }
                Shape::Box { half } => {
                    if let Some((t, n)) = intersect_box(o, d, pos, &half) {
                        consider(t, n, k + 1);
                    }
                }
            }
        }
        best
    }

    fn albedo(&self, hit: &Hit) -> [f64; 3] {
        let bg = &self.spec.background;
        if hit.object == 0 {
            let (x, y) = (hit.point.x, hit.point.y);
            let parity = ((x / bg.checker_cell).floor() + (y / bg.checker_cell).floor()).rem_euclid(2.0);
            let rho2 = (x * x + y * y) / 16.0;
            let swing = bg.checker_contrast * (parity - 0.5) / (1.0 + rho2);
            bg.ground.map(|g| g + swing)
        } else {
            self.spec.subjects[hit.object - 1].color
        }
    }

    fn shade(&self, d: &Vector3<f64>, hit: Option<Hit>) -> [f64; 3] {
        match hit {
            Some(h) => {
                let l = Vector3::from(LIGHT).normalize();
                let lambert = AMBIENT + (1.0 - AMBIENT) * h.normal.dot(&l).max(0.0);
                self.albedo(&h).map(|a| (a * lambert).clamp(0.0, 1.0))
            }
            None => {
                let bg = &self.spec.background;
                let s = d.z.clamp(0.0, 1.0);
                [0, 1, 2].map(|c| bg.horizon[c] * (1.0 - s) + bg.zenith[c] * s)
            }
        }
    }
}

/// A surface point seen in one frame, with its pixel position in every view
/// where it is visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub object: usize,
    pub point: [f64; 3],
    pub pixels: Vec<Option<[f64; 2]>>,
}

/// Correspondences of one rendered scene, indexed by frame.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Correspondences {
    pub frames: Vec<Vec<Track>>,
}

/// One matched pixel pair between two views of a frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelPair {
    pub frame: usize,
    pub view_a: usize,
    pub view_b: usize,
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl Correspondences {
    pub fn track_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Every pair of distinct views `a < b` in which a track is visible.
    pub fn pairs(&self) -> Vec<PixelPair> {
        let mut out = Vec::new();
        for (frame, tracks) in self.frames.iter().enumerate() {
            for t in tracks {
                for (va, pa) in t.pixels.iter().enumerate() {
                    let Some(pa) = pa else { continue };
                    for (vb, pb) in t.pixels.iter().enumerate().skip(va + 1) {
                        if let Some(pb) = pb {
                            out.push(PixelPair {
                                frame,
                                view_a: va,
                                view_b: vb,
                                a: *pa,
                                b: *pb,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Pairs between two specific views.
    pub fn pairs_between(&self, frame: usize, a: usize, b: usize) -> Vec<([f64; 2], [f64; 2])> {
        self.frames
            .get(frame)
            .map(|tracks| {
                tracks
                    .iter()
                    .filter_map(|t| match (t.pixels.get(a)?, t.pixels.get(b)?) {
                        (Some(pa), Some(pb)) => Some((*pa, *pb)),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Restricts to a subset of views, in the given order.
    pub fn select_views(&self, views: &[usize]) -> Correspondences {
        Correspondences {
            frames: self
                .frames
                .iter()
                .map(|tracks| {
                    tracks
                        .iter()
                        .filter_map(|t| {
                            let pixels: Vec<Option<[f64; 2]>> = views.iter().map(|&v| t.pixels[v]).collect();
                            (pixels.iter().filter(|p| p.is_some()).count() >= 2).then(|| Track {
                                object: t.object,
                                point: t.point,
                                pixels,
                            })
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    /// `n x f x 3 x h x w`, colors in `[0, 1]`.
    pub videos: LatentVideo,
    pub correspondences: Correspondences,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderOptions {
    /// Spacing of the pixel grid seeding correspondence tracks.
    pub corr_stride: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { corr_stride: 4 }
    }
}

fn render_view(frame: &Frame, cam: &CameraExtrinsics, k: &CameraIntrinsics, h: usize, w: usize, out: &mut [f64]) {
    let o = cam.center();
    let plane = h * w;
    for v in 0..h {
        for u in 0..w {
            let d = cam.ray_direction(k, u as f64, v as f64);
            let c = frame.shade(&d, frame.cast(&o, &d));
            for ch in 0..3 {
                out[ch * plane + v * w + u] = c[ch];
            }
        }
    }
}

/// Renders a single camera at one frame as `3 x h x w`.
pub fn render_image(spec: &SceneSpec, frame: usize, cam: &CameraExtrinsics, k: &CameraIntrinsics, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    render_view(&Frame::at(spec, frame), cam, k, h, w, &mut out);
    out
}

fn visible_pixel(frame: &Frame, cam: &CameraExtrinsics, k: &CameraIntrinsics, h: usize, w: usize, x: &Vector3<f64>, object: usize) -> Option<[f64; 2]> {
    let (u, v) = cam.project(k, x)?;
    let (ur, vr) = (u.round(), v.round());
    if ur < 0.0 || vr < 0.0 || ur > (w - 1) as f64 || vr > (h - 1) as f64 {
        return None;
    }
    let o = cam.center();
    let same = |uu: f64, vv: f64| {
        let d = cam.ray_direction(k, uu, vv);
        frame
            .cast(&o, &d)
            .is_some_and(|hit| hit.object == object && (hit.point - x).norm() < SAME_POINT_TOL)
    };
    (same(u, v) && same(ur, vr)).then_some([u, v])
}

/// Renders every view of `frames` frames and tracks surface points across views.
pub fn render_scene(spec: &SceneSpec, rig: &CameraRig, frames: usize, res: (usize, usize), opts: RenderOptions) -> Result<RenderOutput> {
    spec.validate()?;
    let (h, w) = res;
    if rig.is_empty() || frames == 0 || h == 0 || w == 0 {
        return Err(Error::Constraint("render needs cameras, frames and a positive resolution".into()));
    }
    if opts.corr_stride == 0 {
        return Err(Error::Constraint("correspondence stride must be positive".into()));
    }
    let k = &rig.intrinsics;
    k.validate(h, w)?;
    let n = rig.len();
    let mut videos = LatentVideo::zeros([n, frames, 3, h, w]);
    let mut corr = Correspondences::default();
    let plane = 3 * h * w;
    for fi in 0..frames {
        let frame = Frame::at(spec, fi);
        for pos in &frame.positions {
            let seen = rig.cameras.iter().any(|c| {
                c.project(k, pos)
                    .is_some_and(|(u, v)| u >= -0.5 && v >= -0.5 && u < w as f64 - 0.5 && v < h as f64 - 0.5)
            });
            if !seen {
                return Err(Error::Visibility(format!("subject at {:?} leaves every view in frame {fi}", pos.as_slice())));
            }
        }
        for (vi, cam) in rig.cameras.iter().enumerate() {
            let off = (vi * frames + fi) * plane;
            render_view(&frame, cam, k, h, w, &mut videos.data_mut()[off..off + plane]);
        }
        let mut tracks = Vec::new();
        let start = opts.corr_stride / 2;
        for (vi, cam) in rig.cameras.iter().enumerate() {
            let o = cam.center();
            for v in (start..h).step_by(opts.corr_stride) {
                for u in (start..w).step_by(opts.corr_stride) {
                    let d = cam.ray_direction(k, u as f64, v as f64);
                    let Some(hit) = frame.cast(&o, &d) else { continue };
                    let mut pixels = vec![None; n];
                    pixels[vi] = Some([u as f64, v as f64]);
                    let mut others = 0;
                    for (vj, cj) in rig.cameras.iter().enumerate() {
                        if vj != vi {
                            pixels[vj] = visible_pixel(&frame, cj, k, h, w, &hit.point, hit.object);
                            others += usize::from(pixels[vj].is_some());
                        }
                    }
                    if others > 0 {
                        tracks.push(Track {
                            object: hit.object,
                            point: [hit.point.x, hit.point.y, hit.point.z],
                            pixels,
                        });
                    }
                }
            }
        }
        corr.frames.push(tracks);
    }
    Ok(RenderOutput {
        videos,
        correspondences: corr,
    })
}

/// Camera rig around the scene center at stratified azimuths: consecutive
/// cameras are `min(45, 360 / n)` degrees apart (plus jitter), so every
/// curriculum stage finds admissible pairs.
pub fn desk_rig<R: Rng + ?Sized>(n: usize, h: usize, w: usize, rng: &mut R) -> Result<CameraRig> {
    if n == 0 {
        return Err(Error::Constraint("rig needs at least one camera".into()));
    }
    let spacing = (360.0 / n as f64).min(45.0);
    let base: f64 = rng.random_range(0.0..360.0);
    let cams = (0..n)
        .map(|i| {
            SphericalPose {
                azimuth: (base + spacing * i as f64 + rng.random_range(-4.0..4.0)).rem_euclid(360.0),
                elevation: rng.random_range(10.0..35.0),
                distance: rng.random_range(3.5..4.5),
                target: scene_center(),
            }
            .to_extrinsics()
        })
        .collect::<Result<Vec<_>>>()?;
    CameraRig::new(cams, CameraIntrinsics::from_fov(h, w, DESK_FOV_DEG))
}

/// Monocular video with a known pose per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySequence {
    /// `3 x h x w` per frame.
    pub frames: Vec<Vec<f64>>,
    pub poses: Vec<CameraExtrinsics>,
    pub intrinsics: CameraIntrinsics,
    pub height: usize,
    pub width: usize,
    pub prompt: String,
}

impl TrajectorySequence {
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() < 2 || self.frames.len() != self.poses.len() {
            return Err(Error::Constraint(format!(
                "trajectory needs >= 2 frames with one pose each, got {} frames and {} poses",
                self.frames.len(),
                self.poses.len()
            )));
        }
        if self.frames.iter().any(|f| f.len() != 3 * self.height * self.width) {
            return Err(Error::Constraint("trajectory frame size mismatch".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A camera orbiting a frozen scene, `step_deg` of azimuth per frame.
pub fn render_trajectory(seed: u64, length: usize, step_deg: f64, res: (usize, usize)) -> Result<TrajectorySequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616a);
    let spec = SceneSpec::random(seed).frozen();
    let (h, w) = res;
    let k = CameraIntrinsics::from_fov(h, w, DESK_FOV_DEG);
    let az0: f64 = rng.random_range(0.0..360.0);
    let elevation = rng.random_range(10.0..35.0);
    let distance = rng.random_range(3.5..4.5);
    let mut frames = Vec::with_capacity(length);
    let mut poses = Vec::with_capacity(length);
    for i in 0..length {
        let cam = SphericalPose {
            azimuth: (az0 + step_deg * i as f64).rem_euclid(360.0),
            elevation,
            distance,
            target: scene_center(),
        }
        .to_extrinsics()?;
        frames.push(render_image(&spec, 0, &cam, &k, h, w));
        poses.push(cam);
    }
    let seq = TrajectorySequence {
        frames,
        poses,
        intrinsics: k,
        height: h,
        width: w,
        prompt: spec.caption(),
    };
    seq.validate()?;
    Ok(seq)
}

/// Kinds of camera-free "general" videos.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneralKind {
    /// Fixed camera, still subjects.
    Static,
    /// Camera yawing by a few degrees per frame.
    Panning,
    /// Fixed camera, one small subject moving.
    MovingSubject,
}

/// A camera-free single-view video.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneralVideo {
    /// `f x 3 x h x w`.
    pub frames: Vec<f64>,
    pub caption: String,
    /// `h x w`; pixels showing a moving subject in at least one frame.
    pub motion_mask: Vec<bool>,
}

/// A general video over a high-contrast ground seen from above.
pub fn render_general_video(seed: u64, kind: GeneralKind, frames: usize, res: (usize, usize)) -> Result<GeneralVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6765_6e6c);
    let (h, w) = res;
    let mut spec = SceneSpec::random(seed).frozen();
    spec.background.checker_contrast = rng.random_range(0.3..0.5);
    spec.background.checker_cell = rng.random_range(0.35..0.6);
    if kind == GeneralKind::MovingSubject {
        let mut mover = random_subject(&mut rng, true);
        mover.shape = Shape::Sphere { radius: 0.25 };
        mover.trajectory.radius = rng.random_range(0.3..0.6);
        mover.trajectory.angular_speed = 0.5 * mover.trajectory.angular_speed.signum();
        spec.subjects = vec![mover];
    }
    let k = CameraIntrinsics::from_fov(h, w, DESK_FOV_DEG);
    let pose = SphericalPose {
        azimuth: rng.random_range(0.0..360.0),
        elevation: rng.random_range(40.0..60.0),
        distance: rng.random_range(3.5..4.5),
        target: scene_center(),
    };
    let base = pose.to_extrinsics()?;
    let pan_deg = rng.random_range(3.0..6.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let mut out = Vec::with_capacity(frames * 3 * h * w);
    let mut motion_mask = vec![false; h * w];
    for fi in 0..frames {
        let cam = match kind {
            GeneralKind::Panning => {
                // yaw about the camera's own vertical axis
                let yaw = crate::geometry::rot_y(pan_deg * fi as f64);
                CameraExtrinsics::new(yaw * base.rotation(), yaw * base.translation())?
            }
            _ => base,
        };
        out.extend(render_image(&spec, fi, &cam, &k, h, w));
        if kind == GeneralKind::MovingSubject {
            let frame = Frame::at(&spec, fi);
            let o = cam.center();
            for v in 0..h {
                for u in 0..w {
                    let d = cam.ray_direction(&k, u as f64, v as f64);
                    if frame.cast(&o, &d).is_some_and(|hit| hit.object != 0) {
                        motion_mask[v * w + u] = true;
                    }
                }
            }
        }
    }
    Ok(GeneralVideo {
        frames: out,
        caption: spec.caption(),
        motion_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_camera, CameraConstraints};

    fn pixel(v: &LatentVideo, view: usize, frame: usize, u: usize, y: usize) -> [f64; 3] {
        let [_, f, _, h, w] = v.dims();
        let base = (view * f + frame) * 3 * h * w;
        [0, 1, 2].map(|c| v.data()[base + c * h * w + y * w + u])
    }

    #[test]
    fn random_scenes_are_valid_and_captioned() {
        for seed in 0..50 {
            let s = SceneSpec::random(seed);
            s.validate().unwrap();
            assert!(s.caption().starts_with("a "));
            assert_eq!(s, SceneSpec::random(seed));
        }
        let s = SceneSpec::random(3);
        let p = s.prompt(256, 16);
        assert!(p.token_ids.len() >= 5);
    }

    #[test]
    fn sphere_at_center_projects_to_principal_point() {
        let spec = SceneSpec {
            subjects: vec![Subject {
                shape: Shape::Sphere { radius: 0.3 },
                color: [1.0, 0.0, 0.0],
                color_name: "red".into(),
                trajectory: Trajectory {
                    radius: 0.0,
                    phase: 0.0,
                    angular_speed: 0.0,
                },
            }],
            background: Background::default(),
            center: [0.0, 0.0, 0.5],
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = CameraIntrinsics::from_fov(32, 32, 60.0);
        for _ in 0..50 {
            // shift the target to the sphere's center so it sits on the optical axis
            let target = Vector3::new(0.0, 0.0, 0.3);
            let cam = sample_camera(&CameraConstraints::default(), target, &mut rng).unwrap();
            let centre = spec.subjects[0].position(&spec.center(), 0.0);
            let (u, v) = cam.project(&k, &centre).unwrap();
            assert!((u - k.cx).abs() < 1.0 && (v - k.cy).abs() < 1.0);
            let img = render_image(&spec, 0, &cam, &k, 32, 32);
            // the central pixel sees the red sphere
            let c = 16 * 32 + 16;
            assert!(img[c] > 0.2 && img[1024 + c] < 0.05);
        }
    }

    #[test]
    fn render_is_deterministic_and_synchronized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = SceneSpec::random(11);
        let rig = desk_rig(3, 24, 24, &mut rng).unwrap();
        let a = render_scene(&spec, &rig, 3, (24, 24), RenderOptions::default()).unwrap();
        let b = render_scene(&spec, &rig, 3, (24, 24), RenderOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.videos.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.correspondences.track_count() > 0);
        // every track reprojects to its stored pixels exactly
        for (fi, tracks) in a.correspondences.frames.iter().enumerate() {
            for t in tracks {
                let x = Vector3::from(t.point);
                for (vi, p) in t.pixels.iter().enumerate() {
                    if let Some(p) = p {
                        let (u, v) = rig.cameras[vi].project(&rig.intrinsics, &x).unwrap();
                        assert!((u - p[0]).hypot(v - p[1]) < 0.5, "frame {fi} view {vi}");
                    }
                }
            }
        }
    }

    #[test]
    fn corresponding_pixels_share_colour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = SceneSpec::random(5);
        let rig = desk_rig(4, 32, 32, &mut rng).unwrap();
        let out = render_scene(&spec, &rig, 2, (32, 32), RenderOptions { corr_stride: 2 }).unwrap();
        let pairs = out.correspondences.pairs();
        assert!(pairs.len() > 100);
        let ok = pairs
            .iter()
            .filter(|p| {
                let a = pixel(&out.videos, p.view_a, p.frame, p.a[0].round() as usize, p.a[1].round() as usize);
                let b = pixel(&out.videos, p.view_b, p.frame, p.b[0].round() as usize, p.b[1].round() as usize);
                a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 0.1)
            })
            .count();
        assert!(ok as f64 / pairs.len() as f64 > 0.95);
    }

    #[test]
    fn subject_outside_every_view_is_an_error() {
        let mut spec = SceneSpec::random(1);
        spec.subjects[0].trajectory.radius = 50.0;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rig = desk_rig(2, 16, 16, &mut rng).unwrap();
        assert!(matches!(render_scene(&spec, &rig, 1, (16, 16), RenderOptions::default()), Err(Error::Visibility(_))));
    }

    #[test]
    fn desk_rig_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rig = desk_rig(4, 32, 32, &mut rng).unwrap();
        let c = scene_center();
        for i in 0..3 {
            let d = crate::geometry::azimuth_difference(&rig.cameras[i], &rig.cameras[i + 1], &c).unwrap();
            assert!((d - 45.0).abs() <= 8.0 + 1e-9);
        }
    }

    #[test]
    fn trajectory_and_general_videos() {
        let seq = render_trajectory(3, 6, 5.0, (16, 16)).unwrap();
        assert_eq!(seq.len(), 6);
        let c = scene_center();
        let d = crate::geometry::azimuth_difference(&seq.poses[0], &seq.poses[1], &c).unwrap();
        assert!((d - 5.0).abs() < 1e-6);
        for kind in [GeneralKind::Static, GeneralKind::Panning, GeneralKind::MovingSubject] {
            let g = render_general_video(9, kind, 4, (16, 16)).unwrap();
            assert_eq!(g.frames.len(), 4 * 3 * 256);
            assert!(!g.caption.is_empty());
            let v = &g.frames;
            let same = v[..768] == v[3 * 768..];
            assert_eq!(same, kind == GeneralKind::Static, "{kind:?}");
            assert_eq!(g.motion_mask.iter().any(|&m| m), kind == GeneralKind::MovingSubject);
        }
    }
}
