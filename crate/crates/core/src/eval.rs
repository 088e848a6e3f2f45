//! Evaluation proxies: cross-view color agreement at ground-truth
//! correspondences, relative-pose recovery from matches, and frame-to-frame
//! smoothness.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SceneData;
use crate::error::{Error, Result};
use crate::flow::LatentVideo;
use crate::geometry::{rot_err, trans_err, CameraIntrinsics, CameraRig};
use crate::scene::Correspondences;

/// Per-channel color tolerance for a matched pixel pair.
pub const DEFAULT_MATCH_TOL: f64 = 0.1;

fn pixel_index(p: [f64; 2], h: usize, w: usize) -> (usize, usize) {
    let u = p[0].round().clamp(0.0, (w - 1) as f64) as usize;
    let v = p[1].round().clamp(0.0, (h - 1) as f64) as usize;
    (u, v)
}

fn color_at(videos: &LatentVideo, view: usize, frame: usize, p: [f64; 2]) -> [f64; 3] {
    let [_, f, c, h, w] = videos.dims();
    let (u, v) = pixel_index(p, h, w);
    let base = (view * f + frame) * c * h * w;
    let d = videos.data();
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate().take(c.min(3)) {
        *o = d[base + ch * h * w + v * w + u];
    }
    out
}

fn colors_agree(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Fraction of corresponding pixel pairs (nearest pixel) whose colors differ
/// by at most `tol` in every channel, averaged over frames that have pairs.
pub fn matched_pixel_rate(videos: &LatentVideo, corr: &Correspondences, tol: f64) -> Result<f64> {
    let [n, f, ..] = videos.dims();
    let mut rates = Vec::new();
    for (frame, _) in corr.frames.iter().enumerate().take(f) {
        let (mut hit, mut total) = (0usize, 0usize);
        for p in corr.pairs().into_iter().filter(|p| p.frame == frame) {
            if p.view_a >= n || p.view_b >= n {
                return Err(Error::CountMismatch {
                    what: "correspondence views",
                    expected: n,
                    got: p.view_a.max(p.view_b) + 1,
                });
            }
            total += 1;
            hit += usize::from(colors_agree(
                color_at(videos, p.view_a, frame, p.a),
                color_at(videos, p.view_b, frame, p.b),
                tol,
            ));
        }
        if total > 0 {
            rates.push(hit as f64 / total as f64);
        }
    }
    if rates.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// The same rate on videos of independent uniform noise.
pub fn noise_baseline_rate<R: Rng + ?Sized>(dims: [usize; 5], corr: &Correspondences, tol: f64, rng: &mut R) -> Result<f64> {
    let len = dims.iter().product();
    let data: Vec<f64> = (0..len).map(|_| rng.random::<f64>()).collect();
    matched_pixel_rate(&LatentVideo::from_vec(dims, data)?, corr, tol)
}

/// Similarity normalizing a point set to zero mean and mean distance sqrt(2).
fn hartley(points: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Depths of a correspondence under pose `(r, t)`: `lb x_b = r (la x_a) + t`.
fn triangulate_depths(r: &Matrix3<f64>, t: &Vector3<f64>, xa: &Vector3<f64>, xb: &Vector3<f64>) -> (f64, f64) {
    let rx = r * xa;
    // least squares for [rx, -xb] [la, lb]^T = -t
    let (a11, a12, a22) = (rx.dot(&rx), -rx.dot(xb), xb.dot(xb));
    let (b1, b2) = (-rx.dot(t), xb.dot(t));
    let det = a11 * a22 - a12 * a12;
    if det.abs() < 1e-15 {
        return (0.0, 0.0);
    }
    ((b1 * a22 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det)
}

/// Relative pose `x_b = R x_a + t` (unit `t`) from pixel correspondences by
/// the normalized eight-point algorithm on the essential matrix and a
/// cheirality vote over the four decompositions.
pub fn eight_point_pose(pairs: &[([f64; 2], [f64; 2])], k: &CameraIntrinsics) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if pairs.len() < 8 {
        return Err(Error::Estimation(format!("{} correspondences, need at least 8", pairs.len())));
    }
    let k_inv = k.inverse_matrix();
    let xa: Vec<Vector3<f64>> = pairs.iter().map(|(a, _)| k_inv * Vector3::new(a[0], a[1], 1.0)).collect();
    let xb: Vec<Vector3<f64>> = pairs.iter().map(|(_, b)| k_inv * Vector3::new(b[0], b[1], 1.0)).collect();
    let (ta, tb) = (hartley(&xa), hartley(&xb));
    let rows = pairs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (pa, pb)) in xa.iter().zip(&xb).enumerate() {
        let (p, q) = (ta * pa, tb * pb);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, r * 3 + c)] = q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Estimation("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let sv = |k: usize| svd.singular_values[order[k]];
    let smallest = order[8];
    if sv(7) <= 1e-9 * sv(0) {
        return Err(Error::DegenerateGeometry(
            "correspondences admit more than one essential matrix (zero baseline, pure rotation or degenerate points)".into(),
        ));
    }
    let e_norm = Matrix3::from_fn(|r, c| v_t[(smallest, r * 3 + c)]);
    let e = tb.transpose() * e_norm * ta;
    let esvd = e.svd(true, true);
    let (mut u, mut v_t) = (esvd.u.expect("requested"), esvd.v_t.expect("requested"));
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t0: Vector3<f64> = u.column(2).into_owned();
    let candidates = [
        (u * w * v_t, t0),
        (u * w * v_t, -t0),
        (u * w.transpose() * v_t, t0),
        (u * w.transpose() * v_t, -t0),
    ];
    let mut best = None;
    let mut best_count = 0;
    for (r, t) in candidates {
        let count = xa
            .iter()
            .zip(&xb)
            .filter(|(pa, pb)| {
                let (la, lb) = triangulate_depths(&r, &t, pa, pb);
                la > 0.0 && lb > 0.0
            })
            .count();
        if count > best_count {
            best_count = count;
            best = Some((r, t));
        }
    }
    match best {
        Some((r, t)) if 2 * best_count > pairs.len() => Ok((r, t.normalize())),
        _ => Err(Error::Estimation(format!(
            "no decomposition puts most points in front of both cameras ({best_count} of {})",
            pairs.len()
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMatchConfig {
    /// Half width of the square comparison window.
    pub radius: usize,
    pub stride: usize,
    /// Minimum intensity variance of an anchor window.
    pub min_variance: f64,
    /// Maximum ratio of best to second-best window distance.
    pub ratio: f64,
}

impl Default for BlockMatchConfig {
    fn default() -> Self {
        Self {
            radius: 2,
            stride: 3,
            min_variance: 1e-4,
            ratio: 0.8,
        }
    }
}

/// Source of correspondences for pose estimation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Matcher {
    /// The renderer's correspondences, ignoring the video content.
    GroundTruth,
    /// Renderer correspondences whose colors in the evaluated video agree
    /// within the tolerance.
    Consistent { tol: f64 },
    /// Exhaustive window matching on the evaluated video.
    Block(BlockMatchConfig),
}

impl Default for Matcher {
    fn default() -> Self {
        Matcher::Consistent { tol: DEFAULT_MATCH_TOL }
    }
}

fn gray_frame(videos: &LatentVideo, view: usize, frame: usize) -> Vec<f64> {
    let [_, f, c, h, w] = videos.dims();
    let base = (view * f + frame) * c * h * w;
    let d = videos.data();
    (0..h * w)
        .map(|i| (0..c).map(|ch| d[base + ch * h * w + i]).sum::<f64>() / c as f64)
        .collect()
}

fn block_matches(videos: &LatentVideo, frame: usize, a: usize, b: usize, cfg: &BlockMatchConfig) -> Vec<([f64; 2], [f64; 2])> {
    let [.., h, w] = videos.dims();
    let r = cfg.radius;
    if h <= 2 * r || w <= 2 * r {
        return Vec::new();
    }
    let (ga, gb) = (gray_frame(videos, a, frame), gray_frame(videos, b, frame));
    let window = |g: &[f64], u: usize, v: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity((2 * r + 1).pow(2));
        for y in v - r..=v + r {
            out.extend_from_slice(&g[y * w + u - r..=y * w + u + r]);
        }
        out
    };
    let mut out = Vec::new();
    for v in (r..h - r).step_by(cfg.stride.max(1)) {
        for u in (r..w - r).step_by(cfg.stride.max(1)) {
            let wa = window(&ga, u, v);
            let mean = wa.iter().sum::<f64>() / wa.len() as f64;
            let var = wa.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / wa.len() as f64;
            if var < cfg.min_variance {
                continue;
            }
            let mut scored = Vec::with_capacity((h - 2 * r) * (w - 2 * r));
            for y in r..h - r {
                for x in r..w - r {
                    let wb = window(&gb, x, y);
                    let ssd: f64 = wa.iter().zip(&wb).map(|(p, q)| (p - q).powi(2)).sum();
                    scored.push((ssd, x, y));
                }
            }
            scored.sort_by(|p, q| p.0.total_cmp(&q.0).then((p.2, p.1).cmp(&(q.2, q.1))));
            let (best, bx, by) = scored[0];
            let second = scored
                .iter()
                .find(|(_, x, y)| x.abs_diff(bx) > 1 || y.abs_diff(by) > 1)
                .map_or(f64::INFINITY, |s| s.0);
            if best <= cfg.ratio * second {
                out.push(([u as f64, v as f64], [bx as f64, by as f64]));
            }
        }
    }
    out
}

/// Correspondences between views `a` and `b` of one frame.
pub fn match_views(matcher: &Matcher, videos: &LatentVideo, corr: &Correspondences, frame: usize, a: usize, b: usize) -> Vec<([f64; 2], [f64; 2])> {
    match matcher {
        Matcher::GroundTruth => corr.pairs_between(frame, a, b),
        Matcher::Consistent { tol } => corr
            .pairs_between(frame, a, b)
            .into_iter()
            .filter(|(pa, pb)| colors_agree(color_at(videos, a, frame, *pa), color_at(videos, b, frame, *pb), *tol))
            .collect(),
        Matcher::Block(cfg) => block_matches(videos, frame, a, b, cfg),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseAccuracy {
    /// Mean over successful estimates; 180 when none succeeded.
    pub rot_err_deg: f64,
    /// Mean over successful estimates; 2 when none succeeded.
    pub trans_err: f64,
    pub evaluated: usize,
    pub failures: usize,
}

/// Relative pose of every view pair in every frame, against the ground-truth
/// rig.
pub fn pose_accuracy(videos: &LatentVideo, rig_gt: &CameraRig, corr: &Correspondences, matcher: &Matcher) -> Result<PoseAccuracy> {
    let [n, f, ..] = videos.dims();
    if n < 2 {
        return Err(Error::Config("pose accuracy needs at least two views".into()));
    }
    if rig_gt.len() != n {
        return Err(Error::CountMismatch {
            what: "ground-truth cameras",
            expected: n,
            got: rig_gt.len(),
        });
    }
    let jobs: Vec<(usize, usize, usize)> = (0..f).flat_map(|fr| (0..n).flat_map(move |a| (a + 1..n).map(move |b| (fr, a, b)))).collect();
    let results: Vec<Option<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(fr, a, b)| {
            let pairs = match_views(matcher, videos, corr, fr, a, b);
            let (r, t) = eight_point_pose(&pairs, &rig_gt.intrinsics).ok()?;
            let rel = rig_gt.cameras[b].relative_to(&rig_gt.cameras[a]);
            let te = trans_err(&t, rel.translation()).ok()?;
            Some((rot_err(&r, rel.rotation()), te))
        })
        .collect();
    let ok: Vec<(f64, f64)> = results.iter().flatten().copied().collect();
    let failures = results.len() - ok.len();
    if ok.is_empty() {
        return Ok(PoseAccuracy {
            rot_err_deg: 180.0,
            trans_err: 2.0,
            evaluated: 0,
            failures,
        });
    }
    let m = ok.len() as f64;
    Ok(PoseAccuracy {
        rot_err_deg: ok.iter().map(|e| e.0).sum::<f64>() / m,
        trans_err: ok.iter().map(|e| e.1).sum::<f64>() / m,
        evaluated: ok.len(),
        failures,
    })
}

/// Mean squared difference of consecutive frames, averaged over views.
pub fn temporal_smoothness(video: &LatentVideo) -> Result<f64> {
    let [n, f, c, h, w] = video.dims();
    if f < 2 {
        return Err(Error::Config("temporal smoothness needs at least two frames".into()));
    }
    let frame = c * h * w;
    let mut total = 0.0;
    for v in 0..n {
        let d = video.view(v);
        let mut sum = 0.0;
        for i in 0..f - 1 {
            sum += d[i * frame..(i + 1) * frame]
                .iter()
                .zip(&d[(i + 1) * frame..(i + 2) * frame])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        total += sum / ((f - 1) * frame) as f64;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub scene_id: String,
    pub matched_pixel_rate: f64,
    pub noise_baseline_rate: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub pose_pairs: usize,
    pub pose_failures: usize,
    pub temporal_smoothness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tol: f64,
    pub matcher: Matcher,
    pub noise_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_MATCH_TOL,
            matcher: Matcher::default(),
            noise_seed: 0,
        }
    }
}

/// Scores colors `videos` (first `n` cameras of `scene`).
pub fn evaluate_scene(videos: &LatentVideo, scene: &SceneData, opts: &EvalOptions) -> Result<SceneEval> {
    use rand::SeedableRng;
    let [n, f, c, h, w] = videos.dims();
    let [sn, sf, sc, sh, sw] = scene.videos.dims();
    if n > sn || f != sf || c != sc || h != sh || w != sw {
        return Err(Error::ShapeMismatch {
            expected: vec![sn, sf, sc, sh, sw],
            got: vec![n, f, c, h, w],
        });
    }
    let views: Vec<usize> = (0..n).collect();
    let corr = scene.manifest.correspondences.select_views(&views);
    let rig = scene.rig.subset(&views);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::dataset::derive_seed(opts.noise_seed, 400, scene.manifest.seed));
    let pose = pose_accuracy(videos, &rig, &corr, &opts.matcher)?;
    Ok(SceneEval {
        scene_id: scene.manifest.scene_id.clone(),
        matched_pixel_rate: matched_pixel_rate(videos, &corr, opts.tol)?,
        noise_baseline_rate: noise_baseline_rate(videos.dims(), &corr, opts.tol, &mut rng)?,
        rot_err_deg: pose.rot_err_deg,
        trans_err: pose.trans_err,
        pose_pairs: pose.evaluated,
        pose_failures: pose.failures,
        temporal_smoothness: if f >= 2 { temporal_smoothness(videos)? } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub matched_pixel_rate: f64,
    pub noise_baseline_rate: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub temporal_smoothness: f64,
    pub pose_failures: usize,
    pub tol: f64,
    pub matcher: Matcher,
    pub scenes: Vec<SceneEval>,
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneEval>, opts: &EvalOptions) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Config("no scenes to report".into()));
        }
        let m = scenes.len() as f64;
        let mean = |f: fn(&SceneEval) -> f64| scenes.iter().map(f).sum::<f64>() / m;
        let report = Self {
            matched_pixel_rate: mean(|s| s.matched_pixel_rate),
            noise_baseline_rate: mean(|s| s.noise_baseline_rate),
            rot_err_deg: mean(|s| s.rot_err_deg),
            trans_err: mean(|s| s.trans_err),
            temporal_smoothness: mean(|s| s.temporal_smoothness),
            pose_failures: scenes.iter().map(|s| s.pose_failures).sum(),
            tol: opts.tol,
            matcher: opts.matcher,
            scenes,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.matched_pixel_rate,
            self.noise_baseline_rate,
            self.rot_err_deg,
            self.trans_err,
            self.temporal_smoothness,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Constraint("non-finite value in evaluation report".into()));
        }
        if !(0.0..=1.0).contains(&self.matched_pixel_rate) || !(0.0..=1.0).contains(&self.noise_baseline_rate) {
            return Err(Error::Constraint("rate outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Plain-text table, one row per scene plus the mean.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>9} {:>8} {:>9} {:>6}\n",
            "scene", "matpix", "noise", "roterr", "transerr", "smooth", "fail"
        );
        let row = |s: &mut String, id: &str, e: (f64, f64, f64, f64, f64, usize)| {
            s.push_str(&format!(
                "{:<12} {:>8.4} {:>8.4} {:>9.3} {:>8.4} {:>9.5} {:>6}\n",
                id, e.0, e.1, e.2, e.3, e.4, e.5
            ));
        };
        for sc in &self.scenes {
            row(
                &mut s,
                &sc.scene_id,
                (sc.matched_pixel_rate, sc.noise_baseline_rate, sc.rot_err_deg, sc.trans_err, sc.temporal_smoothness, sc.pose_failures),
            );
        }
        row(
            &mut s,
            "mean",
            (
                self.matched_pixel_rate,
                self.noise_baseline_rate,
                self.rot_err_deg,
                self.trans_err,
                self.temporal_smoothness,
                self.pose_failures,
            ),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_camera, CameraConstraints, CameraExtrinsics};
    use crate::scene::{desk_rig, render_scene, RenderOptions, SceneSpec};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_camera_pairs(rng: &mut ChaCha8Rng, k: &CameraIntrinsics, count: usize, noise_px: f64) -> (CameraExtrinsics, Vec<([f64; 2], [f64; 2])>) {
        let target = Vector3::new(0.0, 0.0, 0.5);
        loop {
            let a = sample_camera(&CameraConstraints::default(), target, rng).unwrap();
            let b = sample_camera(&CameraConstraints::default(), target, rng).unwrap();
            if (a.center() - b.center()).norm() < 0.5 {
                continue;
            }
            let mut pairs = Vec::new();
            while pairs.len() < count {
                let x = target + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
                if let (Some(pa), Some(pb)) = (a.project(k, &x), b.project(k, &x)) {
                    let mut jitter = || rng.random_range(-1.0..1.0) * noise_px;
                    pairs.push(([pa.0 + jitter(), pa.1 + jitter()], [pb.0 + jitter(), pb.1 + jitter()]));
                }
            }
            return (b.relative_to(&a), pairs);
        }
    }

    #[test]
    fn eight_point_exact_on_noiseless_rigs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = CameraIntrinsics::from_fov(64, 64, 60.0);
        for _ in 0..100 {
            let (rel, pairs) = two_camera_pairs(&mut rng, &k, 30, 0.0);
            let (r, t) = eight_point_pose(&pairs, &k).unwrap();
            assert!(rot_err(&r, rel.rotation()) < 0.1);
            assert!(trans_err(&t, rel.translation()).unwrap() < 1e-3);
        }
    }

    #[test]
    fn eight_point_with_pixel_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = CameraIntrinsics::from_fov(256, 256, 60.0);
        let mut errs: Vec<f64> = (0..50)
            .map(|_| {
                let (rel, pairs) = two_camera_pairs(&mut rng, &k, 100, 0.5);
                let (r, _) = eight_point_pose(&pairs, &k).unwrap();
                rot_err(&r, rel.rotation())
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        assert!(errs[25] < 2.0, "median {}", errs[25]);
    }

    #[test]
    fn identity_pose_is_degenerate() {
        let k = CameraIntrinsics::from_fov(32, 32, 60.0);
        let pairs: Vec<_> = (0..20).map(|i| {
            let p = [(i * 7 % 32) as f64, (i * 13 % 32) as f64];
            (p, p)
        }).collect();
        assert!(matches!(eight_point_pose(&pairs, &k), Err(Error::DegenerateGeometry(_))));
        assert!(matches!(eight_point_pose(&pairs[..5], &k), Err(Error::Estimation(_))));
    }

    fn rendered(seed: u64) -> (LatentVideo, CameraRig, Correspondences) {
        let spec = SceneSpec::random(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rig = desk_rig(3, 32, 32, &mut rng).unwrap();
        let out = render_scene(&spec, &rig, 2, (32, 32), RenderOptions::default()).unwrap();
        (out.videos, rig, out.correspondences)
    }

    #[test]
    fn rates_on_renders_identical_views_and_noise() {
        let (videos, _, corr) = rendered(3);
        assert!(matched_pixel_rate(&videos, &corr, 0.1).unwrap() > 0.95);
        let same = videos.select_views(&[0, 0]);
        let self_corr = Correspondences {
            frames: corr
                .frames
                .iter()
                .map(|tracks| {
                    tracks
                        .iter()
                        .filter_map(|t| t.pixels[0].map(|p| crate::scene::Track { pixels: vec![Some(p), Some(p)], ..t.clone() }))
                        .collect()
                })
                .collect(),
        };
        assert_eq!(matched_pixel_rate(&same, &self_corr, 0.0).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = noise_baseline_rate(videos.dims(), &corr, 0.1, &mut rng).unwrap();
        // three channels within 0.1 of each other: (0.19)^3 for uniform colors
        assert!((noise - 0.19f64.powi(3)).abs() < 0.01, "{noise}");
        assert!(matches!(matched_pixel_rate(&videos, &Correspondences::default(), 0.1), Err(Error::EmptyCorrespondences)));
    }

    #[test]
    fn rate_is_monotone_in_tolerance() {
        let (videos, _, corr) = rendered(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let jitter: Vec<f64> = (0..videos.data().len()).map(|_| 0.05 * (rng.random::<f64>() - 0.5)).collect();
        let data: Vec<f64> = videos.data().iter().zip(&jitter).map(|(x, j)| x + j).collect();
        let noisy = LatentVideo::from_vec(videos.dims(), data).unwrap();
        let mut prev = 0.0;
        for tol in [0.0, 0.01, 0.02, 0.05, 0.1, 0.5] {
            let r = matched_pixel_rate(&noisy, &corr, tol).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn rate_is_symmetric_in_views() {
        let (videos, _, corr) = rendered(7);
        let swapped_videos = videos.select_views(&[1, 0, 2]);
        let swapped_corr = corr.select_views(&[1, 0, 2]);
        let a = matched_pixel_rate(&videos, &corr, 0.1).unwrap();
        let b = matched_pixel_rate(&swapped_videos, &swapped_corr, 0.1).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn pose_accuracy_on_renders_is_exact_with_ground_truth() {
        let (videos, rig, corr) = rendered(8);
        let acc = pose_accuracy(&videos, &rig, &corr, &Matcher::GroundTruth).unwrap();
        assert_eq!(acc.failures, 0);
        assert!(acc.rot_err_deg < 0.1, "{acc:?}");
    }

    #[test]
    fn identical_views_with_distinct_poses_are_flagged() {
        let (videos, rig, corr) = rendered(9);
        let same = videos.select_views(&[0, 0]);
        let acc = pose_accuracy(&same, &rig.subset(&[0, 1]), &corr.select_views(&[0, 1]), &Matcher::Block(BlockMatchConfig::default())).unwrap();
        assert!(acc.failures > 0 || acc.rot_err_deg > 5.0, "{acc:?}");
    }

    #[test]
    fn smoothness_cases() {
        let still = LatentVideo::full([2, 4, 3, 4, 4], 0.3);
        assert_eq!(temporal_smoothness(&still).unwrap(), 0.0);
        let mut flicker = LatentVideo::zeros([1, 4, 3, 2, 2]);
        for f in [1, 3] {
            flicker.data_mut()[f * 12..(f + 1) * 12].fill(1.0);
        }
        assert_eq!(temporal_smoothness(&flicker).unwrap(), 1.0);
        assert!(temporal_smoothness(&LatentVideo::zeros([1, 1, 3, 2, 2])).is_err());
    }

    proptest! {
        #[test]
        fn smoothness_matches_scalar_loop(seed in 0u64..1000, n in 1usize..3, f in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = LatentVideo::randn([n, f, 2, 3, 3], &mut rng);
            let dims = v.dims();
            let mut acc = 0.0;
            for view in 0..n {
                let mut s = 0.0;
                for fr in 0..f - 1 {
                    for i in 0..18 {
                        let idx = |fr: usize| ((view * dims[1] + fr) * 18) + i;
                        s += (v.data()[idx(fr + 1)] - v.data()[idx(fr)]).powi(2);
                    }
                }
                acc += s / ((f - 1) * 18) as f64;
            }
            prop_assert!((temporal_smoothness(&v).unwrap() - acc / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn report_table_and_json() {
        let (videos, _, corr) = rendered(10);
        let _ = corr;
        let scene = {
            let dir = tempfile::tempdir().unwrap();
            let cfg = crate::dataset::ForgeConfig {
                scenes: 1,
                cams: 3,
                frames: 2,
                height: 32,
                width: 32,
                seed: 1,
                trajectories: 0,
                general: 0,
                ..Default::default()
            };
            crate::dataset::forge_dataset(dir.path(), &cfg).unwrap();
            crate::dataset::load_scene(&dir.path().join("scene_0000")).unwrap()
        };
        let opts = EvalOptions::default();
        let e = evaluate_scene(&scene.videos, &scene, &opts).unwrap();
        assert!(e.matched_pixel_rate > 0.95);
        assert!(e.rot_err_deg < 0.1);
        assert!(evaluate_scene(&videos.select_views(&[0]), &scene, &opts).is_err());
        let report = EvalReport::from_scenes(vec![e], &opts).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
        assert!(report.to_table().contains("scene_0000"));
    }
}
