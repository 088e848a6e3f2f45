//! Cross-view synchronization module.
//!
//! Per backbone block: a camera encoder adds an embedding of each view's
//! extrinsics (or per-patch Plücker rays) to the spatial features, an
//! attention layer mixes the views, and a projector writes the result back
//! through a residual. Encoder and projector start at zero so an attached
//! module leaves the base model unchanged.

use std::sync::{Arc, Mutex};

use log::warn;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionParams, BackboneWeights, BlockHook, TokenLayout};
use crate::error::{Error, Result};
use crate::geometry::{fundamental_matrix, plucker_rays, CameraIntrinsics, CameraRig};
use crate::tape::{AttentionMask, AttentionSpec, Param, ParamAllocator, ParamGroup, Tape, Var};
use crate::tensor::Tensor;

/// Which tokens the view attention mixes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SyncVariant {
    /// Attention over the `n` view tokens at each (frame, position).
    PerPosition,
    /// Attention over all `n * s` tokens of a frame.
    FullFrame,
    /// Full-frame attention restricted to epipolar bands of `band_px` pixels.
    Epipolar { band_px: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CameraRepresentation {
    /// Flattened 12-number extrinsics, one embedding per view.
    Extrinsic,
    /// Per-patch mean Plücker ray, one embedding per (view, position).
    Plucker,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub variant: SyncVariant,
    pub camera: CameraRepresentation,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            variant: SyncVariant::PerPosition,
            camera: CameraRepresentation::Extrinsic,
        }
    }
}

/// Default epipolar band: 1.5 patch diagonals.
pub fn default_band_px(patch: usize) -> f64 {
    1.5 * (patch as f64) * std::f64::consts::SQRT_2
}

impl CameraRepresentation {
    pub fn input_dim(self) -> usize {
        match self {
            CameraRepresentation::Extrinsic => 12,
            CameraRepresentation::Plucker => 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncBlockState {
    pub cam_w: Param,
    pub cam_b: Param,
    pub view_attention: AttentionParams,
    pub proj_w: Param,
    pub proj_b: Param,
}

impl SyncBlockState {
    /// Zero encoder and projector; view attention copied from `donor`.
    pub fn init(alloc: &mut ParamAllocator, name: &str, donor: &AttentionParams, width: usize, camera: CameraRepresentation) -> Self {
        Self {
            cam_w: alloc.alloc(format!("{name}.cam.w"), Tensor::zeros(&[camera.input_dim(), width])),
            cam_b: alloc.alloc(format!("{name}.cam.b"), Tensor::zeros(&[width])),
            view_attention: AttentionParams::cloned_from(donor, alloc, &format!("{name}.view_attn")),
            proj_w: alloc.alloc(format!("{name}.proj.w"), Tensor::zeros(&[width, width])),
            proj_b: alloc.alloc(format!("{name}.proj.b"), Tensor::zeros(&[width])),
        }
    }

    pub fn width(&self) -> usize {
        self.proj_b.value.len()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.cam_w, &self.cam_b];
        v.extend(self.view_attention.params());
        v.extend([&self.proj_w, &self.proj_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.cam_w, &mut self.cam_b];
        v.extend(self.view_attention.params_mut());
        v.extend([&mut self.proj_w, &mut self.proj_b]);
        v
    }

    pub fn is_at_init(&self) -> bool {
        [&self.cam_w, &self.cam_b, &self.proj_w, &self.proj_b]
            .iter()
            .all(|p| p.value.data().iter().all(|&v| v == 0.0))
    }

    /// Randomizes every parameter; used to probe non-trivial behaviour.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in self.params_mut() {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }
}

/// One sync state per backbone block, donors taken from each block's 3D attention.
pub fn init_sync_states(backbone: &BackboneWeights, camera: CameraRepresentation) -> Vec<SyncBlockState> {
    let mut alloc = ParamAllocator::new(ParamGroup::Sync);
    backbone
        .blocks
        .iter()
        .enumerate()
        .map(|(i, b)| SyncBlockState::init(&mut alloc, &format!("sync{i}"), &b.attn_3d, backbone.config.width, camera))
        .collect()
}

/// Plain affine camera embedding `W^T cam + b`.
pub fn camera_encode(cam: &[f64], state: &SyncBlockState) -> Result<Vec<f64>> {
    let (din, d) = (state.cam_w.value.shape()[0], state.width());
    if cam.len() != din {
        return Err(Error::ShapeMismatch {
            expected: vec![din],
            got: vec![cam.len()],
        });
    }
    if cam.iter().any(|v| !v.is_finite()) {
        return Err(Error::Constraint("camera input must be finite".into()));
    }
    let w = state.cam_w.value.data();
    let mut out = state.cam_b.value.data().to_vec();
    for (i, &c) in cam.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(&w[i * d..(i + 1) * d]) {
            *o += c * wv;
        }
    }
    Ok(out)
}

/// Per-patch mean Plücker rays, `n * s x 6` in view-major order.
pub fn patch_plucker(rig: &CameraRig, grid_h: usize, grid_w: usize, patch: usize) -> Tensor {
    let (h, w) = (grid_h * patch, grid_w * patch);
    let s = grid_h * grid_w;
    let mut out = vec![0.0; rig.len() * s * 6];
    let norm = 1.0 / (patch * patch) as f64;
    for (i, cam) in rig.cameras.iter().enumerate() {
        let rays = plucker_rays(cam, &rig.intrinsics, h, w);
        let rd = rays.data();
        for y in 0..h {
            for x in 0..w {
                let tok = (y / patch) * grid_w + x / patch;
                let dst = &mut out[(i * s + tok) * 6..(i * s + tok + 1) * 6];
                for (o, &r) in dst.iter_mut().zip(&rd[(y * w + x) * 6..(y * w + x + 1) * 6]) {
                    *o += r * norm;
                }
            }
        }
    }
    Tensor::new(vec![rig.len() * s, 6], out).expect("ray table size")
}

/// Epipolar attention mask over the `n * s` tokens of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarMask {
    pub mask: AttentionMask,
    /// View pairs with no usable epipolar geometry; they attend fully.
    pub degenerate_pairs: Vec<(usize, usize)>,
}

impl EpipolarMask {
    pub fn fell_back(&self) -> bool {
        !self.degenerate_pairs.is_empty()
    }
}

fn patch_center(tok: usize, grid_w: usize, patch: usize) -> Vector3<f64> {
    let half = (patch as f64 - 1.0) / 2.0;
    let (py, px) = (tok / grid_w, tok % grid_w);
    Vector3::new((px * patch) as f64 + half, (py * patch) as f64 + half, 1.0)
}

/// Token `(i, p)` sees every token of view `i` and, in view `j != i`, the
/// tokens whose patch center lies within `band_px` of the epipolar line of
/// `p`'s patch center.
pub fn epipolar_mask(
    rig: &CameraRig,
    k: &CameraIntrinsics,
    grid_h: usize,
    grid_w: usize,
    patch: usize,
    band_px: f64,
) -> Result<EpipolarMask> {
    if !(band_px > 0.0) {
        return Err(Error::Constraint(format!("band width must be positive, got {band_px}")));
    }
    let (n, s) = (rig.len(), grid_h * grid_w);
    let mut mask = AttentionMask::all(n * s, n * s);
    let mut degenerate_pairs = Vec::new();
    if band_px.is_infinite() {
        return Ok(EpipolarMask { mask, degenerate_pairs });
    }
    let centers: Vec<Vector3<f64>> = (0..s).map(|t| patch_center(t, grid_w, patch)).collect();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let f = match fundamental_matrix(&rig.cameras[i], &rig.cameras[j], k) {
                Ok(f) => f,
                Err(_) => {
                    degenerate_pairs.push((i, j));
                    continue;
                }
            };
            for (p, cp) in centers.iter().enumerate() {
                let line = f * cp;
                let denom = (line.x * line.x + line.y * line.y).sqrt();
                let row = (i * s + p) * n * s + j * s;
                for (q, cq) in centers.iter().enumerate() {
                    // A vanishing line means p maps onto the epipole: every token is admissible.
                    let allow = denom < 1e-12 || (line.dot(cq) / denom).abs() <= band_px;
                    mask.allow[row + q] = allow;
                }
            }
        }
    }
    if !degenerate_pairs.is_empty() {
        warn!("epipolar mask: {} view pairs without baseline use full attention", degenerate_pairs.len());
    }
    Ok(EpipolarMask { mask, degenerate_pairs })
}

/// Rig-dependent inputs of the sync module, shared by every block's hook.
pub struct SyncContext {
    rig: CameraRig,
    config: SyncConfig,
    heads: usize,
    cache: Mutex<Option<((usize, usize, usize), Arc<Tensor>, Option<Arc<AttentionMask>>)>>,
}

impl SyncContext {
    pub fn new(rig: CameraRig, config: SyncConfig, heads: usize) -> Self {
        Self {
            rig,
            config,
            heads,
            cache: Mutex::new(None),
        }
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    /// Camera input rows and the optional mask for a token grid.
    fn inputs(&self, layout: &TokenLayout) -> Result<(Arc<Tensor>, Option<Arc<AttentionMask>>)> {
        let key = (layout.grid_h, layout.grid_w, layout.patch);
        let mut guard = self.cache.lock().expect("sync cache lock");
        if let Some((k, cam, mask)) = guard.as_ref() {
            if *k == key {
                return Ok((cam.clone(), mask.clone()));
            }
        }
        let cam = match self.config.camera {
            CameraRepresentation::Extrinsic => {
                let data: Vec<f64> = self.rig.cameras.iter().flat_map(|c| c.flatten()).collect();
                Tensor::new(vec![self.rig.len(), 12], data)?
            }
            CameraRepresentation::Plucker => patch_plucker(&self.rig, layout.grid_h, layout.grid_w, layout.patch),
        };
        let mask = match self.config.variant {
            SyncVariant::Epipolar { band_px } => Some(Arc::new(
                epipolar_mask(&self.rig, &self.rig.intrinsics, layout.grid_h, layout.grid_w, layout.patch, band_px)?.mask,
            )),
            _ => None,
        };
        let cam = Arc::new(cam);
        *guard = Some((key, cam.clone(), mask.clone()));
        Ok((cam, mask))
    }
}

/// Records the module on `x` (`n * f * s x d`, view-major).
pub fn mvs_forward_tape(
    tape: &mut Tape,
    x: Var,
    layout: &TokenLayout,
    ctx: &SyncContext,
    state: &SyncBlockState,
    trainable: bool,
) -> Result<Var> {
    let (n, f, s, d) = (layout.views, layout.frames, layout.tokens_per_frame(), layout.width);
    if ctx.rig.len() != n {
        return Err(Error::CountMismatch {
            what: "cameras vs views",
            expected: n,
            got: ctx.rig.len(),
        });
    }
    if state.width() != d {
        return Err(Error::ShapeMismatch {
            expected: vec![d],
            got: vec![state.width()],
        });
    }
    let (cam_rows, mask) = ctx.inputs(layout)?;
    let cam_in = tape.constant((*cam_rows).clone());
    let cw = tape.param(&state.cam_w, trainable);
    let cb = tape.param(&state.cam_b, trainable);
    let emb = tape.linear(cam_in, cw, Some(cb))?;
    let fv = match ctx.config.camera {
        CameraRepresentation::Extrinsic => tape.add_broadcast(x, emb, n, f * s, d)?,
        CameraRepresentation::Plucker => tape.add_broadcast(x, emb, n, f, s * d)?,
    };

    let attended = match ctx.config.variant {
        SyncVariant::PerPosition => {
            let by_pos = tape.swap_axes(fv, n, f * s, d)?;
            let spec = AttentionSpec {
                heads: ctx.heads,
                groups: f * s,
                q_len: n,
                kv_groups: f * s,
                kv_len: n,
                mask: None,
            };
            let a = state.view_attention.apply(tape, by_pos, by_pos, spec, trainable)?;
            tape.swap_axes(a, f * s, n, d)?
        }
        SyncVariant::FullFrame | SyncVariant::Epipolar { .. } => {
            let by_frame = tape.swap_axes(fv, n, f, s * d)?;
            let by_frame = tape.reshape_rows(by_frame, d)?;
            let spec = AttentionSpec {
                heads: ctx.heads,
                groups: f,
                q_len: n * s,
                kv_groups: f,
                kv_len: n * s,
                mask,
            };
            let a = state.view_attention.apply(tape, by_frame, by_frame, spec, trainable)?;
            let back = tape.swap_axes(a, f, n, s * d)?;
            tape.reshape_rows(back, d)?
        }
    };
    let pw = tape.param(&state.proj_w, trainable);
    let pb = tape.param(&state.proj_b, trainable);
    let projected = tape.linear(attended, pw, Some(pb))?;
    tape.add(fv, projected)
}

/// Tape-free module application on `n x f x s x d` features.
pub fn mvs_forward(features: &Tensor, ctx: &SyncContext, state: &SyncBlockState, grid: (usize, usize), patch: usize) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 4 || shape[2] != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, grid.0 * grid.1, state.width()],
            got: shape.to_vec(),
        });
    }
    let layout = TokenLayout {
        views: shape[0],
        frames: shape[1],
        grid_h: grid.0,
        grid_w: grid.1,
        width: shape[3],
        patch,
    };
    let mut tape = Tape::new();
    let rows = features.len() / shape[3];
    let x = tape.constant(features.clone().reshape(&[rows, shape[3]])?);
    let out = mvs_forward_tape(&mut tape, x, &layout, ctx, state, false)?;
    tape.value(out).clone().reshape(shape)
}

/// Block hook running one sync state.
pub struct MvsHook<'a> {
    pub state: &'a SyncBlockState,
    pub ctx: &'a SyncContext,
    pub trainable: bool,
}

impl BlockHook for MvsHook<'_> {
    fn apply(&self, tape: &mut Tape, x: Var, layout: &TokenLayout) -> Result<Var> {
        mvs_forward_tape(tape, x, layout, self.ctx, self.state, self.trainable)
    }
}

/// One hook per backbone block, to be placed after spatial attention.
pub fn attach_to_backbone<'a>(
    backbone: &BackboneWeights,
    states: &'a [SyncBlockState],
    ctx: &'a SyncContext,
    trainable: bool,
) -> Result<Vec<MvsHook<'a>>> {
    if states.len() != backbone.config.blocks {
        return Err(Error::CountMismatch {
            what: "sync states",
            expected: backbone.config.blocks,
            got: states.len(),
        });
    }
    Ok(states.iter().map(|state| MvsHook { state, ctx, trainable }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{predict_velocity, BackboneConfig, PromptSpec};
    use crate::flow::{LatentVideo, TimeStep};
    use crate::geometry::{normalize_rig, sample_camera, CameraConstraints, CameraExtrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rig<R: Rng>(n: usize, rng: &mut R) -> CameraRig {
        let k = CameraIntrinsics::from_fov(8, 8, 60.0);
        let target = Vector3::new(0.0, 0.0, 0.5);
        let cams = (0..n)
            .map(|_| sample_camera(&CameraConstraints::default(), target, rng).unwrap())
            .collect();
        normalize_rig(&CameraRig::new(cams, k).unwrap()).unwrap()
    }

    fn donor<R: Rng>(d: usize, rng: &mut R) -> AttentionParams {
        AttentionParams::new(&mut ParamAllocator::new(ParamGroup::Base), "donor", d, rng)
    }

    fn state<R: Rng>(d: usize, camera: CameraRepresentation, rng: &mut R) -> SyncBlockState {
        let donor = donor(d, rng);
        SyncBlockState::init(&mut ParamAllocator::new(ParamGroup::Sync), "s", &donor, d, camera)
    }

    #[test]
    fn camera_encode_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = state(4, CameraRepresentation::Extrinsic, &mut rng);
        let cam: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(camera_encode(&cam, &st).unwrap(), vec![0.0; 4]);
        st.randomize(1.0, &mut rng);
        st.cam_b.value = Tensor::zeros(&[4]);
        let mut e1 = vec![0.0; 12];
        e1[0] = 1.0;
        assert_eq!(camera_encode(&e1, &st).unwrap(), st.cam_w.value.data()[0..4].to_vec());
        st.randomize(1.0, &mut rng);
        let got = camera_encode(&cam, &st).unwrap();
        for o in 0..4 {
            let mut acc = st.cam_b.value.data()[o];
            for (i, c) in cam.iter().enumerate() {
                acc += c * st.cam_w.value.data()[i * 4 + o];
            }
            assert!((acc - got[o]).abs() < 1e-12);
        }
        assert!(camera_encode(&cam[..6], &st).is_err());
    }

    #[test]
    fn init_copies_donor_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = BackboneWeights::init(BackboneConfig::default(), &mut rng).unwrap();
        let states = init_sync_states(&bb, CameraRepresentation::Extrinsic);
        assert_eq!(states.len(), bb.config.blocks);
        for (s, b) in states.iter().zip(&bb.blocks) {
            assert!(s.is_at_init());
            assert!(s.view_attention.values_equal(&b.attn_3d));
            assert!(s.params().iter().all(|p| p.key.group == ParamGroup::Sync));
        }
        // keys are unique across blocks
        let mut keys: Vec<_> = states.iter().flat_map(|s| s.params().into_iter().map(|p| p.key)).collect();
        let total = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), total);
    }

    #[test]
    fn zero_init_is_identity_for_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Tensor::randn(&[3, 2, 4, 8], 1.0, &mut rng);
        let r = rig(3, &mut rng);
        for variant in [SyncVariant::PerPosition, SyncVariant::FullFrame, SyncVariant::Epipolar { band_px: 3.0 }] {
            for camera in [CameraRepresentation::Extrinsic, CameraRepresentation::Plucker] {
                let st = state(8, camera, &mut rng);
                let ctx = SyncContext::new(r.clone(), SyncConfig { variant, camera }, 2);
                let out = mvs_forward(&feats, &ctx, &st, (2, 2), 4).unwrap();
                assert_eq!(out, feats);
            }
        }
    }

    #[test]
    fn single_view_reduces_to_projected_self_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut st = state(4, CameraRepresentation::Extrinsic, &mut rng);
        st.randomize(0.5, &mut rng);
        let r = rig(1, &mut rng);
        let feats = Tensor::randn(&[1, 2, 3, 4], 1.0, &mut rng);
        let ctx = SyncContext::new(r.clone(), SyncConfig::default(), 2);
        let out = mvs_forward(&feats, &ctx, &st, (1, 3), 1).unwrap();
        // attention over one token returns its value projection
        let emb = camera_encode(&r.cameras[0].flatten(), &st).unwrap();
        let mat = |x: &[f64], w: &Tensor, b: Option<&Tensor>| -> Vec<f64> {
            (0..4)
                .map(|o| b.map_or(0.0, |b| b.data()[o]) + (0..4).map(|i| x[i] * w.data()[i * 4 + o]).sum::<f64>())
                .collect()
        };
        for row in 0..6 {
            let fv: Vec<f64> = feats.data()[row * 4..row * 4 + 4].iter().zip(&emb).map(|(a, b)| a + b).collect();
            let v = mat(&fv, &st.view_attention.wv.value, None);
            let a = mat(&v, &st.view_attention.wo.value, Some(&st.view_attention.bo.value));
            let p = mat(&a, &st.proj_w.value, Some(&st.proj_b.value));
            for c in 0..4 {
                assert!((out.data()[row * 4 + c] - (fv[c] + p[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn joint_view_camera_permutation_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = rig(3, &mut rng);
        let feats = Tensor::randn(&[3, 2, 4, 8], 1.0, &mut rng);
        let perm = [2, 0, 1];
        let view_len = 2 * 4 * 8;
        let mut pf = vec![0.0; feats.len()];
        for (dst, &src) in perm.iter().enumerate() {
            pf[dst * view_len..(dst + 1) * view_len].copy_from_slice(&feats.data()[src * view_len..(src + 1) * view_len]);
        }
        let pf = Tensor::new(vec![3, 2, 4, 8], pf).unwrap();
        for variant in [SyncVariant::PerPosition, SyncVariant::FullFrame, SyncVariant::Epipolar { band_px: 2.0 }] {
            let mut st = state(8, CameraRepresentation::Extrinsic, &mut rng);
            st.randomize(0.3, &mut rng);
            let cfg = SyncConfig {
                variant,
                camera: CameraRepresentation::Extrinsic,
            };
            let out = mvs_forward(&feats, &SyncContext::new(r.clone(), cfg, 2), &st, (2, 2), 4).unwrap();
            let out_p = mvs_forward(&pf, &SyncContext::new(r.subset(&perm), cfg, 2), &st, (2, 2), 4).unwrap();
            for (dst, &src) in perm.iter().enumerate() {
                let a = &out_p.data()[dst * view_len..(dst + 1) * view_len];
                let b = &out.data()[src * view_len..(src + 1) * view_len];
                // equal up to the summation order inside the attention reductions
                let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-12, "{variant:?}: {diff}");
            }
        }
    }

    #[test]
    fn frames_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = rig(2, &mut rng);
        let mut st = state(4, CameraRepresentation::Extrinsic, &mut rng);
        st.randomize(0.5, &mut rng);
        let feats = Tensor::randn(&[2, 3, 2, 4], 1.0, &mut rng);
        let mut changed = feats.clone();
        // frame 1 of view 1
        let off = (3 + 1) * 2 * 4;
        for v in &mut changed.data_mut()[off..off + 8] {
            *v += 1.0;
        }
        for variant in [SyncVariant::PerPosition, SyncVariant::FullFrame] {
            let ctx = SyncContext::new(r.clone(), SyncConfig { variant, camera: CameraRepresentation::Extrinsic }, 2);
            let a = mvs_forward(&feats, &ctx, &st, (1, 2), 2).unwrap();
            let b = mvs_forward(&changed, &ctx, &st, (1, 2), 2).unwrap();
            for view in 0..2 {
                for frame in 0..3 {
                    let o = (view * 3 + frame) * 8;
                    let same = a.data()[o..o + 8] == b.data()[o..o + 8];
                    assert_eq!(same, frame != 1, "{variant:?} view {view} frame {frame}");
                }
            }
        }
    }

    #[test]
    fn camera_change_moves_only_when_encoder_is_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let r = rig(2, &mut rng);
        let mut moved = r.clone();
        moved.cameras[1] = CameraExtrinsics::look_at(Vector3::new(2.0, 1.0, 1.0), Vector3::zeros()).unwrap();
        let feats = Tensor::randn(&[2, 1, 4, 8], 1.0, &mut rng);
        for camera in [CameraRepresentation::Extrinsic, CameraRepresentation::Plucker] {
            let mut st = state(8, camera, &mut rng);
            let cfg = SyncConfig {
                variant: SyncVariant::PerPosition,
                camera,
            };
            let run = |st: &SyncBlockState, rig: &CameraRig| mvs_forward(&feats, &SyncContext::new(rig.clone(), cfg, 2), st, (2, 2), 4).unwrap();
            assert_eq!(run(&st, &r), run(&st, &moved));
            st.randomize(0.3, &mut rng);
            let a = run(&st, &r);
            let b = run(&st, &moved);
            assert!(a.data()[32..].iter().zip(&b.data()[32..]).any(|(x, y)| x != y), "{camera:?}");
        }
    }

    #[test]
    fn rejects_count_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let st = state(4, CameraRepresentation::Extrinsic, &mut rng);
        let ctx = SyncContext::new(rig(3, &mut rng), SyncConfig::default(), 2);
        let feats = Tensor::randn(&[2, 1, 2, 4], 1.0, &mut rng);
        assert!(matches!(mvs_forward(&feats, &ctx, &st, (1, 2), 1), Err(Error::CountMismatch { .. })));
        let bb = BackboneWeights::init(BackboneConfig::default(), &mut rng).unwrap();
        let states = init_sync_states(&bb, CameraRepresentation::Extrinsic);
        assert!(attach_to_backbone(&bb, &states[..1], &ctx, false).is_err());
    }

    #[test]
    fn mask_structure_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = rig(3, &mut rng);
        let m = epipolar_mask(&r, &r.intrinsics, 4, 4, 2, default_band_px(2)).unwrap();
        let s = 16;
        for i in 0..3 {
            for p in 0..s {
                for q in 0..s {
                    assert!(m.mask.get(i * s + p, i * s + q));
                }
            }
        }
        assert!(m.mask.allow.iter().any(|&a| !a));
        let inf = epipolar_mask(&r, &r.intrinsics, 4, 4, 2, f64::INFINITY).unwrap();
        assert!(inf.mask.allow.iter().all(|&a| a));
        assert!(epipolar_mask(&r, &r.intrinsics, 4, 4, 2, 0.0).is_err());

        let same = CameraRig::new(vec![CameraExtrinsics::identity(); 2], r.intrinsics).unwrap();
        let d = epipolar_mask(&same, &same.intrinsics, 2, 2, 2, 1.0).unwrap();
        assert!(d.fell_back());
        assert!(d.mask.allow.iter().all(|&a| a));
    }

    #[test]
    fn infinite_band_matches_full_frame_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = rig(3, &mut rng);
        let mut st = state(8, CameraRepresentation::Extrinsic, &mut rng);
        st.randomize(0.4, &mut rng);
        let feats = Tensor::randn(&[3, 2, 4, 8], 1.0, &mut rng);
        let run = |variant| {
            let cfg = SyncConfig {
                variant,
                camera: CameraRepresentation::Extrinsic,
            };
            mvs_forward(&feats, &SyncContext::new(r.clone(), cfg, 2), &st, (2, 2), 4).unwrap()
        };
        assert_eq!(run(SyncVariant::Epipolar { band_px: f64::INFINITY }), run(SyncVariant::FullFrame));
        assert_ne!(run(SyncVariant::Epipolar { band_px: 1.0 }), run(SyncVariant::FullFrame));
    }

    #[test]
    fn attached_init_states_leave_backbone_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = BackboneConfig {
            width: 8,
            ..BackboneConfig::default()
        };
        let bb = BackboneWeights::init(cfg, &mut rng).unwrap();
        let states = init_sync_states(&bb, CameraRepresentation::Extrinsic);
        let r = rig(2, &mut rng);
        let ctx = SyncContext::new(r, SyncConfig::default(), cfg.heads);
        let hooks = attach_to_backbone(&bb, &states, &ctx, false).unwrap();
        let dyn_hooks: Vec<&dyn BlockHook> = hooks.iter().map(|h| h as &dyn BlockHook).collect();
        let z = LatentVideo::randn([2, 2, 3, 4, 4], &mut rng);
        let t = TimeStep::new(0.4).unwrap();
        let p = PromptSpec::encode("a b", cfg.vocab, cfg.max_prompt);
        let base = predict_velocity(&bb, &z, t, &p, None).unwrap();
        let with = predict_velocity(&bb, &z, t, &p, Some(&dyn_hooks)).unwrap();
        assert_eq!(base, with);
    }

    #[test]
    fn symmetric_views_stay_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = BackboneConfig {
            width: 8,
            ..BackboneConfig::default()
        };
        let bb = BackboneWeights::init(cfg, &mut rng).unwrap();
        let mut states = init_sync_states(&bb, CameraRepresentation::Extrinsic);
        for s in &mut states {
            s.randomize(0.2, &mut rng);
        }
        let cam = CameraExtrinsics::look_at(Vector3::new(3.0, 0.0, 1.0), Vector3::new(0.0, 0.0, 0.5)).unwrap();
        let r = CameraRig::new(vec![cam; 2], CameraIntrinsics::from_fov(4, 4, 60.0)).unwrap();
        let ctx = SyncContext::new(r, SyncConfig::default(), cfg.heads);
        let hooks = attach_to_backbone(&bb, &states, &ctx, false).unwrap();
        let dyn_hooks: Vec<&dyn BlockHook> = hooks.iter().map(|h| h as &dyn BlockHook).collect();
        let z = LatentVideo::randn([1, 2, 3, 4, 4], &mut rng).select_views(&[0, 0]);
        let p = PromptSpec::encode("a", cfg.vocab, cfg.max_prompt);
        let out = predict_velocity(&bb, &z, TimeStep::new(0.5).unwrap(), &p, Some(&dyn_hooks)).unwrap();
        assert_eq!(out.view(0), out.view(1));
    }

    proptest::proptest! {
        #[test]
        fn shape_is_preserved(n in 1usize..4, f in 1usize..3, gh in 1usize..3, gw in 1usize..3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut st = state(4, CameraRepresentation::Extrinsic, &mut rng);
            st.randomize(0.3, &mut rng);
            let r = rig(n, &mut rng);
            let feats = Tensor::randn(&[n, f, gh * gw, 4], 1.0, &mut rng);
            for variant in [SyncVariant::PerPosition, SyncVariant::FullFrame] {
                let ctx = SyncContext::new(r.clone(), SyncConfig { variant, camera: CameraRepresentation::Extrinsic }, 2);
                let out = mvs_forward(&feats, &ctx, &st, (gh, gw), 2).unwrap();
                proptest::prop_assert_eq!(out.shape(), feats.shape());
            }
        }
    }
}
