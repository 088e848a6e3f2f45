//! The assembled generator: frozen-able backbone plus one sync state per
//! block, the pixel/latent mapping, and the joint and reference-conditioned
//! samplers.

use rand::Rng;

use crate::backbone::{backbone_forward, checksum_params, tokens_to_video, BackboneConfig, BackboneWeights, BlockHook, PromptSpec, TokenGrid};
use crate::error::{Error, Result};
use crate::flow::{euler_sample_with, forward_interpolate, guided_velocity, GuidanceWeights, LatentVideo, TimeStep};
use crate::geometry::{normalize_rig, CameraRig};
use crate::sync::{attach_to_backbone, init_sync_states, SyncBlockState, SyncConfig, SyncContext};
use crate::tape::{Param, ParamGroup, Tape, Var};

/// Default number of Euler steps for sampling.
pub const DEFAULT_SAMPLER_STEPS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneWeights,
    pub sync: Vec<SyncBlockState>,
    pub sync_config: SyncConfig,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, sync_config: SyncConfig, rng: &mut R) -> Result<Self> {
        let backbone = BackboneWeights::init(config, rng)?;
        let sync = init_sync_states(&backbone, sync_config.camera);
        Ok(Self {
            backbone,
            sync,
            sync_config,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    /// Context for a rig; the rig is normalized to its first camera.
    pub fn context(&self, rig: &CameraRig) -> Result<SyncContext> {
        Ok(SyncContext::new(normalize_rig(rig)?, self.sync_config, self.config().heads))
    }

    /// Records one velocity prediction. Without a context the sync hooks are
    /// skipped and the output is the plain backbone's.
    pub fn record(
        &self,
        tape: &mut Tape,
        z_t: &LatentVideo,
        t: TimeStep,
        prompt: &PromptSpec,
        ctx: Option<&SyncContext>,
        trainable: bool,
    ) -> Result<(Var, TokenGrid)> {
        match ctx {
            None => backbone_forward(tape, &self.backbone, z_t, t, prompt, None, trainable),
            Some(ctx) => {
                if ctx.rig().len() != z_t.views() {
                    return Err(Error::CountMismatch {
                        what: "rig cameras",
                        expected: z_t.views(),
                        got: ctx.rig().len(),
                    });
                }
                let hooks = attach_to_backbone(&self.backbone, &self.sync, ctx, trainable)?;
                let dyn_hooks: Vec<&dyn BlockHook> = hooks.iter().map(|h| h as &dyn BlockHook).collect();
                backbone_forward(tape, &self.backbone, z_t, t, prompt, Some(&dyn_hooks), trainable)
            }
        }
    }

    pub fn velocity(&self, z_t: &LatentVideo, t: TimeStep, prompt: &PromptSpec, ctx: Option<&SyncContext>) -> Result<LatentVideo> {
        let mut tape = Tape::new();
        let (out, grid) = self.record(&mut tape, z_t, t, prompt, ctx, false)?;
        tokens_to_video(&tape, out, &grid)
    }

    pub fn sync_params(&self) -> Vec<&Param> {
        self.sync.iter().flat_map(SyncBlockState::params).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.backbone.params();
        v.extend(self.sync_params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.backbone.params_mut();
        v.extend(self.sync.iter_mut().flat_map(SyncBlockState::params_mut));
        v
    }

    pub fn params_in_group_mut(&mut self, group: ParamGroup) -> Vec<&mut Param> {
        match group {
            ParamGroup::Base => self.backbone.params_mut(),
            ParamGroup::Sync => self.sync.iter_mut().flat_map(SyncBlockState::params_mut).collect(),
        }
    }

    pub fn base_checksum(&self) -> String {
        self.backbone.checksum()
    }

    pub fn sync_checksum(&self) -> String {
        checksum_params(self.sync_params())
    }
}

/// Colors in `[0, 1]` to latents in `[-1, 1]`. Exact and exactly invertible
/// by [`latent_to_pixels`] for colors representable in single precision.
pub fn pixels_to_latent(video: &LatentVideo) -> LatentVideo {
    video.map(|x| 2.0 * x - 1.0)
}

pub fn latent_to_pixels(latent: &LatentVideo) -> LatentVideo {
    latent.map(|z| (z + 1.0) * 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    pub steps: usize,
    /// Draw one noise video and copy it to every view.
    pub shared_noise: bool,
    /// Text guidance scale; 1 is plain conditional sampling.
    pub text_scale: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLER_STEPS,
            shared_noise: false,
            text_scale: 1.0,
        }
    }
}

fn initial_noise<R: Rng + ?Sized>(dims: [usize; 5], shared: bool, rng: &mut R) -> LatentVideo {
    if shared {
        let one = LatentVideo::randn([1, dims[1], dims[2], dims[3], dims[4]], rng);
        one.select_views(&vec![0; dims[0]])
    } else {
        LatentVideo::randn(dims, rng)
    }
}

/// Jointly samples one video per rig camera; returns colors.
pub fn generate<R: Rng + ?Sized>(
    model: &Model,
    rig: &CameraRig,
    prompt: &PromptSpec,
    frames: usize,
    res: (usize, usize),
    opts: &SampleOptions,
    rng: &mut R,
) -> Result<LatentVideo> {
    prompt.validate(model.config())?;
    let ctx = model.context(rig)?;
    let dims = [rig.len(), frames, model.config().channels, res.0, res.1];
    let z1 = initial_noise(dims, opts.shared_noise, rng);
    let null = PromptSpec::null();
    let w = GuidanceWeights {
        video: 1.0,
        text: opts.text_scale,
    };
    let z0 = euler_sample_with(
        |z, t| {
            let full = model.velocity(z, t, prompt, Some(&ctx))?;
            if opts.text_scale == 1.0 {
                return Ok(full);
            }
            let uncond = model.velocity(z, t, &null, Some(&ctx))?;
            guided_velocity(&uncond, &uncond, &full, w)
        },
        &z1,
        opts.steps,
        |_, _| {},
    )?;
    Ok(latent_to_pixels(&z0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RerenderOptions {
    pub steps: usize,
    pub guidance: GuidanceWeights,
    pub shared_noise: bool,
}

impl Default for RerenderOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SAMPLER_STEPS,
            guidance: GuidanceWeights::default(),
            shared_noise: false,
        }
    }
}

/// Novel-view synthesis from a reference video seen by rig camera 0.
///
/// View 0 of the state holds the clean reference latent at every step. The
/// video-conditioned branches see it clean; the unconditioned branch sees it
/// noised to the current time like any other view. Returns colors for all
/// views, view 0 being the reference.
pub fn rerender<R: Rng + ?Sized>(
    model: &Model,
    reference: &LatentVideo,
    rig: &CameraRig,
    prompt: &PromptSpec,
    opts: &RerenderOptions,
    rng: &mut R,
) -> Result<LatentVideo> {
    let [rv, f, c, h, w] = reference.dims();
    if rv != 1 {
        return Err(Error::Constraint(format!("reference must be a single video, got {rv} views")));
    }
    if c != model.config().channels || h % model.config().patch != 0 || w % model.config().patch != 0 {
        return Err(Error::Config(format!(
            "reference resolution {c}x{h}x{w} does not fit the model (channels {}, patch {})",
            model.config().channels,
            model.config().patch
        )));
    }
    prompt.validate(model.config())?;
    let ctx = model.context(rig)?;
    let n = rig.len();
    let z_ref = pixels_to_latent(reference);
    let eps_ref = LatentVideo::randn([1, f, c, h, w], rng);
    let mut z1 = initial_noise([n, f, c, h, w], opts.shared_noise, rng);
    z1.view_mut(0).copy_from_slice(z_ref.view(0));
    let null = PromptSpec::null();
    let plain = opts.guidance.video == 1.0 && opts.guidance.text == 1.0;
    let z0 = euler_sample_with(
        |z, t| {
            let v_full = model.velocity(z, t, prompt, Some(&ctx))?;
            if plain {
                return Ok(v_full);
            }
            let v_vid = model.velocity(z, t, &null, Some(&ctx))?;
            let mut z_null = z.clone();
            z_null
                .view_mut(0)
                .copy_from_slice(forward_interpolate(&z_ref, &eps_ref, t)?.view(0));
            let v_null = model.velocity(&z_null, t, &null, Some(&ctx))?;
            guided_velocity(&v_null, &v_vid, &v_full, opts.guidance)
        },
        &z1,
        opts.steps,
        |z, _| z.view_mut(0).copy_from_slice(z_ref.view(0)),
    )?;
    Ok(latent_to_pixels(&z0))
}
