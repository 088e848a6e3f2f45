//! Training: a base phase that fits the backbone on single views, then the
//! frozen-base phase that fits only the sync states on the hybrid,
//! curriculum-ordered data mix. Also the reference-replacement regime,
//! finite-difference gradient checking and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{patchify, BackboneConfig, PromptSpec};
use crate::data::{
    curriculum_stage, replicate_single_view, sample_multiview_frames, AdmissibleSubsets, CurriculumSchedule, HybridSampler, SourceKind,
    TrainSample, DEFAULT_MAX_GAP,
};
use crate::dataset::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::flow::{forward_interpolate, velocity_target, LatentVideo, TimeStep};
use crate::geometry::{normalize_rig, CameraExtrinsics, CameraRig};
use crate::model::{pixels_to_latent, Model};
use crate::scmt::{Container, Record, Section};
use crate::sync::SyncConfig;
use crate::tape::{Param, ParamGroup, ParamKey, Tape};
use crate::tensor::Tensor;

/// Steps between frozen-base checksum comparisons.
pub const CHECKSUM_INTERVAL: usize = 100;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Steps of both phases together.
    pub total_steps: usize,
    /// Leading steps that fit the backbone alone on single views.
    pub pretrain_steps: usize,
    pub batch_size: usize,
    /// Sync-phase learning rate.
    pub learning_rate: f64,
    pub pretrain_learning_rate: f64,
    /// Multi-view video, multi-view image, single-view video.
    pub source_probs: [f64; 3],
    pub curriculum: CurriculumSchedule,
    pub v2mv_mode: bool,
    pub p_replace: f64,
    /// Whether the reference view contributes to the loss when replaced.
    pub loss_on_reference: bool,
    pub text_dropout: f64,
    pub views_min: usize,
    pub views_max: usize,
    pub max_gap: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub sync: SyncConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            pretrain_steps: 1000,
            batch_size: 4,
            learning_rate: 1e-4,
            pretrain_learning_rate: 1e-3,
            source_probs: [0.6, 0.2, 0.2],
            curriculum: CurriculumSchedule::default(),
            v2mv_mode: false,
            p_replace: 0.9,
            loss_on_reference: true,
            text_dropout: 0.1,
            views_min: 2,
            views_max: 4,
            max_gap: DEFAULT_MAX_GAP,
            seed: 0,
            backbone: BackboneConfig::default(),
            sync: SyncConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_steps == 0 || self.batch_size == 0 {
            return bad("total_steps and batch_size must be positive");
        }
        if self.pretrain_steps > self.total_steps {
            return bad("pretrain_steps exceeds total_steps");
        }
        if !(self.learning_rate > 0.0 && self.pretrain_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_replace) || !(0.0..=1.0).contains(&self.text_dropout) {
            return bad("p_replace and text_dropout must lie in [0, 1]");
        }
        if self.views_min == 0 || self.views_min > self.views_max {
            return bad("views_min must be in 1..=views_max");
        }
        if self.v2mv_mode && self.views_min < 2 {
            return bad("reference replacement needs at least two views");
        }
        HybridSampler::new(self.source_probs)?;
        self.curriculum.validate()?;
        self.backbone.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Base,
    Sync,
}

/// One fully drawn training example.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInput {
    pub kind: SourceKind,
    /// Clean latents.
    pub z0: LatentVideo,
    /// Normalized cameras; ignored in the base phase.
    pub rig: CameraRig,
    pub prompt: PromptSpec,
    pub t: TimeStep,
    pub eps: LatentVideo,
    pub replace_reference: bool,
    /// Azimuth bounds the views were selected under, if any.
    pub bounds: Option<(f64, f64)>,
    /// Source scene and camera indices, for multi-view video samples.
    pub scene: Option<usize>,
    pub views: Vec<usize>,
}

impl StepInput {
    /// Draws `t` and noise for a sample and encodes it.
    pub fn from_sample<R: Rng + ?Sized>(sample: &TrainSample, prompt: PromptSpec, rng: &mut R) -> Result<Self> {
        sample.validate()?;
        let z0 = pixels_to_latent(&sample.videos);
        let t = TimeStep::new(rng.random::<f64>())?;
        let eps = LatentVideo::randn(z0.dims(), rng);
        Ok(Self {
            kind: sample.kind,
            z0,
            rig: normalize_rig(&sample.cams)?,
            prompt,
            t,
            eps,
            replace_reference: false,
            bounds: None,
            scene: None,
            views: Vec::new(),
        })
    }
}

/// Marks view 0 for replacement with probability `p`, per sample.
pub fn apply_replacement<R: Rng + ?Sized>(inputs: &mut [StepInput], p: f64, rng: &mut R) -> Result<()> {
    for input in inputs.iter_mut() {
        if input.z0.views() < 2 {
            return Err(Error::Config("reference replacement needs at least two views".into()));
        }
        input.replace_reference = rng.random_bool(p);
    }
    Ok(())
}

/// Loss of one input and, when `trainable`, gradients of every trainable
/// parameter (sync always; base unless frozen).
pub fn sample_loss(model: &Model, input: &StepInput, phase: Phase, trainable: bool, loss_on_reference: bool) -> Result<(f64, BTreeMap<ParamKey, Tensor>)> {
    let mut z_t = forward_interpolate(&input.z0, &input.eps, input.t)?;
    if input.replace_reference {
        z_t.view_mut(0).copy_from_slice(input.z0.view(0));
    }
    let ctx = match phase {
        Phase::Base => None,
        Phase::Sync => Some(model.context(&input.rig)?),
    };
    let mut tape = Tape::new();
    let (out, grid) = model.record(&mut tape, &z_t, input.t, &input.prompt, ctx.as_ref(), trainable)?;
    let target = patchify(&velocity_target(&input.z0, &input.eps)?, model.config().patch)?;
    let loss = if input.replace_reference && !loss_on_reference {
        let rows_per_view = grid.frames * grid.tokens_per_frame();
        let total = grid.views * rows_per_view;
        let ids: Vec<usize> = (rows_per_view..total).collect();
        let kept = tape.gather(out, &ids)?;
        let td = model.config().token_dim();
        tape.mse(kept, &target.tokens.data()[rows_per_view * td..])?
    } else {
        tape.mse(out, target.tokens.data())?
    };
    let value = tape.value(loss).data()[0];
    if !trainable {
        return Ok((value, BTreeMap::new()));
    }
    Ok((value, tape.backward(loss).into_params()))
}

/// Adaptive-moment optimizer state, keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub t: BTreeMap<ParamGroup, u64>,
    pub m: BTreeMap<ParamKey, Tensor>,
    pub v: BTreeMap<ParamKey, Tensor>,
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl Adam {
    /// One update of the parameters of `group` that have a gradient.
    pub fn update(&mut self, params: Vec<&mut Param>, grads: &BTreeMap<ParamKey, Tensor>, group: ParamGroup, lr: f64) {
        let (b1, b2) = ADAM_BETAS;
        let t = self.t.entry(group).or_insert(0);
        *t += 1;
        let c1 = 1.0 - b1.powi(*t as i32);
        let c2 = 1.0 - b2.powi(*t as i32);
        for p in params {
            let Some(g) = grads.get(&p.key) else { continue };
            let m = self.m.entry(p.key).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(p.key).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Mean loss over `inputs` followed by one optimizer update of the phase's
/// parameter group. In the sync phase the base must be frozen.
pub fn train_step(model: &mut Model, opt: &mut Adam, inputs: &[StepInput], phase: Phase, lr: f64, loss_on_reference: bool, step: usize) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let group = match phase {
        Phase::Base => {
            if model.backbone.frozen {
                return Err(Error::Config("base phase with a frozen backbone".into()));
            }
            ParamGroup::Base
        }
        Phase::Sync => {
            if !model.backbone.frozen {
                return Err(Error::Config("sync phase requires a frozen backbone".into()));
            }
            ParamGroup::Sync
        }
    };
    let results: Vec<Result<(f64, BTreeMap<ParamKey, Tensor>)>> = inputs
        .par_iter()
        .map(|input| sample_loss(model, input, phase, true, loss_on_reference))
        .collect();
    let scale = 1.0 / inputs.len() as f64;
    let mut loss = 0.0;
    let mut grads: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("sample {i} ({:?}, t = {}) gave loss {l}", inputs[i].kind, inputs[i].t.value()),
            });
        }
        loss += l * scale;
        for (k, gi) in g {
            if k.group != group {
                continue;
            }
            match grads.get_mut(&k) {
                Some(acc) => acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += b * scale),
                None => {
                    grads.insert(k, gi.map(|x| x * scale));
                }
            }
        }
    }
    if let Some((k, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient for parameter {k:?}"),
        });
    }
    opt.update(model.params_in_group_mut(group), &grads, group, lr);
    Ok(loss)
}

/// Mean loss without updating anything.
pub fn evaluate_loss(model: &Model, inputs: &[StepInput], phase: Phase) -> Result<f64> {
    let losses = inputs
        .par_iter()
        .map(|i| sample_loss(model, i, phase, false, true).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub kinds: Vec<SourceKind>,
    pub bounds: Option<(f64, f64)>,
    /// Samples whose view selection fell back to a relaxed constraint.
    pub relaxed: usize,
}

/// Owns the model, optimizer and random streams of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub step: usize,
    rng: ChaCha8Rng,
    replace_rng: ChaCha8Rng,
    frozen_checksum: Option<String>,
}

fn rng_state(r: &ChaCha8Rng) -> Vec<u8> {
    let mut out = r.get_seed().to_vec();
    out.extend(r.get_stream().to_le_bytes());
    out.extend(r.get_word_pos().to_le_bytes());
    out
}

fn rng_from_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != 32 + 8 + 16 {
        return Err(Error::Format("bad generator state".into()));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut r = ChaCha8Rng::from_seed(seed);
    r.set_stream(u64::from_le_bytes(bytes[32..40].try_into().expect("8 bytes")));
    r.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().expect("16 bytes")));
    Ok(r)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 300, 0));
        let model = Model::init(config.backbone, config.sync, &mut init_rng)?;
        Self::with_model(config, model)
    }

    /// Starts from given weights (for example a pretrained backbone).
    pub fn with_model(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if model.config() != &config.backbone || model.sync_config != config.sync {
            return Err(Error::Config("model does not match the training configuration".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 301, 0));
        let replace_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 302, 0));
        let mut tr = Self {
            config,
            model,
            optimizer: Adam::default(),
            step: 0,
            rng,
            replace_rng,
            frozen_checksum: None,
        };
        if tr.model.backbone.frozen {
            tr.frozen_checksum = Some(tr.model.base_checksum());
        }
        Ok(tr)
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        if step < self.config.pretrain_steps {
            Phase::Base
        } else {
            Phase::Sync
        }
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    /// Checks that `data` can feed this configuration.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let cfg = &self.config;
        if data.scenes.is_empty() {
            return Err(Error::Config("dataset has no scenes".into()));
        }
        let p = cfg.backbone.patch;
        let fits = |h: usize, w: usize| h % p == 0 && w % p == 0;
        if data.scenes.iter().any(|s| !fits(s.manifest.height, s.manifest.width)) {
            return Err(Error::Config(format!("scene resolution not divisible by patch {p}")));
        }
        if cfg.source_probs[1] > 0.0 && data.trajectories.is_empty() {
            return Err(Error::Config("multi-view image source requested but the dataset has no trajectories".into()));
        }
        if cfg.source_probs[2] > 0.0 && data.general.is_empty() {
            return Err(Error::Config("single-view source requested but the dataset has no static general videos".into()));
        }
        Ok(())
    }

    fn draw_base_sample(&mut self, data: &Dataset) -> Result<TrainSample> {
        let scene = &data.scenes[self.rng.random_range(0..data.scenes.len())];
        let cam = self.rng.random_range(0..scene.rig.len());
        replicate_single_view(&scene.videos.select_views(&[cam]), 1, &scene.manifest.prompt)
    }

    /// Multi-view video sample: the largest admissible view count up to `v`
    /// under the bounds, else `v` unconstrained views.
    fn draw_multiview_video(&mut self, data: &Dataset, v: usize, bounds: (f64, f64)) -> Result<(TrainSample, Option<(f64, f64)>, usize, Vec<usize>)> {
        let scene_index = self.rng.random_range(0..data.scenes.len());
        let scene = &data.scenes[scene_index];
        let v = v.min(scene.rig.len());
        let center = scene.manifest.spec.center();
        let mut chosen = None;
        for k in (2.min(v)..=v).rev() {
            if k < 2 {
                break;
            }
            match AdmissibleSubsets::new(&scene.rig, k, bounds.0, bounds.1, &center) {
                Ok(table) => {
                    chosen = Some((table.sample(&mut self.rng).to_vec(), Some(bounds)));
                    break;
                }
                Err(Error::CurriculumExhausted { .. }) => continue,
                Err(e) => return Err(e),
            }
        }
        let (idx, used) = match chosen {
            Some(c) => c,
            None => {
                warn!(
                    "{}: no view subset within [{}, {}] degrees, sampling unconstrained",
                    scene.manifest.scene_id, bounds.0, bounds.1
                );
                let mut idx: Vec<usize> = rand::seq::index::sample(&mut self.rng, scene.rig.len(), v).into_vec();
                idx.sort_unstable();
                (idx, None)
            }
        };
        let sample = TrainSample {
            kind: SourceKind::MultiViewVideo,
            videos: scene.videos.select_views(&idx),
            cams: scene.rig.subset(&idx),
            prompt: scene.manifest.prompt.clone(),
        };
        Ok((sample, used, scene_index, idx))
    }

    /// Draws the batch for the current step.
    pub fn draw_inputs(&mut self, data: &Dataset) -> Result<(Vec<StepInput>, Option<(f64, f64)>, usize)> {
        let phase = self.phase_at(self.step);
        let cfg = self.config.clone();
        let vocab = cfg.backbone.vocab;
        let max_prompt = cfg.backbone.max_prompt;
        let mut bounds = None;
        let mut relaxed = 0;
        let mut inputs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (sample, used, scene, views) = match phase {
                Phase::Base => (self.draw_base_sample(data)?, None, None, Vec::new()),
                Phase::Sync => {
                    let sync_steps = cfg.total_steps - cfg.pretrain_steps;
                    let b = curriculum_stage(&cfg.curriculum, self.step - cfg.pretrain_steps, sync_steps)?;
                    bounds = Some(b);
                    let kind = HybridSampler::new(cfg.source_probs)?.draw(&mut self.rng);
                    let v = self.rng.random_range(cfg.views_min..=cfg.views_max);
                    match kind {
                        SourceKind::MultiViewVideo => {
                            let (s, used, scene, idx) = self.draw_multiview_video(data, v, b)?;
                            if used.is_none() || idx.len() < v.min(data.scenes[scene].rig.len()) {
                                relaxed += 1;
                            }
                            (s, used, Some(scene), idx)
                        }
                        SourceKind::MultiViewImage => {
                            let seq = &data.trajectories[self.rng.random_range(0..data.trajectories.len())];
                            (sample_multiview_frames(seq, v.min(seq.len()), cfg.max_gap, &mut self.rng)?, None, None, Vec::new())
                        }
                        SourceKind::SingleViewVideo => {
                            let clip = &data.general[self.rng.random_range(0..data.general.len())];
                            (replicate_single_view(&clip.video, v, &clip.caption)?, None, None, Vec::new())
                        }
                    }
                }
            };
            let prompt = if self.rng.random_bool(cfg.text_dropout) {
                PromptSpec::null()
            } else {
                PromptSpec::encode(&sample.prompt, vocab, max_prompt)
            };
            let mut input = StepInput::from_sample(&sample, prompt, &mut self.rng)?;
            input.bounds = used;
            input.scene = scene;
            input.views = views;
            inputs.push(input);
        }
        if phase == Phase::Sync && cfg.v2mv_mode {
            apply_replacement(&mut inputs, cfg.p_replace, &mut self.replace_rng)?;
        }
        Ok((inputs, bounds, relaxed))
    }

    /// Freezes the backbone when the sync phase begins and verifies the
    /// frozen checksum periodically.
    fn enter_phase(&mut self, phase: Phase) -> Result<()> {
        if phase == Phase::Sync && !self.model.backbone.frozen {
            self.model.backbone.frozen = true;
            let sum = self.model.base_checksum();
            info!("step {}: base frozen, checksum {}", self.step, &sum[..16]);
            self.frozen_checksum = Some(sum);
        }
        if phase == Phase::Sync && self.step % CHECKSUM_INTERVAL == 0 {
            self.verify_frozen()?;
        }
        Ok(())
    }

    pub fn verify_frozen(&self) -> Result<()> {
        if let Some(expected) = &self.frozen_checksum {
            let got = self.model.base_checksum();
            if &got != expected {
                return Err(Error::Constraint(format!("frozen base changed: {expected} -> {got}")));
            }
        }
        Ok(())
    }

    /// One training step on freshly drawn inputs.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::Config(format!("training already finished at step {}", self.step)));
        }
        let phase = self.phase_at(self.step);
        self.enter_phase(phase)?;
        let (inputs, bounds, relaxed) = self.draw_inputs(data)?;
        let lr = match phase {
            Phase::Base => self.config.pretrain_learning_rate,
            Phase::Sync => self.config.learning_rate,
        };
        let loss = train_step(
            &mut self.model,
            &mut self.optimizer,
            &inputs,
            phase,
            lr,
            self.config.loss_on_reference,
            self.step,
        )?;
        let report = StepReport {
            step: self.step,
            phase,
            loss,
            kinds: inputs.iter().map(|i| i.kind).collect(),
            bounds,
            relaxed,
        };
        self.step += 1;
        if self.is_done() {
            self.verify_frozen()?;
        }
        Ok(report)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        let params = |ps: Vec<&Param>| -> Section { ps.into_iter().map(|p| (p.name.clone(), Record::Float(p.value.clone()))).collect() };
        c.sections.insert("base".into(), params(self.model.backbone.params()));
        c.sections.insert("sync".into(), params(self.model.sync_params()));
        let mut opt = Section::new();
        let key_name = |k: &ParamKey| format!("{:?}.{:06}", k.group, k.index);
        for (k, m) in &self.optimizer.m {
            opt.insert(format!("m.{}", key_name(k)), Record::Float(m.clone()));
        }
        for (k, v) in &self.optimizer.v {
            opt.insert(format!("v.{}", key_name(k)), Record::Float(v.clone()));
        }
        for (g, t) in &self.optimizer.t {
            opt.insert(format!("t.{g:?}"), Record::Bytes(t.to_le_bytes().to_vec()));
        }
        c.sections.insert("optimizer".into(), opt);
        let mut meta = Section::new();
        meta.insert("version".into(), Record::Bytes(CHECKPOINT_VERSION.to_le_bytes().to_vec()));
        meta.insert("step".into(), Record::Bytes((self.step as u64).to_le_bytes().to_vec()));
        meta.insert("rng".into(), Record::Bytes(rng_state(&self.rng)));
        meta.insert("replace_rng".into(), Record::Bytes(rng_state(&self.replace_rng)));
        meta.insert("config".into(), Record::Bytes(serde_json::to_vec(&self.config)?));
        meta.insert("frozen".into(), Record::Bytes(vec![u8::from(self.model.backbone.frozen)]));
        meta.insert("base_checksum".into(), Record::Bytes(self.model.base_checksum().into_bytes()));
        c.sections.insert("meta".into(), meta);
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.section("meta")?;
        let bytes = |name: &str| -> Result<&[u8]> {
            match meta.get(name) {
                Some(Record::Bytes(b)) => Ok(b),
                _ => Err(Error::Format(format!("checkpoint meta lacks {name}"))),
            }
        };
        let version = u32::from_le_bytes(bytes("version")?.try_into().map_err(|_| Error::Format("bad version".into()))?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let config: TrainConfig = serde_json::from_slice(bytes("config")?)?;
        let mut model = Model::init(config.backbone, config.sync, &mut ChaCha8Rng::seed_from_u64(0))?;
        load_params(c.section("base")?, model.backbone.params_mut())?;
        load_params(c.section("sync")?, model.sync.iter_mut().flat_map(|s| s.params_mut()).collect())?;
        model.backbone.frozen = bytes("frozen")? == [1];
        let recorded = String::from_utf8(bytes("base_checksum")?.to_vec()).map_err(|_| Error::Format("bad checksum".into()))?;
        if model.base_checksum() != recorded {
            return Err(Error::Format("base weights do not match the recorded checksum".into()));
        }
        let mut optimizer = Adam::default();
        let keys: BTreeMap<String, ParamKey> = model.params().iter().map(|p| (format!("{:?}.{:06}", p.key.group, p.key.index), p.key)).collect();
        for (name, rec) in c.section("optimizer")? {
            let (kind, rest) = name.split_once('.').ok_or_else(|| Error::Format(format!("bad optimizer entry {name}")))?;
            match (kind, rec) {
                ("t", Record::Bytes(b)) => {
                    let group = match rest {
                        "Base" => ParamGroup::Base,
                        "Sync" => ParamGroup::Sync,
                        _ => return Err(Error::Format(format!("bad optimizer group {rest}"))),
                    };
                    let t = u64::from_le_bytes(b.as_slice().try_into().map_err(|_| Error::Format("bad step count".into()))?);
                    optimizer.t.insert(group, t);
                }
                ("m" | "v", Record::Float(t)) => {
                    let key = *keys.get(rest).ok_or_else(|| Error::Format(format!("unknown optimizer key {rest}")))?;
                    let slot = if kind == "m" { &mut optimizer.m } else { &mut optimizer.v };
                    slot.insert(key, t.clone());
                }
                _ => return Err(Error::Format(format!("bad optimizer entry {name}"))),
            }
        }
        let step = u64::from_le_bytes(bytes("step")?.try_into().map_err(|_| Error::Format("bad step".into()))?) as usize;
        let frozen_checksum = model.backbone.frozen.then(|| recorded.clone());
        Ok(Self {
            config,
            model,
            optimizer,
            step,
            rng: rng_from_state(bytes("rng")?)?,
            replace_rng: rng_from_state(bytes("replace_rng")?)?,
            frozen_checksum,
        })
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn load_params(section: &Section, params: Vec<&mut Param>) -> Result<()> {
    if section.len() != params.len() {
        return Err(Error::CountMismatch {
            what: "checkpoint parameters",
            expected: params.len(),
            got: section.len(),
        });
    }
    for p in params {
        match section.get(&p.name) {
            Some(Record::Float(t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(Record::Float(t)) => {
                return Err(Error::ShapeMismatch {
                    expected: p.value.shape().to_vec(),
                    got: t.shape().to_vec(),
                })
            }
            _ => return Err(Error::Format(format!("checkpoint lacks parameter {}", p.name))),
        }
    }
    Ok(())
}

/// Velocity prediction for `input` in patch-token layout, sync hooks attached.
fn predict_tokens(model: &Model, input: &StepInput) -> Result<Vec<f64>> {
    let mut z_t = forward_interpolate(&input.z0, &input.eps, input.t)?;
    if input.replace_reference {
        z_t.view_mut(0).copy_from_slice(input.z0.view(0));
    }
    let ctx = model.context(&input.rig)?;
    let mut tape = Tape::new();
    let (out, _) = model.record(&mut tape, &z_t, input.t, &input.prompt, Some(&ctx), false)?;
    Ok(tape.value(out).data().to_vec())
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = f(x);
    x[i] = x0 - h;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub name: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<GradProbe>,
    /// Worst error per parameter tensor family (name without the final component).
    pub worst_by_group: BTreeMap<String, f64>,
}

/// Compares analytic gradients of the loss of `input` (every parameter
/// trainable, sync hooks attached) against central differences at
/// `probe_count` random (parameter, element) positions. `fault_scale`
/// multiplies the analytic gradients and is 1 outside fault-injection tests.
pub fn grad_check<R: Rng + ?Sized>(model: &Model, input: &StepInput, probe_count: usize, fault_scale: f64, rng: &mut R) -> Result<GradCheckReport> {
    let mut m = model.clone();
    m.backbone.frozen = false;
    let (_, grads) = sample_loss(&m, input, Phase::Sync, true, true)?;
    let target = patchify(&velocity_target(&input.z0, &input.eps)?, m.config().patch)?;
    let keys: Vec<(ParamKey, String, usize)> = m.params().iter().map(|p| (p.key, p.name.clone(), p.value.len())).collect();
    let mut probes = Vec::with_capacity(probe_count);
    for _ in 0..probe_count {
        let (key, name, len) = keys[rng.random_range(0..keys.len())].clone();
        let element = rng.random_range(0..len);
        let analytic = grads.get(&key).map_or(0.0, |g| g.data()[element]) * fault_scale;
        let eval = |delta: f64, m: &mut Model| -> Result<Vec<f64>> {
            let p = m.params_mut().into_iter().find(|p| p.key == key).expect("probe key exists");
            let x0 = p.value.data()[element];
            p.value.data_mut()[element] = x0 + delta;
            let out = predict_tokens(m, input);
            let p = m.params_mut().into_iter().find(|p| p.key == key).expect("probe key exists");
            p.value.data_mut()[element] = x0;
            out
        };
        let up = eval(GRAD_CHECK_STEP, &mut m)?;
        let down = eval(-GRAD_CHECK_STEP, &mut m)?;
        // (L+ - L-) summed per element as (o+ - o-)(o+ + o- - 2 y), which
        // avoids cancelling two nearly equal loss totals
        let diff: f64 = up
            .iter()
            .zip(&down)
            .zip(target.tokens.data())
            .map(|((a, b), y)| (a - b) * (a + b - 2.0 * y))
            .sum();
        let numeric = diff / up.len() as f64 / (2.0 * GRAD_CHECK_STEP);
        probes.push(GradProbe {
            name,
            element,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    let mut worst_by_group: BTreeMap<String, f64> = BTreeMap::new();
    for p in &probes {
        let family = p.name.rsplit_once('.').map_or(p.name.as_str(), |(a, _)| a).to_string();
        let e = worst_by_group.entry(family).or_insert(0.0);
        *e = e.max(p.rel_err);
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        probes,
        worst_by_group,
    })
}

/// Fixed validation inputs: every camera of each scene (up to `views`), with
/// `t` and noise drawn from `seed`.
pub fn validation_inputs(data: &Dataset, views: usize, per_scene: usize, seed: u64, vocab: usize, max_prompt: usize) -> Result<Vec<StepInput>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (si, scene) in data.scenes.iter().enumerate() {
        let idx: Vec<usize> = (0..views.min(scene.rig.len())).collect();
        let sample = TrainSample {
            kind: SourceKind::MultiViewVideo,
            videos: scene.videos.select_views(&idx),
            cams: scene.rig.subset(&idx),
            prompt: scene.manifest.prompt.clone(),
        };
        for _ in 0..per_scene {
            let mut input = StepInput::from_sample(&sample, PromptSpec::encode(&sample.prompt, vocab, max_prompt), &mut rng)?;
            input.scene = Some(si);
            input.views = idx.clone();
            out.push(input);
        }
    }
    Ok(out)
}

/// A random multi-view input on a desk rig, for gradient checks.
pub fn synthetic_input(model: &Model, views: usize, frames: usize, res: (usize, usize), seed: u64) -> Result<StepInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos = LatentVideo::randn([views, frames, model.config().channels, res.0, res.1], &mut rng).map(|x| 0.5 + 0.2 * x);
    let sample = TrainSample {
        kind: SourceKind::MultiViewVideo,
        videos,
        cams: crate::scene::desk_rig(views, res.0, res.1, &mut rng)?,
        prompt: "a red ball on a desk".into(),
    };
    let p = PromptSpec::encode(&sample.prompt, model.config().vocab, model.config().max_prompt);
    StepInput::from_sample(&sample, p, &mut rng)
}

/// Identity cameras for `n` replicated views.
pub fn identity_rig(n: usize, like: &CameraRig) -> Result<CameraRig> {
    CameraRig::new(vec![CameraExtrinsics::identity(); n], like.intrinsics)
}
