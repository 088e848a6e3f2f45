//! Toy text-to-video diffusion transformer.
//!
//! Each block runs pre-norm residual sublayers: spatial attention within a
//! frame, 3D attention over all frames of a view, cross-attention to the
//! prompt, and an FFN. Every norm is an RMSNorm whose gain is an affine map
//! of a sinusoidal timestep embedding. Views never exchange information
//! inside the backbone; a per-block hook after spatial attention is the only
//! place where they can.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{LatentVideo, TimeStep};
use crate::tape::{AttentionSpec, Param, ParamAllocator, ParamGroup, Tape, Var, RMS_EPS};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
/// Token id reserved for the empty (null) prompt.
pub const NULL_TOKEN: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub vocab: usize,
    pub max_prompt: usize,
    pub ffn_mult: usize,
    pub time_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 32,
            heads: 2,
            patch: 2,
            channels: 3,
            vocab: 256,
            max_prompt: 16,
            ffn_mult: 4,
            time_dim: 32,
        }
    }
}

impl BackboneConfig {
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.patch == 0 || self.channels == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab < 2 || self.max_prompt == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("invalid vocabulary, prompt or time embedding size".into()));
        }
        Ok(())
    }
}

/// Prompt tokens from a fixed hashed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub token_ids: Vec<usize>,
    pub raw_text: String,
}

impl PromptSpec {
    /// Lower-cased whitespace words hashed (FNV-1a) into ids `1..vocab`;
    /// truncated to `max_len`. Empty text yields the null prompt.
    pub fn encode(text: &str, vocab: usize, max_len: usize) -> Self {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in w.to_lowercase().bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
                1 + (h % (vocab as u64 - 1)) as usize
            })
            .take(max_len)
            .collect();
        if ids.is_empty() {
            ids.push(NULL_TOKEN);
        }
        Self {
            token_ids: ids,
            raw_text: text.to_string(),
        }
    }

    pub fn null() -> Self {
        Self {
            token_ids: vec![NULL_TOKEN],
            raw_text: String::new(),
        }
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        if self.token_ids.is_empty() || self.token_ids.len() > config.max_prompt {
            return Err(Error::Config(format!(
                "prompt length {} outside 1..={}",
                self.token_ids.len(),
                config.max_prompt
            )));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&id| id >= config.vocab) {
            return Err(Error::Config(format!("token id {bad} >= vocabulary {}", config.vocab)));
        }
        Ok(())
    }
}

/// Patch tokens of a video: `n x f x s x token_dim` with `s = grid_h * grid_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub views: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Splits each frame into `patch x patch` tiles; a token holds its tile's
/// values ordered (channel, row, col).
pub fn patchify(video: &LatentVideo, patch: usize) -> Result<TokenGrid> {
    let [n, f, c, h, w] = video.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::IndivisiblePatch { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let td = c * patch * patch;
    let src = video.data();
    let mut out = vec![0.0; src.len()];
    for nf in 0..n * f {
        for py in 0..gh {
            for px in 0..gw {
                let tok = (nf * gh + py) * gw + px;
                for ch in 0..c {
                    for dy in 0..patch {
                        let row = ((nf * c + ch) * h + py * patch + dy) * w + px * patch;
                        let dst = tok * td + (ch * patch + dy) * patch;
                        out[dst..dst + patch].copy_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::new(vec![n, f, gh * gw, td], out)?,
        views: n,
        frames: f,
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: c,
    })
}

pub fn unpatchify(grid: &TokenGrid) -> Result<LatentVideo> {
    let (n, f, c, p) = (grid.views, grid.frames, grid.channels, grid.patch);
    let (gh, gw) = (grid.grid_h, grid.grid_w);
    let (h, w) = (gh * p, gw * p);
    let td = c * p * p;
    let src = grid.tokens.data();
    if src.len() != n * f * gh * gw * td {
        return Err(Error::ShapeMismatch {
            expected: vec![n, f, gh * gw, td],
            got: grid.tokens.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; src.len()];
    for nf in 0..n * f {
        for py in 0..gh {
            for px in 0..gw {
                let tok = (nf * gh + py) * gw + px;
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((nf * c + ch) * h + py * p + dy) * w + px * p;
                        let s = tok * td + (ch * p + dy) * p;
                        out[row..row + p].copy_from_slice(&src[s..s + p]);
                    }
                }
            }
        }
    }
    LatentVideo::from_vec([n, f, c, h, w], out)
}

/// Plain (tape-free) RMSNorm of each `d`-wide row.
pub fn rms_norm(x: &[f64], scale: &[f64]) -> Vec<f64> {
    let d = scale.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().zip(scale).map(|(v, s)| v * r * s));
    }
    out
}

/// Sinusoidal embedding of `t` (scaled to `[0, 1000]`).
pub fn timestep_embedding(t: TimeStep, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tt = t.value() * 1000.0;
    let mut emb = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    emb.extend(freqs.iter().map(|f| (tt * f).sin()));
    emb.extend(freqs.iter().map(|f| (tt * f).cos()));
    emb
}

/// Affine map from the timestep embedding to an RMSNorm gain (`1 + W e + b`).
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub w: Param,
    pub b: Param,
}

impl NormParams {
    fn new(alloc: &mut ParamAllocator, name: &str, time_dim: usize, width: usize) -> Self {
        Self {
            w: alloc.alloc(format!("{name}.w"), Tensor::zeros(&[time_dim, width])),
            b: alloc.alloc(format!("{name}.b"), Tensor::zeros(&[width])),
        }
    }

    /// Gain vector for timestep `t`, computed without a tape.
    pub fn scale(&self, t: TimeStep) -> Vec<f64> {
        let (e, d) = (self.w.value.shape()[0], self.w.value.shape()[1]);
        let emb = timestep_embedding(t, e);
        let mut out: Vec<f64> = self.b.value.data().to_vec();
        for (i, ev) in emb.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&self.w.value.data()[i * d..(i + 1) * d]) {
                *o += ev * wv;
            }
        }
        out.iter().map(|v| 1.0 + v).collect()
    }

    fn params(&self) -> [&Param; 2] {
        [&self.w, &self.b]
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.w, &mut self.b]
    }
}

/// Query/key/value/output projections; only the output carries a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Param,
    pub wk: Param,
    pub wv: Param,
    pub wo: Param,
    pub bo: Param,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(alloc: &mut ParamAllocator, name: &str, width: usize, rng: &mut R) -> Self {
        let mut mat = |suffix: &str, rng: &mut R| alloc.alloc(format!("{name}.{suffix}"), Tensor::randn(&[width, width], INIT_STD, rng));
        let wq = mat("wq", rng);
        let wk = mat("wk", rng);
        let wv = mat("wv", rng);
        let wo = mat("wo", rng);
        let bo = alloc.alloc(format!("{name}.bo"), Tensor::zeros(&[width]));
        Self { wq, wk, wv, wo, bo }
    }

    /// Copies `donor` values under freshly allocated keys.
    pub fn cloned_from(donor: &AttentionParams, alloc: &mut ParamAllocator, name: &str) -> Self {
        let mut copy = |suffix: &str, p: &Param| alloc.alloc(format!("{name}.{suffix}"), p.value.clone());
        Self {
            wq: copy("wq", &donor.wq),
            wk: copy("wk", &donor.wk),
            wv: copy("wv", &donor.wv),
            wo: copy("wo", &donor.wo),
            bo: copy("bo", &donor.bo),
        }
    }

    pub fn params(&self) -> [&Param; 5] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.bo]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 5] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.bo]
    }

    pub fn values_equal(&self, other: &AttentionParams) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .all(|(a, b)| a.value == b.value)
    }

    /// Projects `x_q` (queries) and `x_kv` (keys/values), attends, projects out.
    pub fn apply(
        &self,
        tape: &mut Tape,
        x_q: Var,
        x_kv: Var,
        spec: AttentionSpec,
        trainable: bool,
    ) -> Result<Var> {
        let wq = tape.param(&self.wq, trainable);
        let wk = tape.param(&self.wk, trainable);
        let wv = tape.param(&self.wv, trainable);
        let wo = tape.param(&self.wo, trainable);
        let bo = tape.param(&self.bo, trainable);
        let q = tape.linear(x_q, wq, None)?;
        let k = tape.linear(x_kv, wk, None)?;
        let v = tape.linear(x_kv, wv, None)?;
        let a = tape.attention(q, k, v, spec)?;
        tape.linear(a, wo, Some(bo))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub norm_spatial: NormParams,
    pub attn_spatial: AttentionParams,
    pub norm_3d: NormParams,
    pub attn_3d: AttentionParams,
    pub norm_cross: NormParams,
    pub attn_cross: AttentionParams,
    pub norm_ffn: NormParams,
    pub ffn_w1: Param,
    pub ffn_b1: Param,
    pub ffn_w2: Param,
    pub ffn_b2: Param,
}

impl BlockWeights {
    /// Gains for the four sublayer norms at timestep `t`.
    pub fn timestep_scales(&self, t: TimeStep) -> [Vec<f64>; 4] {
        [
            self.norm_spatial.scale(t),
            self.norm_3d.scale(t),
            self.norm_cross.scale(t),
            self.norm_ffn.scale(t),
        ]
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = Vec::new();
        v.extend(self.norm_spatial.params());
        v.extend(self.attn_spatial.params());
        v.extend(self.norm_3d.params());
        v.extend(self.attn_3d.params());
        v.extend(self.norm_cross.params());
        v.extend(self.attn_cross.params());
        v.extend(self.norm_ffn.params());
        v.extend([&self.ffn_w1, &self.ffn_b1, &self.ffn_w2, &self.ffn_b2]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        v.extend(self.norm_spatial.params_mut());
        v.extend(self.attn_spatial.params_mut());
        v.extend(self.norm_3d.params_mut());
        v.extend(self.attn_3d.params_mut());
        v.extend(self.norm_cross.params_mut());
        v.extend(self.attn_cross.params_mut());
        v.extend(self.norm_ffn.params_mut());
        v.extend([&mut self.ffn_w1, &mut self.ffn_b1, &mut self.ffn_w2, &mut self.ffn_b2]);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub patch_w: Param,
    pub patch_b: Param,
    pub text_table: Param,
    pub text_pos: Param,
    pub blocks: Vec<BlockWeights>,
    pub norm_final: NormParams,
    pub out_w: Param,
    pub out_b: Param,
    /// When set, optimizers must leave every base parameter untouched.
    pub frozen: bool,
}

impl BackboneWeights {
    pub fn init<R: Rng + ?Sized>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut a = ParamAllocator::new(ParamGroup::Base);
        let (d, td, e) = (config.width, config.token_dim(), config.time_dim);
        let patch_w = a.alloc("patch.w", Tensor::randn(&[td, d], INIT_STD, rng));
        let patch_b = a.alloc("patch.b", Tensor::zeros(&[d]));
        let text_table = a.alloc("text.table", Tensor::randn(&[config.vocab, d], INIT_STD, rng));
        let text_pos = a.alloc("text.pos", Tensor::randn(&[config.max_prompt, d], INIT_STD, rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let p = format!("block{b}");
            let norm_spatial = NormParams::new(&mut a, &format!("{p}.norm_spatial"), e, d);
            let attn_spatial = AttentionParams::new(&mut a, &format!("{p}.attn_spatial"), d, rng);
            let norm_3d = NormParams::new(&mut a, &format!("{p}.norm_3d"), e, d);
            let attn_3d = AttentionParams::new(&mut a, &format!("{p}.attn_3d"), d, rng);
            let norm_cross = NormParams::new(&mut a, &format!("{p}.norm_cross"), e, d);
            let attn_cross = AttentionParams::new(&mut a, &format!("{p}.attn_cross"), d, rng);
            let norm_ffn = NormParams::new(&mut a, &format!("{p}.norm_ffn"), e, d);
            let hidden = d * config.ffn_mult;
            let ffn_w1 = a.alloc(format!("{p}.ffn.w1"), Tensor::randn(&[d, hidden], INIT_STD, rng));
            let ffn_b1 = a.alloc(format!("{p}.ffn.b1"), Tensor::zeros(&[hidden]));
            let ffn_w2 = a.alloc(format!("{p}.ffn.w2"), Tensor::randn(&[hidden, d], INIT_STD, rng));
            let ffn_b2 = a.alloc(format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
            blocks.push(BlockWeights {
                norm_spatial,
                attn_spatial,
                norm_3d,
                attn_3d,
                norm_cross,
                attn_cross,
                norm_ffn,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let norm_final = NormParams::new(&mut a, "norm_final", e, d);
        let out_w = a.alloc("out.w", Tensor::randn(&[d, td], INIT_STD, rng));
        let out_b = a.alloc("out.b", Tensor::zeros(&[td]));
        Ok(Self {
            config,
            patch_w,
            patch_b,
            text_table,
            text_pos,
            blocks,
            norm_final,
            out_w,
            out_b,
            frozen: false,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.text_table, &self.text_pos];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.norm_final.params());
        v.extend([&self.out_w, &self.out_b]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.text_table, &mut self.text_pos];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.norm_final.params_mut());
        v.extend([&mut self.out_w, &mut self.out_b]);
        v
    }

    /// SHA-256 over every parameter's name, shape and little-endian values.
    pub fn checksum(&self) -> String {
        checksum_params(self.params())
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

pub fn checksum_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.name.as_bytes());
        for &d in p.value.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Token layout seen by block hooks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub views: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub width: usize,
    pub patch: usize,
}

impl TokenLayout {
    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn total_tokens(&self) -> usize {
        self.views * self.frames * self.tokens_per_frame()
    }
}

/// Callback invoked on the spatial-attention output of one block. The input
/// is a `views * frames * tokens x width` node in view-major order.
pub trait BlockHook {
    fn apply(&self, tape: &mut Tape, x: Var, layout: &TokenLayout) -> Result<Var>;
}

/// Returns its input untouched.
pub struct IdentityHook;

impl BlockHook for IdentityHook {
    fn apply(&self, _tape: &mut Tape, x: Var, _layout: &TokenLayout) -> Result<Var> {
        Ok(x)
    }
}

fn norm_gain(tape: &mut Tape, norm: &NormParams, t_emb: Var, trainable: bool) -> Result<Var> {
    let w = tape.param(&norm.w, trainable);
    let b = tape.param(&norm.b, trainable);
    let affine = tape.linear(t_emb, w, Some(b))?;
    Ok(tape.offset(affine, 1.0))
}

/// Prompt embeddings: token table rows plus learned positions, `len x width`.
pub fn embed_prompt(tape: &mut Tape, weights: &BackboneWeights, prompt: &PromptSpec, trainable: bool) -> Result<Var> {
    prompt.validate(&weights.config)?;
    let table = tape.param(&weights.text_table, trainable);
    let pos = tape.param(&weights.text_pos, trainable);
    let tok = tape.gather(table, &prompt.token_ids)?;
    let positions: Vec<usize> = (0..prompt.token_ids.len()).collect();
    let p = tape.gather(pos, &positions)?;
    tape.add(tok, p)
}

/// One backbone block on `x` (`views*frames*tokens x width`).
#[allow(clippy::too_many_arguments)]
pub fn base_block_forward(
    tape: &mut Tape,
    weights: &BackboneWeights,
    block_index: usize,
    x: Var,
    layout: &TokenLayout,
    text: Var,
    t_emb: Var,
    hook: Option<&dyn BlockHook>,
    trainable: bool,
) -> Result<Var> {
    let cfg = &weights.config;
    let blk = weights.blocks.get(block_index).ok_or(Error::CountMismatch {
        what: "block index",
        expected: cfg.blocks,
        got: block_index,
    })?;
    if layout.width != cfg.width || tape.value(x).len() != layout.total_tokens() * cfg.width {
        return Err(Error::ShapeMismatch {
            expected: vec![layout.total_tokens(), cfg.width],
            got: tape.value(x).shape().to_vec(),
        });
    }
    let s = layout.tokens_per_frame();
    let (n, f) = (layout.views, layout.frames);

    let g = norm_gain(tape, &blk.norm_spatial, t_emb, trainable)?;
    let h = tape.rms_norm(x, g)?;
    let spatial = AttentionSpec {
        heads: cfg.heads,
        groups: n * f,
        q_len: s,
        kv_groups: n * f,
        kv_len: s,
        mask: None,
    };
    let a = blk.attn_spatial.apply(tape, h, h, spatial, trainable)?;
    let mut x = tape.add(x, a)?;

    if let Some(hook) = hook {
        x = hook.apply(tape, x, layout)?;
    }

    let g = norm_gain(tape, &blk.norm_3d, t_emb, trainable)?;
    let h = tape.rms_norm(x, g)?;
    let spatio_temporal = AttentionSpec {
        heads: cfg.heads,
        groups: n,
        q_len: f * s,
        kv_groups: n,
        kv_len: f * s,
        mask: None,
    };
    let a = blk.attn_3d.apply(tape, h, h, spatio_temporal, trainable)?;
    let x = tape.add(x, a)?;

    let g = norm_gain(tape, &blk.norm_cross, t_emb, trainable)?;
    let h = tape.rms_norm(x, g)?;
    let text_len = tape.value(text).shape()[0];
    let cross = AttentionSpec {
        heads: cfg.heads,
        groups: 1,
        q_len: layout.total_tokens(),
        kv_groups: 1,
        kv_len: text_len,
        mask: None,
    };
    let a = blk.attn_cross.apply(tape, h, text, cross, trainable)?;
    let x = tape.add(x, a)?;

    let g = norm_gain(tape, &blk.norm_ffn, t_emb, trainable)?;
    let h = tape.rms_norm(x, g)?;
    let w1 = tape.param(&blk.ffn_w1, trainable);
    let b1 = tape.param(&blk.ffn_b1, trainable);
    let w2 = tape.param(&blk.ffn_w2, trainable);
    let b2 = tape.param(&blk.ffn_b2, trainable);
    let hidden = tape.linear(h, w1, Some(b1))?;
    let hidden = tape.silu(hidden);
    let out = tape.linear(hidden, w2, Some(b2))?;
    tape.add(x, out)
}

/// Records the full velocity prediction for `z_t`.
///
/// Returns the output node in patch-token layout (`views*frames*tokens x
/// token_dim`) together with the grid needed to unpatchify it.
pub fn backbone_forward(
    tape: &mut Tape,
    weights: &BackboneWeights,
    z_t: &LatentVideo,
    t: TimeStep,
    prompt: &PromptSpec,
    hooks: Option<&[&dyn BlockHook]>,
    trainable: bool,
) -> Result<(Var, TokenGrid)> {
    let cfg = &weights.config;
    if z_t.dims()[2] != cfg.channels {
        return Err(Error::ShapeMismatch {
            expected: vec![cfg.channels],
            got: vec![z_t.dims()[2]],
        });
    }
    if let Some(hooks) = hooks {
        if hooks.len() != cfg.blocks {
            return Err(Error::CountMismatch {
                what: "sync hooks",
                expected: cfg.blocks,
                got: hooks.len(),
            });
        }
    }
    let trainable = trainable && !weights.frozen;
    let grid = patchify(z_t, cfg.patch)?;
    let layout = TokenLayout {
        views: grid.views,
        frames: grid.frames,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        width: cfg.width,
        patch: cfg.patch,
    };
    let rows = layout.total_tokens();
    let input = tape.constant(grid.tokens.clone().reshape(&[rows, cfg.token_dim()])?);
    let t_emb = tape.constant(Tensor::new(vec![1, cfg.time_dim], timestep_embedding(t, cfg.time_dim))?);
    let text = embed_prompt(tape, weights, prompt, trainable)?;

    let pw = tape.param(&weights.patch_w, trainable);
    let pb = tape.param(&weights.patch_b, trainable);
    let mut x = tape.linear(input, pw, Some(pb))?;
    for b in 0..cfg.blocks {
        let hook = hooks.map(|h| h[b]);
        x = base_block_forward(tape, weights, b, x, &layout, text, t_emb, hook, trainable)?;
    }
    let g = norm_gain(tape, &weights.norm_final, t_emb, trainable)?;
    let h = tape.rms_norm(x, g)?;
    let ow = tape.param(&weights.out_w, trainable);
    let ob = tape.param(&weights.out_b, trainable);
    let out = tape.linear(h, ow, Some(ob))?;
    Ok((out, grid))
}

/// Converts an output node back to video layout.
pub fn tokens_to_video(tape: &Tape, out: Var, grid: &TokenGrid) -> Result<LatentVideo> {
    let mut g = grid.clone();
    g.tokens = tape.value(out).clone();
    unpatchify(&g)
}

/// Tape-free velocity prediction.
pub fn predict_velocity(
    weights: &BackboneWeights,
    z_t: &LatentVideo,
    t: TimeStep,
    prompt: &PromptSpec,
    hooks: Option<&[&dyn BlockHook]>,
) -> Result<LatentVideo> {
    let mut tape = Tape::new();
    let (out, grid) = backbone_forward(&mut tape, weights, z_t, t, prompt, hooks, false)?;
    tokens_to_video(&tape, out, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{forward_interpolate, velocity_target};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> BackboneConfig {
        BackboneConfig {
            blocks: 2,
            width: 8,
            heads: 2,
            patch: 2,
            channels: 3,
            vocab: 32,
            max_prompt: 4,
            ffn_mult: 2,
            time_dim: 8,
        }
    }

    /// Puts every parameter (including the zero-initialized norm maps) at a
    /// random value so that no path is trivially dead.
    fn randomize(w: &mut BackboneWeights, rng: &mut ChaCha8Rng, std: f64) {
        for p in w.params_mut() {
            p.value = Tensor::randn(p.value.shape(), std, rng);
        }
    }

    fn t(x: f64) -> TimeStep {
        TimeStep::new(x).unwrap()
    }

    #[test]
    fn patchify_round_trip_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = LatentVideo::randn([2, 3, 3, 8, 8], &mut rng);
        let g = patchify(&v, 4).unwrap();
        assert_eq!(g.tokens.shape(), &[2, 3, 4, 48]);
        assert_eq!(unpatchify(&g).unwrap(), v);
        let g1 = patchify(&v, 1).unwrap();
        assert_eq!(g1.tokens_per_frame(), 64);
        assert_eq!(unpatchify(&g1).unwrap(), v);
        let single = LatentVideo::randn([1, 1, 1, 4, 6], &mut rng);
        // patch 1 with one channel is a pure reshape
        assert_eq!(patchify(&single, 1).unwrap().tokens.data(), single.data());
        assert!(matches!(patchify(&v, 3), Err(Error::IndivisiblePatch { .. })));
    }

    #[test]
    fn rms_norm_cases() {
        let x = [1.0, -1.0, 1.0, -1.0];
        let out = rms_norm(&x, &[1.0; 4]);
        assert!(out.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
        assert_eq!(rms_norm(&[0.0; 4], &[2.0; 4]), vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let s = Tensor::randn(&[4], 1.0, &mut rng);
        let out = rms_norm(x.data(), s.data());
        for r in 0..3 {
            let row = &x.data()[r * 4..r * 4 + 4];
            let mut ms = 0.0;
            for v in row {
                ms += v * v;
            }
            let denom = (ms / 4.0 + 1e-6).sqrt();
            for c in 0..4 {
                assert!((out[r * 4 + c] - row[c] / denom * s.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn timestep_scale_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        let scales = w.blocks[1].timestep_scales(t(0.4));
        assert!(scales.iter().all(|s| s.iter().all(|&v| v == 1.0)));
        assert_eq!(w.blocks[1].timestep_scales(t(0.4)), scales);
        let a = w.blocks[0].norm_ffn.scale(t(0.3));
        let b = w.blocks[0].norm_ffn.scale(t(0.3 + 1e-4));
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        assert!(diff < 1e-2);
    }

    #[test]
    fn prompt_encoding() {
        let p = PromptSpec::encode("A red sphere", 256, 16);
        assert_eq!(p.token_ids.len(), 3);
        assert!(p.token_ids.iter().all(|&id| (1..256).contains(&id)));
        assert_eq!(p, PromptSpec::encode("A red sphere", 256, 16));
        assert_eq!(PromptSpec::encode("  ", 256, 16).token_ids, vec![NULL_TOKEN]);
        assert_eq!(PromptSpec::encode("a b c d e f", 256, 4).token_ids.len(), 4);
        let bad = PromptSpec {
            token_ids: vec![300],
            raw_text: String::new(),
        };
        assert!(bad.validate(&BackboneConfig::default()).is_err());
    }

    #[test]
    fn identical_views_give_identical_outputs_and_view_order_permutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        randomize(&mut w, &mut rng, 0.3);
        let one = LatentVideo::randn([1, 2, 3, 4, 4], &mut rng);
        let two = one.select_views(&[0, 0]);
        let prompt = PromptSpec::encode("blue box", 32, 4);
        let out = predict_velocity(&w, &two, t(0.5), &prompt, None).unwrap();
        assert_eq!(out.view(0), out.view(1));

        let three = LatentVideo::randn([3, 2, 3, 4, 4], &mut rng);
        let base = predict_velocity(&w, &three, t(0.7), &prompt, None).unwrap();
        let perm = [2, 0, 1];
        let permuted = predict_velocity(&w, &three.select_views(&perm), t(0.7), &prompt, None).unwrap();
        assert_eq!(permuted, base.select_views(&perm));
    }

    #[test]
    fn views_are_independent_without_hooks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        randomize(&mut w, &mut rng, 0.3);
        let prompt = PromptSpec::encode("x", 32, 4);
        let a = LatentVideo::randn([2, 2, 3, 4, 4], &mut rng);
        let mut b = a.clone();
        for v in b.view_mut(1) {
            *v += 1.0;
        }
        let oa = predict_velocity(&w, &a, t(0.2), &prompt, None).unwrap();
        let ob = predict_velocity(&w, &b, t(0.2), &prompt, None).unwrap();
        assert_eq!(oa.view(0), ob.view(0));
        assert_ne!(oa.view(1), ob.view(1));
    }

    #[test]
    fn without_3d_attention_frames_are_processed_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        randomize(&mut w, &mut rng, 0.3);
        for blk in &mut w.blocks {
            blk.attn_3d.wo.value = Tensor::zeros(blk.attn_3d.wo.value.shape());
            blk.attn_3d.bo.value = Tensor::zeros(blk.attn_3d.bo.value.shape());
        }
        let prompt = PromptSpec::encode("x", 32, 4);
        let v = LatentVideo::randn([1, 3, 3, 4, 4], &mut rng);
        let frame = v.view_len() / 3;
        let perm = [2, 0, 1];
        let mut shuffled = v.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.data_mut()[dst * frame..(dst + 1) * frame].copy_from_slice(&v.data()[src * frame..(src + 1) * frame]);
        }
        let out = predict_velocity(&w, &v, t(0.6), &prompt, None).unwrap();
        let out_s = predict_velocity(&w, &shuffled, t(0.6), &prompt, None).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let a = &out_s.data()[dst * frame..(dst + 1) * frame];
            let b = &out.data()[src * frame..(src + 1) * frame];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_hooks_are_bitwise_transparent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        let prompt = PromptSpec::encode("x y", 32, 4);
        let v = LatentVideo::randn([2, 2, 3, 4, 4], &mut rng);
        let hooks: Vec<&dyn BlockHook> = vec![&IdentityHook, &IdentityHook];
        let a = predict_velocity(&w, &v, t(0.3), &prompt, None).unwrap();
        let b = predict_velocity(&w, &v, t(0.3), &prompt, Some(&hooks)).unwrap();
        assert_eq!(a, b);
        let one: Vec<&dyn BlockHook> = vec![&IdentityHook];
        assert!(predict_velocity(&w, &v, t(0.3), &prompt, Some(&one)).is_err());
    }

    #[test]
    fn prompt_changes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        let v = LatentVideo::randn([1, 2, 3, 4, 4], &mut rng);
        let a = predict_velocity(&w, &v, t(0.5), &PromptSpec::encode("red", 32, 4), None).unwrap();
        let b = predict_velocity(&w, &v, t(0.5), &PromptSpec::encode("green", 32, 4), None).unwrap();
        assert!(a.tensor().max_abs_diff(b.tensor()) > 0.0);
    }

    #[test]
    fn block_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        randomize(&mut w, &mut rng, 0.2);
        let prompt = PromptSpec::encode("a b", 32, 4);
        let z0 = LatentVideo::randn([2, 2, 3, 4, 4], &mut rng);
        let eps = LatentVideo::randn([2, 2, 3, 4, 4], &mut rng);
        let tt = t(0.35);
        let zt = forward_interpolate(&z0, &eps, tt).unwrap();
        let target = patchify(&velocity_target(&z0, &eps).unwrap(), 2).unwrap().tokens;
        let loss_of = |w: &BackboneWeights| {
            let mut tape = Tape::new();
            let (out, _) = backbone_forward(&mut tape, w, &zt, tt, &prompt, None, false).unwrap();
            let l = tape.mse(out, target.data()).unwrap();
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let (out, _) = backbone_forward(&mut tape, &w, &zt, tt, &prompt, None, true).unwrap();
        let l = tape.mse(out, target.data()).unwrap();
        let grads = tape.backward(l).into_params();
        assert_eq!(grads.len(), w.params().len());
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in [0usize, 3, 7, 12, 20, 30, 40, 50] {
            let idx = pi % w.params().len();
            let key = w.params()[idx].key;
            let j = (pi * 7) % w.params()[idx].value.len();
            let mut plus = w.clone();
            plus.params_mut()[idx].value.data_mut()[j] += h;
            let mut minus = w.clone();
            minus.params_mut()[idx].value.data_mut()[j] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = grads[&key].data()[j];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn frozen_weights_produce_no_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut w = BackboneWeights::init(small_config(), &mut rng).unwrap();
        w.frozen = true;
        let v = LatentVideo::randn([1, 1, 3, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let (out, _) = backbone_forward(&mut tape, &w, &v, t(0.5), &PromptSpec::null(), None, true).unwrap();
        let target = vec![0.0; tape.value(out).len()];
        let l = tape.mse(out, &target).unwrap();
        assert!(tape.backward(l).params().is_empty());
    }
}
