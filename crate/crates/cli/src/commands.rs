use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use mvsync_core::backbone::{BackboneConfig, PromptSpec};
use mvsync_core::data::{CurriculumSchedule, CurriculumStage};
use mvsync_core::dataset::{derive_seed, forge_dataset, load_scene, Dataset, DatasetIndex, ForgeConfig};
use mvsync_core::eval::{evaluate_scene, BlockMatchConfig, EvalOptions, EvalReport, Matcher, DEFAULT_MATCH_TOL};
use mvsync_core::flow::{GuidanceWeights, LatentVideo};
use mvsync_core::model::{self, generate, Model, RerenderOptions, SampleOptions};
use mvsync_core::scmt::read_tensor;
use mvsync_core::sync::{default_band_px, CameraRepresentation, SyncConfig, SyncVariant};
use mvsync_core::trainer::{grad_check, synthetic_input, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::io::{format_cams, read_rig, read_videos, write_videos};
use crate::{EvalArgs, ForgeArgs, GradcheckArgs, ModelArgs, RerenderArgs, SampleArgs, TrainArgs};

/// Missing or malformed settings; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! apply_flags {
    ($cfg:expr, $args:expr, $($field:ident),* $(,)?) => {
        $( $cfg.set_opt(stringify!($field), &$args.$field)?; )*
    };
}

fn layered(command: &'static str, defaults: &[(&str, String)], file: &Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::new(command, defaults);
    if let Some(path) = file {
        cfg.merge_file(path).map_err(|e| anyhow!(UsageError(format!("{e:#}"))))?;
    }
    Ok(cfg)
}

fn required<'a>(cfg: &'a RunConfig, key: &str) -> Result<&'a str> {
    cfg.get_opt_str(key).ok_or_else(|| anyhow!(UsageError(format!("setting `{key}` is required"))))
}

fn usage<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| anyhow!(UsageError(format!("{e:#}"))))
}

pub fn forge(a: ForgeArgs) -> Result<ExitCode> {
    let d = ForgeConfig::default();
    let mut cfg = layered(
        "forge",
        &[
            ("out", "data".into()),
            ("scenes", d.scenes.to_string()),
            ("cams", d.cams.to_string()),
            ("frames", d.frames.to_string()),
            ("height", d.height.to_string()),
            ("width", d.width.to_string()),
            ("seed", d.seed.to_string()),
            ("trajectories", d.trajectories.to_string()),
            ("trajectory_len", d.trajectory_len.to_string()),
            ("trajectory_step_deg", d.trajectory_step_deg.to_string()),
            ("general", d.general.to_string()),
            ("corr_stride", d.corr_stride.to_string()),
        ],
        &a.common.config,
    )?;
    apply_flags!(cfg, a, out, scenes, cams, frames, height, width, seed, trajectories, trajectory_len, trajectory_step_deg, general, corr_stride);
    let fc = usage((|| {
        Ok(ForgeConfig {
            scenes: cfg.get("scenes")?,
            cams: cfg.get("cams")?,
            frames: cfg.get("frames")?,
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            seed: cfg.get("seed")?,
            trajectories: cfg.get("trajectories")?,
            trajectory_len: cfg.get("trajectory_len")?,
            trajectory_step_deg: cfg.get("trajectory_step_deg")?,
            general: cfg.get("general")?,
            corr_stride: cfg.get("corr_stride")?,
        })
    })())?;
    fc.validate()?;
    let out = PathBuf::from(required(&cfg, "out")?);
    let summaries = forge_dataset(&out, &fc)?;
    cfg.write_echo(&out)?;
    println!("{:<12} {:>7}  prompt", "scene", "tracks");
    for s in &summaries {
        println!("{:<12} {:>7}  {}", s.scene_id, s.tracks, s.prompt);
    }
    println!("wrote {} scenes to {}", summaries.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn model_defaults() -> Vec<(&'static str, String)> {
    let b = BackboneConfig::default();
    vec![
        ("blocks", b.blocks.to_string()),
        ("width", b.width.to_string()),
        ("heads", b.heads.to_string()),
        ("patch", b.patch.to_string()),
        ("vocab", b.vocab.to_string()),
        ("max_prompt", b.max_prompt.to_string()),
        ("ffn_mult", b.ffn_mult.to_string()),
        ("time_dim", b.time_dim.to_string()),
        ("sync_variant", "per_position".into()),
        ("band_px", String::new()),
        ("camera", "extrinsic".into()),
    ]
}

fn apply_model_flags(cfg: &mut RunConfig, m: &ModelArgs) -> Result<()> {
    apply_flags!(cfg, m, blocks, width, heads, patch, vocab, max_prompt, ffn_mult, time_dim, sync_variant, band_px, camera);
    Ok(())
}

fn model_config(cfg: &RunConfig) -> Result<(BackboneConfig, SyncConfig)> {
    let b = BackboneConfig {
        blocks: cfg.get("blocks")?,
        width: cfg.get("width")?,
        heads: cfg.get("heads")?,
        patch: cfg.get("patch")?,
        channels: BackboneConfig::default().channels,
        vocab: cfg.get("vocab")?,
        max_prompt: cfg.get("max_prompt")?,
        ffn_mult: cfg.get("ffn_mult")?,
        time_dim: cfg.get("time_dim")?,
    };
    let variant = match cfg.raw("sync_variant") {
        "per_position" => SyncVariant::PerPosition,
        "full_frame" => SyncVariant::FullFrame,
        "epipolar" => SyncVariant::Epipolar {
            band_px: match cfg.get_opt_str("band_px") {
                Some(_) => cfg.get("band_px")?,
                None => default_band_px(b.patch),
            },
        },
        other => bail!("unknown sync_variant `{other}` (per_position, full_frame, epipolar)"),
    };
    let camera = match cfg.raw("camera") {
        "extrinsic" => CameraRepresentation::Extrinsic,
        "plucker" => CameraRepresentation::Plucker,
        other => bail!("unknown camera `{other}` (extrinsic, plucker)"),
    };
    Ok((b, SyncConfig { variant, camera }))
}

fn format_curriculum(c: &CurriculumSchedule) -> String {
    c.stages
        .iter()
        .map(|s| format!("{}:{}:{}", s.fraction_end, s.theta_lo, s.theta_hi))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_curriculum(s: &str) -> Result<CurriculumSchedule> {
    let stages = s
        .split(',')
        .map(|stage| {
            let v: Vec<f64> = stage
                .split(':')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("curriculum stage `{stage}`"))?;
            match v[..] {
                [fraction_end, theta_lo, theta_hi] => Ok(CurriculumStage {
                    fraction_end,
                    theta_lo,
                    theta_hi,
                }),
                _ => bail!("curriculum stage `{stage}` must be fraction_end:theta_lo:theta_hi"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CurriculumSchedule { stages })
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig> {
    let (backbone, sync) = model_config(cfg)?;
    let probs: Vec<f64> = cfg.get_list("probs")?;
    let source_probs: [f64; 3] = probs.try_into().map_err(|_| anyhow!("probs needs three values"))?;
    Ok(TrainConfig {
        total_steps: cfg.get("steps")?,
        pretrain_steps: cfg.get("pretrain_steps")?,
        batch_size: cfg.get("batch")?,
        learning_rate: cfg.get("lr")?,
        pretrain_learning_rate: cfg.get("pretrain_lr")?,
        source_probs,
        curriculum: parse_curriculum(cfg.raw("curriculum"))?,
        v2mv_mode: cfg.get("v2mv")?,
        p_replace: cfg.get("p_replace")?,
        loss_on_reference: cfg.get("loss_on_reference")?,
        text_dropout: cfg.get("text_dropout")?,
        views_min: cfg.get("views_min")?,
        views_max: cfg.get("views_max")?,
        max_gap: cfg.get("max_gap")?,
        seed: cfg.get("seed")?,
        backbone,
        sync,
    })
}

pub const LOSS_LOG: &str = "loss.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt_{step:06}.ckpt")
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let d = TrainConfig::default();
    let mut defaults = vec![
        ("data", "data".to_string()),
        ("out", "run".into()),
        ("steps", d.total_steps.to_string()),
        ("pretrain_steps", d.pretrain_steps.to_string()),
        ("batch", d.batch_size.to_string()),
        ("lr", d.learning_rate.to_string()),
        ("pretrain_lr", d.pretrain_learning_rate.to_string()),
        ("probs", d.source_probs.map(|p| p.to_string()).join(",")),
        ("curriculum", format_curriculum(&d.curriculum)),
        ("v2mv", d.v2mv_mode.to_string()),
        ("p_replace", d.p_replace.to_string()),
        ("loss_on_reference", d.loss_on_reference.to_string()),
        ("text_dropout", d.text_dropout.to_string()),
        ("views_min", d.views_min.to_string()),
        ("views_max", d.views_max.to_string()),
        ("max_gap", d.max_gap.to_string()),
        ("seed", d.seed.to_string()),
        ("checkpoint_every", "500".into()),
        ("resume", String::new()),
    ];
    defaults.extend(model_defaults());
    let mut cfg = layered("train", &defaults, &a.common.config)?;
    apply_model_flags(&mut cfg, &a.model)?;
    apply_flags!(
        cfg, a, data, out, steps, pretrain_steps, batch, lr, pretrain_lr, probs, curriculum, v2mv, p_replace, loss_on_reference,
        text_dropout, views_min, views_max, max_gap, seed, checkpoint_every, resume
    );
    let every: usize = usage(cfg.get("checkpoint_every"))?;
    let out = PathBuf::from(required(&cfg, "out")?);
    let data_dir = PathBuf::from(required(&cfg, "data")?);
    let (mut trainer, resumed) = match cfg.get_opt_str("resume") {
        Some(path) => (Trainer::load_checkpoint(Path::new(path)).with_context(|| format!("resuming from {path}"))?, true),
        None => (Trainer::new(usage(train_config(&cfg))?)?, false),
    };
    let data = Dataset::load(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    trainer.check_dataset(&data)?;
    fs::create_dir_all(&out)?;
    cfg.write_echo(&out)?;
    fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&trainer.config)?)?;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed)
        .truncate(!resumed)
        .open(out.join(LOSS_LOG))?;
    while !trainer.is_done() {
        let r = trainer.step(&data)?;
        writeln!(log, "{} {:?} {:?}", r.step, r.phase, r.loss)?;
        if every > 0 && trainer.step % every == 0 && !trainer.is_done() {
            trainer.save_checkpoint(&out.join(checkpoint_name(trainer.step)))?;
        }
        if trainer.step % 100 == 0 {
            log::info!("step {} loss {:.5}", r.step, r.loss);
        }
    }
    log.flush()?;
    trainer.save_checkpoint(&out.join(FINAL_CHECKPOINT))?;
    println!("trained {} steps; checkpoint {}", trainer.step, out.join(FINAL_CHECKPOINT).display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &str) -> Result<Model> {
    Ok(Trainer::load_checkpoint(Path::new(path)).with_context(|| format!("loading checkpoint {path}"))?.model)
}

pub fn sample(a: SampleArgs) -> Result<ExitCode> {
    let d = SampleOptions::default();
    let f = ForgeConfig::default();
    let mut cfg = layered(
        "sample",
        &[
            ("checkpoint", String::new()),
            ("cams", String::new()),
            ("prompt", String::new()),
            ("data", String::new()),
            ("views", "4".into()),
            ("out", "samples".into()),
            ("frames", f.frames.to_string()),
            ("height", f.height.to_string()),
            ("width", f.width.to_string()),
            ("steps", d.steps.to_string()),
            ("seed", "0".into()),
            ("shared_noise", d.shared_noise.to_string()),
            ("text_scale", d.text_scale.to_string()),
        ],
        &a.common.config,
    )?;
    apply_flags!(cfg, a, checkpoint, cams, prompt, data, views, out, frames, height, width, steps, seed, shared_noise, text_scale);
    let opts = usage((|| {
        Ok(SampleOptions {
            steps: cfg.get("steps")?,
            shared_noise: cfg.get("shared_noise")?,
            text_scale: cfg.get("text_scale")?,
        })
    })())?;
    let seed: u64 = usage(cfg.get("seed"))?;
    let model = load_model(required(&cfg, "checkpoint")?)?;
    let out = PathBuf::from(required(&cfg, "out")?);
    let encode = |text: &str| PromptSpec::encode(text, model.config().vocab, model.config().max_prompt);
    if let Some(data_dir) = cfg.get_opt_str("data") {
        let views: usize = usage(cfg.get("views"))?;
        let index = read_index(Path::new(data_dir))?;
        for (i, id) in index.scenes.iter().enumerate() {
            let scene = load_scene(&Path::new(data_dir).join(id))?;
            let m = &scene.manifest;
            if views == 0 || views > scene.rig.len() {
                bail!(UsageError(format!("views must be in 1..={} for {id}", scene.rig.len())));
            }
            let idx: Vec<usize> = (0..views).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 500, i as u64));
            let rig = scene.rig.subset(&idx);
            let videos = generate(&model, &rig, &encode(&m.prompt), m.frames, (m.height, m.width), &opts, &mut rng)?;
            write_videos(&out.join(id), &videos)?;
            fs::write(out.join(id).join("cams.txt"), format_cams(&rig.cameras))?;
            println!("{id}: {views} views, \"{}\"", m.prompt);
        }
    } else {
        let (h, w): (usize, usize) = usage((|| Ok((cfg.get("height")?, cfg.get("width")?)))())?;
        let frames: usize = usage(cfg.get("frames"))?;
        let rig = read_rig(Path::new(required(&cfg, "cams")?), h, w)?;
        let prompt = cfg.raw("prompt").to_string();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let videos = generate(&model, &rig, &encode(&prompt), frames, (h, w), &opts, &mut rng)?;
        write_videos(&out, &videos)?;
        println!("wrote {} views to {}", rig.len(), out.display());
    }
    cfg.write_echo(&out)?;
    Ok(ExitCode::SUCCESS)
}

fn read_index(root: &Path) -> Result<DatasetIndex> {
    let path = root.join("dataset.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn rerender(a: RerenderArgs) -> Result<ExitCode> {
    let d = RerenderOptions::default();
    let mut cfg = layered(
        "rerender",
        &[
            ("checkpoint", String::new()),
            ("input", String::new()),
            ("cams", String::new()),
            ("prompt", String::new()),
            ("out", "rerender".into()),
            ("steps", d.steps.to_string()),
            ("seed", "0".into()),
            ("video_scale", d.guidance.video.to_string()),
            ("text_scale", d.guidance.text.to_string()),
            ("shared_noise", d.shared_noise.to_string()),
        ],
        &a.common.config,
    )?;
    apply_flags!(cfg, a, checkpoint, input, cams, prompt, out, steps, seed, video_scale, text_scale, shared_noise);
    let opts = usage((|| {
        Ok(RerenderOptions {
            steps: cfg.get("steps")?,
            guidance: GuidanceWeights {
                video: cfg.get("video_scale")?,
                text: cfg.get("text_scale")?,
            },
            shared_noise: cfg.get("shared_noise")?,
        })
    })())?;
    let seed: u64 = usage(cfg.get("seed"))?;
    let model = load_model(required(&cfg, "checkpoint")?)?;
    let input = read_tensor(Path::new(required(&cfg, "input")?))?;
    let &[f, c, h, w] = input.shape() else {
        bail!("input video must be frames x 3 x h x w, got {:?}", input.shape());
    };
    let reference = LatentVideo::from_vec([1, f, c, h, w], input.into_data())?;
    let rig = read_rig(Path::new(required(&cfg, "cams")?), h, w)?;
    let prompt = PromptSpec::encode(cfg.raw("prompt"), model.config().vocab, model.config().max_prompt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos = model::rerender(&model, &reference, &rig, &prompt, &opts, &mut rng)?;
    let out = PathBuf::from(required(&cfg, "out")?);
    write_videos(&out, &videos)?;
    cfg.write_echo(&out)?;
    println!("wrote {} views to {}", rig.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_matcher(s: &str, tol: f64) -> Result<Matcher> {
    Ok(match s {
        "consistent" => Matcher::Consistent { tol },
        "ground_truth" => Matcher::GroundTruth,
        "block" => Matcher::Block(BlockMatchConfig::default()),
        other => bail!("unknown matcher `{other}` (consistent, ground_truth, block)"),
    })
}

pub const REPORT_FILE: &str = "eval_report.json";

pub fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut cfg = layered(
        "eval",
        &[
            ("generated", String::new()),
            ("data", String::new()),
            ("out", String::new()),
            ("tol", DEFAULT_MATCH_TOL.to_string()),
            ("matcher", "consistent".into()),
            ("seed", "0".into()),
        ],
        &a.common.config,
    )?;
    apply_flags!(cfg, a, generated, data, out, tol, matcher, seed);
    let tol: f64 = usage(cfg.get("tol"))?;
    let opts = EvalOptions {
        tol,
        matcher: usage(parse_matcher(cfg.raw("matcher"), tol))?,
        noise_seed: usage(cfg.get("seed"))?,
    };
    let gen = PathBuf::from(required(&cfg, "generated")?);
    let data = PathBuf::from(required(&cfg, "data")?);
    let index = read_index(&data)?;
    let mut ids: Vec<String> = fs::read_dir(&gen)
        .with_context(|| format!("reading {}", gen.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("scene_"))
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("{} holds no scene directories", gen.display());
    }
    let mut scenes = Vec::new();
    for id in &ids {
        if !index.scenes.contains(id) {
            bail!("scene {id} is missing from dataset {}", data.display());
        }
        let scene = load_scene(&data.join(id))?;
        let videos = read_videos(&gen.join(id))?;
        scenes.push(evaluate_scene(&videos, &scene, &opts).with_context(|| format!("scene {id}"))?);
    }
    let report = EvalReport::from_scenes(scenes, &opts)?;
    print!("{}", report.to_table());
    let out = cfg.get_opt_str("out").map_or(gen.clone(), PathBuf::from);
    fs::create_dir_all(&out)?;
    fs::write(out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
    cfg.write_echo(&out)?;
    Ok(ExitCode::SUCCESS)
}

pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut defaults = vec![
        ("checkpoint", String::new()),
        ("probes", "50".to_string()),
        ("seed", "0".into()),
        ("fault_scale", "1".into()),
        ("sync_std", "0".into()),
        ("views", "2".into()),
        ("frames", "2".into()),
        ("input_height", "8".into()),
        ("input_width", "8".into()),
        ("out", String::new()),
    ];
    defaults.extend(model_defaults());
    let mut cfg = layered("gradcheck", &defaults, &a.common.config)?;
    apply_model_flags(&mut cfg, &a.model)?;
    apply_flags!(cfg, a, checkpoint, probes, seed, fault_scale, sync_std, views, frames, input_height, input_width, out);
    let seed: u64 = usage(cfg.get("seed"))?;
    let mut model = match cfg.get_opt_str("checkpoint") {
        Some(path) => load_model(path)?,
        None => {
            let (b, s) = usage(model_config(&cfg))?;
            Model::init(b, s, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 600, 0)))?
        }
    };
    let sync_std: f64 = usage(cfg.get("sync_std"))?;
    if sync_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 600, 1));
        for s in &mut model.sync {
            s.randomize(sync_std, &mut rng);
        }
    }
    let res: (usize, usize) = usage((|| Ok((cfg.get("input_height")?, cfg.get("input_width")?)))())?;
    let input = synthetic_input(&model, usage(cfg.get("views"))?, usage(cfg.get("frames"))?, res, derive_seed(seed, 600, 2))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 600, 3));
    let report = grad_check(&model, &input, usage(cfg.get("probes"))?, usage(cfg.get("fault_scale"))?, &mut rng)?;
    println!("{:<40} {:>12}", "parameter group", "worst error");
    for (group, err) in &report.worst_by_group {
        println!("{group:<40} {err:>12.3e}");
    }
    let pass = report.max_rel_err < GRAD_TOLERANCE;
    println!(
        "max relative error {:.3e} over {} probes: {}",
        report.max_rel_err,
        report.probes.len(),
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(out) = cfg.get_opt_str("out") {
        let out = Path::new(out);
        fs::create_dir_all(out)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
        cfg.write_echo(out)?;
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_round_trips() {
        let c = CurriculumSchedule::default();
        assert_eq!(parse_curriculum(&format_curriculum(&c)).unwrap(), c);
        assert!(parse_curriculum("0.5:0").is_err());
        assert!(parse_curriculum("a:b:c").is_err());
    }

    #[test]
    fn defaults_build_module_configs() {
        let mut cfg = RunConfig::new("t", &model_defaults());
        let (b, s) = model_config(&cfg).unwrap();
        assert_eq!(b, BackboneConfig::default());
        assert_eq!(s, SyncConfig::default());
        cfg.set("sync_variant", "epipolar").unwrap();
        let (_, s) = model_config(&cfg).unwrap();
        assert_eq!(s.variant, SyncVariant::Epipolar { band_px: default_band_px(b.patch) });
        cfg.set("camera", "pinhole").unwrap();
        assert!(model_config(&cfg).is_err());
    }

    #[test]
    fn matcher_names() {
        assert_eq!(parse_matcher("consistent", 0.2).unwrap(), Matcher::Consistent { tol: 0.2 });
        assert_eq!(parse_matcher("ground_truth", 0.2).unwrap(), Matcher::GroundTruth);
        assert!(parse_matcher("gim", 0.2).is_err());
    }
}
