//! On-disk dataset: forged multi-view scenes, camera trajectories and
//! general single-view videos.
//!
//! ```text
//! <root>/dataset.json
//! <root>/scene_0000/cam_0.scmt ... cam_<n-1>.scmt   (f x 3 x h x w, f32)
//! <root>/scene_0000/manifest.json
//! <root>/trajectories/traj_0000.scmt               (len x 3 x h x w, f32)
//! <root>/trajectories/traj_0000.json
//! <root>/general/gen_0000.scmt                      (f x 3 x h x w, f32)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{static_filter, StaticFilterConfig, StaticFilterResult};
use crate::error::{Error, Result};
use crate::flow::LatentVideo;
use crate::geometry::{CameraExtrinsics, CameraIntrinsics, CameraRig};
use crate::scene::{
    desk_rig, render_general_video, render_scene, render_trajectory, Correspondences, GeneralKind, RenderOptions, SceneSpec,
    TrajectorySequence,
};
use crate::scmt::{read_tensor, write_tensor, Dtype};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub scenes: usize,
    pub cams: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub trajectories: usize,
    pub trajectory_len: usize,
    pub trajectory_step_deg: f64,
    pub general: usize,
    pub corr_stride: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self {
            scenes: 64,
            cams: 8,
            frames: 8,
            height: 32,
            width: 32,
            seed: 7,
            trajectories: 8,
            trajectory_len: 24,
            trajectory_step_deg: 5.0,
            general: 24,
            corr_stride: 4,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.cams == 0 || self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("scenes, cams, frames and resolution must be positive".into()));
        }
        if self.trajectories > 0 && self.trajectory_len < 2 {
            return Err(Error::Config("trajectories need at least two frames".into()));
        }
        if self.general > 0 && self.frames < 2 {
            return Err(Error::Config("general videos need at least two frames".into()));
        }
        if self.corr_stride == 0 {
            return Err(Error::Config("correspondence stride must be positive".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; decorrelates per-item seeds derived from one run seed.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub index: usize,
    pub extrinsics: [f64; 12],
    /// Little-endian f64 bytes of `extrinsics`, hex encoded.
    pub extrinsics_le_hex: String,
}

impl CameraEntry {
    pub fn new(index: usize, cam: &CameraExtrinsics) -> Self {
        Self {
            index,
            extrinsics: cam.flatten(),
            extrinsics_le_hex: hex::encode(cam.to_le_bytes()),
        }
    }

    pub fn camera(&self) -> Result<CameraExtrinsics> {
        let bytes = hex::decode(&self.extrinsics_le_hex).map_err(|e| Error::Format(format!("camera hex: {e}")))?;
        CameraExtrinsics::from_le_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl From<CameraIntrinsics> for IntrinsicsEntry {
    fn from(k: CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
        }
    }
}

impl From<IntrinsicsEntry> for CameraIntrinsics {
    fn from(k: IntrinsicsEntry) -> Self {
        CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub scene_id: String,
    pub seed: u64,
    pub prompt: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub intrinsics: IntrinsicsEntry,
    pub cameras: Vec<CameraEntry>,
    pub spec: SceneSpec,
    pub correspondences: Correspondences,
}

impl SceneManifest {
    pub fn rig(&self) -> Result<CameraRig> {
        let cams = self.cameras.iter().map(CameraEntry::camera).collect::<Result<Vec<_>>>()?;
        CameraRig::new(cams, self.intrinsics.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryManifest {
    pub prompt: String,
    pub intrinsics: IntrinsicsEntry,
    pub poses: Vec<CameraEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralEntry {
    pub file: String,
    pub kind: GeneralKind,
    pub caption: String,
    pub filter: StaticFilterResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: ForgeConfig,
    pub scenes: Vec<String>,
    pub trajectories: Vec<String>,
    pub general: Vec<GeneralEntry>,
}

/// Per-scene line for the forge summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSummary {
    pub scene_id: String,
    pub prompt: String,
    pub tracks: usize,
}

pub fn scene_id(i: usize) -> String {
    format!("scene_{i:04}")
}

/// Scene, rig and render for index `i`; resamples deterministically until the
/// subjects stay in view.
pub fn forge_scene(cfg: &ForgeConfig, i: usize) -> Result<(SceneManifest, LatentVideo)> {
    for attempt in 0..64u64 {
        let seed = derive_seed(cfg.seed, 1 + attempt, i as u64);
        let spec = SceneSpec::random(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7269_6773);
        let rig = desk_rig(cfg.cams, cfg.height, cfg.width, &mut rng)?;
        let out = match render_scene(
            &spec,
            &rig,
            cfg.frames,
            (cfg.height, cfg.width),
            RenderOptions {
                corr_stride: cfg.corr_stride,
            },
        ) {
            Ok(o) => o,
            Err(Error::Visibility(_)) => continue,
            Err(e) => return Err(e),
        };
        let manifest = SceneManifest {
            scene_id: scene_id(i),
            seed,
            prompt: spec.caption(),
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            intrinsics: rig.intrinsics.into(),
            cameras: rig.cameras.iter().enumerate().map(|(k, c)| CameraEntry::new(k, c)).collect(),
            spec,
            correspondences: out.correspondences,
        };
        return Ok((manifest, out.videos));
    }
    Err(Error::Visibility(format!("scene {i}: no visible configuration after 64 attempts")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Renders and writes the whole dataset. Scenes render in parallel; output is
/// independent of the thread count.
pub fn forge_dataset(root: &Path, cfg: &ForgeConfig) -> Result<Vec<SceneSummary>> {
    cfg.validate()?;
    fs::create_dir_all(root)?;
    let summaries = (0..cfg.scenes)
        .into_par_iter()
        .map(|i| -> Result<SceneSummary> {
            let (manifest, videos) = forge_scene(cfg, i)?;
            let dir = root.join(&manifest.scene_id);
            fs::create_dir_all(&dir)?;
            let [_, f, c, h, w] = videos.dims();
            for k in 0..cfg.cams {
                let t = Tensor::new(vec![f, c, h, w], videos.view(k).to_vec())?;
                write_tensor(&dir.join(format!("cam_{k}.scmt")), &t, Dtype::F32)?;
            }
            write_json(&dir.join("manifest.json"), &manifest)?;
            info!("forged {} ({})", manifest.scene_id, manifest.prompt);
            Ok(SceneSummary {
                scene_id: manifest.scene_id.clone(),
                prompt: manifest.prompt.clone(),
                tracks: manifest.correspondences.track_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let traj_dir = root.join("trajectories");
    let trajectories = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| -> Result<String> {
            fs::create_dir_all(&traj_dir)?;
            let seq = render_trajectory(
                derive_seed(cfg.seed, 100, i as u64),
                cfg.trajectory_len,
                cfg.trajectory_step_deg,
                (cfg.height, cfg.width),
            )?;
            let name = format!("traj_{i:04}");
            let data: Vec<f64> = seq.frames.concat();
            write_tensor(
                &traj_dir.join(format!("{name}.scmt")),
                &Tensor::new(vec![seq.len(), 3, cfg.height, cfg.width], data)?,
                Dtype::F32,
            )?;
            write_json(
                &traj_dir.join(format!("{name}.json")),
                &TrajectoryManifest {
                    prompt: seq.prompt.clone(),
                    intrinsics: seq.intrinsics.into(),
                    poses: seq.poses.iter().enumerate().map(|(k, c)| CameraEntry::new(k, c)).collect(),
                },
            )?;
            Ok(name)
        })
        .collect::<Result<Vec<_>>>()?;

    let gen_dir = root.join("general");
    let kinds = [GeneralKind::Static, GeneralKind::MovingSubject, GeneralKind::Panning];
    let general = (0..cfg.general)
        .into_par_iter()
        .map(|i| -> Result<GeneralEntry> {
            fs::create_dir_all(&gen_dir)?;
            let kind = kinds[i % kinds.len()];
            let g = render_general_video(derive_seed(cfg.seed, 200, i as u64), kind, cfg.frames, (cfg.height, cfg.width))?;
            // Frames are stored as f32, so the filter runs on the stored values.
            let t = Tensor::new(vec![cfg.frames, 3, cfg.height, cfg.width], g.frames)?;
            let file = format!("gen_{i:04}.scmt");
            write_tensor(&gen_dir.join(&file), &t, Dtype::F32)?;
            let stored = read_tensor(&gen_dir.join(&file))?;
            let filter = static_filter(stored.data(), [cfg.frames, 3, cfg.height, cfg.width], &StaticFilterConfig::default())?;
            Ok(GeneralEntry {
                file,
                kind,
                caption: g.caption,
                filter,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let index = DatasetIndex {
        config: cfg.clone(),
        scenes: summaries.iter().map(|s| s.scene_id.clone()).collect(),
        trajectories,
        general,
    };
    write_json(&root.join("dataset.json"), &index)?;
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub manifest: SceneManifest,
    pub rig: CameraRig,
    /// `cams x f x 3 x h x w`, colors in `[0, 1]`.
    pub videos: LatentVideo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneralClip {
    /// `1 x f x 3 x h x w`.
    pub video: LatentVideo,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
    pub scenes: Vec<SceneData>,
    pub trajectories: Vec<TrajectorySequence>,
    /// Only clips the static filter accepted.
    pub general: Vec<GeneralClip>,
}

pub fn load_scene(dir: &Path) -> Result<SceneData> {
    let manifest: SceneManifest = read_json(&dir.join("manifest.json"))?;
    let rig = manifest.rig()?;
    let (f, h, w) = (manifest.frames, manifest.height, manifest.width);
    let mut data = Vec::with_capacity(rig.len() * f * 3 * h * w);
    for k in 0..rig.len() {
        let t = read_tensor(&dir.join(format!("cam_{k}.scmt")))?;
        if t.shape() != [f, 3, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![f, 3, h, w],
                got: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    let videos = LatentVideo::from_vec([rig.len(), f, 3, h, w], data)?;
    Ok(SceneData { manifest, rig, videos })
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let index: DatasetIndex = read_json(&root.join("dataset.json"))?;
        let scenes = index
            .scenes
            .iter()
            .map(|id| load_scene(&root.join(id)))
            .collect::<Result<Vec<_>>>()?;
        let mut trajectories = Vec::new();
        for name in &index.trajectories {
            let dir = root.join("trajectories");
            let m: TrajectoryManifest = read_json(&dir.join(format!("{name}.json")))?;
            let t = read_tensor(&dir.join(format!("{name}.scmt")))?;
            let shape = t.shape().to_vec();
            if shape.len() != 4 || shape[0] != m.poses.len() {
                return Err(Error::Format(format!("trajectory {name} does not match its manifest")));
            }
            let frame = shape[1] * shape[2] * shape[3];
            let seq = TrajectorySequence {
                frames: t.data().chunks_exact(frame).map(<[f64]>::to_vec).collect(),
                poses: m.poses.iter().map(CameraEntry::camera).collect::<Result<Vec<_>>>()?,
                intrinsics: m.intrinsics.into(),
                height: shape[2],
                width: shape[3],
                prompt: m.prompt,
            };
            seq.validate()?;
            trajectories.push(seq);
        }
        let mut general = Vec::new();
        for g in index.general.iter().filter(|g| g.filter.is_static) {
            let t = read_tensor(&root.join("general").join(&g.file))?;
            let s = t.shape().to_vec();
            general.push(GeneralClip {
                video: LatentVideo::from_vec([1, s[0], s[1], s[2], s[3]], t.into_data())?,
                caption: g.caption.clone(),
            });
        }
        Ok(Self {
            root: root.to_path_buf(),
            index,
            scenes,
            trajectories,
            general,
        })
    }
}

/// SHA-256 over every file under `root` (sorted relative paths and contents).
pub fn directory_checksum(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).expect("walked under root");
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f)?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ForgeConfig {
        ForgeConfig {
            scenes: 2,
            cams: 3,
            frames: 2,
            height: 16,
            width: 16,
            seed: 3,
            trajectories: 1,
            trajectory_len: 4,
            trajectory_step_deg: 10.0,
            general: 3,
            corr_stride: 4,
        }
    }

    #[test]
    fn forge_load_round_trip_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let summary = forge_dataset(a.path(), &tiny()).unwrap();
        assert_eq!(summary.len(), 2);
        forge_dataset(b.path(), &tiny()).unwrap();
        assert_eq!(directory_checksum(a.path()).unwrap(), directory_checksum(b.path()).unwrap());

        let ds = Dataset::load(a.path()).unwrap();
        assert_eq!(ds.scenes.len(), 2);
        assert_eq!(ds.trajectories.len(), 1);
        assert!(ds.general.len() <= 3);
        let (m, videos) = forge_scene(&tiny(), 1).unwrap();
        let s = &ds.scenes[1];
        assert_eq!(s.manifest, m);
        assert_eq!(s.rig, m.rig().unwrap());
        // stored as f32
        let diff = s.videos.tensor().max_abs_diff(videos.tensor());
        assert!(diff < 1e-6 && diff > 0.0);
    }

    #[test]
    fn camera_entry_is_bitwise() {
        let cam = CameraExtrinsics::look_at(nalgebra::Vector3::new(3.1, -0.7, 1.3), nalgebra::Vector3::new(0.0, 0.0, 0.5)).unwrap();
        let e = CameraEntry::new(0, &cam);
        let json = serde_json::to_string(&e).unwrap();
        let back: CameraEntry = serde_json::from_str(&json).unwrap();
        assert_eq!(back.camera().unwrap(), cam);
        assert_eq!(back.extrinsics, cam.flatten());
    }

    #[test]
    fn rejects_empty_forge() {
        let d = tempfile::tempdir().unwrap();
        let cfg = ForgeConfig { scenes: 0, ..tiny() };
        assert!(matches!(forge_dataset(d.path(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..100).map(|i| derive_seed(7, 1, i)).collect();
        assert_eq!(s.len(), 100);
        assert_ne!(derive_seed(7, 1, 0), derive_seed(7, 2, 0));
    }
}
