//! Camera files and image dumps.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mvsync_core::flow::LatentVideo;
use mvsync_core::geometry::{CameraExtrinsics, CameraIntrinsics, CameraRig};
use mvsync_core::scene::DESK_FOV_DEG;
use mvsync_core::scmt::{read_tensor, write_tensor, Dtype};
use mvsync_core::tensor::Tensor;

/// One camera per line as 12 whitespace-separated numbers (row-major `R`,
/// then `t`). Blank lines and `#` comments are skipped.
pub fn parse_cams(text: &str) -> Result<Vec<CameraExtrinsics>> {
    let mut cams = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().with_context(|| format!("line {}: `{s}` is not a number", i + 1)))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 12 {
            bail!("line {}: expected 12 numbers, found {}", i + 1, vals.len());
        }
        cams.push(CameraExtrinsics::from_flat(&vals).with_context(|| format!("line {}", i + 1))?);
    }
    if cams.is_empty() {
        bail!("camera file lists no cameras");
    }
    Ok(cams)
}

pub fn format_cams(cams: &[CameraExtrinsics]) -> String {
    cams.iter()
        .map(|c| c.flatten().iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub fn read_rig(path: &Path, h: usize, w: usize) -> Result<CameraRig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading cameras {}", path.display()))?;
    let cams = parse_cams(&text).with_context(|| path.display().to_string())?;
    Ok(CameraRig::new(cams, CameraIntrinsics::from_fov(h, w, DESK_FOV_DEG))?)
}

/// Binary PPM of a `3 x h x w` color image, clamped to `[0, 1]`.
pub fn ppm(image: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    for i in 0..plane {
        for ch in 0..3 {
            out.push((image[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Per view `view_k.scmt` (`f x 3 x h x w`, single precision) and one image
/// per frame tiling the views left to right.
pub fn write_videos(dir: &Path, videos: &LatentVideo) -> Result<()> {
    fs::create_dir_all(dir)?;
    let [n, f, c, h, w] = videos.dims();
    for k in 0..n {
        let t = Tensor::new(vec![f, c, h, w], videos.view(k).to_vec())?;
        write_tensor(&dir.join(format!("view_{k}.scmt")), &t, Dtype::F32)?;
    }
    let frame = c * h * w;
    for j in 0..f {
        let mut tiled = vec![0.0; 3 * h * w * n];
        for k in 0..n {
            let img = &videos.view(k)[j * frame..(j + 1) * frame];
            for ch in 0..3.min(c) {
                for y in 0..h {
                    for x in 0..w {
                        tiled[ch * h * w * n + y * w * n + k * w + x] = img[ch * h * w + y * w + x];
                    }
                }
            }
        }
        fs::write(dir.join(format!("frame_{j:03}.ppm")), ppm(&tiled, h, w * n))?;
    }
    Ok(())
}

/// Loads `view_k.scmt` (or `cam_k.scmt`) files `k = 0, 1, ...` of a directory.
pub fn read_videos(dir: &Path) -> Result<LatentVideo> {
    let mut views = Vec::new();
    let mut shape = None;
    for k in 0.. {
        let path = ["view", "cam"].iter().map(|p| dir.join(format!("{p}_{k}.scmt"))).find(|p| p.exists());
        let Some(path) = path else { break };
        let t = read_tensor(&path)?;
        if t.shape().len() != 4 {
            bail!("{}: expected f x c x h x w", path.display());
        }
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s != t.shape() => bail!("{}: shape {:?} differs from {:?}", path.display(), t.shape(), s),
            _ => {}
        }
        views.extend(t.into_data());
    }
    let Some(s) = shape else { bail!("{}: no view_k.scmt files", dir.display()) };
    let n = views.len() / s.iter().product::<usize>();
    Ok(LatentVideo::from_vec([n, s[0], s[1], s[2], s[3]], views)?)
}
