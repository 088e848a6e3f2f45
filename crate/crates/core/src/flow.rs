//! Rectified-flow forward process, flow-matching target and loss, the Euler
//! sampler, and two-condition classifier-free guidance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n x f x c x h x w` video tensor (views, frames, channels, rows, cols).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    tensor: Tensor,
}

impl LatentVideo {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 5 || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                expected: vec![0; 5],
                got: shape.to_vec(),
            });
        }
        if !tensor.is_finite() {
            return Err(Error::Constraint("latent video contains non-finite values".into()));
        }
        Ok(Self { tensor })
    }

    pub fn from_vec(dims: [usize; 5], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(dims.to_vec(), data)?)
    }

    pub fn zeros(dims: [usize; 5]) -> Self {
        Self {
            tensor: Tensor::zeros(&dims),
        }
    }

    pub fn full(dims: [usize; 5], value: f64) -> Self {
        Self {
            tensor: Tensor::full(&dims, value),
        }
    }

    /// Standard-normal noise, drawn independently per element (and per view).
    pub fn randn<R: Rng + ?Sized>(dims: [usize; 5], rng: &mut R) -> Self {
        Self {
            tensor: Tensor::randn(&dims, 1.0, rng),
        }
    }

    pub fn dims(&self) -> [usize; 5] {
        let s = self.tensor.shape();
        [s[0], s[1], s[2], s[3], s[4]]
    }

    pub fn views(&self) -> usize {
        self.dims()[0]
    }

    pub fn view_len(&self) -> usize {
        let [_, f, c, h, w] = self.dims();
        f * c * h * w
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn data(&self) -> &[f64] {
        self.tensor.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.tensor.data_mut()
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn view(&self, i: usize) -> &[f64] {
        let len = self.view_len();
        &self.data()[i * len..(i + 1) * len]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.view_len();
        &mut self.data_mut()[i * len..(i + 1) * len]
    }

    /// Copies selected views into a new batch, in the given order.
    pub fn select_views(&self, indices: &[usize]) -> LatentVideo {
        let [_, f, c, h, w] = self.dims();
        let mut data = Vec::with_capacity(indices.len() * self.view_len());
        for &i in indices {
            data.extend_from_slice(self.view(i));
        }
        LatentVideo::from_vec([indices.len(), f, c, h, w], data).expect("selected views")
    }

    pub fn ensure_same_shape(&self, other: &LatentVideo) -> Result<()> {
        self.tensor.ensure_same_shape(&other.tensor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatentVideo {
        LatentVideo {
            tensor: self.tensor.map(f),
        }
    }

    fn zip_with(&self, other: &LatentVideo, f: impl Fn(f64, f64) -> f64) -> Result<LatentVideo> {
        Ok(LatentVideo {
            tensor: self.tensor.zip_map(&other.tensor, f)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct TimeStep(f64);

impl TimeStep {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Constraint(format!("timestep {t} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Scales for the video condition (`video`) and text condition (`text`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceWeights {
    pub video: f64,
    pub text: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            video: 1.8,
            text: 7.5,
        }
    }
}

/// `(1 - t) * z0 + t * eps`.
pub fn forward_interpolate(z0: &LatentVideo, eps: &LatentVideo, t: TimeStep) -> Result<LatentVideo> {
    let t = t.value();
    z0.zip_with(eps, |a, b| (1.0 - t) * a + t * b)
}

/// Straight-path velocity `eps - z0`, constant in time.
pub fn velocity_target(z0: &LatentVideo, eps: &LatentVideo) -> Result<LatentVideo> {
    z0.zip_with(eps, |a, b| b - a)
}

/// Mean squared error between a predicted velocity and the straight-path target.
pub fn cfm_loss(v_pred: &LatentVideo, z0: &LatentVideo, eps: &LatentVideo) -> Result<f64> {
    v_pred.ensure_same_shape(z0)?;
    z0.ensure_same_shape(eps)?;
    let sum: f64 = v_pred
        .data()
        .iter()
        .zip(z0.data().iter().zip(eps.data()))
        .map(|(&v, (&a, &b))| {
            let d = v - (b - a);
            d * d
        })
        .sum();
    Ok(sum / v_pred.data().len() as f64)
}

/// Integrates from `t = 1` to `t = 0` with `steps` uniform Euler steps.
pub fn euler_sample<F>(velocity_fn: F, z_init: &LatentVideo, steps: usize) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo>,
{
    euler_sample_with(velocity_fn, z_init, steps, |_, _| {})
}

/// Euler sampler with a callback run after every update; the callback sees
/// the state at the new time and may overwrite parts of it.
pub fn euler_sample_with<F, G>(
    mut velocity_fn: F,
    z_init: &LatentVideo,
    steps: usize,
    mut after_step: G,
) -> Result<LatentVideo>
where
    F: FnMut(&LatentVideo, TimeStep) -> Result<LatentVideo>,
    G: FnMut(&mut LatentVideo, TimeStep),
{
    if steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = -1.0 / steps as f64;
    let mut z = z_init.clone();
    for k in 0..steps {
        let t = TimeStep(1.0 - k as f64 / steps as f64);
        let v = velocity_fn(&z, t)?;
        z.ensure_same_shape(&v)?;
        if !v.tensor.is_finite() {
            return Err(Error::Divergence { step: k });
        }
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi += vi * dt;
        }
        let t_next = TimeStep((1.0 - (k + 1) as f64 / steps as f64).max(0.0));
        after_step(&mut z, t_next);
    }
    Ok(z)
}

/// `v_null + s_V (v_vid - v_null) + s_T (v_full - v_vid)`, evaluated as
/// `(1 - s_V) v_null + (s_V - s_T) v_vid + s_T v_full` so that the unit and
/// zero weightings reproduce `v_full` and `v_null` exactly.
pub fn guided_velocity(
    v_null: &LatentVideo,
    v_vid: &LatentVideo,
    v_full: &LatentVideo,
    w: GuidanceWeights,
) -> Result<LatentVideo> {
    v_null.ensure_same_shape(v_vid)?;
    v_vid.ensure_same_shape(v_full)?;
    let mut out = v_null.clone();
    for ((o, &vid), &full) in out.data_mut().iter_mut().zip(v_vid.data()).zip(v_full.data()) {
        *o = (1.0 - w.video) * *o + (w.video - w.text) * vid + w.text * full;
    }
    Ok(out)
}
