//! Desk-scale diffusion inpainting: forward noising, the mask-weighted noise
//! loss, deterministic DDIM sampling with pluggable noise predictors, and
//! causal temporal attention.

mod attention;
mod latent;
mod tiny;

pub use attention::{temporal_attention, AttentionCache};
pub use latent::{decode_latents, encode_frames, encode_masks, LATENT_FACTOR};
pub use tiny::{TinyConfig, TinyPredictor, TrainLog};

use ndarray::{Array, Array4, Dimension, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_SAMPLING_STEPS: usize = 2;

/// Cumulative signal fractions `alpha_bar[0..=T]` with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

impl DiffusionSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `steps` steps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Schedule(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..steps {
            let beta = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Explicit table. Entries must lie in `(0, 1]`, start at 1 and never
    /// increase.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Schedule("schedule needs at least one step".into()));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Schedule(format!("alpha_bar[0] = {} must be 1", alpha_bar[0])));
        }
        for (i, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] <= w[0]) {
                return Err(Error::Schedule(format!(
                    "alpha_bar[{}] = {} breaks monotonicity or positivity",
                    i + 1,
                    w[1]
                )));
            }
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::Schedule(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        let a = self.alpha_bar[t];
        if a <= 0.0 {
            return Err(Error::Schedule(format!("alpha_bar[{t}] = {a} is not positive")));
        }
        Ok(a)
    }

    /// `count` descending timesteps evenly spread over `[1, T]`, ending the
    /// chain implicitly at 0.
    pub fn strided(&self, count: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if count == 0 || count > t {
            return Err(Error::Schedule(format!("{count} sampling steps for a {t}-step schedule")));
        }
        Ok((1..=count).rev().map(|i| (i * t).div_ceil(count)).collect())
    }
}

/// `sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn q_sample<D: Dimension>(
    z0: &Array<f64, D>,
    t: usize,
    eps: &Array<f64, D>,
    schedule: &DiffusionSchedule,
) -> Result<Array<f64, D>> {
    let a = schedule.check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch(format!("z0 {:?} vs eps {:?}", z0.shape(), eps.shape())));
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(Zip::from(z0).and(eps).map_collect(|&z, &e| sa * z + sn * e))
}

/// How [`masked_loss`] normalizes the masked squared error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNormalization {
    /// Divide by the total element count.
    #[default]
    AllElements,
    /// Divide by the number of masked elements.
    MaskedElements,
}

/// Mean of `(m (eps - eps_hat))^2`. The mask is either the same shape as the
/// noise or has a single channel that is broadcast.
pub fn masked_loss(eps: &Array4<f64>, eps_hat: &Array4<f64>, mask: &Array4<f64>, norm: LossNormalization) -> Result<f64> {
    if eps.dim() != eps_hat.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", eps.dim(), eps_hat.dim())));
    }
    let m = broadcast_mask(mask, eps.dim())?;
    let mut sum = 0.0;
    let mut masked = 0.0;
    Zip::from(eps).and(eps_hat).and(&m).for_each(|&e, &p, &w| {
        let d = w * (e - p);
        sum += d * d;
        masked += w;
    });
    Ok(match norm {
        LossNormalization::AllElements => sum / eps.len() as f64,
        LossNormalization::MaskedElements if masked > 0.0 => sum / masked,
        LossNormalization::MaskedElements => 0.0,
    })
}

fn broadcast_mask(mask: &Array4<f64>, dim: (usize, usize, usize, usize)) -> Result<ndarray::ArrayView4<'_, f64>> {
    let (f, c, h, w) = mask.dim();
    if (f, h, w) != (dim.0, dim.2, dim.3) || (c != 1 && c != dim.1) {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs latents {:?}", mask.dim(), dim)));
    }
    Ok(mask.broadcast(dim).expect("checked above"))
}

/// Conditioning passed to every predictor: the latents with the occluded
/// region zeroed, and the single-channel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub masked_latents: Array4<f64>,
    pub mask: Array4<f64>,
}

impl Conditioning {
    pub fn from_clip(clip: &LatentClip) -> Self {
        let m = clip.mask.broadcast(clip.latents.dim()).expect("validated clip");
        let masked_latents = Zip::from(&clip.latents).and(&m).map_collect(|&z, &w| z * (1.0 - w));
        Self {
            masked_latents,
            mask: clip.mask.clone(),
        }
    }
}

/// Predicts the injected noise for a noisy latent at timestep `t`.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Array4<f64>, t: usize, cond: &Conditioning, schedule: &DiffusionSchedule) -> Result<Array4<f64>>;
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, z_t: &Array4<f64>, _t: usize, _c: &Conditioning, _s: &DiffusionSchedule) -> Result<Array4<f64>> {
        Ok(Array4::zeros(z_t.dim()))
    }
}

/// Knows the clean latent and returns the noise that explains `z_t` exactly.
#[derive(Debug, Clone)]
pub struct ExactNoiseOracle {
    pub z0: Array4<f64>,
}

impl NoisePredictor for ExactNoiseOracle {
    fn predict(&self, z_t: &Array4<f64>, t: usize, _c: &Conditioning, s: &DiffusionSchedule) -> Result<Array4<f64>> {
        let a = s.check_t(t)?;
        if z_t.dim() != self.z0.dim() {
            return Err(Error::ShapeMismatch("oracle latent shape".into()));
        }
        if a == 1.0 {
            return Ok(Array4::zeros(z_t.dim()));
        }
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(Zip::from(z_t).and(&self.z0).map_collect(|&z, &z0| (z - sa * z0) / sn))
    }
}

fn predict_checked(
    predictor: &dyn NoisePredictor,
    z_t: &Array4<f64>,
    t: usize,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
) -> Result<Array4<f64>> {
    let eps = predictor.predict(z_t, t, cond, schedule)?;
    if eps.dim() != z_t.dim() {
        return Err(Error::ShapeMismatch(format!(
            "predictor returned {:?} for input {:?}",
            eps.dim(),
            z_t.dim()
        )));
    }
    Ok(eps)
}

fn z0_from_eps(z_t: &Array4<f64>, eps: &Array4<f64>, a: f64) -> Array4<f64> {
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Zip::from(z_t).and(eps).map_collect(|&z, &e| (z - sn * e) / sa)
}

/// `(z_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)`.
pub fn ddim_z0_estimate(
    z_t: &Array4<f64>,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
) -> Result<Array4<f64>> {
    let a = schedule.check_t(t)?;
    let eps = predict_checked(predictor, z_t, t, cond, schedule)?;
    Ok(z0_from_eps(z_t, &eps, a))
}

/// Deterministic update from `t` to `t - 1`.
pub fn ddim_step(
    z_t: &Array4<f64>,
    t: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
) -> Result<Array4<f64>> {
    ddim_step_to(z_t, t, t.saturating_sub(1), predictor, cond, schedule)
}

/// Deterministic update from `t` to any earlier `t_prev`.
pub fn ddim_step_to(
    z_t: &Array4<f64>,
    t: usize,
    t_prev: usize,
    predictor: &dyn NoisePredictor,
    cond: &Conditioning,
    schedule: &DiffusionSchedule,
) -> Result<Array4<f64>> {
    let a = schedule.check_t(t)?;
    if t_prev >= t {
        return Err(Error::Schedule(format!("step target {t_prev} is not before {t}")));
    }
    let eps = predict_checked(predictor, z_t, t, cond, schedule)?;
    let z0 = z0_from_eps(z_t, &eps, a);
    let ap = schedule.alpha_bar(t_prev);
    let (sp, np) = (ap.sqrt(), (1.0 - ap).sqrt());
    Ok(Zip::from(&z0).and(&eps).map_collect(|&z, &e| sp * z + np * e))
}

/// A latent clip with its occlusion mask (`1` = occluded, to be generated).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    /// `F x C x h x w`.
    pub latents: Array4<f64>,
    /// `F x 1 x h x w`, values in `{0, 1}`.
    pub mask: Array4<f64>,
}

impl LatentClip {
    pub fn new(latents: Array4<f64>, mask: Array4<f64>) -> Result<Self> {
        let c = Self { latents, mask };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let (f, _, h, w) = self.latents.dim();
        if f == 0 {
            return Err(Error::Precondition("clip has no frames".into()));
        }
        if self.mask.dim() != (f, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} for latents {:?}",
                self.mask.dim(),
                self.latents.dim()
            )));
        }
        if self.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Precondition("mask must be binary".into()));
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutput {
    pub latents: Array4<f64>,
    /// Set when the mask was empty and the input was returned unchanged.
    pub no_op: bool,
}

/// Generates the masked region of `clip` with `steps` strided DDIM steps.
/// Known latents are re-imposed from the noised input after every step and
/// copied verbatim at the end.
pub fn inpaint_clip(
    clip: &LatentClip,
    predictor: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
    steps: usize,
    seed: u64,
) -> Result<InpaintOutput> {
    clip.validate()?;
    let timesteps = schedule.strided(steps)?;
    if clip.masked_count() == 0 {
        return Ok(InpaintOutput {
            latents: clip.latents.clone(),
            no_op: true,
        });
    }
    let cond = Conditioning::from_clip(clip);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Array4::from_shape_simple_fn(clip.latents.dim(), || StandardNormal.sample(&mut rng));
    let mask = clip.mask.broadcast(clip.latents.dim()).expect("validated clip");

    let mut z = q_sample(&cond.masked_latents, timesteps[0], &noise, schedule)?;
    for (i, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(i + 1).copied().unwrap_or(0);
        z = ddim_step_to(&z, t, t_prev, predictor, &cond, schedule)?;
        let known = if t_prev == 0 {
            clip.latents.clone()
        } else {
            q_sample(&clip.latents, t_prev, &noise, schedule)?
        };
        Zip::from(&mut z).and(&known).and(&mask).for_each(|v, &k, &m| {
            if m == 0.0 {
                *v = k;
            }
        });
    }
    Zip::from(&mut z).and(&clip.latents).and(&mask).for_each(|v, &k, &m| {
        if m == 0.0 {
            *v = k;
        }
    });
    Ok(InpaintOutput { latents: z, no_op: false })
}
