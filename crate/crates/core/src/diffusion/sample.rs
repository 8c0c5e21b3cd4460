use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schedule::{q_sample, NoiseSchedule};
use super::standard_normal;
use super::unet::{image_to_signed, signed_to_image, Denoiser};
use crate::captioner::Vocabulary;
use crate::dual_control::{Branch, ConditionBundle};
use crate::error::{Error, Result};
use crate::nn::{Graph, Real, Var};
use crate::synthset::Image;

pub const DEFAULT_SAMPLING_STEPS: usize = 75;
pub const DEFAULT_GUIDANCE: f64 = 3.0;

const REF_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

/// Anything that predicts noise for a tile in `[-1, 1]`.
pub trait EpsModel: Sync {
    fn tile_size(&self) -> usize;

    fn eps(
        &self,
        x_t: &[f64],
        t: usize,
        cond: &ConditionBundle,
        sched: &NoiseSchedule,
        noise_seed: u64,
    ) -> Result<Vec<f64>>;
}

/// Timestep, tile noise and reference noise of one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f32>,
    pub ref_seed: u64,
}

pub fn draw_noise(seed: u64, timesteps: usize, tile_len: usize) -> NoiseDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.random_range(0..timesteps);
    let eps_seed: u64 = rng.random();
    NoiseDraw {
        t,
        eps: standard_normal(eps_seed, tile_len),
        ref_seed: seed ^ REF_STREAM,
    }
}

/// Noise-prediction MSE at a seeded timestep and noise draw. `x0` is in `[0, 1]`.
pub fn training_loss<M: EpsModel>(
    model: &M,
    sched: &NoiseSchedule,
    x0: &Image,
    cond: &ConditionBundle,
    rng_seed: u64,
) -> Result<f64> {
    let s = model.tile_size();
    if x0.width != s || x0.height != s {
        return Err(Error::Domain(format!(
            "tile is {}x{}, expected {s}x{s}",
            x0.width, x0.height
        )));
    }
    let x = image_to_signed(x0);
    let d = draw_noise(rng_seed, sched.len(), x.len());
    let x_t = q_sample(&x, d.t, &d.eps, sched)?;
    let x_t: Vec<f64> = x_t.iter().map(|&v| v as f64).collect();
    let pred = model.eps(&x_t, d.t, cond, sched, d.ref_seed)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(&d.eps)
        .map(|(p, e)| (p - *e as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// `steps` timesteps spread evenly over `[0, T)`, ascending.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Domain(format!(
            "sampling steps {steps} outside [1, {total}]"
        )));
    }
    Ok((0..steps).map(|i| i * total / steps).collect())
}

/// Deterministic DDIM (eta = 0) with classifier-free guidance against the
/// fully unconditioned bundle. Returns the tile in `[0, 1]`.
pub fn ddim_sample<M: EpsModel>(
    model: &M,
    sched: &NoiseSchedule,
    cond: &ConditionBundle,
    steps: usize,
    rng_seed: u64,
    guidance_scale: f64,
) -> Result<Image> {
    let ts = ddim_timesteps(sched.len(), steps)?;
    if !guidance_scale.is_finite() {
        return Err(Error::Domain(format!(
            "guidance scale {guidance_scale} is not finite"
        )));
    }
    let s = model.tile_size();
    let mut x: Vec<f64> = standard_normal(rng_seed, 3 * s * s)
        .into_iter()
        .map(f64::from)
        .collect();
    let uncond = if guidance_scale != 1.0 {
        Some(cond.restrict(Branch::Neither, &Vocabulary::builtin())?)
    } else {
        None
    };
    let noise_seed = rng_seed ^ REF_STREAM;
    for (i, &t) in ts.iter().enumerate().rev() {
        let eps = match &uncond {
            None => model.eps(&x, t, cond, sched, noise_seed)?,
            Some(u) => {
                let (c, u) = rayon::join(
                    || model.eps(&x, t, cond, sched, noise_seed),
                    || model.eps(&x, t, u, sched, noise_seed),
                );
                let (c, u) = (c?, u?);
                c.iter()
                    .zip(&u)
                    .map(|(c, u)| u + guidance_scale * (c - u))
                    .collect()
            }
        };
        let ab = sched.alpha_bars[t];
        let ab_prev = if i > 0 {
            sched.alpha_bars[ts[i - 1]]
        } else {
            1.0
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        for (xv, e) in x.iter_mut().zip(&eps) {
            let x0 = ((*xv - sb * e) / sa).clamp(-1.0, 1.0);
            *xv = pa * x0 + pb * e;
        }
    }
    let out: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    Ok(signed_to_image(&out, s))
}

impl<T: Real> EpsModel for Denoiser<T> {
    fn tile_size(&self) -> usize {
        Denoiser::tile_size(self)
    }

    fn eps(
        &self,
        x_t: &[f64],
        t: usize,
        cond: &ConditionBundle,
        sched: &NoiseSchedule,
        noise_seed: u64,
    ) -> Result<Vec<f64>> {
        let s = self.tile_size();
        if x_t.len() != 3 * s * s {
            return Err(Error::Domain(format!(
                "latent has {} values, expected {}",
                x_t.len(),
                3 * s * s
            )));
        }
        let mut g = Graph::inference(&self.params);
        let x = g.input(x_t.iter().map(|&v| T::lit(v)).collect(), &[3, s, s]);
        let v = self.config.view_size;
        let ref_eps = standard_normal(noise_seed, 3 * v * v);
        let out = self.conditioned_eps(&mut g, x, t, cond, &ref_eps, sched)?;
        Ok(g.value(out).iter().map(|v| v.as_f64()).collect())
    }
}

impl<T: Real> Denoiser<T> {
    /// Graph form of [`training_loss`], with the same seeded draws.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        x0: &Image,
        cond: &ConditionBundle,
        sched: &NoiseSchedule,
        rng_seed: u64,
    ) -> Result<Var> {
        let s = self.tile_size();
        if x0.width != s || x0.height != s {
            return Err(Error::Domain(format!(
                "tile is {}x{}, expected {s}x{s}",
                x0.width, x0.height
            )));
        }
        let x = image_to_signed(x0);
        let d = draw_noise(rng_seed, sched.len(), x.len());
        let x_t = q_sample(&x, d.t, &d.eps, sched)?;
        let v = self.config.view_size;
        let ref_eps = standard_normal(d.ref_seed, 3 * v * v);
        let xv = g.input(x_t.iter().map(|&v| T::lit(v as f64)).collect(), &[3, s, s]);
        let pred = self.conditioned_eps(g, xv, d.t, cond, &ref_eps, sched)?;
        let target = g.input(
            d.eps.iter().map(|&v| T::lit(v as f64)).collect(),
            &[3, s, s],
        );
        Ok(g.mse(pred, target))
    }
}
