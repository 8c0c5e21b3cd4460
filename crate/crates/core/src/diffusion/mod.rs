//! Pixel-space diffusion over 2x2 view tiles: linear-beta schedule, forward
//! noising, the UNet denoiser, the noise-prediction loss and DDIM sampling.

mod sample;
mod schedule;
mod unet;

pub use sample::{
    ddim_sample, ddim_timesteps, draw_noise, training_loss, EpsModel, NoiseDraw, DEFAULT_GUIDANCE,
    DEFAULT_SAMPLING_STEPS,
};
pub use schedule::{
    make_schedule, q_sample, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS,
};
pub use unet::{
    image_to_signed, signed_to_image, timestep_features, Denoiser, DenoiserConfig, LatentState,
    DEFAULT_TEXT_DIM,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` standard-normal draws from a seeded stream.
pub fn standard_normal(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect()
}
