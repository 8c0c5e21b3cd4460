//! Dataset construction, the training loop, checkpoints and resumable runs.

mod checkpoint;
mod dataset;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, ScheduleSpec, TensorInfo};
pub use dataset::{
    build_dataset, generate_record, sha256_hex, Dataset, DatasetRecord, Manifest, ManifestEntry,
    CODE_VERSION, MANIFEST_FILE,
};
pub use train::{
    checkpoint_path, compatibility_diff, read_metrics, resume, sample_seeds, train,
    validation_loss, MetricRow, SampleSeeds, METRICS_FILE,
};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::captioner::{Vocabulary, DEFAULT_KEEP_PROB};
use crate::diffusion::{DenoiserConfig, DEFAULT_TIMESTEPS};
use crate::dual_control::DEFAULT_MODALITY_PROBS;
use crate::error::{Error, Result};

/// Denoiser used by the documented toy run.
pub fn toy_model_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 16,
        channel_multipliers: vec![1, 2, 2, 4],
        ..DenoiserConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    /// Receives `metrics.csv` and `ckpt_{step}` files.
    pub run_dir: PathBuf,
    pub total_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Branch probabilities: both, image-only, text-only, neither.
    pub modality_probs: [f64; 4],
    /// Probability of keeping each local description when merging prompts.
    pub keep_prob: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub timesteps: usize,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/toy"),
            total_steps: 20000,
            batch_size: 8,
            lr: 2e-4,
            modality_probs: DEFAULT_MODALITY_PROBS,
            keep_prob: DEFAULT_KEEP_PROB,
            seed: 0,
            checkpoint_every: 500,
            timesteps: DEFAULT_TIMESTEPS,
            model: toy_model_config(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0
            || self.batch_size == 0
            || self.checkpoint_every == 0
            || self.timesteps == 0
        {
            return bad(
                "total_steps, batch_size, checkpoint_every and timesteps must be at least 1".into(),
            );
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.keep_prob) {
            return bad(format!("keep_prob {} outside [0, 1]", self.keep_prob));
        }
        let sum: f64 = self.modality_probs.iter().sum();
        if self
            .modality_probs
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "modality_probs {:?} must be non-negative and sum to 1 (sum {sum})",
                self.modality_probs
            ));
        }
        let vocab = Vocabulary::builtin().len();
        if self.model.vocab_size != vocab {
            return bad(format!(
                "model.vocab_size {} differs from the vocabulary size {vocab}",
                self.model.vocab_size
            ));
        }
        self.model.validate()
    }
}
