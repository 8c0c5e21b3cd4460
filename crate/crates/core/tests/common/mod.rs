#![allow(dead_code)]

use flexmv_core::captioner::{
    generate_caption, merge_caption, AttributeMap, Level, PartAttributes, Vocabulary,
};
use flexmv_core::diffusion::{DenoiserConfig, EpsModel, NoiseSchedule};
use flexmv_core::dual_control::ConditionBundle;
use flexmv_core::synthset::{
    render_view, sample_asset, sample_input_pose, AssetSpec, Image, LightParams,
};
use flexmv_core::Result;

/// A few-millisecond denoiser for structural tests.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        view_size: 8,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        attention_levels: None,
        time_embed_dim: 16,
        heads: 2,
        groups: 4,
        text_len: 24,
        text_dim: 8,
        ..DenoiserConfig::default()
    }
}

/// Under 10k parameters, for finite differences.
pub fn grad_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        groups: 2,
        time_embed_dim: 8,
        ..tiny_config()
    }
}

/// Input view, target tile and full bundle for a sampled asset.
pub fn sample_case(seed: u64, cfg: &DenoiserConfig) -> (Image, ConditionBundle) {
    let vocab = Vocabulary::builtin();
    let asset = sample_asset(seed);
    let v = cfg.view_size as u32;
    let pose = sample_input_pose(seed, v);
    let view = render_view(&asset, &pose, &LightParams::default())
        .unwrap()
        .pixels;
    let tile = render_tile_sized(&asset, pose.azimuth_deg, v);
    let prompt = merge_caption(&generate_caption(&asset), seed, 1.0).unwrap();
    let tokens = vocab.tokenize(&prompt, cfg.text_len).unwrap();
    let cond = ConditionBundle::new(
        Some(view),
        Some(tokens),
        cfg.view_size,
        cfg.text_len,
        &vocab,
    )
    .unwrap();
    (tile, cond)
}

pub fn render_tile_sized(asset: &flexmv_core::synthset::AssetSpec, base: f64, view: u32) -> Image {
    flexmv_core::synthset::render_tile_with(asset, base, 5.0, view, &LightParams::default())
        .unwrap()
        .tile
}

/// Closed-form noise predictor for a single known tile `x0` (in `[-1, 1]`).
pub struct AnalyticOracle {
    pub x0: Vec<f64>,
    pub size: usize,
}

impl EpsModel for AnalyticOracle {
    fn tile_size(&self) -> usize {
        self.size
    }

    fn eps(
        &self,
        x_t: &[f64],
        t: usize,
        _c: &ConditionBundle,
        sched: &NoiseSchedule,
        _s: u64,
    ) -> Result<Vec<f64>> {
        let ab = sched.alpha_bars[t];
        Ok(x_t
            .iter()
            .zip(&self.x0)
            .map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt())
            .collect())
    }
}

pub struct ZeroModel(pub usize);

impl EpsModel for ZeroModel {
    fn tile_size(&self) -> usize {
        self.0
    }

    fn eps(
        &self,
        x_t: &[f64],
        _t: usize,
        _c: &ConditionBundle,
        _s: &NoiseSchedule,
        _n: u64,
    ) -> Result<Vec<f64>> {
        Ok(vec![0.0; x_t.len()])
    }
}

/// Material level by the 0.3 / 0.6 thresholds, written independently of the library.
pub fn threshold(v: f64) -> Level {
    if v < 0.3 {
        Level::Low
    } else if v > 0.6 {
        Level::High
    } else {
        Level::Mid
    }
}

pub fn expected_attributes(a: &AssetSpec) -> AttributeMap {
    AttributeMap {
        body: a.body,
        body_color: a.body_color,
        parts: a
            .parts
            .iter()
            .map(|p| PartAttributes {
                kind: p.kind,
                side: p.side,
                color: Some(p.color),
                texture: Some(p.texture),
            })
            .collect(),
        metallic_level: threshold(a.metallic),
        roughness_level: threshold(a.roughness),
    }
}

/// A small dataset plus a training config for the tiny denoiser.
pub fn tiny_run(
    dir: &std::path::Path,
    count: usize,
    total_steps: u64,
) -> flexmv_core::trainer::TrainConfig {
    let data = dir.join("data");
    if !data.join(flexmv_core::trainer::MANIFEST_FILE).exists() {
        flexmv_core::trainer::build_dataset(count, 11, 8, &data, false).unwrap();
    }
    flexmv_core::trainer::TrainConfig {
        dataset_dir: data,
        run_dir: dir.join("run"),
        total_steps,
        batch_size: 4,
        lr: 1e-3,
        checkpoint_every: 25,
        model: grad_config(),
        ..Default::default()
    }
}
