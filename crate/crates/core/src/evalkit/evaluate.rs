use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::attributes::attribute_match;
use super::metrics::{psnr, specular_statistic, ssim};
use crate::captioner::{merge_caption, parse_caption, CaptionRecord, Vocabulary};
use crate::diffusion::{
    ddim_sample, EpsModel, NoiseSchedule, DEFAULT_GUIDANCE, DEFAULT_SAMPLING_STEPS,
};
use crate::dual_control::ConditionBundle;
use crate::error::{Error, IoContext, Result};
use crate::synthset::{Image, Side, TiledGrid, DEFAULT_OUTPUT_ELEVATION};
use crate::trainer::{Checkpoint, Dataset, DatasetRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    ImageOnly,
    TextOnly,
    Both,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::ImageOnly, EvalMode::TextOnly, EvalMode::Both];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::ImageOnly => "image-only",
            EvalMode::TextOnly => "text-only",
            EvalMode::Both => "both",
        }
    }

    pub fn uses_image(self) -> bool {
        self != EvalMode::TextOnly
    }

    pub fn uses_text(self) -> bool {
        self != EvalMode::ImageOnly
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode `{s}`; expected image-only, text-only or both"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    HeldOut,
    Train,
    All,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "held-out" => Ok(Split::HeldOut),
            "train" => Ok(Split::Train),
            "all" => Ok(Split::All),
            _ => Err(Error::Config(format!(
                "unknown split `{s}`; expected held-out, train or all"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub split: Split,
    pub modes: Vec<EvalMode>,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Evaluate only the first `limit` records of the split.
    pub limit: Option<usize>,
    /// Also sample with the metallic term forced low and high (text modes only).
    pub material_edit: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::HeldOut,
            modes: EvalMode::ALL.to_vec(),
            steps: DEFAULT_SAMPLING_STEPS,
            guidance_scale: DEFAULT_GUIDANCE,
            seed: 0,
            limit: None,
            material_edit: false,
        }
    }
}

/// Produces a `[0, 1]` tile for one record under a conditioning bundle.
pub trait TileSampler: Sync {
    fn sample(&self, record: &DatasetRecord, cond: &ConditionBundle, seed: u64) -> Result<Image>;
}

/// DDIM with classifier-free guidance.
pub struct DdimSampler<'a, M: EpsModel> {
    pub model: &'a M,
    pub sched: &'a NoiseSchedule,
    pub steps: usize,
    pub guidance_scale: f64,
}

impl<M: EpsModel> TileSampler for DdimSampler<'_, M> {
    fn sample(&self, _record: &DatasetRecord, cond: &ConditionBundle, seed: u64) -> Result<Image> {
        ddim_sample(
            self.model,
            self.sched,
            cond,
            self.steps,
            seed,
            self.guidance_scale,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub psnr_db: f64,
    /// PSNR of the quadrant that shares the input azimuth.
    pub input_view_psnr_db: f64,
    pub ssim: f64,
    pub attribute_match_rate: f64,
    /// Color of the part facing away from the input view; only when such a
    /// part exists and the mode carries text.
    pub unseen_part_color_correct: Option<bool>,
    /// Specular statistic moved the right way under a metallic flip.
    pub material_direction_correct: Option<bool>,
    pub specular: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: EvalMode,
    pub samples: usize,
    pub psnr_db: f64,
    pub input_view_psnr_db: f64,
    pub ssim: f64,
    pub attribute_match_rate: f64,
    pub unseen_part_color_accuracy: Option<f64>,
    pub unseen_part_samples: usize,
    pub material_direction_accuracy: Option<f64>,
    pub material_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_step: Option<u64>,
    pub options: EvalOptions,
    pub sample_count: usize,
    pub rows: Vec<SampleRow>,
    pub aggregates: Vec<Aggregate>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn aggregate(mode: EvalMode, rows: &[&SampleRow]) -> Aggregate {
    let rate = |f: fn(&SampleRow) -> Option<bool>| {
        let v: Vec<f64> = rows
            .iter()
            .filter_map(|r| f(r))
            .map(|b| f64::from(u8::from(b)))
            .collect();
        (mean(v.iter().copied()), v.len())
    };
    let (unseen, unseen_n) = rate(|r| r.unseen_part_color_correct);
    let (material, material_n) = rate(|r| r.material_direction_correct);
    Aggregate {
        mode,
        samples: rows.len(),
        psnr_db: mean(rows.iter().map(|r| r.psnr_db)).unwrap_or(f64::NAN),
        input_view_psnr_db: mean(rows.iter().map(|r| r.input_view_psnr_db)).unwrap_or(f64::NAN),
        ssim: mean(rows.iter().map(|r| r.ssim)).unwrap_or(f64::NAN),
        attribute_match_rate: mean(rows.iter().map(|r| r.attribute_match_rate)).unwrap_or(f64::NAN),
        unseen_part_color_accuracy: unseen,
        unseen_part_samples: unseen_n,
        material_direction_accuracy: material,
        material_samples: material_n,
    }
}

impl EvalReport {
    pub fn aggregate(&self, mode: EvalMode) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.mode == mode)
    }

    /// `eval_step{step}_{modes}`, shared by the JSON and CSV outputs.
    pub fn file_stem(&self) -> String {
        let step = self
            .checkpoint_step
            .map_or("none".to_string(), |s| s.to_string());
        let modes: Vec<&str> = self.options.modes.iter().map(|m| m.name()).collect();
        format!("eval_step{step}_{}", modes.join("+"))
    }

    /// Writes the JSON report and the per-sample CSV, returning both paths.
    pub fn write(&self, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(out_dir).at(out_dir)?;
        let stem = self.file_stem();
        let json = out_dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).at(&json)?;
        let csv_path = out_dir.join(format!("{stem}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "id",
            "mode",
            "seed",
            "psnr_db",
            "input_view_psnr_db",
            "ssim",
            "attribute_match_rate",
            "unseen_part_color_correct",
            "material_direction_correct",
            "specular",
        ])?;
        let opt = |b: Option<bool>| b.map_or(String::new(), |b| b.to_string());
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.mode.name().to_string(),
                r.seed.to_string(),
                r.psnr_db.to_string(),
                r.input_view_psnr_db.to_string(),
                r.ssim.to_string(),
                r.attribute_match_rate.to_string(),
                opt(r.unseen_part_color_correct),
                opt(r.material_direction_correct),
                r.specular.to_string(),
            ])?;
        }
        w.flush().at(&csv_path)?;
        Ok((json, csv_path))
    }
}

/// Record indices of a split, in manifest order, truncated to `limit`.
pub fn split_indices(data: &Dataset, split: Split, limit: Option<usize>) -> Vec<usize> {
    let (train, held) = data.split_indices();
    let mut idx = match split {
        Split::HeldOut => held,
        Split::Train => train,
        Split::All => (0..data.records.len()).collect(),
    };
    if let Some(n) = limit {
        idx.truncate(n);
    }
    idx
}

/// Conditioning for one record under an evaluation mode, full prompt.
pub fn eval_condition(
    rec: &DatasetRecord,
    caption: &CaptionRecord,
    mode: EvalMode,
    view_size: usize,
    text_len: usize,
    vocab: &Vocabulary,
) -> Result<ConditionBundle> {
    let image = mode.uses_image().then(|| rec.input_view.pixels.clone());
    let tokens = if mode.uses_text() {
        Some(vocab.tokenize(&merge_caption(caption, 0, 1.0)?, text_len)?)
    } else {
        None
    };
    ConditionBundle::new(image, tokens, view_size, text_len, vocab)
}

/// Caption with the metallic term replaced by `term`.
pub fn with_metallic(caption: &CaptionRecord, term: &str) -> CaptionRecord {
    let mut c = caption.clone();
    c.material_terms.retain(|t| !t.ends_with("metallic"));
    c.material_terms.insert(0, term.to_string());
    c
}

/// Per-record sampling seed, shared by every mode.
fn sample_seed(base: u64, id: &str) -> u64 {
    let digest = Sha256::digest(id.as_bytes());
    let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    ChaCha8Rng::seed_from_u64(base ^ h).random()
}

/// A generated tile kept for inspection, with its input and ground truth.
#[derive(Clone, Debug)]
pub struct GeneratedTile {
    pub id: String,
    pub mode: EvalMode,
    pub input: Image,
    pub generated: Image,
    pub truth: Image,
}

fn evaluate_one<S: TileSampler>(
    sampler: &S,
    rec: &DatasetRecord,
    mode: EvalMode,
    opts: &EvalOptions,
    view_size: usize,
    text_len: usize,
) -> Result<(SampleRow, Image)> {
    let vocab = Vocabulary::builtin();
    let seed = sample_seed(opts.seed, &rec.asset_id);
    let cond = eval_condition(rec, &rec.caption, mode, view_size, text_len, &vocab)?;
    let out = sampler.sample(rec, &cond, seed)?;
    let gt = &rec.target_tile;
    let tile = TiledGrid::from_image(out, gt.base_azimuth_deg, DEFAULT_OUTPUT_ELEVATION)?;
    let expected = parse_caption(&merge_caption(&rec.caption, 0, 1.0)?)?;
    let matched = attribute_match(&tile, &expected, &rec.asset)?;
    let unseen_side = Side::facing(rec.input_view.pose.azimuth_deg).opposite();
    let unseen_part_color_correct = if mode.uses_text() && rec.asset.part_on(unseen_side).is_some()
    {
        matched
            .get(&format!("part.{}.color", unseen_side.name()))
            .map(|c| c.matched)
    } else {
        None
    };
    let material_direction_correct = if opts.material_edit && mode.uses_text() {
        let spec = |term: &str| -> Result<f64> {
            let c = eval_condition(
                rec,
                &with_metallic(&rec.caption, term),
                mode,
                view_size,
                text_len,
                &vocab,
            )?;
            let img = sampler.sample(rec, &c, seed)?;
            Ok(specular_statistic(&TiledGrid::from_image(
                img,
                gt.base_azimuth_deg,
                DEFAULT_OUTPUT_ELEVATION,
            )?))
        };
        Some(spec("high metallic")? > spec("low metallic")?)
    } else {
        None
    };
    let row = SampleRow {
        id: rec.asset_id.clone(),
        mode,
        seed,
        psnr_db: psnr(&tile.tile, &gt.tile)?,
        input_view_psnr_db: psnr(&tile.quadrant(0), &gt.quadrant(0))?,
        ssim: ssim(&tile.tile, &gt.tile)?,
        attribute_match_rate: matched.rate,
        unseen_part_color_correct,
        material_direction_correct,
        specular: specular_statistic(&tile),
    };
    Ok((row, tile.tile))
}

/// Runs `sampler` on every (record, mode) pair and scores the outputs.
/// Rows follow manifest order, modes in the order given.
pub fn evaluate_with<S: TileSampler>(
    sampler: &S,
    data: &Dataset,
    indices: &[usize],
    opts: &EvalOptions,
    text_len: usize,
    checkpoint_step: Option<u64>,
) -> Result<EvalReport> {
    evaluate_keeping(sampler, data, indices, opts, text_len, checkpoint_step, 0).map(|(r, _)| r)
}

/// [`evaluate_with`], also returning the generated tiles of the first
/// `keep` records.
pub fn evaluate_keeping<S: TileSampler>(
    sampler: &S,
    data: &Dataset,
    indices: &[usize],
    opts: &EvalOptions,
    text_len: usize,
    checkpoint_step: Option<u64>,
    keep: usize,
) -> Result<(EvalReport, Vec<GeneratedTile>)> {
    if opts.modes.is_empty() {
        return Err(Error::Config(
            "at least one evaluation mode is required".into(),
        ));
    }
    let view_size = data.manifest.view_size;
    let pairs: Vec<(usize, EvalMode)> = indices
        .iter()
        .flat_map(|&i| opts.modes.iter().map(move |&m| (i, m)))
        .collect();
    let kept: BTreeSet<usize> = indices.iter().take(keep).copied().collect();
    let results: Vec<(SampleRow, Option<Image>)> = pairs
        .par_iter()
        .map(|&(i, m)| {
            let (row, img) = evaluate_one(sampler, &data.records[i], m, opts, view_size, text_len)?;
            Ok((row, kept.contains(&i).then_some(img)))
        })
        .collect::<Result<_>>()?;
    let mut tiles = Vec::new();
    let mut rows = Vec::with_capacity(results.len());
    for ((row, img), &(i, mode)) in results.into_iter().zip(&pairs) {
        if let Some(generated) = img {
            let rec = &data.records[i];
            tiles.push(GeneratedTile {
                id: row.id.clone(),
                mode,
                input: rec.input_view.pixels.clone(),
                generated,
                truth: rec.target_tile.tile.clone(),
            });
        }
        rows.push(row);
    }
    let aggregates = opts
        .modes
        .iter()
        .map(|&m| aggregate(m, &rows.iter().filter(|r| r.mode == m).collect::<Vec<_>>()))
        .collect();
    let report = EvalReport {
        checkpoint_step,
        options: opts.clone(),
        sample_count: indices.len(),
        rows,
        aggregates,
    };
    Ok((report, tiles))
}

/// Loads a checkpoint and evaluates it on a split of `dataset_dir`.
/// Evaluation ids that the checkpoint was trained on are refused.
pub fn evaluate(checkpoint: &Path, dataset_dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_checkpoint(checkpoint, dataset_dir, opts, 0).map(|(r, _)| r)
}

/// [`evaluate`], also returning the generated tiles of the first `keep`
/// records.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    dataset_dir: &Path,
    opts: &EvalOptions,
    keep: usize,
) -> Result<(EvalReport, Vec<GeneratedTile>)> {
    let mut modes = BTreeSet::new();
    if !opts.modes.iter().all(|m| modes.insert(*m)) {
        return Err(Error::Config("evaluation modes must be distinct".into()));
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = Dataset::open(dataset_dir)?;
    let indices = split_indices(&data, opts.split, opts.limit);
    let trained: BTreeSet<&str> = ckpt.header.train_ids.iter().map(String::as_str).collect();
    let overlap = indices
        .iter()
        .filter(|&&i| trained.contains(data.records[i].asset_id.as_str()))
        .count();
    if overlap > 0 {
        return Err(Error::Contamination(overlap));
    }
    let model = ckpt.denoiser()?;
    if model.config.view_size != data.manifest.view_size {
        return Err(Error::Config(format!(
            "checkpoint view size {} differs from the dataset's {}",
            model.config.view_size, data.manifest.view_size
        )));
    }
    let sched = ckpt.schedule()?;
    let sampler = DdimSampler {
        model: &model,
        sched: &sched,
        steps: opts.steps,
        guidance_scale: opts.guidance_scale,
    };
    evaluate_keeping(
        &sampler,
        &data,
        &indices,
        opts,
        model.config.text_len,
        Some(ckpt.header.step),
        keep,
    )
}
