use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Dataset, TrainConfig};
use crate::captioner::{merge_caption, Vocabulary};
use crate::diffusion::{
    make_schedule, training_loss, Denoiser, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START,
};
use crate::dual_control::{switch_conditions, Branch, ConditionBundle};
use crate::error::{Error, IoContext, Result};
use crate::nn::{Adam, AdamState, Graph, ParamGrads};

pub const METRICS_FILE: &str = "metrics.csv";

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join(format!("ckpt_{step}"))
}

/// Per-sample seeds of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SampleSeeds {
    pub record: u64,
    pub merge: u64,
    pub switch: u64,
    pub noise: u64,
}

/// Seeds for every sample of step `step`, a pure function of `(seed, step)`.
pub fn sample_seeds(seed: u64, step: u64, batch: usize) -> Vec<SampleSeeds> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..batch)
        .map(|_| SampleSeeds {
            record: rng.random(),
            merge: rng.random(),
            switch: rng.random(),
            noise: rng.random(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub branch: String,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "loss", "branch"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

fn append_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let f = fs::OpenOptions::new().append(true).open(path).at(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

/// Fields that must agree between a checkpoint and a config it resumes under.
pub fn compatibility_diff(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
) -> Result<Vec<String>> {
    let mut diff = Vec::new();
    if ckpt.header.vocab_hash != vocab.hash() {
        diff.push("vocab_hash".to_string());
    }
    if ckpt.header.config.timesteps != cfg.timesteps {
        diff.push("timesteps".to_string());
    }
    let (a, b) = (
        serde_json::to_value(&ckpt.header.config.model)?,
        serde_json::to_value(&cfg.model)?,
    );
    if let (Some(a), Some(b)) = (a.as_object(), b.as_object()) {
        for (k, v) in a {
            if b.get(k) != Some(v) {
                diff.push(format!("model.{k}"));
            }
        }
    }
    Ok(diff)
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    data: Dataset,
    train_idx: Vec<usize>,
    train_ids: Vec<String>,
    sched: NoiseSchedule,
    vocab: Vocabulary,
}

struct SampleOut {
    loss: f64,
    grads: ParamGrads<f32>,
    branch: Branch,
}

impl<'a> Run<'a> {
    fn open(cfg: &'a TrainConfig) -> Result<Self> {
        let data = Dataset::open(&cfg.dataset_dir)?;
        if data.manifest.view_size != cfg.model.view_size {
            return Err(Error::Config(format!(
                "dataset view size {} differs from model.view_size {}",
                data.manifest.view_size, cfg.model.view_size
            )));
        }
        let (train_idx, _) = data.split_indices();
        if train_idx.is_empty() {
            return Err(Error::Config("the training split is empty".into()));
        }
        let train_ids = train_idx
            .iter()
            .map(|&i| data.records[i].asset_id.clone())
            .collect();
        let sched = make_schedule(cfg.timesteps, DEFAULT_BETA_START, DEFAULT_BETA_END)?;
        Ok(Self {
            cfg,
            data,
            train_idx,
            train_ids,
            sched,
            vocab: Vocabulary::builtin(),
        })
    }

    fn sample(&self, model: &Denoiser<f32>, s: &SampleSeeds) -> Result<SampleOut> {
        let pick = ChaCha8Rng::seed_from_u64(s.record).random_range(0..self.train_idx.len());
        let rec = &self.data.records[self.train_idx[pick]];
        let m = &self.cfg.model;
        let prompt = merge_caption(&rec.caption, s.merge, self.cfg.keep_prob)?;
        let tokens = self.vocab.tokenize(&prompt, m.text_len)?;
        let full = ConditionBundle::new(
            Some(rec.input_view.pixels.clone()),
            Some(tokens),
            m.view_size,
            m.text_len,
            &self.vocab,
        )?;
        let (cond, branch) =
            switch_conditions(&full, s.switch, self.cfg.modality_probs, &self.vocab)?;
        let mut g = Graph::new(&model.params);
        let l = model.loss_graph(&mut g, &rec.target_tile.tile, &cond, &self.sched, s.noise)?;
        let mut grads = ParamGrads::zeros_for(&model.params);
        g.backward(l, &mut grads);
        Ok(SampleOut {
            loss: f64::from(g.value(l)[0]),
            grads,
            branch,
        })
    }

    fn checkpoint(&self, step: u64, model: &Denoiser<f32>, state: &AdamState<f32>) -> Checkpoint {
        Checkpoint::new(
            step,
            self.cfg.clone(),
            &self.sched,
            self.vocab.hash().to_string(),
            self.train_ids.clone(),
            model.params.clone(),
            state.clone(),
        )
    }

    fn dump_non_finite(
        &self,
        step: u64,
        model: &Denoiser<f32>,
        state: &AdamState<f32>,
        seeds: &[SampleSeeds],
        outs: &[SampleOut],
    ) -> Error {
        #[derive(Serialize)]
        struct Dump<'a> {
            step: u64,
            seeds: &'a [SampleSeeds],
            losses: Vec<f64>,
            branches: Vec<&'static str>,
            non_finite_grads: Vec<String>,
            state: String,
        }
        let state_path = self.cfg.run_dir.join(format!("nan_state_{step}"));
        let non_finite_grads = model
            .params
            .ids()
            .filter(|&id| {
                outs.iter()
                    .any(|o| o.grads.get(id).iter().any(|v| !v.is_finite()))
            })
            .map(|id| model.params.name(id).to_string())
            .collect();
        let dump = Dump {
            step,
            seeds,
            losses: outs.iter().map(|o| o.loss).collect(),
            branches: outs.iter().map(|o| o.branch.name()).collect(),
            non_finite_grads,
            state: state_path.display().to_string(),
        };
        let path = self.cfg.run_dir.join(format!("nan_dump_{step}.json"));
        if let Err(e) = self.checkpoint(step, model, state).save(&state_path) {
            log::error!("could not save the pre-step state: {e}");
        }
        match serde_json::to_string_pretty(&dump) {
            Ok(text) => {
                if let Err(e) = fs::write(&path, text) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not serialize the diagnostic dump: {e}"),
        }
        Error::NonFiniteLoss { step, dump: path }
    }

    /// Runs steps `start..total_steps`, returning the final checkpoint path.
    fn run(
        &self,
        start: u64,
        mut model: Denoiser<f32>,
        mut state: AdamState<f32>,
    ) -> Result<PathBuf> {
        let cfg = self.cfg;
        let adam = Adam::with_lr(cfg.lr);
        let metrics = cfg.run_dir.join(METRICS_FILE);
        let mut last = checkpoint_path(&cfg.run_dir, start);
        for step in start..cfg.total_steps {
            let seeds = sample_seeds(cfg.seed, step, cfg.batch_size);
            let outs: Vec<SampleOut> = seeds
                .par_iter()
                .map(|s| self.sample(&model, s))
                .collect::<Result<_>>()?;
            let mut grads = ParamGrads::zeros_for(&model.params);
            for o in &outs {
                grads.add_assign(&o.grads);
            }
            grads.scale(1.0 / cfg.batch_size as f32);
            let loss = outs.iter().map(|o| o.loss).sum::<f64>() / outs.len() as f64;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(self.dump_non_finite(step, &model, &state, &seeds, &outs));
            }
            adam.step(&mut model.params, &mut state, &grads);
            let done = step + 1;
            let rows: Vec<MetricRow> = outs
                .iter()
                .map(|o| MetricRow {
                    step: done,
                    loss: o.loss,
                    branch: o.branch.name().to_string(),
                })
                .collect();
            append_metrics(&metrics, &rows)?;
            if done % 50 == 0 || done == cfg.total_steps {
                log::info!("step {done}/{} loss {loss:.5}", cfg.total_steps);
            }
            if done % cfg.checkpoint_every == 0 || done == cfg.total_steps {
                last = checkpoint_path(&cfg.run_dir, done);
                self.checkpoint(done, &model, &state).save(&last)?;
            }
        }
        Ok(last)
    }
}

/// Trains from freshly initialized weights. Existing metrics in the run
/// directory are replaced.
pub fn train(cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let run = Run::open(cfg)?;
    fs::create_dir_all(&cfg.run_dir).at(&cfg.run_dir)?;
    write_metrics(&cfg.run_dir.join(METRICS_FILE), &[])?;
    let model = Denoiser::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let state = AdamState::new(&model.params);
    run.run(0, model, state)
}

/// Continues a run from `ckpt` up to `cfg.total_steps`. Metric rows past the
/// checkpoint step are discarded first. A checkpoint already at or beyond
/// the target is returned unchanged.
pub fn resume(ckpt_path: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    let diff = compatibility_diff(&ckpt, cfg, &Vocabulary::builtin())?;
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    if ckpt.header.step >= cfg.total_steps {
        return Ok(ckpt_path.to_path_buf());
    }
    let run = Run::open(cfg)?;
    if run.train_ids != ckpt.header.train_ids {
        return Err(Error::ConfigMismatch(vec!["train_ids".into()]));
    }
    fs::create_dir_all(&cfg.run_dir).at(&cfg.run_dir)?;
    let metrics = cfg.run_dir.join(METRICS_FILE);
    let kept = if metrics.exists() {
        read_metrics(&metrics)?
    } else {
        Vec::new()
    };
    let kept: Vec<MetricRow> = kept
        .into_iter()
        .filter(|r| r.step <= ckpt.header.step)
        .collect();
    write_metrics(&metrics, &kept)?;
    let model = ckpt.denoiser()?;
    run.run(ckpt.header.step, model, ckpt.adam_state)
}

/// Mean noise-prediction loss over `indices` with full conditioning and
/// per-record noise seeds derived from `seed`.
pub fn validation_loss(
    model: &Denoiser<f32>,
    sched: &NoiseSchedule,
    data: &Dataset,
    indices: &[usize],
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Domain("validation needs at least one record".into()));
    }
    let vocab = Vocabulary::builtin();
    let m = &model.config;
    let losses: Vec<f64> = indices
        .par_iter()
        .map(|&i| {
            let rec = &data.records[i];
            let prompt = merge_caption(&rec.caption, 0, 1.0)?;
            let tokens = vocab.tokenize(&prompt, m.text_len)?;
            let cond = ConditionBundle::new(
                Some(rec.input_view.pixels.clone()),
                Some(tokens),
                m.view_size,
                m.text_len,
                &vocab,
            )?;
            training_loss(model, sched, &rec.target_tile.tile, &cond, seed ^ i as u64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
