//! The `flexmv` command line: dataset generation, training, sampling and
//! evaluation.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};
use flexmv_core::captioner::Vocabulary;
use flexmv_core::diffusion::ddim_sample;
use flexmv_core::dual_control::ConditionBundle;
use flexmv_core::evalkit::{evaluate_checkpoint, EvalMode, EvalOptions, GeneratedTile, Split};
use flexmv_core::synthset::{Image, BACKGROUND, DEFAULT_VIEW_SIZE};
use flexmv_core::trainer::{build_dataset, resume, train, Checkpoint};
use flexmv_core::Error;
use serde::Serialize;

pub use config::{EvalSettings, RunConfig, SampleSettings};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FLEXMV_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "flexmv",
    version,
    about = "Text and image controlled multi-view generation on synthetic assets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and print its manifest hash.
    GenData(GenDataArgs),
    /// Train a denoiser from a config file, or resume a checkpoint.
    Train(TrainArgs),
    /// Generate one 2x2 tile from an input view and/or a prompt.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of assets.
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing dataset in the output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Side of each rendered view in pixels.
    #[arg(long, default_value_t = DEFAULT_VIEW_SIZE as usize)]
    pub view_size: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML run config; the `[train]` table is used.
    #[arg(long)]
    pub config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("condition").required(true).multiple(true).args(["image", "prompt"])))]
pub struct SampleArgs {
    /// Checkpoint to sample from.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config; the `[sample]` table supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// DDIM steps [default: 75]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier-free guidance scale [default: 3.0]
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Input view PNG.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Prompt in the caption grammar.
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the report, CSV and strip.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML run config; the `[sample]` and `[eval]` tables supply defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated modes out of image-only, text-only, both [default: image-only,text-only,both]
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    pub modes: Option<Vec<EvalMode>>,
    /// Dataset split: held-out, train or all [default: held-out]
    #[arg(long, value_parser = parse_split)]
    pub split: Option<Split>,
    /// Evaluate only the first N records of the split [default: all]
    #[arg(long)]
    pub limit: Option<usize>,
    /// DDIM steps [default: 75]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier-free guidance scale [default: 3.0]
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Also sample with the metallic term flipped and score the highlight direction.
    #[arg(long)]
    pub material_edit: bool,
    /// Records shown in the comparison strip.
    #[arg(long, default_value_t = 4)]
    pub strips: usize,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Why a command failed. Usage errors exit with 2, runtime errors with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
    });
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got `{v}`"
        ))
    })?;
    // a second call in one process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::Usage(format!("invalid config {e}"))),
        None => Ok(RunConfig::default()),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), Failure> {
    if a.count == 0 || a.view_size == 0 {
        return Err(Failure::Usage(
            "--count and --view-size must be positive".into(),
        ));
    }
    let manifest = build_dataset(a.count, a.seed, a.view_size, &a.out, a.overwrite)?;
    println!("{}", manifest.hash()?);
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let cfg = load_config(Some(&a.config))?.train;
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", a.config.display())))?;
    let last = match &a.resume {
        Some(ckpt) => resume(ckpt, &cfg)?,
        None => train(&cfg)?,
    };
    println!("{}", last.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleSidecar<'a> {
    checkpoint: &'a Path,
    checkpoint_step: u64,
    image: Option<&'a Path>,
    prompt: Option<&'a str>,
    steps: usize,
    seed: u64,
    guidance_scale: f64,
    has_image: bool,
    has_text: bool,
    output: &'a Path,
}

fn sample_cmd(a: &SampleArgs) -> Result<(), Failure> {
    let settings = load_config(a.config.as_deref())?.sample;
    let steps = a.steps.unwrap_or(settings.steps);
    let seed = a.seed.unwrap_or(settings.seed);
    let guidance = a.guidance.unwrap_or(settings.guidance_scale);
    let vocab = Vocabulary::builtin();
    if let Some(p) = &a.prompt {
        let unknown = vocab.unknown_words(p);
        if !unknown.is_empty() {
            return Err(Error::UnknownToken(unknown.join("`, `")).into());
        }
    }
    let image = a.image.as_deref().map(Image::load_png).transpose()?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let model = ckpt.denoiser()?;
    let sched = ckpt.schedule()?;
    let (view, text_len) = (model.config.view_size, model.config.text_len);
    let tokens = a
        .prompt
        .as_deref()
        .map(|p| vocab.tokenize(p, text_len))
        .transpose()?;
    let cond = ConditionBundle::new(image, tokens, view, text_len, &vocab)?;
    let tile = ddim_sample(&model, &sched, &cond, steps, seed, guidance)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    tile.save_png(&a.out)?;
    let sidecar = SampleSidecar {
        checkpoint: &a.checkpoint,
        checkpoint_step: ckpt.header.step,
        image: a.image.as_deref(),
        prompt: a.prompt.as_deref(),
        steps,
        seed,
        guidance_scale: guidance,
        has_image: cond.has_image,
        has_text: cond.has_text,
        output: &a.out,
    };
    let side = a.out.with_extension("json");
    std::fs::write(
        &side,
        serde_json::to_string_pretty(&sidecar).map_err(Error::from)?,
    )
    .map_err(|e| Error::io(side.display().to_string(), e))?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<(), Failure> {
    let cfg = load_config(a.config.as_deref())?;
    let modes = a.modes.clone().unwrap_or(cfg.eval.modes);
    let mut seen = Vec::new();
    for m in &modes {
        if seen.contains(m) {
            return Err(Failure::Usage(format!("mode `{}` given twice", m.name())));
        }
        seen.push(*m);
    }
    if modes.is_empty() {
        return Err(Failure::Usage("at least one mode is required".into()));
    }
    let opts = EvalOptions {
        split: a.split.unwrap_or(cfg.eval.split),
        modes,
        steps: a.steps.unwrap_or(cfg.sample.steps),
        guidance_scale: a.guidance.unwrap_or(cfg.sample.guidance_scale),
        seed: a.seed.unwrap_or(cfg.sample.seed),
        limit: a.limit,
        material_edit: a.material_edit,
    };
    let (report, tiles) = evaluate_checkpoint(&a.checkpoint, &a.data, &opts, a.strips)?;
    let (json, csv) = report.write(&a.out)?;
    if !tiles.is_empty() {
        let strip = a.out.join(format!("{}_strip.png", report.file_stem()));
        comparison_strip(&tiles).save_png(&strip)?;
        println!("{}", strip.display());
    }
    for g in &report.aggregates {
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<10} n={} psnr={:.2} input_psnr={:.2} ssim={:.3} attr={:.3} unseen={} ({}) material={} ({})",
            g.mode.name(),
            g.samples,
            g.psnr_db,
            g.input_view_psnr_db,
            g.ssim,
            g.attribute_match_rate,
            opt(g.unseen_part_color_accuracy),
            g.unseen_part_samples,
            opt(g.material_direction_accuracy),
            g.material_samples,
        );
    }
    println!("{}\n{}", json.display(), csv.display());
    Ok(())
}

const STRIP_GAP: usize = 2;

/// One row per kept tile: input view | generated tile | ground truth,
/// separated by white gaps.
pub fn comparison_strip(tiles: &[GeneratedTile]) -> Image {
    let cell_h = tiles
        .iter()
        .map(|t| t.truth.height.max(t.input.height))
        .max()
        .unwrap_or(0);
    let width = tiles
        .iter()
        .map(|t| t.input.width + t.generated.width + t.truth.width + 2 * STRIP_GAP)
        .max()
        .unwrap_or(0);
    let height = tiles.len() * (cell_h + STRIP_GAP);
    let mut img = Image::filled(width, height.saturating_sub(STRIP_GAP), [1.0; 3]);
    for (k, t) in tiles.iter().enumerate() {
        let row = k * (cell_h + STRIP_GAP);
        let mut col = 0;
        for part in [&t.input, &t.generated, &t.truth] {
            let mut cell = Image::filled(part.width, cell_h, BACKGROUND);
            cell.paste(part, 0, 0);
            img.paste(&cell, row, col);
            col += part.width + STRIP_GAP;
        }
    }
    img
}
