use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use flexmv_cli::{Cli, RunConfig};
use flexmv_core::evalkit::{EvalMode, EvalReport};
use flexmv_core::trainer::{Checkpoint, TrainConfig};
use tempfile::TempDir;

fn flexmv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexmv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Flags of each subcommand as listed in the README.
const DOCUMENTED: &[(&str, &[&str])] = &[
    (
        "gen-data",
        &[
            "--count",
            "--seed",
            "--out",
            "--overwrite",
            "--view-size",
            "--help",
        ],
    ),
    ("train", &["--config", "--resume", "--help"]),
    (
        "sample",
        &[
            "--checkpoint",
            "--out",
            "--config",
            "--steps",
            "--seed",
            "--guidance",
            "--image",
            "--prompt",
            "--help",
        ],
    ),
    (
        "eval",
        &[
            "--checkpoint",
            "--data",
            "--out",
            "--config",
            "--modes",
            "--split",
            "--limit",
            "--steps",
            "--seed",
            "--guidance",
            "--material-edit",
            "--strips",
            "--help",
        ],
    ),
];

#[test]
fn help_lists_exactly_the_documented_flags_with_defaults() {
    let cli = Cli::command();
    for (sub, documented) in DOCUMENTED {
        let documented: BTreeSet<String> = documented.iter().map(|s| s.to_string()).collect();
        let out = flexmv(&[sub, "--help"]);
        assert_eq!(code(&out), 0);
        let help = stdout(&out);
        let shown: BTreeSet<String> = help
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '-'))
            .filter(|w| w.starts_with("--") && w.len() > 2)
            .map(str::to_string)
            .collect();
        assert_eq!(shown, documented, "{sub} --help");
        let cmd = cli.find_subcommand(sub).unwrap();
        let mut parsed: BTreeSet<String> = cmd
            .get_arguments()
            .filter_map(|a| a.get_long())
            .map(|l| format!("--{l}"))
            .collect();
        parsed.insert("--help".into());
        assert_eq!(parsed, documented, "{sub} parser");
        // every optional flag that takes a value names its default
        for a in cmd.get_arguments() {
            let takes_value = a.get_num_args().is_some_and(|n| n.takes_values());
            if a.is_required_set() || !takes_value {
                continue;
            }
            let long = a.get_long().unwrap();
            let line = help
                .lines()
                .find(|l| l.contains(&format!("--{long} ")))
                .unwrap();
            let mut block = line.to_string();
            let start = help.find(line).unwrap();
            block.push_str(
                &help[start + line.len()..]
                    .lines()
                    .take(2)
                    .collect::<Vec<_>>()
                    .join(" "),
            );
            let documented_default = [
                "checkpoint",
                "out",
                "data",
                "config",
                "image",
                "prompt",
                "resume",
            ];
            assert!(
                block.contains("default") || documented_default.contains(&long),
                "{sub} --{long} has no documented default"
            );
        }
    }
}

#[test]
fn toy_config_file_matches_the_built_in_defaults() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
    let cfg = RunConfig::load(&root).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.train, TrainConfig::default());
    cfg.train.validate().unwrap();
    assert!(RunConfig::parse("[train]\nbogus = 1\n").is_err());
    assert!(RunConfig::parse("colour = 1\n").is_err());
}

#[test]
fn gen_data_is_deterministic_and_guards_its_output() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("d1"), tmp.path().join("d2"));
    let first = flexmv(&[
        "gen-data",
        "--count",
        "10",
        "--seed",
        "1",
        "--view-size",
        "8",
        "--out",
        p(&a),
    ]);
    let second = flexmv(&[
        "gen-data",
        "--count",
        "10",
        "--seed",
        "1",
        "--view-size",
        "8",
        "--out",
        p(&b),
    ]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    assert_eq!(code(&second), 0);
    assert_eq!(stdout(&first).trim().len(), 64);
    assert_eq!(stdout(&first), stdout(&second));

    let missing = flexmv(&["gen-data", "--count", "10"]);
    assert_eq!(code(&missing), 2);

    let again = flexmv(&[
        "gen-data",
        "--count",
        "10",
        "--seed",
        "1",
        "--view-size",
        "8",
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("refusing"), "{}", stderr(&again));
    let forced = flexmv(&[
        "gen-data",
        "--count",
        "10",
        "--seed",
        "2",
        "--view-size",
        "8",
        "--out",
        p(&a),
        "--overwrite",
    ]);
    assert_eq!(code(&forced), 0);
    assert_ne!(stdout(&forced), stdout(&first));

    let zero = flexmv(&[
        "gen-data",
        "--count",
        "0",
        "--out",
        p(&tmp.path().join("d3")),
    ]);
    assert_eq!(code(&zero), 2);
}

fn tiny_config(data: &Path, run: &Path, probs: &str) -> String {
    format!(
        r#"
[train]
dataset_dir = "{}"
run_dir = "{}"
total_steps = 4
batch_size = 2
lr = 1e-3
modality_probs = {probs}
checkpoint_every = 2

[train.model]
view_size = 8
base_channels = 4
channel_multipliers = [1, 2]
time_embed_dim = 8
heads = 2
groups = 2
text_len = 24
text_dim = 8

[sample]
steps = 3
"#,
        p(data),
        p(run)
    )
}

struct Pipeline {
    _tmp: TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn pipeline() -> Pipeline {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    let out = flexmv(&[
        "gen-data",
        "--count",
        "20",
        "--seed",
        "3",
        "--view-size",
        "8",
        "--out",
        p(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let config = root.join("tiny.toml");
    std::fs::write(
        &config,
        tiny_config(&data, &root.join("run"), "[0.3, 0.3, 0.3, 0.1]"),
    )
    .unwrap();
    let out = flexmv(&["train", "--config", p(&config)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let checkpoint = PathBuf::from(stdout(&out).trim());
    assert!(checkpoint.ends_with("ckpt_4"));
    assert!(checkpoint.is_file());
    Pipeline {
        _tmp: tmp,
        root,
        data,
        config,
        checkpoint,
    }
}

#[test]
fn train_rejects_bad_configs_before_any_step() {
    let tmp = TempDir::new().unwrap();
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(
        &cfg,
        tiny_config(&tmp.path().join("data"), &run, "[0.3, 0.3, 0.2, 0.1]"),
    )
    .unwrap();
    let out = flexmv(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("sum"), "{}", stderr(&out));
    assert!(!run.exists());

    std::fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&flexmv(&["train", "--config", p(&cfg)])), 2);
    std::fs::write(&cfg, "[train\n").unwrap();
    assert_eq!(code(&flexmv(&["train", "--config", p(&cfg)])), 2);
    assert_eq!(code(&flexmv(&["train"])), 2);
    let missing = tmp.path().join("absent.toml");
    assert_eq!(code(&flexmv(&["train", "--config", p(&missing)])), 2);
}

#[test]
fn train_sample_eval_pipeline() {
    let pl = pipeline();

    // resume of a finished run is a no-op; a forged vocabulary is refused
    let same = flexmv(&[
        "train",
        "--config",
        p(&pl.config),
        "--resume",
        p(&pl.checkpoint),
    ]);
    assert_eq!(code(&same), 0, "{}", stderr(&same));
    let mut ck = Checkpoint::load(&pl.checkpoint).unwrap();
    ck.header.vocab_hash = "0".repeat(64);
    let forged = pl.root.join("forged");
    ck.save(&forged).unwrap();
    let out = flexmv(&["train", "--config", p(&pl.config), "--resume", p(&forged)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("vocab_hash"), "{}", stderr(&out));

    // sampling
    let image = pl.data.join("inputs/000000.png");
    let prompt = "A red cube with a handle on the left. The handle is blue and striped.";
    let run_sample = |name: &str, extra: &[&str]| {
        let out_png = pl.root.join(name);
        let mut args = vec![
            "sample",
            "--checkpoint",
            p(&pl.checkpoint),
            "--out",
            p(&out_png),
            "--config",
        ];
        args.push(p(&pl.config));
        args.extend_from_slice(extra);
        let o = flexmv(&args);
        (o, out_png)
    };
    let (a, a_png) = run_sample(
        "a.png",
        &["--image", p(&image), "--prompt", prompt, "--seed", "5"],
    );
    let (b, b_png) = run_sample(
        "b.png",
        &["--image", p(&image), "--prompt", prompt, "--seed", "5"],
    );
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    assert_eq!(
        std::fs::read(&a_png).unwrap(),
        std::fs::read(&b_png).unwrap()
    );
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a_png.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(side["has_image"], true);
    assert_eq!(side["steps"], 3);
    assert_eq!(side["seed"], 5);
    assert_eq!(side["prompt"], prompt);

    let (t, t_png) = run_sample("t.png", &["--prompt", prompt]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t_png.with_extension("json")).unwrap())
            .unwrap();
    assert_eq!(side["has_image"], false);
    assert_eq!(side["has_text"], true);

    let (none, _) = run_sample("n.png", &[]);
    assert_eq!(code(&none), 2);
    let (unknown, u_png) = run_sample("u.png", &["--prompt", "A red dodecahedron."]);
    assert_eq!(code(&unknown), 1);
    assert!(
        stderr(&unknown).contains("dodecahedron"),
        "{}",
        stderr(&unknown)
    );
    assert!(!u_png.exists());

    // evaluation
    let report_dir = pl.root.join("eval");
    let before = std::fs::read(&pl.checkpoint).unwrap();
    let out = flexmv(&[
        "eval",
        "--checkpoint",
        p(&pl.checkpoint),
        "--data",
        p(&pl.data),
        "--out",
        p(&report_dir),
        "--steps",
        "2",
        "--strips",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(before, std::fs::read(&pl.checkpoint).unwrap());
    let json = report_dir.join("eval_step4_image-only+text-only+both.json");
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2 * 3);
    assert!(report_dir
        .join("eval_step4_image-only+text-only+both_strip.png")
        .is_file());

    let out = flexmv(&[
        "eval",
        "--checkpoint",
        p(&pl.checkpoint),
        "--data",
        p(&pl.data),
        "--out",
        p(&report_dir),
        "--steps",
        "2",
        "--modes",
        "text-only",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let json = report_dir.join("eval_step4_text-only.json");
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report.rows.iter().all(|r| r.mode == EvalMode::TextOnly));

    let eval_args = |extra: &[&str]| {
        let mut v = vec![
            "eval",
            "--checkpoint",
            p(&pl.checkpoint),
            "--data",
            p(&pl.data),
            "--out",
            p(&report_dir),
        ];
        v.extend_from_slice(extra);
        flexmv(&v)
    };
    assert_eq!(code(&eval_args(&["--modes", "sketch-only"])), 2);
    assert_eq!(code(&eval_args(&["--modes", "both,both"])), 2);
    let contaminated = eval_args(&["--split", "train", "--steps", "2", "--limit", "1"]);
    assert_eq!(code(&contaminated), 1);
    assert!(
        stderr(&contaminated).contains("contamination"),
        "{}",
        stderr(&contaminated)
    );
}

#[test]
fn thread_cap_must_be_positive() {
    let tmp = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flexmv"))
        .args([
            "gen-data",
            "--count",
            "2",
            "--view-size",
            "8",
            "--out",
            p(&tmp.path().join("d")),
        ])
        .env("FLEXMV_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let ok = Command::new(env!("CARGO_BIN_EXE_flexmv"))
        .args([
            "gen-data",
            "--count",
            "2",
            "--view-size",
            "8",
            "--out",
            p(&tmp.path().join("d")),
        ])
        .env("FLEXMV_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&ok), 0);
}
