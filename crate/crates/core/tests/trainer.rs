mod common;

use std::collections::BTreeMap;
use std::fs;

use common::{expected_attributes, tiny_run};
use flexmv_core::captioner::{merge_caption, parse_caption, Vocabulary};
use flexmv_core::nn::ParamStore;
use flexmv_core::synthset::normalize_azimuth;
use flexmv_core::trainer::{
    build_dataset, checkpoint_path, read_metrics, resume, sha256_hex, train, validation_loss,
    Checkpoint, Dataset, Manifest, TrainConfig, METRICS_FILE,
};
use flexmv_core::Error;
use tempfile::tempdir;

fn dir_hashes(root: &std::path::Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for sub in ["assets", "inputs", "tiles", "captions"] {
        for e in fs::read_dir(root.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(
                format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                sha256_hex(&fs::read(&p).unwrap()),
            );
        }
    }
    out
}

fn max_param_diff(a: &ParamStore<f32>, b: &ParamStore<f32>) -> f32 {
    a.ids()
        .flat_map(|id| {
            a.value(id)
                .iter()
                .zip(b.value(id))
                .map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f32::max)
}

#[test]
fn dataset_is_deterministic_per_seed() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ma = build_dataset(10, 1, 32, a.path(), false).unwrap();
    let mb = build_dataset(10, 1, 32, b.path(), false).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.hash().unwrap(), mb.hash().unwrap());
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
    let ha = dir_hashes(a.path());
    assert_eq!(ha.len(), 10 * 6);
    assert_eq!(ha, dir_hashes(b.path()));
    let c = tempdir().unwrap();
    let mc = build_dataset(10, 2, 32, c.path(), false).unwrap();
    assert_ne!(ma.hash().unwrap(), mc.hash().unwrap());
}

#[test]
fn records_are_aligned_and_captions_round_trip() {
    let d = tempdir().unwrap();
    build_dataset(40, 3, 32, d.path(), false).unwrap();
    let data = Dataset::open(d.path()).unwrap();
    assert_eq!(data.records.len(), 40);
    for rec in &data.records {
        let az = rec.input_view.pose.azimuth_deg;
        assert_eq!(rec.target_tile.quadrant_poses[0].azimuth_deg, az);
        assert_eq!(rec.target_tile.base_azimuth_deg, az);
        assert_eq!(
            rec.target_tile.quadrant_poses[3].azimuth_deg,
            normalize_azimuth(az + 180.0)
        );
        assert!(rec
            .target_tile
            .quadrant_poses
            .iter()
            .all(|p| p.elevation_deg == 5.0));
        let prompt = merge_caption(&rec.caption, 99, 1.0).unwrap();
        assert_eq!(
            parse_caption(&prompt).unwrap(),
            expected_attributes(&rec.asset)
        );
        let stored =
            fs::read_to_string(d.path().join(format!("captions/{}.txt", rec.asset_id))).unwrap();
        assert_eq!(stored, prompt);
    }
}

#[test]
fn held_out_split_is_the_last_tenth_by_hash() {
    let d = tempdir().unwrap();
    let m = build_dataset(30, 4, 8, d.path(), false).unwrap();
    let (train_ids, held) = m.split();
    assert_eq!((train_ids.len(), held.len()), (27, 3));
    let key = |id: &String| {
        m.records.iter().find(|r| &r.id == id).unwrap().files[&format!("assets/{id}.json")].clone()
    };
    let max_train = train_ids.iter().map(key).max().unwrap();
    assert!(held.iter().all(|id| key(id) > max_train));
    assert_eq!(m.split(), Manifest::load(d.path()).unwrap().split());
}

#[test]
fn dataset_directory_guards() {
    let d = tempdir().unwrap();
    build_dataset(3, 1, 8, d.path(), false).unwrap();
    assert!(matches!(
        build_dataset(3, 1, 8, d.path(), false),
        Err(Error::DirectoryNotEmpty(_))
    ));
    fs::write(d.path().join("assets/stale.json"), "{}").unwrap();
    let m = build_dataset(2, 5, 8, d.path(), true).unwrap();
    assert_eq!(m.records.len(), 2);
    assert_eq!(fs::read_dir(d.path().join("assets")).unwrap().count(), 2);
    let file = d.path().join("plain_file");
    fs::write(&file, "x").unwrap();
    assert!(matches!(
        build_dataset(1, 1, 8, &file.join("sub"), false),
        Err(Error::Io { .. })
    ));
    assert!(matches!(
        build_dataset(0, 1, 8, &d.path().join("empty"), false),
        Err(Error::Config(_))
    ));
}

#[test]
fn tampered_files_are_reported_as_corruption() {
    let d = tempdir().unwrap();
    let cfg = tiny_run(d.path(), 6, 2);
    let caption = cfg.dataset_dir.join("captions/000002.txt");
    let mut text = fs::read_to_string(&caption).unwrap();
    text.push(' ');
    fs::write(&caption, text).unwrap();
    assert!(matches!(
        Dataset::open(&cfg.dataset_dir),
        Err(Error::DatasetCorruption(_))
    ));
    assert!(matches!(train(&cfg), Err(Error::DatasetCorruption(_))));
    fs::remove_file(cfg.dataset_dir.join("tiles/000001.png")).unwrap();
    assert!(matches!(
        Dataset::open(&cfg.dataset_dir),
        Err(Error::DatasetCorruption(_))
    ));
}

#[test]
fn invalid_train_configs_are_rejected() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    let bad = [
        TrainConfig {
            modality_probs: [0.3, 0.3, 0.2, 0.1],
            ..ok.clone()
        },
        TrainConfig {
            modality_probs: [0.5, 0.6, -0.2, 0.1],
            ..ok.clone()
        },
        TrainConfig {
            batch_size: 0,
            ..ok.clone()
        },
        TrainConfig {
            total_steps: 0,
            ..ok.clone()
        },
        TrainConfig {
            lr: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            keep_prob: 1.5,
            ..ok.clone()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_state_and_validation_loss() {
    let d = tempdir().unwrap();
    let cfg = tiny_run(d.path(), 12, 5);
    let path = train(&cfg).unwrap();
    assert_eq!(path, checkpoint_path(&cfg.run_dir, 5));
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.header.step, 5);
    assert_eq!(ck.adam_state.step, 5);
    assert!(ck.adam_state.m.iter().flatten().any(|&v| v != 0.0));
    let again = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(again.header, ck.header);
    assert_eq!(again.adam_state, ck.adam_state);
    assert_eq!(max_param_diff(&again.params, &ck.params), 0.0);
    let data = Dataset::open(&cfg.dataset_dir).unwrap();
    let (_, held) = data.split_indices();
    let model = ck.denoiser().unwrap();
    let sched = ck.schedule().unwrap();
    let before = validation_loss(&model, &sched, &data, &held, 3).unwrap();
    let saved = d.path().join("copy");
    ck.save(&saved).unwrap();
    let after = validation_loss(
        &Checkpoint::load(&saved).unwrap().denoiser().unwrap(),
        &sched,
        &data,
        &held,
        3,
    )
    .unwrap();
    assert!((before - after).abs() <= 1e-6);
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(b"not a checkpoint at all"),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn identical_runs_give_identical_results() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ca = tiny_run(a.path(), 12, 12);
    let cb = tiny_run(b.path(), 12, 12);
    let (pa, pb) = (train(&ca).unwrap(), train(&cb).unwrap());
    let (ka, kb) = (
        Checkpoint::load(&pa).unwrap(),
        Checkpoint::load(&pb).unwrap(),
    );
    assert_eq!(max_param_diff(&ka.params, &kb.params), 0.0);
    assert_eq!(ka.adam_state, kb.adam_state);
    let (ma, mb) = (
        read_metrics(&ca.run_dir.join(METRICS_FILE)).unwrap(),
        read_metrics(&cb.run_dir.join(METRICS_FILE)).unwrap(),
    );
    assert_eq!(ma.len(), 12 * 4);
    let last = |m: &[flexmv_core::trainer::MetricRow]| {
        m.iter()
            .filter(|r| r.step == 12)
            .map(|r| r.loss)
            .sum::<f64>()
    };
    assert!((last(&ma) - last(&mb)).abs() <= 1e-5);
    assert!(!checkpoint_path(&ca.run_dir, 50).exists());
    assert!(checkpoint_path(&ca.run_dir, 12).exists());
}

#[test]
fn split_run_matches_straight_run() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let straight = train(&tiny_run(a.path(), 12, 60)).unwrap();
    let first = tiny_run(b.path(), 12, 30);
    let mid = train(&first).unwrap();
    let split = resume(
        &mid,
        &TrainConfig {
            total_steps: 60,
            ..first.clone()
        },
    )
    .unwrap();
    let (x, y) = (
        Checkpoint::load(&straight).unwrap(),
        Checkpoint::load(&split).unwrap(),
    );
    assert!(max_param_diff(&x.params, &y.params) <= 1e-6);
    assert_eq!(x.adam_state, y.adam_state);
    let (ma, mb) = (
        read_metrics(&a.path().join("run/metrics.csv")).unwrap(),
        read_metrics(&b.path().join("run/metrics.csv")).unwrap(),
    );
    assert_eq!(ma, mb);
}

#[test]
fn resume_checks_compatibility_and_is_a_no_op_when_finished() {
    let d = tempdir().unwrap();
    let cfg = tiny_run(d.path(), 8, 3);
    let path = train(&cfg).unwrap();
    let before = fs::read(&path).unwrap();
    assert_eq!(resume(&path, &cfg).unwrap(), path);
    assert_eq!(fs::read(&path).unwrap(), before);
    let mut wider = cfg.clone();
    wider.model.base_channels = 8;
    wider.total_steps = 6;
    match resume(&path, &wider) {
        Err(Error::ConfigMismatch(f)) => assert_eq!(f, vec!["model.base_channels".to_string()]),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    let mut ck = Checkpoint::load(&path).unwrap();
    ck.header.vocab_hash = "0".repeat(64);
    let forged = d.path().join("forged");
    ck.save(&forged).unwrap();
    match resume(
        &forged,
        &TrainConfig {
            total_steps: 6,
            ..cfg.clone()
        },
    ) {
        Err(Error::ConfigMismatch(f)) => assert_eq!(f, vec!["vocab_hash".to_string()]),
        other => panic!("expected a mismatch, got {other:?}"),
    }
    assert_eq!(Vocabulary::builtin().hash().len(), 64);
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let d = tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e38,
        ..tiny_run(d.path(), 6, 10)
    };
    match train(&cfg) {
        Err(Error::NonFiniteLoss { step, dump }) => {
            assert!(step > 0 && step < 10);
            let text = fs::read_to_string(&dump).unwrap();
            let v: serde_json::Value = serde_json::from_str(&text).unwrap();
            assert_eq!(v["step"], step);
            assert_eq!(v["losses"].as_array().unwrap().len(), 4);
            assert!(Checkpoint::load(std::path::Path::new(v["state"].as_str().unwrap())).is_ok());
        }
        other => panic!("expected an abort, got {other:?}"),
    }
}

#[test]
fn branches_follow_modality_probabilities_per_sample() {
    let d = tempdir().unwrap();
    let cfg = TrainConfig {
        batch_size: 20,
        checkpoint_every: 1000,
        ..tiny_run(d.path(), 12, 500)
    };
    train(&cfg).unwrap();
    let rows = read_metrics(&cfg.run_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.len(), 10_000);
    let names = ["both", "image-only", "text-only", "neither"];
    for (name, p) in names.iter().zip(cfg.modality_probs) {
        let f = rows.iter().filter(|r| r.branch == *name).count() as f64 / rows.len() as f64;
        assert!((f - p).abs() <= 0.02, "{name}: {f}");
    }
    // the draw changes within a step, so no step repeats one branch 20 times
    let mut by_step: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
    for r in &rows {
        by_step.entry(r.step).or_default().push(&r.branch);
    }
    assert!(by_step.values().all(|b| b.iter().any(|x| *x != b[0])));
    let first: Vec<f64> = rows
        .iter()
        .filter(|r| r.step <= 50)
        .map(|r| r.loss)
        .collect();
    let last: Vec<f64> = rows
        .iter()
        .filter(|r| r.step > 450)
        .map(|r| r.loss)
        .collect();
    assert!(
        median(&last) < median(&first),
        "{} vs {}",
        median(&last),
        median(&first)
    );
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}
