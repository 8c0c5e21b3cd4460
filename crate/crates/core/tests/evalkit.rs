mod common;

use std::collections::BTreeMap;
use std::fs;

use common::tiny_run;
use flexmv_core::captioner::{parse_caption, AttributeMap};
use flexmv_core::dual_control::ConditionBundle;
use flexmv_core::evalkit::{
    attribute_match, evaluate, evaluate_with, psnr, specular_statistic, split_indices, ssim,
    EvalMode, EvalOptions, Split, TileSampler, PSNR_CAP_DB,
};
use flexmv_core::synthset::{
    render_tile, sample_asset, sample_input_pose, Color, Image, TiledGrid,
};
use flexmv_core::trainer::{sha256_hex, train, Dataset, DatasetRecord};
use flexmv_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

fn random_image(seed: u64, w: usize, h: usize, lo: f32, hi: f32) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image {
        width: w,
        height: h,
        data: (0..w * h * 3).map(|_| rng.random_range(lo..hi)).collect(),
    }
}

#[test]
fn psnr_reference_values() {
    let a = random_image(1, 16, 16, 0.0, 0.9);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    let b = Image {
        data: a.data.iter().map(|v| v + 0.1).collect(),
        ..a.clone()
    };
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    assert!((mse - 0.01).abs() < 1e-8);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    let small = random_image(2, 32, 32, 0.0, 1.0);
    let big = random_image(2, 64, 64, 0.0, 1.0);
    assert!(matches!(psnr(&big, &small), Err(Error::Domain(_))));
}

#[test]
fn psnr_falls_as_noise_grows() {
    let a = random_image(3, 32, 32, 0.2, 0.8);
    let noise = random_image(4, 32, 32, -1.0, 1.0);
    let mut last = f64::INFINITY;
    for amp in [0.01f32, 0.03, 0.06, 0.1, 0.2] {
        let b = Image {
            data: a
                .data
                .iter()
                .zip(&noise.data)
                .map(|(x, n)| x + amp * n)
                .collect(),
            ..a.clone()
        };
        let p = psnr(&a, &b).unwrap();
        assert!(p < last);
        last = p;
    }
}

/// SSIM by direct summation over every 11x11 window position.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let sigma: f64 = 1.5;
    let mut w = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma);
            *v = (-d).exp();
            z += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    for ch in 0..3 {
        let px =
            |img: &Image, r: usize, c: usize| f64::from(img.data[(r * img.width + c) * 3 + ch]);
        let mut sum = 0.0;
        let mut count = 0;
        for r0 in 0..=a.height - 11 {
            for c0 in 0..=a.width - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = w[i][j] / z;
                        let (x, y) = (px(a, r0 + i, c0 + j), px(b, r0 + i, c0 + j));
                        mx += k * x;
                        my += k * y;
                        xx += k * x * x;
                        yy += k * y * y;
                        xy += k * x * y;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                sum += (2.0 * mx * my + c1) * (2.0 * cov + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_direct_window_summation() {
    let a = random_image(5, 20, 17, 0.0, 1.0);
    let b = Image {
        data: a
            .data
            .iter()
            .zip(&random_image(6, 20, 17, -0.2, 0.2).data)
            .map(|(x, n)| (x + n).clamp(0.0, 1.0))
            .collect(),
        ..a.clone()
    };
    let s = ssim(&a, &b).unwrap();
    assert!(
        (s - ssim_oracle(&a, &b)).abs() < 1e-9,
        "{s} vs {}",
        ssim_oracle(&a, &b)
    );
    assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-9);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_of_constant_black_against_white() {
    let black = Image::filled(16, 16, [0.0; 3]);
    let white = Image::filled(16, 16, [1.0; 3]);
    // zero variances leave only the luminance term C1 / (1 + C1)
    let c1 = 0.01f64 * 0.01;
    let s = ssim(&black, &white).unwrap();
    assert!((s - c1 / (1.0 + c1)).abs() < 1e-12);
    assert!(s < 0.05);
    assert!(matches!(
        ssim(&black, &Image::filled(16, 12, [0.0; 3])),
        Err(Error::Domain(_))
    ));
    assert!(matches!(
        ssim(
            &Image::filled(8, 8, [0.0; 3]),
            &Image::filled(8, 8, [0.0; 3])
        ),
        Err(Error::Domain(_))
    ));
}

#[test]
fn rendered_ground_truth_matches_its_own_attributes() {
    for s in 0..200 {
        let a = sample_asset(5000 + s);
        let p = sample_input_pose(5000 + s, 32);
        let tile = render_tile(&a, p.azimuth_deg, 5.0).unwrap();
        let m = attribute_match(&tile, &AttributeMap::from_asset(&a), &a).unwrap();
        assert_eq!(
            m.rate,
            1.0,
            "asset {s}: {:?}",
            m.checks.iter().filter(|c| !c.matched).collect::<Vec<_>>()
        );
        assert_eq!(m.checks.len(), 1 + 2 * a.parts.len());
    }
}

#[test]
fn wrong_expectations_are_detected() {
    let mut a = sample_asset(17);
    a.body_color = Color::Blue;
    let tile = render_tile(&a, 40.0, 5.0).unwrap();
    let mut expected = AttributeMap::from_asset(&a);
    expected.body_color = Color::Red;
    let m = attribute_match(&tile, &expected, &a).unwrap();
    let body = m.get("body_color").unwrap();
    assert!(!body.matched);
    assert_eq!(body.observed, "blue");
    assert!(m.rate < 1.0);
    // a blank image has no parts anywhere
    let with_part = (0..)
        .map(sample_asset)
        .find(|a| !a.parts.is_empty())
        .unwrap();
    let blank = TiledGrid::from_image(Image::filled(64, 64, [0.5; 3]), 0.0, 5.0).unwrap();
    let m = attribute_match(&blank, &AttributeMap::from_asset(&with_part), &with_part).unwrap();
    assert!(m
        .checks
        .iter()
        .filter(|c| c.attribute.ends_with("presence"))
        .all(|c| !c.matched));
    // the grammar cannot express an expectation without a body color
    assert!(parse_caption("").is_err());
    let mut extra = AttributeMap::from_asset(&with_part);
    let geometry = with_part.without_parts();
    extra.parts.truncate(1);
    assert!(matches!(
        attribute_match(&blank, &extra, &geometry),
        Err(Error::Domain(_))
    ));
}

#[test]
fn specular_statistic_grows_with_metallic() {
    for s in 0..100 {
        let mut a = sample_asset(9000 + s);
        let az = sample_input_pose(9000 + s, 32).azimuth_deg;
        a.metallic = 0.1;
        let low = specular_statistic(&render_tile(&a, az, 5.0).unwrap());
        a.metallic = 0.9;
        let high = specular_statistic(&render_tile(&a, az, 5.0).unwrap());
        assert!(
            high > low,
            "asset {s}: {high} <= {low} (roughness {})",
            a.roughness
        );
    }
}

#[test]
fn specular_statistic_basics() {
    let flat = TiledGrid::from_image(Image::filled(64, 64, [0.9, 0.1, 0.1]), 0.0, 5.0).unwrap();
    assert_eq!(specular_statistic(&flat), 0.0);
    let a = sample_asset(3);
    let tile = render_tile(&a, 10.0, 5.0).unwrap();
    let views: Vec<Image> = (0..4).map(|q| tile.quadrant(q)).collect();
    let shuffled = TiledGrid::from_quadrants(
        [
            views[3].clone(),
            views[0].clone(),
            views[2].clone(),
            views[1].clone(),
        ],
        tile.base_azimuth_deg,
        tile.quadrant_poses,
    );
    assert!((specular_statistic(&tile) - specular_statistic(&shuffled)).abs() < 1e-12);
}

/// Returns the ground-truth tile regardless of conditioning.
struct Oracle;

impl TileSampler for Oracle {
    fn sample(&self, record: &DatasetRecord, _cond: &ConditionBundle, _seed: u64) -> Result<Image> {
        Ok(record.target_tile.tile.clone())
    }
}

#[test]
fn oracle_sampler_scores_perfectly() {
    let d = tempdir().unwrap();
    flexmv_core::trainer::build_dataset(30, 8, 32, d.path(), false).unwrap();
    let data = Dataset::open(d.path()).unwrap();
    let idx = split_indices(&data, Split::All, None);
    let opts = EvalOptions {
        split: Split::All,
        ..EvalOptions::default()
    };
    let report = evaluate_with(&Oracle, &data, &idx, &opts, 64, None).unwrap();
    assert_eq!(report.rows.len(), 30 * 3);
    assert_eq!(report.sample_count, 30);
    for m in EvalMode::ALL {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.mode == m).collect();
        assert_eq!(rows.len(), 30);
        let ids: Vec<&str> = rows.iter().map(|r| r.id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        let agg = report.aggregate(m).unwrap();
        assert_eq!(agg.psnr_db, PSNR_CAP_DB);
        assert_eq!(agg.attribute_match_rate, 1.0);
        assert!((agg.ssim - 1.0).abs() < 1e-12);
        let spec: f64 = rows.iter().map(|r| r.specular).sum::<f64>();
        assert!(spec > 0.0);
        if m.uses_text() {
            assert!(agg.unseen_part_samples > 0);
            assert_eq!(agg.unseen_part_color_accuracy, Some(1.0));
        } else {
            assert_eq!(agg.unseen_part_samples, 0);
        }
    }
    let (json, csv_path) = report.write(&d.path().join("out")).unwrap();
    assert!(json
        .file_name()
        .unwrap()
        .to_string_lossy()
        .starts_with("eval_stepnone_image-only+text-only+both"));
    let back: flexmv_core::evalkit::EvalReport =
        serde_json::from_str(&fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(
        fs::read_to_string(csv_path).unwrap().lines().count(),
        1 + 90
    );
}

fn hashes(root: &std::path::Path) -> BTreeMap<String, String> {
    walk(root)
        .into_iter()
        .map(|p| (p.display().to_string(), sha256_hex(&fs::read(&p).unwrap())))
        .collect()
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn evaluate_checks_contamination_and_is_read_only() {
    let d = tempdir().unwrap();
    let cfg = tiny_run(d.path(), 20, 2);
    let ckpt = train(&cfg).unwrap();
    let before = hashes(d.path());
    let opts = EvalOptions {
        modes: vec![EvalMode::TextOnly],
        steps: 3,
        material_edit: true,
        ..EvalOptions::default()
    };
    let report = evaluate(&ckpt, &cfg.dataset_dir, &opts).unwrap();
    assert_eq!(report.checkpoint_step, Some(2));
    assert_eq!(report.rows.len(), 2);
    assert!(report
        .rows
        .iter()
        .all(|r| r.mode == EvalMode::TextOnly && r.material_direction_correct.is_some()));
    let agg = report.aggregate(EvalMode::TextOnly).unwrap();
    let mean = report
        .rows
        .iter()
        .map(|r| r.attribute_match_rate)
        .sum::<f64>()
        / 2.0;
    assert!((agg.attribute_match_rate - mean).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&agg.attribute_match_rate));
    assert_eq!(hashes(d.path()), before);
    for split in [Split::Train, Split::All] {
        let opts = EvalOptions {
            split,
            steps: 2,
            ..EvalOptions::default()
        };
        assert!(
            matches!(evaluate(&ckpt, &cfg.dataset_dir, &opts), Err(Error::Contamination(n)) if n > 0)
        );
    }
    let dup = EvalOptions {
        modes: vec![EvalMode::Both, EvalMode::Both],
        ..EvalOptions::default()
    };
    assert!(matches!(
        evaluate(&ckpt, &cfg.dataset_dir, &dup),
        Err(Error::Config(_))
    ));
    assert!("sideways".parse::<EvalMode>().is_err());
    assert_eq!("text-only".parse::<EvalMode>().unwrap(), EvalMode::TextOnly);
}
