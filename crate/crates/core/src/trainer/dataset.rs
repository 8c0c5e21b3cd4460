use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::captioner::{generate_caption, merge_caption, CaptionRecord};
use crate::error::{Error, IoContext, Result};
use crate::synthset::{
    render_tile_with, render_view, sample_asset, sample_input_pose, AssetSpec, CameraPose, Image,
    LightParams, TiledGrid, ViewImage, DEFAULT_OUTPUT_ELEVATION,
};

pub const CODE_VERSION: &str = concat!("flexmv-core ", env!("CARGO_PKG_VERSION"));
pub const MANIFEST_FILE: &str = "manifest.json";
const SUBDIRS: [&str; 4] = ["assets", "inputs", "tiles", "captions"];

/// Ids, per-file SHA-256 hashes and generator settings of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub generator_seed: u64,
    pub count: usize,
    pub view_size: usize,
    pub records: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Path relative to the dataset root -> lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the serialized manifest.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).at(&path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Ids ordered by the hash of their asset file; the last tenth
    /// (rounded up) is held out.
    pub fn split(&self) -> (Vec<String>, Vec<String>) {
        let mut keyed: Vec<(&str, &str)> = self
            .records
            .iter()
            .map(|r| {
                (
                    r.files
                        .get(&asset_path(&r.id))
                        .map(String::as_str)
                        .unwrap_or(""),
                    r.id.as_str(),
                )
            })
            .collect();
        keyed.sort();
        let held = self.records.len().div_ceil(10);
        let cut = keyed.len() - held;
        let ids = |s: &[(&str, &str)]| s.iter().map(|(_, id)| id.to_string()).collect();
        (ids(&keyed[..cut]), ids(&keyed[cut..]))
    }
}

/// One training example as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub asset_id: String,
    pub asset: AssetSpec,
    pub input_view: ViewImage,
    /// Base azimuth equals the input view azimuth.
    pub target_tile: TiledGrid,
    pub caption: CaptionRecord,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn asset_path(id: &str) -> String {
    format!("assets/{id}.json")
}

fn record_files(id: &str) -> [String; 6] {
    [
        asset_path(id),
        format!("inputs/{id}.png"),
        format!("inputs/{id}.pose.json"),
        format!("tiles/{id}.png"),
        format!("captions/{id}.txt"),
        format!("captions/{id}.record.json"),
    ]
}

/// Record `i` of a dataset generated with `seed`.
pub fn generate_record(seed: u64, index: usize, view_size: usize) -> Result<DatasetRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let asset_seed: u64 = rng.random();
    let pose_seed: u64 = rng.random();
    let asset = sample_asset(asset_seed);
    let pose = sample_input_pose(pose_seed, view_size as u32);
    let light = LightParams::default();
    let input_view = render_view(&asset, &pose, &light)?;
    let target_tile = render_tile_with(
        &asset,
        pose.azimuth_deg,
        DEFAULT_OUTPUT_ELEVATION,
        view_size as u32,
        &light,
    )?;
    let caption = generate_caption(&asset);
    Ok(DatasetRecord {
        asset_id: format!("{index:06}"),
        asset,
        input_view,
        target_tile,
        caption,
    })
}

fn encode_record(rec: &DatasetRecord) -> Result<Vec<(String, Vec<u8>)>> {
    let [asset, input, pose, tile, text, caption] = record_files(&rec.asset_id);
    Ok(vec![
        (asset, rec.asset.to_json()?.into_bytes()),
        (input, rec.input_view.pixels.to_png_bytes()?),
        (
            pose,
            serde_json::to_string_pretty(&rec.input_view.pose)?.into_bytes(),
        ),
        (tile, rec.target_tile.tile.to_png_bytes()?),
        (text, merge_caption(&rec.caption, 0, 1.0)?.into_bytes()),
        (caption, rec.caption.to_json()?.into_bytes()),
    ])
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir.display().to_string(), e)),
    }
}

/// Renders, captions and writes `count` records under `out_dir`, then the
/// manifest. A non-empty `out_dir` is refused unless `overwrite` is set, in
/// which case the previous dataset files are removed first.
pub fn build_dataset(
    count: usize,
    seed: u64,
    view_size: usize,
    out_dir: &Path,
    overwrite: bool,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("dataset count must be at least 1".into()));
    }
    if is_nonempty_dir(out_dir)? {
        if !overwrite {
            return Err(Error::DirectoryNotEmpty(out_dir.to_path_buf()));
        }
        for sub in SUBDIRS {
            let p = out_dir.join(sub);
            if p.exists() {
                fs::remove_dir_all(&p).at(&p)?;
            }
        }
        let m = out_dir.join(MANIFEST_FILE);
        if m.exists() {
            fs::remove_file(&m).at(&m)?;
        }
    }
    for sub in SUBDIRS {
        let p = out_dir.join(sub);
        fs::create_dir_all(&p).at(&p)?;
    }
    let records: Vec<ManifestEntry> = (0..count)
        .into_par_iter()
        .map(|i| {
            let rec = generate_record(seed, i, view_size)?;
            let mut files = BTreeMap::new();
            for (rel, bytes) in encode_record(&rec)? {
                let path = out_dir.join(&rel);
                fs::write(&path, &bytes).at(&path)?;
                files.insert(rel, sha256_hex(&bytes));
            }
            Ok(ManifestEntry {
                id: rec.asset_id,
                files,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        code_version: CODE_VERSION.into(),
        generator_seed: seed,
        count,
        view_size,
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_json()?).at(&path)?;
    Ok(manifest)
}

/// A verified dataset directory loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    /// Loads every record after checking each file against its manifest hash.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = Manifest::load(root)?;
        if manifest.records.len() != manifest.count {
            return Err(Error::DatasetCorruption(format!(
                "manifest lists {} records but declares {}",
                manifest.records.len(),
                manifest.count
            )));
        }
        let records = manifest
            .records
            .par_iter()
            .map(|entry| load_record(root, entry, manifest.view_size))
            .collect::<Result<_>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            records,
        })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.asset_id == id)
    }

    /// Record indices of the training and held-out splits, in manifest order.
    pub fn split_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let (_, held) = self.manifest.split();
        let held: std::collections::BTreeSet<&str> = held.iter().map(String::as_str).collect();
        (0..self.records.len()).partition(|&i| !held.contains(self.records[i].asset_id.as_str()))
    }
}

fn load_record(root: &Path, entry: &ManifestEntry, view_size: usize) -> Result<DatasetRecord> {
    let expected = record_files(&entry.id);
    let mut bytes = BTreeMap::new();
    for rel in &expected {
        let want = entry.files.get(rel).ok_or_else(|| {
            Error::DatasetCorruption(format!("manifest entry {} lacks {rel}", entry.id))
        })?;
        let path = root.join(rel);
        let data = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DatasetCorruption(format!("{rel} is missing")),
            _ => Error::io(path.display().to_string(), e),
        })?;
        if &sha256_hex(&data) != want {
            return Err(Error::DatasetCorruption(format!(
                "{rel} does not match its manifest hash"
            )));
        }
        bytes.insert(rel.as_str(), data);
    }
    let text = |rel: &str| {
        String::from_utf8(bytes[rel].clone())
            .map_err(|e| Error::DatasetCorruption(format!("{rel}: {e}")))
    };
    let [asset, input, pose, tile, _, caption] = &expected;
    let asset = AssetSpec::from_json(&text(asset)?)?;
    let pose: CameraPose = serde_json::from_str(&text(pose)?)?;
    let input = Image::from_png_bytes(&bytes[input.as_str()])?;
    let tile = Image::from_png_bytes(&bytes[tile.as_str()])?;
    if input.width != view_size || tile.width != 2 * view_size {
        return Err(Error::DatasetCorruption(format!(
            "{} has images of the wrong size",
            entry.id
        )));
    }
    let target_tile = TiledGrid::from_image(tile, pose.azimuth_deg, DEFAULT_OUTPUT_ELEVATION)?;
    Ok(DatasetRecord {
        asset_id: entry.id.clone(),
        asset,
        input_view: ViewImage {
            pixels: input,
            pose,
        },
        target_tile,
        caption: CaptionRecord::from_json(&text(caption)?)?,
    })
}
