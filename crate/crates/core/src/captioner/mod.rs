//! Grammar captions for assets: generation, merging into prompts, parsing
//! back into attributes, tokenization and token embedding.
//!
//! Global sentence: `A {color} {body} with a {kind} on the {side}, ... and a {kind} on the {side}.`
//! Local sentence: `The {kind} is {color} and {texture}.` When two parts share
//! a kind the side is prepended (`The left handle is ...`) so every local
//! sentence names exactly one part.

mod attributes;
mod embed;
mod parse;
mod vocab;

pub use attributes::{AttributeMap, Level, PartAttributes};
pub use embed::{TextEmbedder, TokenEmbedding};
pub use parse::parse_caption;
pub use vocab::{
    detokenize, normalize_prompt, TokenSeq, Vocabulary, BOS, DEFAULT_MAX_TOKENS, EOS, PAD,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthset::{AssetSpec, PartKind, PartSpec};

pub const LOW_THRESHOLD: f64 = 0.3;
pub const HIGH_THRESHOLD: f64 = 0.6;
pub const DEFAULT_KEEP_PROB: f64 = 0.5;

/// One global description, one local description per part, and material terms.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub global_desc: String,
    pub local_descs: Vec<String>,
    pub material_terms: Vec<String>,
}

fn article(kind: PartKind) -> &'static str {
    match kind {
        PartKind::Antenna => "an",
        _ => "a",
    }
}

fn part_phrase(p: &PartSpec) -> String {
    format!(
        "{} {} on the {}",
        article(p.kind),
        p.kind.name(),
        p.side.name()
    )
}

/// Joins phrases as `x`, `x and y`, or `x, y, and z`.
fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn generate_caption(asset: &AssetSpec) -> CaptionRecord {
    let mut global = format!("A {} {}", asset.body_color.name(), asset.body.name());
    if !asset.parts.is_empty() {
        let phrases: Vec<String> = asset.parts.iter().map(part_phrase).collect();
        global.push_str(" with ");
        global.push_str(&join_list(&phrases));
    }
    global.push('.');
    let local_descs = asset
        .parts
        .iter()
        .map(|p| {
            let shared = asset.parts.iter().filter(|q| q.kind == p.kind).count() > 1;
            let subject = if shared {
                format!("{} {}", p.side.name(), p.kind.name())
            } else {
                p.kind.name().to_string()
            };
            capitalize(&format!(
                "the {subject} is {} and {}.",
                p.color.name(),
                p.texture.name()
            ))
        })
        .collect();
    let material_terms =
        material_terms(asset.metallic, asset.roughness).expect("validated asset materials");
    CaptionRecord {
        global_desc: global,
        local_descs,
        material_terms,
    }
}

/// Material prompt terms: `low X` below 0.3, `high X` above 0.6, nothing in
/// between; metallic first, then roughness.
pub fn material_terms(metallic: f64, roughness: f64) -> Result<Vec<String>> {
    let mut terms = Vec::new();
    for (name, v) in [("metallic", metallic), ("roughness", roughness)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} {v} outside [0, 1]")));
        }
        match Level::of(v) {
            Level::Low => terms.push(format!("low {name}")),
            Level::High => terms.push(format!("high {name}")),
            Level::Mid => {}
        }
    }
    Ok(terms)
}

/// Global description, then the locals kept with probability `keep_prob`
/// each, then the material terms, all space-joined.
pub fn merge_caption(rec: &CaptionRecord, rng_seed: u64, keep_prob: f64) -> Result<String> {
    if !(0.0..=1.0).contains(&keep_prob) {
        return Err(Error::Domain(format!(
            "keep_prob {keep_prob} outside [0, 1]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pieces = vec![rec.global_desc.clone()];
    for local in &rec.local_descs {
        if rng.random::<f64>() < keep_prob {
            pieces.push(local.clone());
        }
    }
    pieces.extend(rec.material_terms.iter().cloned());
    Ok(pieces.join(" "))
}

impl CaptionRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
