use serde::{Deserialize, Serialize};

use super::{HIGH_THRESHOLD, LOW_THRESHOLD};
use crate::synthset::{AssetSpec, Body, Color, PartKind, Side, Texture};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
}

impl Level {
    pub fn of(value: f64) -> Level {
        if value < LOW_THRESHOLD {
            Level::Low
        } else if value > HIGH_THRESHOLD {
            Level::High
        } else {
            Level::Mid
        }
    }
}

/// A part as far as a caption describes it. Color and texture stay unset
/// when the part's local sentence was dropped from the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartAttributes {
    pub kind: PartKind,
    pub side: Side,
    pub color: Option<Color>,
    pub texture: Option<Texture>,
}

/// Discrete attributes recoverable from a caption.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeMap {
    pub body: Body,
    pub body_color: Color,
    pub parts: Vec<PartAttributes>,
    pub metallic_level: Level,
    pub roughness_level: Level,
}

impl AttributeMap {
    /// Thresholded attributes of an asset, parts in declaration order.
    pub fn from_asset(asset: &AssetSpec) -> Self {
        Self {
            body: asset.body,
            body_color: asset.body_color,
            parts: asset
                .parts
                .iter()
                .map(|p| PartAttributes {
                    kind: p.kind,
                    side: p.side,
                    color: Some(p.color),
                    texture: Some(p.texture),
                })
                .collect(),
            metallic_level: Level::of(asset.metallic),
            roughness_level: Level::of(asset.roughness),
        }
    }

    pub fn part_on(&self, side: Side) -> Option<&PartAttributes> {
        self.parts.iter().find(|p| p.side == side)
    }
}
