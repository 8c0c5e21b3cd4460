use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CameraPose;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Body {
    Cube,
    Sphere,
    Cylinder,
    Cone,
}

impl Body {
    pub const ALL: [Body; 4] = [Body::Cube, Body::Sphere, Body::Cylinder, Body::Cone];

    pub fn name(self) -> &'static str {
        match self {
            Body::Cube => "cube",
            Body::Sphere => "sphere",
            Body::Cylinder => "cylinder",
            Body::Cone => "cone",
        }
    }
}

/// The fixed 8-color palette. RGB albedos are listed in [`Color::rgb`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Cyan,
    Magenta,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Cyan,
        Color::Magenta,
        Color::White,
        Color::Black,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    /// Linear albedo. Channels stay at or below 0.85 so highlights have headroom.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.12, 0.10],
            Color::Green => [0.15, 0.70, 0.15],
            Color::Blue => [0.12, 0.22, 0.85],
            Color::Yellow => [0.85, 0.78, 0.10],
            Color::Cyan => [0.10, 0.72, 0.80],
            Color::Magenta => [0.78, 0.12, 0.72],
            Color::White => [0.85, 0.85, 0.85],
            Color::Black => [0.06, 0.06, 0.06],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Handle,
    Spout,
    Antenna,
    Fin,
}

impl PartKind {
    pub const ALL: [PartKind; 4] = [
        PartKind::Handle,
        PartKind::Spout,
        PartKind::Antenna,
        PartKind::Fin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PartKind::Handle => "handle",
            PartKind::Spout => "spout",
            PartKind::Antenna => "antenna",
            PartKind::Fin => "fin",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
    Front,
    Back,
    Top,
}

impl Side {
    pub const ALL: [Side; 5] = [Side::Left, Side::Right, Side::Front, Side::Back, Side::Top];

    pub fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Front => "front",
            Side::Back => "back",
            Side::Top => "top",
        }
    }

    /// Outward normal in the object frame.
    pub fn normal(self) -> [f64; 3] {
        match self {
            Side::Left => [-1.0, 0.0, 0.0],
            Side::Right => [1.0, 0.0, 0.0],
            Side::Front => [0.0, 0.0, 1.0],
            Side::Back => [0.0, 0.0, -1.0],
            Side::Top => [0.0, 1.0, 0.0],
        }
    }

    /// Camera azimuth that looks straight at this side; `None` for the top.
    pub fn facing_azimuth(self) -> Option<f64> {
        match self {
            Side::Front => Some(0.0),
            Side::Right => Some(90.0),
            Side::Back => Some(180.0),
            Side::Left => Some(270.0),
            Side::Top => None,
        }
    }

    /// The horizontal side a camera at `azimuth_deg` looks at most directly.
    pub fn facing(azimuth_deg: f64) -> Side {
        let a = super::normalize_azimuth(azimuth_deg + 45.0);
        match (a / 90.0) as u32 {
            0 => Side::Front,
            1 => Side::Right,
            2 => Side::Back,
            _ => Side::Left,
        }
    }

    pub fn opposite(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
            Side::Front => Side::Back,
            Side::Back => Side::Front,
            Side::Top => Side::Top,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Smooth,
    Striped,
    Checkered,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::Smooth, Texture::Striped, Texture::Checkered];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Smooth => "smooth",
            Texture::Striped => "striped",
            Texture::Checkered => "checkered",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PartSpec {
    pub kind: PartKind,
    pub side: Side,
    pub color: Color,
    pub texture: Texture,
}

/// A parametric object: body primitive, attached parts and material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetSpec {
    pub body: Body,
    pub body_color: Color,
    pub parts: Vec<PartSpec>,
    pub metallic: f64,
    pub roughness: f64,
    pub scale: f64,
}

pub const MAX_PARTS: usize = 4;
pub const SCALE_RANGE: (f64, f64) = (0.5, 1.0);

impl AssetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.parts.len() > MAX_PARTS {
            return Err(Error::Domain(format!(
                "{} parts exceed the limit of {MAX_PARTS}",
                self.parts.len()
            )));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if self.parts[..i].iter().any(|q| q.side == p.side) {
                return Err(Error::Domain(format!(
                    "two parts attached on the {} side",
                    p.side.name()
                )));
            }
        }
        for (name, v) in [("metallic", self.metallic), ("roughness", self.roughness)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} {v} outside [0, 1]")));
            }
        }
        if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&self.scale) {
            return Err(Error::Domain(format!(
                "scale {} outside [0.5, 1]",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn part_on(&self, side: Side) -> Option<&PartSpec> {
        self.parts.iter().find(|p| p.side == side)
    }

    /// The same asset with every part removed.
    pub fn without_parts(&self) -> AssetSpec {
        AssetSpec {
            parts: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let a: AssetSpec = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }
}

/// Draws an asset uniformly over every declared field domain.
pub fn sample_asset(rng_seed: u64) -> AssetSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let body = Body::ALL[rng.random_range(0..Body::ALL.len())];
    let body_color = Color::ALL[rng.random_range(0..Color::ALL.len())];
    let n_parts = rng.random_range(0..=MAX_PARTS);
    let mut sides = Side::ALL;
    sides.shuffle(&mut rng);
    let mut parts: Vec<PartSpec> = sides[..n_parts]
        .iter()
        .map(|&side| PartSpec {
            kind: PartKind::ALL[rng.random_range(0..PartKind::ALL.len())],
            side,
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            texture: Texture::ALL[rng.random_range(0..Texture::ALL.len())],
        })
        .collect();
    parts.sort_by_key(|p| p.side);
    let metallic = rng.random_range(0.0..=1.0);
    let roughness = rng.random_range(0.0..=1.0);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    AssetSpec {
        body,
        body_color,
        parts,
        metallic,
        roughness,
        scale,
    }
}

/// Input-view pose: elevation uniform in `[-30, 30]`, azimuth uniform in `[0, 360)`.
pub fn sample_input_pose(rng_seed: u64, image_size: u32) -> CameraPose {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let elevation_deg = rng.random_range(-30.0..=30.0);
    let azimuth_deg = rng.random_range(0.0..360.0);
    CameraPose {
        elevation_deg,
        azimuth_deg,
        image_size,
    }
}
