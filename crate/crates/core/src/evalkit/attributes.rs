use serde::{Deserialize, Serialize};

use crate::captioner::AttributeMap;
use crate::error::{Error, Result};
use crate::synthset::{
    normalize_azimuth, render_layers, render_view, AssetSpec, Color, Image, LightParams, ObjectId,
    ShadingLayers, Side, TiledGrid,
};

/// Pixels of one quadrant covered by one object, with the shading needed to
/// predict them under any albedo.
struct Region<'a> {
    view: Image,
    layers: &'a ShadingLayers,
    mask: Vec<bool>,
}

impl Region<'_> {
    /// Squared error between the region and its rendering with `albedo`.
    fn error(&self, albedo: [f64; 3]) -> f64 {
        let mut e = 0.0;
        for (i, (px, _)) in self
            .view
            .data
            .chunks(3)
            .zip(&self.mask)
            .enumerate()
            .filter(|(_, (_, &m))| m)
        {
            let pred = self.layers.shade_with(i, albedo);
            e += (0..3)
                .map(|c| f64::from(px[c] - pred[c]).powi(2))
                .sum::<f64>();
        }
        e
    }

    fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

/// Palette color whose rendering best explains the regions; ties go to
/// palette order. `None` when the regions cover no pixels.
fn nearest_color(regions: &[Region]) -> Option<Color> {
    if regions.iter().all(Region::is_empty) {
        return None;
    }
    let score = |c: Color| regions.iter().map(|r| r.error(c.rgb())).sum::<f64>();
    Color::ALL
        .into_iter()
        .map(|c| (score(c), c))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCheck {
    /// `body_color`, `part.{side}.presence` or `part.{side}.color`.
    pub attribute: String,
    pub expected: String,
    pub observed: String,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeMatch {
    pub checks: Vec<AttributeCheck>,
    pub rate: f64,
}

impl AttributeMatch {
    pub fn get(&self, attribute: &str) -> Option<&AttributeCheck> {
        self.checks.iter().find(|c| c.attribute == attribute)
    }
}

/// Tile quadrant whose azimuth is closest to the side's facing direction;
/// the input-matching quadrant for the top.
pub fn side_quadrant(tile: &TiledGrid, side: Side) -> usize {
    let Some(face) = side.facing_azimuth() else {
        return 0;
    };
    let dist = |q: usize| {
        let d = normalize_azimuth(tile.quadrant_poses[q].azimuth_deg - face);
        d.min(360.0 - d)
    };
    (0..4)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .expect("four quadrants")
}

/// Image tests of the attributes in `expected` against a tile.
///
/// `geometry` supplies the shape, scale and part placement used to render
/// the per-quadrant shading and the part-free baseline; colors and
/// materials are taken from `expected`.
///
/// - body color: palette color whose rendering is nearest the tile over the
///   body pixels of all quadrants
/// - part presence: inside the part mask of the side-facing quadrant, the
///   tile is closer to the rendered object with the part than to the
///   part-free baseline
/// - part color: nearest palette rendering inside that mask
pub fn attribute_match(
    tile: &TiledGrid,
    expected: &AttributeMap,
    geometry: &AssetSpec,
) -> Result<AttributeMatch> {
    let reference = expected_asset(expected, geometry)?;
    let light = LightParams::default();
    let layers = (0..4)
        .map(|q| render_layers(&reference, &tile.quadrant_poses[q], &light))
        .collect::<Result<Vec<_>>>()?;
    let region = |q: usize, id: ObjectId| Region {
        view: tile.quadrant(q),
        layers: &layers[q],
        mask: layers[q].ids.iter().map(|&o| o == id).collect(),
    };
    let mut checks = Vec::new();
    let body: Vec<Region> = (0..4).map(|q| region(q, ObjectId::BODY)).collect();
    let observed = nearest_color(&body);
    checks.push(AttributeCheck {
        attribute: "body_color".into(),
        expected: expected.body_color.name().into(),
        observed: observed.map_or("none", |c| c.name()).into(),
        matched: observed == Some(expected.body_color),
    });
    for part in &expected.parts {
        let k = reference
            .parts
            .iter()
            .position(|p| p.side == part.side)
            .expect("parts copied from expected");
        let target = ObjectId::part(k);
        let area = |q: usize| layers[q].ids.iter().filter(|&&id| id == target).count();
        let mut q = side_quadrant(tile, part.side);
        if area(q) == 0 {
            q = (0..4).max_by_key(|&q| area(q)).expect("four quadrants");
        }
        let r = region(q, target);
        let pose = &tile.quadrant_poses[q];
        let with = render_view(&reference, pose, &light)?.pixels;
        let without = render_view(&reference.without_parts(), pose, &light)?.pixels;
        let dist = |other: &Image| -> f64 {
            r.view
                .data
                .chunks(3)
                .zip(other.data.chunks(3))
                .zip(&r.mask)
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| f64::from(x - y).powi(2))
                        .sum::<f64>()
                })
                .sum()
        };
        let present = !r.is_empty() && dist(&with) < dist(&without);
        let side = part.side.name();
        checks.push(AttributeCheck {
            attribute: format!("part.{side}.presence"),
            expected: format!("{} on the {side}", part.kind.name()),
            observed: if present {
                "present".into()
            } else {
                "absent".into()
            },
            matched: present,
        });
        if let Some(color) = part.color {
            let observed = nearest_color(std::slice::from_ref(&r));
            checks.push(AttributeCheck {
                attribute: format!("part.{side}.color"),
                expected: color.name().into(),
                observed: observed.map_or("none", |c| c.name()).into(),
                matched: observed == Some(color),
            });
        }
    }
    let rate = checks.iter().filter(|c| c.matched).count() as f64 / checks.len() as f64;
    Ok(AttributeMatch { checks, rate })
}

/// `geometry` with the colors, textures and materials named by `expected`.
fn expected_asset(expected: &AttributeMap, geometry: &AssetSpec) -> Result<AssetSpec> {
    let mut a = geometry.clone();
    a.body = expected.body;
    a.body_color = expected.body_color;
    a.parts.clear();
    for p in &expected.parts {
        let g = geometry.part_on(p.side).ok_or_else(|| {
            Error::Domain(format!(
                "expected part on the {} side is absent from the geometry",
                p.side.name()
            ))
        })?;
        a.parts.push(crate::synthset::PartSpec {
            kind: p.kind,
            side: p.side,
            color: p.color.unwrap_or(g.color),
            texture: p.texture.unwrap_or(g.texture),
        });
    }
    a.metallic = level_value(expected.metallic_level, geometry.metallic);
    a.roughness = level_value(expected.roughness_level, geometry.roughness);
    a.validate()?;
    Ok(a)
}

/// Keeps the geometry's value when it agrees with the level, otherwise a
/// representative value of the level.
fn level_value(level: crate::captioner::Level, actual: f64) -> f64 {
    use crate::captioner::Level;
    if Level::of(actual) == level {
        return actual;
    }
    match level {
        Level::Low => 0.15,
        Level::Mid => 0.45,
        Level::High => 0.8,
    }
}
