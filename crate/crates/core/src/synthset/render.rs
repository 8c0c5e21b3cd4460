//! Deterministic sphere-traced orthographic renderer.
//!
//! Shading is Lambert diffuse plus a white Blinn-Phong lobe: exponent
//! `max(2 / (roughness² + 1e-3) - 2, 0)`, weight `mix(0.04, 1, metallic)`,
//! scaled by the cosine term. The single directional light is fixed in the
//! camera frame, and boundaries between two different object surfaces are
//! darkened so every attached part changes at least its outline pixels.

use super::asset::{AssetSpec, Body, PartKind, Side, Texture};
use super::image::{Image, ViewImage};
use super::{quadrant_azimuths, CameraPose};
use crate::error::{Error, Result};

pub const DEFAULT_VIEW_SIZE: u32 = 32;
pub const DEFAULT_OUTPUT_ELEVATION: f64 = 5.0;
/// Half-width of the orthographic view volume in object units.
pub const VIEW_HALF_EXTENT: f64 = 1.25;
pub const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];

const SPEC_EPS: f64 = 1e-3;
/// Angular size of the light. Widens the highlight so a mirror-smooth
/// surface still shows one a few pixels across.
const LIGHT_SPREAD: f64 = 0.25;
/// Shading sub-samples per pixel side.
const SUPERSAMPLE: usize = 4;
const OUTLINE_FACTOR: f64 = 0.6;
const TEXTURE_DARK: f64 = 0.6;
const TEXTURE_PERIOD: f64 = 0.12;
const MAX_MARCH_STEPS: usize = 192;
const HIT_EPS: f64 = 1e-5;
const CAMERA_DISTANCE: f64 = 4.0;

/// `0` is the body, `k + 1` is `asset.parts[k]`, [`ObjectId::BACKGROUND`] is empty space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectId(pub u8);

impl ObjectId {
    pub const BODY: ObjectId = ObjectId(0);
    pub const BACKGROUND: ObjectId = ObjectId(u8::MAX);

    pub fn part(index: usize) -> ObjectId {
        ObjectId(index as u8 + 1)
    }

    pub fn is_background(self) -> bool {
        self == Self::BACKGROUND
    }
}

/// Directional light expressed in the camera frame (`x` right, `y` up, `z`
/// toward the viewer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LightParams {
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
    /// Scale on the shaded color so the brightest highlight stays below 1.
    pub exposure: f64,
}

impl Default for LightParams {
    fn default() -> Self {
        Self {
            direction: [0.0, 0.45, 0.89],
            ambient: 0.45,
            diffuse: 0.55,
            exposure: 0.54,
        }
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn mul(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: V3) -> V3 {
    let n = norm(a);
    if n > 0.0 {
        mul(a, 1.0 / n)
    } else {
        a
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    RoundBox {
        half: V3,
        round: f64,
    },
    Sphere {
        r: f64,
    },
    /// Axis along local `y`.
    Cylinder {
        r: f64,
        half_h: f64,
        round: f64,
    },
    /// Axis along local `y`; `r_bottom` at `-half_h`, `r_top` at `+half_h`.
    Cone {
        r_bottom: f64,
        r_top: f64,
        half_h: f64,
        round: f64,
    },
}

impl Shape {
    fn sdf(&self, p: V3) -> f64 {
        match *self {
            Shape::RoundBox { half, round } => {
                let q = [
                    p[0].abs() - half[0] + round,
                    p[1].abs() - half[1] + round,
                    p[2].abs() - half[2] + round,
                ];
                let outside = norm([q[0].max(0.0), q[1].max(0.0), q[2].max(0.0)]);
                outside + q[0].max(q[1]).max(q[2]).min(0.0) - round
            }
            Shape::Sphere { r } => norm(p) - r,
            Shape::Cylinder { r, half_h, round } => {
                let dx = (p[0] * p[0] + p[2] * p[2]).sqrt() - (r - round);
                let dy = p[1].abs() - (half_h - round);
                dx.max(dy).min(0.0) + (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt() - round
            }
            Shape::Cone {
                r_bottom,
                r_top,
                half_h,
                round,
            } => {
                let (r1, r2, h) = (r_bottom - round, r_top - round, half_h - round);
                let q = [(p[0] * p[0] + p[2] * p[2]).sqrt(), p[1]];
                let k1 = [r2, h];
                let k2 = [r2 - r1, 2.0 * h];
                let ca = [
                    q[0] - q[0].min(if q[1] < 0.0 { r1 } else { r2 }),
                    q[1].abs() - h,
                ];
                let k2k2 = k2[0] * k2[0] + k2[1] * k2[1];
                let t = (((k1[0] - q[0]) * k2[0] + (k1[1] - q[1]) * k2[1]) / k2k2).clamp(0.0, 1.0);
                let cb = [q[0] - k1[0] + k2[0] * t, q[1] - k1[1] + k2[1] * t];
                let s = if cb[0] < 0.0 && ca[1] < 0.0 {
                    -1.0
                } else {
                    1.0
                };
                let d2 = (ca[0] * ca[0] + ca[1] * ca[1]).min(cb[0] * cb[0] + cb[1] * cb[1]);
                s * d2.sqrt() - round
            }
        }
    }
}

/// Orthonormal frame: `axes[i]` is local axis `i` expressed in object coordinates.
#[derive(Clone, Copy, Debug)]
struct Frame {
    origin: V3,
    axes: [V3; 3],
}

impl Frame {
    fn identity() -> Self {
        Self {
            origin: [0.0; 3],
            axes: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    fn to_local(&self, p: V3) -> V3 {
        let d = sub(p, self.origin);
        [
            dot(d, self.axes[0]),
            dot(d, self.axes[1]),
            dot(d, self.axes[2]),
        ]
    }

    fn to_world(&self, local: V3) -> V3 {
        let mut out = self.origin;
        for i in 0..3 {
            out = add(out, mul(self.axes[i], local[i]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Prim {
    shape: Shape,
    frame: Frame,
    id: ObjectId,
    texture: Texture,
    /// Part frame used for texture coordinates, in units of asset scale.
    tex_frame: Frame,
    tex_scale: f64,
}

struct Scene {
    prims: Vec<Prim>,
    metallic: f64,
    roughness: f64,
}

fn body_shape(body: Body, s: f64) -> Shape {
    match body {
        Body::Cube => Shape::RoundBox {
            half: [0.55 * s; 3],
            round: 0.12 * s,
        },
        Body::Sphere => Shape::Sphere { r: 0.65 * s },
        Body::Cylinder => Shape::Cylinder {
            r: 0.55 * s,
            half_h: 0.55 * s,
            round: 0.1 * s,
        },
        Body::Cone => Shape::Cone {
            r_bottom: 0.6 * s,
            r_top: 0.06 * s,
            half_h: 0.6 * s,
            round: 0.05 * s,
        },
    }
}

/// Distance from the body centre to its surface along a side normal.
fn attach_distance(body: Body, side: Side, s: f64) -> f64 {
    let top = side == Side::Top;
    s * match body {
        Body::Cube => 0.55,
        Body::Sphere => 0.65,
        Body::Cylinder => 0.55,
        Body::Cone if top => 0.6,
        Body::Cone => 0.33,
    }
}

/// Part frame: local `x` tangent, `y` along the part's up, `z` outward.
fn part_frame(body: Body, side: Side, s: f64) -> Frame {
    let n = side.normal();
    let up = if side == Side::Top {
        [0.0, 0.0, 1.0]
    } else {
        [0.0, 1.0, 0.0]
    };
    let t = cross(up, n);
    Frame {
        origin: mul(n, attach_distance(body, side, s)),
        axes: [t, up, n],
    }
}

/// Primitive placements `(shape, centre, cylinder-like)` in part-frame units of scale.
fn part_prims(kind: PartKind) -> Vec<(Shape, V3, bool)> {
    let rb = |hx: f64, hy: f64, hz: f64, round: f64| Shape::RoundBox {
        half: [hx, hy, hz],
        round,
    };
    match kind {
        PartKind::Handle => vec![
            (rb(0.12, 0.06, 0.19, 0.02), [0.0, 0.2, 0.09], false),
            (rb(0.12, 0.06, 0.19, 0.02), [0.0, -0.2, 0.09], false),
            (rb(0.12, 0.26, 0.06, 0.02), [0.0, 0.0, 0.28], false),
        ],
        PartKind::Spout => vec![(
            Shape::Cylinder {
                r: 0.15,
                half_h: 0.22,
                round: 0.03,
            },
            [0.0, 0.0, 0.12],
            true,
        )],
        PartKind::Antenna => vec![
            (rb(0.05, 0.05, 0.22, 0.01), [0.0, 0.0, 0.12], false),
            (Shape::Sphere { r: 0.13 }, [0.0, 0.0, 0.42], false),
        ],
        PartKind::Fin => vec![(rb(0.1, 0.24, 0.2, 0.02), [0.0, 0.0, 0.1], false)],
    }
}

fn scale_shape(shape: Shape, s: f64) -> Shape {
    match shape {
        Shape::RoundBox { half, round } => Shape::RoundBox {
            half: mul(half, s),
            round: round * s,
        },
        Shape::Sphere { r } => Shape::Sphere { r: r * s },
        Shape::Cylinder { r, half_h, round } => Shape::Cylinder {
            r: r * s,
            half_h: half_h * s,
            round: round * s,
        },
        Shape::Cone {
            r_bottom,
            r_top,
            half_h,
            round,
        } => Shape::Cone {
            r_bottom: r_bottom * s,
            r_top: r_top * s,
            half_h: half_h * s,
            round: round * s,
        },
    }
}

fn build_scene(asset: &AssetSpec) -> Scene {
    let s = asset.scale;
    let mut prims = vec![Prim {
        shape: body_shape(asset.body, s),
        frame: Frame::identity(),
        id: ObjectId::BODY,
        texture: Texture::Smooth,
        tex_frame: Frame::identity(),
        tex_scale: s,
    }];
    for (k, part) in asset.parts.iter().enumerate() {
        let pf = part_frame(asset.body, part.side, s);
        for (shape, centre, along_normal) in part_prims(part.kind) {
            let origin = pf.to_world(mul(centre, s));
            // cylinders run along the part's outward axis
            let axes = if along_normal {
                [pf.axes[0], pf.axes[2], pf.axes[1]]
            } else {
                pf.axes
            };
            prims.push(Prim {
                shape: scale_shape(shape, s),
                frame: Frame { origin, axes },
                id: ObjectId::part(k),
                texture: part.texture,
                tex_frame: pf,
                tex_scale: s,
            });
        }
    }
    Scene {
        prims,
        metallic: asset.metallic,
        roughness: asset.roughness,
    }
}

impl Scene {
    /// Signed distance and index of the nearest primitive. Ties keep the
    /// earliest primitive so the result never depends on float noise ordering.
    fn sdf(&self, p: V3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, prim) in self.prims.iter().enumerate() {
            let d = prim.shape.sdf(prim.frame.to_local(p));
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    fn normal(&self, p: V3) -> V3 {
        let h = 1e-5;
        let mut n = [0.0; 3];
        for (i, ni) in n.iter_mut().enumerate() {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            *ni = self.sdf(a).0 - self.sdf(b).0;
        }
        normalize(n)
    }

    fn march(&self, origin: V3, dir: V3) -> Option<(V3, usize)> {
        let mut t = 0.0;
        let t_max = 2.0 * CAMERA_DISTANCE;
        for _ in 0..MAX_MARCH_STEPS {
            let p = add(origin, mul(dir, t));
            let (d, idx) = self.sdf(p);
            if d < HIT_EPS {
                return Some((p, idx));
            }
            t += d;
            if t > t_max {
                return None;
            }
        }
        None
    }
}

struct Camera {
    right: V3,
    up: V3,
    toward: V3,
}

impl Camera {
    fn new(pose: &CameraPose) -> Self {
        let (a, b) = (
            pose.elevation_deg.to_radians(),
            pose.azimuth_deg.to_radians(),
        );
        let toward = [a.cos() * b.sin(), a.sin(), a.cos() * b.cos()];
        let right = [b.cos(), 0.0, -b.sin()];
        let up = cross(toward, right);
        Self { right, up, toward }
    }

    fn to_camera(&self, v: V3) -> V3 {
        [dot(v, self.right), dot(v, self.up), dot(v, self.toward)]
    }
}

fn texture_factor(prim: &Prim, p: V3) -> f64 {
    let q = mul(
        prim.tex_frame.to_local(p),
        1.0 / (prim.tex_scale * TEXTURE_PERIOD),
    );
    let cell = |v: f64| v.floor() as i64;
    let dark = match prim.texture {
        Texture::Smooth => false,
        Texture::Striped => cell(q[1]).rem_euclid(2) == 1,
        Texture::Checkered => (cell(q[0]) + cell(q[1]) + cell(q[2])).rem_euclid(2) == 1,
    };
    if dark {
        TEXTURE_DARK
    } else {
        1.0
    }
}

/// Texture factor, diffuse factor and specular term at a surface point.
fn shade(scene: &Scene, prim: &Prim, p: V3, cam: &Camera, light: &LightParams) -> (f64, f64, f64) {
    let n = cam.to_camera(scene.normal(p));
    let l = normalize(light.direction);
    let h = normalize(add(l, [0.0, 0.0, 1.0]));
    let nl = dot(n, l).max(0.0);
    let nh = dot(n, h).max(0.0);
    let diffuse = light.ambient + light.diffuse * nl;
    let r2 = scene.roughness * scene.roughness + LIGHT_SPREAD * LIGHT_SPREAD;
    let exponent = (2.0 / (r2 + SPEC_EPS) - 2.0).max(0.0);
    let weight = 0.04 + (1.0 - 0.04) * scene.metallic;
    let spec = weight * nh.powf(exponent) * nl;
    (texture_factor(prim, p), diffuse, spec)
}

/// Per-pixel shading terms of a view. A pixel with albedo `c` renders as
/// `clamp((c * albedo_scale + specular) * gain)`, so the image
/// under any recoloring follows without marching rays again.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadingLayers {
    pub size: usize,
    pub ids: Vec<ObjectId>,
    /// Texture darkening times diffuse light, scaling the albedo.
    pub albedo_scale: Vec<f64>,
    pub specular: Vec<f64>,
    /// Exposure times the outline darkening.
    pub gain: Vec<f64>,
}

impl ShadingLayers {
    /// Color of pixel `i` if its surface had albedo `albedo`.
    pub fn shade_with(&self, i: usize, albedo: [f64; 3]) -> [f32; 3] {
        albedo.map(|a| {
            ((a * self.albedo_scale[i] + self.specular[i]) * self.gain[i]).clamp(0.0, 1.0) as f32
        })
    }
}

/// Shading layers of one view.
pub fn render_layers(
    asset: &AssetSpec,
    pose: &CameraPose,
    light: &LightParams,
) -> Result<ShadingLayers> {
    if pose.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    if !(-90.0..=90.0).contains(&pose.elevation_deg) {
        return Err(Error::Domain(format!(
            "elevation {} outside [-90, 90]",
            pose.elevation_deg
        )));
    }
    asset.validate()?;
    let n = pose.image_size as usize;
    let scene = build_scene(asset);
    let cam = Camera::new(pose);
    let dir = mul(cam.toward, -1.0);
    let mut layers = ShadingLayers {
        size: n,
        ids: vec![ObjectId::BACKGROUND; n * n],
        albedo_scale: vec![0.0; n * n],
        specular: vec![0.0; n * n],
        gain: vec![0.0; n * n],
    };
    let ray = |u: f64, v: f64| {
        let x = (u / n as f64 * 2.0 - 1.0) * VIEW_HALF_EXTENT;
        let y = (1.0 - v / n as f64 * 2.0) * VIEW_HALF_EXTENT;
        let origin = add(
            add(mul(cam.right, x), mul(cam.up, y)),
            mul(cam.toward, CAMERA_DISTANCE),
        );
        scene.march(origin, dir)
    };
    for row in 0..n {
        for col in 0..n {
            let Some((_, idx)) = ray(col as f64 + 0.5, row as f64 + 0.5) else {
                continue;
            };
            let i = row * n + col;
            let prim = &scene.prims[idx];
            layers.ids[i] = prim.id;
            // shading is averaged over the sub-samples that land on the same object
            let mut hits = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let du = (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let dv = (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let Some((p, j)) = ray(col as f64 + du, row as f64 + dv) else {
                        continue;
                    };
                    if scene.prims[j].id != prim.id {
                        continue;
                    }
                    let (t, d, sp) = shade(&scene, &scene.prims[j], p, &cam, light);
                    layers.albedo_scale[i] += t * d;
                    layers.specular[i] += sp;
                    hits += 1.0;
                }
            }
            if hits == 0.0 {
                let (p, _) = ray(col as f64 + 0.5, row as f64 + 0.5).expect("centre hit");
                let (t, d, sp) = shade(&scene, prim, p, &cam, light);
                (layers.albedo_scale[i], layers.specular[i]) = (t * d, sp);
            } else {
                layers.albedo_scale[i] /= hits;
                layers.specular[i] /= hits;
            }
        }
    }
    let ids = &layers.ids;
    for row in 0..n {
        for col in 0..n {
            let id = ids[row * n + col];
            if id.is_background() {
                continue;
            }
            let neighbours = [
                (row > 0).then(|| ids[(row - 1) * n + col]),
                (row + 1 < n).then(|| ids[(row + 1) * n + col]),
                (col > 0).then(|| ids[row * n + col - 1]),
                (col + 1 < n).then(|| ids[row * n + col + 1]),
            ];
            let edge = neighbours
                .iter()
                .flatten()
                .any(|&o| !o.is_background() && o != id);
            layers.gain[row * n + col] = light.exposure * if edge { OUTLINE_FACTOR } else { 1.0 };
        }
    }
    Ok(layers)
}

/// Albedo of an object id in `asset`.
pub fn albedo_of(asset: &AssetSpec, id: ObjectId) -> Option<[f64; 3]> {
    match id {
        ObjectId::BODY => Some(asset.body_color.rgb()),
        ObjectId(k) if !id.is_background() => {
            asset.parts.get(k as usize - 1).map(|p| p.color.rgb())
        }
        _ => None,
    }
}

fn render_raw(
    asset: &AssetSpec,
    pose: &CameraPose,
    light: &LightParams,
) -> Result<(Image, Vec<ObjectId>)> {
    let layers = render_layers(asset, pose, light)?;
    let n = layers.size;
    let mut img = Image::filled(n, n, BACKGROUND);
    for i in 0..n * n {
        if let Some(albedo) = albedo_of(asset, layers.ids[i]) {
            img.set_pixel(i / n, i % n, layers.shade_with(i, albedo));
        }
    }
    Ok((img, layers.ids))
}

/// Renders one orthographic view of `asset`.
pub fn render_view(asset: &AssetSpec, pose: &CameraPose, light: &LightParams) -> Result<ViewImage> {
    let (pixels, _) = render_raw(asset, pose, light)?;
    Ok(ViewImage {
        pixels,
        pose: *pose,
    })
}

/// Per-pixel object ids of the view (row-major), used to locate parts.
pub fn render_ids(asset: &AssetSpec, pose: &CameraPose) -> Result<Vec<ObjectId>> {
    Ok(render_raw(asset, pose, &LightParams::default())?.1)
}

/// Four orthogonal views composited in a 2x2 grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TiledGrid {
    pub tile: Image,
    pub base_azimuth_deg: f64,
    /// Row-major quadrant order: (0,0)=β, (0,1)=β+90, (1,0)=β-90, (1,1)=β+180.
    pub quadrant_poses: [CameraPose; 4],
}

impl TiledGrid {
    pub fn view_size(&self) -> usize {
        self.quadrant_poses[0].image_size as usize
    }

    /// Top-left pixel of quadrant `q` in the tile.
    pub fn quadrant_origin(&self, q: usize) -> (usize, usize) {
        let h = self.view_size();
        ((q / 2) * h, (q % 2) * h)
    }

    pub fn quadrant(&self, q: usize) -> Image {
        let h = self.view_size();
        let (r, c) = self.quadrant_origin(q);
        self.tile.crop(r, c, h, h)
    }

    /// Poses of a tile with base azimuth `base` at a common elevation.
    pub fn poses(base: f64, elevation_deg: f64, view_size: u32) -> Result<[CameraPose; 4]> {
        let az = quadrant_azimuths(base);
        let mut poses = [CameraPose {
            elevation_deg,
            azimuth_deg: 0.0,
            image_size: view_size,
        }; 4];
        for (p, a) in poses.iter_mut().zip(az) {
            *p = CameraPose::new(elevation_deg, a, view_size)?;
        }
        Ok(poses)
    }

    /// Wraps an externally produced tile image (e.g. a model sample).
    pub fn from_image(tile: Image, base_azimuth_deg: f64, elevation_deg: f64) -> Result<Self> {
        if tile.width != tile.height || tile.width % 2 != 0 {
            return Err(Error::Domain(format!(
                "tile must be an even square, got {}x{}",
                tile.width, tile.height
            )));
        }
        let poses = Self::poses(base_azimuth_deg, elevation_deg, (tile.width / 2) as u32)?;
        Ok(Self {
            tile,
            base_azimuth_deg,
            quadrant_poses: poses,
        })
    }

    pub fn from_quadrants(
        views: [Image; 4],
        base_azimuth_deg: f64,
        poses: [CameraPose; 4],
    ) -> Self {
        let h = views[0].width;
        let mut tile = Image::filled(2 * h, 2 * h, BACKGROUND);
        for (q, v) in views.iter().enumerate() {
            tile.paste(v, (q / 2) * h, (q % 2) * h);
        }
        Self {
            tile,
            base_azimuth_deg,
            quadrant_poses: poses,
        }
    }
}

/// Default-resolution tile with the default light.
pub fn render_tile(
    asset: &AssetSpec,
    base_azimuth_deg: f64,
    elevation_deg: f64,
) -> Result<TiledGrid> {
    render_tile_with(
        asset,
        base_azimuth_deg,
        elevation_deg,
        DEFAULT_VIEW_SIZE,
        &LightParams::default(),
    )
}

pub fn render_tile_with(
    asset: &AssetSpec,
    base_azimuth_deg: f64,
    elevation_deg: f64,
    view_size: u32,
    light: &LightParams,
) -> Result<TiledGrid> {
    let poses = TiledGrid::poses(base_azimuth_deg, elevation_deg, view_size)?;
    let mut views = Vec::with_capacity(4);
    for pose in &poses {
        views.push(render_view(asset, pose, light)?.pixels);
    }
    let views: [Image; 4] = views.try_into().expect("four views");
    Ok(TiledGrid::from_quadrants(views, base_azimuth_deg, poses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthset::{sample_asset, Color, PartSpec};

    fn plain(body: Body, scale: f64) -> AssetSpec {
        AssetSpec {
            body,
            body_color: Color::Red,
            parts: vec![],
            metallic: 0.5,
            roughness: 0.5,
            scale,
        }
    }

    #[test]
    fn zero_image_size_is_a_configuration_error() {
        let pose = CameraPose {
            elevation_deg: 5.0,
            azimuth_deg: 0.0,
            image_size: 0,
        };
        let err = render_view(&plain(Body::Cube, 0.7), &pose, &LightParams::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn corner_pixel_is_background_for_small_assets() {
        for body in Body::ALL {
            let pose = CameraPose::new(5.0, 37.0, 32).unwrap();
            let v = render_view(&plain(body, 0.5), &pose, &LightParams::default()).unwrap();
            assert_eq!(v.pixels.pixel(0, 0), BACKGROUND);
        }
    }

    #[test]
    fn body_occupies_the_centre() {
        for body in Body::ALL {
            let pose = CameraPose::new(5.0, 0.0, 32).unwrap();
            let ids = render_ids(&plain(body, 0.5), &pose).unwrap();
            assert_eq!(ids[16 * 32 + 16], ObjectId::BODY, "{body:?}");
        }
    }

    #[test]
    fn sdf_of_shapes_is_zero_on_known_surface_points() {
        let cube = Shape::RoundBox {
            half: [0.5; 3],
            round: 0.1,
        };
        assert!(cube.sdf([0.5, 0.0, 0.0]).abs() < 1e-12);
        let cyl = Shape::Cylinder {
            r: 0.4,
            half_h: 0.5,
            round: 0.05,
        };
        assert!(cyl.sdf([0.4, 0.0, 0.0]).abs() < 1e-12);
        assert!(cyl.sdf([0.0, 0.5, 0.0]).abs() < 1e-12);
        let cone = Shape::Cone {
            r_bottom: 0.6,
            r_top: 0.06,
            half_h: 0.6,
            round: 0.0,
        };
        assert!(cone.sdf([0.0, -0.6, 0.0]).abs() < 1e-12);
        assert!((cone.sdf([0.33, 0.0, 0.0])).abs() < 1e-12);
        assert!(cone.sdf([0.0, 0.0, 0.0]) < 0.0);
    }

    #[test]
    fn parts_change_their_own_pixels_only_near_themselves() {
        let mut a = sample_asset(11);
        a.parts = vec![PartSpec {
            kind: PartKind::Spout,
            side: Side::Right,
            color: Color::Blue,
            texture: Texture::Smooth,
        }];
        let pose = CameraPose::new(5.0, 0.0, 32).unwrap();
        let ids = render_ids(&a, &pose).unwrap();
        assert!(ids.contains(&ObjectId::part(0)));
        // a right-side part seen from the front sits in the right half of the image
        for (i, id) in ids.iter().enumerate() {
            if *id == ObjectId::part(0) {
                assert!(i % 32 >= 16);
            }
        }
    }
}
