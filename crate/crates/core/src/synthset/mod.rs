//! Procedural assets, orthographic views and 2x2 view tiles.
//!
//! Object frame: `+y` up, front faces `+z`, right faces `+x`. A camera at
//! azimuth `β` sits on the direction `(sin β, ·, cos β)`, so `β = 0` looks at
//! the front, `90` at the right side, `180` at the back and `270` at the left.

mod asset;
mod image;
mod render;

pub use asset::{
    sample_asset, sample_input_pose, AssetSpec, Body, Color, PartKind, PartSpec, Side, Texture,
};
pub use image::{Image, ViewImage};
pub use render::{
    albedo_of, render_ids, render_layers, render_tile, render_tile_with, render_view, LightParams,
    ObjectId, ShadingLayers, TiledGrid, BACKGROUND, DEFAULT_OUTPUT_ELEVATION, DEFAULT_VIEW_SIZE,
    VIEW_HALF_EXTENT,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthographic camera on the view sphere.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub image_size: u32,
}

impl CameraPose {
    /// Builds a pose, normalizing azimuth into `[0, 360)`.
    pub fn new(elevation_deg: f64, azimuth_deg: f64, image_size: u32) -> Result<Self> {
        if !elevation_deg.is_finite() || !(-90.0..=90.0).contains(&elevation_deg) {
            return Err(Error::Domain(format!(
                "elevation {elevation_deg} outside [-90, 90]"
            )));
        }
        if !azimuth_deg.is_finite() {
            return Err(Error::Domain(format!(
                "azimuth {azimuth_deg} is not finite"
            )));
        }
        Ok(Self {
            elevation_deg,
            azimuth_deg: normalize_azimuth(azimuth_deg),
            image_size,
        })
    }
}

/// Maps any finite angle into `[0, 360)`.
pub fn normalize_azimuth(deg: f64) -> f64 {
    let a = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if a >= 360.0 {
        0.0
    } else {
        a
    }
}

/// Quadrant azimuth offsets in row-major order: (0,0), (0,1), (1,0), (1,1).
pub const QUADRANT_OFFSETS: [f64; 4] = [0.0, 90.0, -90.0, 180.0];

/// Azimuths of the four tile quadrants for base azimuth `base`.
pub fn quadrant_azimuths(base: f64) -> [f64; 4] {
    QUADRANT_OFFSETS.map(|o| normalize_azimuth(base + o))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn azimuth_normalization() {
        assert_eq!(normalize_azimuth(-90.0), 270.0);
        assert_eq!(normalize_azimuth(360.0), 0.0);
        assert_eq!(normalize_azimuth(725.0), 5.0);
        let tiny = normalize_azimuth(-1e-20);
        assert!((0.0..360.0).contains(&tiny));
    }

    #[test]
    fn elevation_outside_range_fails() {
        assert!(CameraPose::new(91.0, 0.0, 32).is_err());
        assert!(CameraPose::new(-90.5, 0.0, 32).is_err());
        assert!(CameraPose::new(f64::NAN, 0.0, 32).is_err());
        let p = CameraPose::new(90.0, -30.0, 32).unwrap();
        assert_eq!(p.azimuth_deg, 330.0);
    }

    #[test]
    fn quadrant_layout_for_thirty_degrees() {
        assert_eq!(quadrant_azimuths(30.0), [30.0, 120.0, 300.0, 210.0]);
    }
}
