//! Bird's-eye-view rendering by inverse perspective mapping onto `z = 0`.
//!
//! Raster layout: row 0 lies at `+X` (forward at the top of the image) and
//! column 0 at `+Y` (vehicle left on the image left). Pixel `(row, col)`
//! covers the ground point `(extent/2 - row/ppm, extent/2 - col/ppm)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ground_to_pixel, CameraId, CameraRig, GroundPoint};
use crate::raster::{MaskedRaster, Raster};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BevBlend {
    /// Only the averaged composite is of interest.
    #[default]
    OverlayAverage,
    /// Per-camera layers are written out alongside the composite.
    PerCameraLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    /// Side length of the square ground area, in meters.
    pub extent: f64,
    /// Pixels per meter.
    pub resolution: f64,
    pub blend: BevBlend,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            extent: 25.0,
            resolution: 20.0,
            blend: BevBlend::OverlayAverage,
        }
    }
}

impl BevConfig {
    pub fn new(extent: f64, resolution: f64) -> Result<Self> {
        let cfg = BevConfig {
            extent,
            resolution,
            blend: BevBlend::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0 && self.extent.is_finite())
            || !(self.resolution > 0.0 && self.resolution.is_finite())
        {
            return Err(Error::InvalidProblem(format!(
                "BEV extent and resolution must be positive, got {} m at {} px/m",
                self.extent, self.resolution
            )));
        }
        if self.size() == 0 {
            return Err(Error::InvalidProblem(format!(
                "BEV of {} m at {} px/m has no pixels",
                self.extent, self.resolution
            )));
        }
        Ok(())
    }

    /// Raster side length in pixels.
    pub fn size(&self) -> usize {
        (self.extent * self.resolution).round() as usize
    }

    pub fn meters_per_pixel(&self) -> f64 {
        1.0 / self.resolution
    }
}

/// Integer raster index; may fall outside the raster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BevIndex {
    pub row: i64,
    pub col: i64,
}

pub fn bev_pixel_to_ground(row: f64, col: f64, cfg: &BevConfig) -> GroundPoint {
    let half = 0.5 * cfg.extent;
    GroundPoint::new(half - row / cfg.resolution, half - col / cfg.resolution)
}

/// Nearest raster index of a ground point.
pub fn ground_to_bev_pixel(g: GroundPoint, cfg: &BevConfig) -> BevIndex {
    let half = 0.5 * cfg.extent;
    BevIndex {
        row: ((half - g.x) * cfg.resolution).round() as i64,
        col: ((half - g.y) * cfg.resolution).round() as i64,
    }
}

#[derive(Debug, Clone)]
pub struct BevImage {
    /// One layer per rig camera, in rig order.
    pub layers: Vec<(CameraId, MaskedRaster)>,
    /// Mean of the valid layers; masked where no layer is valid.
    pub composite: MaskedRaster,
    pub meters_per_pixel: f64,
}

impl BevImage {
    pub fn layer(&self, id: CameraId) -> Option<&MaskedRaster> {
        self.layers.iter().find(|(c, _)| *c == id).map(|(_, l)| l)
    }
}

/// Projects every BEV pixel into each camera and samples its image
/// bilinearly. `images` needs one raster per rig camera, sized like the
/// camera's intrinsics; all rasters must share a channel count.
pub fn render_bev(images: &BTreeMap<CameraId, Raster>, rig: &CameraRig, cfg: &BevConfig) -> Result<BevImage> {
    cfg.validate()?;
    let mut channels = None;
    for cam in rig.cameras() {
        let img = images.get(&cam.id).ok_or(Error::MissingImage(cam.id))?;
        let (w, h) = (cam.intrinsics.width() as usize, cam.intrinsics.height() as usize);
        if img.width() != w || img.height() != h {
            return Err(Error::ShapeMismatch(format!(
                "image of `{}` is {}x{}, intrinsics say {w}x{h}",
                cam.id,
                img.width(),
                img.height()
            )));
        }
        if *channels.get_or_insert(img.channels()) != img.channels() {
            return Err(Error::ShapeMismatch(format!(
                "image of `{}` has {} channels, others have {}",
                cam.id,
                img.channels(),
                channels.unwrap_or(0)
            )));
        }
    }
    let channels = channels.unwrap_or(1);
    let n = cfg.size();

    let mut layers = Vec::with_capacity(rig.cameras().len());
    for cam in rig.cameras() {
        let src = &images[&cam.id];
        let mut raster = Raster::new(n, n, channels);
        let mut mask = vec![false; n * n];
        for row in 0..n {
            for col in 0..n {
                let g = bev_pixel_to_ground(row as f64, col as f64, cfg);
                let Ok(px) = ground_to_pixel(g, cam) else {
                    continue;
                };
                if src.sample_bilinear(px.u, px.v, raster.pixel_mut(col, row)) {
                    mask[row * n + col] = true;
                }
            }
        }
        if !mask.contains(&true) {
            log::warn!("camera {} sees none of the BEV area", cam.id);
        }
        layers.push((cam.id, MaskedRaster::new(raster, mask)?));
    }

    let mut composite = Raster::new(n, n, channels);
    let mut mask = vec![false; n * n];
    for row in 0..n {
        for col in 0..n {
            let valid: Vec<&MaskedRaster> = layers
                .iter()
                .map(|(_, l)| l)
                .filter(|l| l.is_valid(col, row))
                .collect();
            if valid.is_empty() {
                continue;
            }
            mask[row * n + col] = true;
            let out = composite.pixel_mut(col, row);
            for layer in &valid {
                for (o, v) in out.iter_mut().zip(layer.raster.pixel(col, row)) {
                    *o += v;
                }
            }
            for o in out.iter_mut() {
                *o /= valid.len() as f64;
            }
        }
    }
    if !mask.contains(&true) {
        log::warn!("BEV composite is empty");
    }

    Ok(BevImage {
        layers,
        composite: MaskedRaster::new(composite, mask)?,
        meters_per_pixel: cfg.meters_per_pixel(),
    })
}
