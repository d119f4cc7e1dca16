//! Float rasters in `[0, 1]`, row-major and channel-interleaved.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        Raster {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    /// Single-channel raster filled by `f(col, row)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(f(col, row));
            }
        }
        Raster {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, col: usize, row: usize) -> &mut [f64] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Rec. 601 luma of a pixel.
    pub fn gray(&self, col: usize, row: usize) -> f64 {
        let p = self.pixel(col, row);
        match p {
            [g] => *g,
            [r, g, b] => 0.299 * r + 0.587 * g + 0.114 * b,
            _ => unreachable!(),
        }
    }

    /// Whether a bilinear sample at `(u, v)` only touches in-bounds pixels.
    /// Pixel centres sit at integer coordinates.
    pub fn can_sample(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Bilinear sample into `out` (length = channels). Returns `false` when the
    /// footprint leaves the raster.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f64]) -> bool {
        if self.width == 0 || self.height == 0 || !self.can_sample(u, v) {
            return false;
        }
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let fx = u - x0 as f64;
        let fy = v - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (a, b) = (self.pixel(x0, y0), self.pixel(x1, y0));
        let (c, d) = (self.pixel(x0, y1), self.pixel(x1, y1));
        for (k, o) in out.iter_mut().enumerate().take(self.channels) {
            let top = a[k] + fx * (b[k] - a[k]);
            let bottom = c[k] + fx * (d[k] - c[k]);
            *o = top + fy * (bottom - top);
        }
        true
    }

    /// Converts to an 8-bit image (gray or RGB).
    pub fn to_dynamic_image(&self) -> image::DynamicImage {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, bytes).expect("buffer matches shape"),
            )
        } else {
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, bytes).expect("buffer matches shape"),
            )
        }
    }
}

/// A raster plus a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRaster {
    pub raster: Raster,
    pub mask: Vec<bool>,
}

impl MaskedRaster {
    pub fn new(raster: Raster, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != raster.width() * raster.height() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} entries for a {}x{} raster",
                mask.len(),
                raster.width(),
                raster.height()
            )));
        }
        Ok(MaskedRaster { raster, mask })
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.mask[row * self.raster.width() + col]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_hits_pixel_centres() {
        let r = Raster::from_fn(4, 3, |c, r| (c * 10 + r) as f64 / 100.0);
        let mut out = [0.0];
        for row in 0..3 {
            for col in 0..4 {
                assert!(r.sample_bilinear(col as f64, row as f64, &mut out));
                assert_eq!(out[0], r.pixel(col, row)[0]);
            }
        }
    }

    #[test]
    fn bilinear_interpolates_and_rejects_outside() {
        let r = Raster::from_fn(2, 2, |c, r| (c + 2 * r) as f64);
        let mut out = [0.0];
        assert!(r.sample_bilinear(0.5, 0.5, &mut out));
        assert!((out[0] - 1.5).abs() < 1e-15);
        assert!(!r.sample_bilinear(-0.01, 0.0, &mut out));
        assert!(!r.sample_bilinear(0.0, 1.01, &mut out));
    }

    #[test]
    fn gray_of_rgb() {
        let r = Raster::from_vec(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!((r.gray(0, 0) - 1.0).abs() < 1e-12);
        assert!(Raster::from_vec(2, 2, 1, vec![0.0; 3]).is_err());
    }
}
