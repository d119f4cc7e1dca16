//! Calibration quality metrics: mean distance error by range bin and BEV
//! photometric error.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::calibration::{ground_reprojections, KeypointPair};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, GroundPoint};
use crate::raster::MaskedRaster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceBin {
    #[serde(rename = "0-5m")]
    Near,
    #[serde(rename = "5-10m")]
    Mid,
    #[serde(rename = ">10m")]
    Far,
}

impl DistanceBin {
    pub const ALL: [DistanceBin; 3] = [DistanceBin::Near, DistanceBin::Mid, DistanceBin::Far];

    pub fn of(distance: f64) -> Self {
        if distance < 5.0 {
            DistanceBin::Near
        } else if distance < 10.0 {
            DistanceBin::Mid
        } else {
            DistanceBin::Far
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DistanceBin::Near => "0-5m",
            DistanceBin::Mid => "5-10m",
            DistanceBin::Far => ">10m",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdeReport {
    /// Mean error per bin; bins without keypoints are absent.
    pub per_bin: BTreeMap<DistanceBin, f64>,
    pub per_bin_count: BTreeMap<DistanceBin, usize>,
    pub total: f64,
    pub n_keypoints: usize,
    pub per_keypoint: Vec<f64>,
}

impl MdeReport {
    pub fn bin(&self, bin: DistanceBin) -> Option<f64> {
        self.per_bin.get(&bin).copied()
    }
}

impl fmt::Display for MdeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>10} {:>10} {:>10} {:>10}", "0-5m", "5-10m", ">10m", "Total")?;
        for bin in DistanceBin::ALL {
            match self.bin(bin) {
                Some(v) => write!(f, "{v:>10.4} ")?,
                None => write!(f, "{:>10} ", "-")?,
            }
        }
        writeln!(f, "{:>10.4}", self.total)?;
        write!(f, "({} keypoints)", self.n_keypoints)
    }
}

/// Distance used to bin a keypoint: XY norm of the midpoint of its two
/// ground reprojections.
pub fn bin_anchor(gi: &GroundPoint, gj: &GroundPoint) -> f64 {
    GroundPoint::new(0.5 * (gi.x + gj.x), 0.5 * (gi.y + gj.y)).norm()
}

/// Mean distance error of held-out keypoints, overall and per range bin.
pub fn mde(eval_keypoints: &[KeypointPair], rig: &CameraRig) -> Result<MdeReport> {
    if eval_keypoints.is_empty() {
        return Err(Error::UndefinedMetric("no evaluation keypoints".into()));
    }
    let mut sums: BTreeMap<DistanceBin, (f64, usize)> = BTreeMap::new();
    let mut per_keypoint = Vec::with_capacity(eval_keypoints.len());
    for (k, kp) in eval_keypoints.iter().enumerate() {
        let (gi, gj) = ground_reprojections(kp, rig)
            .map_err(|e| Error::UndefinedMetric(format!("keypoint {k}: {e}")))?;
        let err = gi.distance(&gj);
        let entry = sums.entry(DistanceBin::of(bin_anchor(&gi, &gj))).or_insert((0.0, 0));
        entry.0 += err;
        entry.1 += 1;
        per_keypoint.push(err);
    }
    let n = per_keypoint.len();
    Ok(MdeReport {
        per_bin: sums.iter().map(|(&b, &(s, c))| (b, s / c as f64)).collect(),
        per_bin_count: sums.iter().map(|(&b, &(_, c))| (b, c)).collect(),
        total: per_keypoint.iter().sum::<f64>() / n as f64,
        n_keypoints: n,
        per_keypoint,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricError {
    /// Root-mean-square grayscale difference over the shared valid pixels.
    pub rms: f64,
    pub compared_pixels: usize,
}

/// RMS grayscale difference between two BEV layers over the pixels valid in both.
pub fn photometric_error(layer_i: &MaskedRaster, layer_j: &MaskedRaster) -> Result<PhotometricError> {
    let (a, b) = (&layer_i.raster, &layer_j.raster);
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::ShapeMismatch(format!(
            "layers are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for row in 0..a.height() {
        for col in 0..a.width() {
            if layer_i.is_valid(col, row) && layer_j.is_valid(col, row) {
                let d = a.gray(col, row) - b.gray(col, row);
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("layers share no valid pixels".into()));
    }
    Ok(PhotometricError {
        rms: (sum / count as f64).sqrt(),
        compared_pixels: count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;
    use rand::{Rng, SeedableRng};

    fn layer(raster: Raster) -> MaskedRaster {
        let n = raster.width() * raster.height();
        MaskedRaster::new(raster, vec![true; n]).unwrap()
    }

    #[test]
    fn bins() {
        assert_eq!(DistanceBin::of(0.0), DistanceBin::Near);
        assert_eq!(DistanceBin::of(4.999), DistanceBin::Near);
        assert_eq!(DistanceBin::of(5.0), DistanceBin::Mid);
        assert_eq!(DistanceBin::of(10.0), DistanceBin::Far);
    }

    #[test]
    fn identical_layers_score_zero() {
        let a = layer(Raster::from_fn(8, 8, |c, r| ((c * r) % 7) as f64 / 7.0));
        let e = photometric_error(&a, &a).unwrap();
        assert_eq!(e.rms, 0.0);
        assert_eq!(e.compared_pixels, 64);
    }

    #[test]
    fn constant_offset() {
        let a = layer(Raster::from_fn(8, 8, |c, _| 0.1 * (c % 5) as f64));
        let b = layer(Raster::from_fn(8, 8, |c, _| 0.1 * (c % 5) as f64 + 0.1));
        let e = photometric_error(&a, &b).unwrap();
        assert!((e.rms - 0.1).abs() < 1e-12);
    }

    #[test]
    fn matches_elementwise_rms_and_is_symmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (17, 9);
        let va: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let vb: Vec<f64> = (0..w * h).map(|_| rng.random()).collect();
        let ma: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let mb: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.8)).collect();
        let a = MaskedRaster::new(Raster::from_vec(w, h, 1, va.clone()).unwrap(), ma.clone()).unwrap();
        let b = MaskedRaster::new(Raster::from_vec(w, h, 1, vb.clone()).unwrap(), mb.clone()).unwrap();
        let (mut s, mut n) = (0.0, 0);
        for k in 0..w * h {
            if ma[k] && mb[k] {
                s += (va[k] - vb[k]).powi(2);
                n += 1;
            }
        }
        let expected = (s / n as f64).sqrt();
        let ab = photometric_error(&a, &b).unwrap();
        let ba = photometric_error(&b, &a).unwrap();
        assert!((ab.rms - expected).abs() < 1e-12);
        assert_eq!(ab, ba);
        assert_eq!(ab.compared_pixels, n);
    }

    #[test]
    fn disjoint_masks_are_undefined() {
        let r = Raster::new(2, 1, 1);
        let a = MaskedRaster::new(r.clone(), vec![true, false]).unwrap();
        let b = MaskedRaster::new(r, vec![false, true]).unwrap();
        assert!(matches!(photometric_error(&a, &b), Err(Error::UndefinedMetric(_))));
    }
}
