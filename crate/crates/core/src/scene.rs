//! Procedural scenes for BEV tests: a checkerboard ground plane and optional
//! axis-aligned boxes standing on it, ray-cast into each camera.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{pixel_to_ray, PixelPoint};
use crate::geometry::{Camera, CameraId, CameraRig};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkerboard {
    /// Square side in meters.
    pub square: f64,
    pub dark: f64,
    pub light: f64,
}

impl Default for Checkerboard {
    fn default() -> Self {
        Checkerboard {
            square: 1.0,
            dark: 0.2,
            light: 0.8,
        }
    }
}

impl Checkerboard {
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        let i = (x / self.square).floor() as i64 + (y / self.square).floor() as i64;
        if i.rem_euclid(2) == 0 {
            self.light
        } else {
            self.dark
        }
    }

    /// Distance from `(x, y)` to the nearest square edge.
    pub fn edge_distance(&self, x: f64, y: f64) -> f64 {
        let d = |v: f64| {
            let f = (v / self.square).rem_euclid(1.0) * self.square;
            f.min(self.square - f)
        };
        d(x).min(d(y))
    }
}

/// Axis-aligned box resting on the ground, uniformly shaded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub intensity: f64,
}

impl BoxObject {
    /// Slab test; returns the entry distance along the ray.
    fn hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let a = (self.min[k] - origin[k]) / dir[k];
            let b = (self.max[k] - origin[k]) / dir[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1).then_some(t0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ground: Checkerboard,
    pub objects: Vec<BoxObject>,
    /// Value of rays that hit nothing.
    pub sky: f64,
}

impl Scene {
    pub fn checkerboard(square: f64) -> Self {
        Scene {
            ground: Checkerboard {
                square,
                ..Checkerboard::default()
            },
            objects: Vec::new(),
            sky: 0.5,
        }
    }

    /// Intensity seen along a vehicle-frame ray.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut best = f64::INFINITY;
        let mut value = self.sky;
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            if t > 0.0 {
                best = t;
                let p = origin + dir * t;
                value = self.ground.intensity(p.x, p.y);
            }
        }
        for obj in &self.objects {
            if let Some(t) = obj.hit(origin, dir) {
                if t < best {
                    best = t;
                    value = obj.intensity;
                }
            }
        }
        value
    }

    /// Renders one camera image by casting a ray through each pixel centre.
    pub fn render_camera(&self, cam: &Camera) -> Raster {
        let rt = cam.extrinsics.camera_to_vehicle_rotation();
        let origin = cam.extrinsics.center();
        let (w, h) = (cam.intrinsics.width() as usize, cam.intrinsics.height() as usize);
        Raster::from_fn(w, h, |col, row| {
            match pixel_to_ray(PixelPoint::new(col as f64, row as f64), &cam.intrinsics) {
                Ok(ray) => self.trace(&origin, &(rt * ray.to_vector())),
                Err(_) => 0.0,
            }
        })
    }

    pub fn render_rig(&self, rig: &CameraRig) -> BTreeMap<CameraId, Raster> {
        rig.cameras()
            .iter()
            .map(|cam| (cam.id, self.render_camera(cam)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_pattern() {
        let c = Checkerboard::default();
        assert_eq!(c.intensity(0.5, 0.5), 0.8);
        assert_eq!(c.intensity(1.5, 0.5), 0.2);
        assert_eq!(c.intensity(-0.5, 0.5), 0.2);
        assert!((c.edge_distance(0.9, 0.5) - 0.1).abs() < 1e-12);
        assert!((c.edge_distance(-0.05, 0.5) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn box_occludes_ground() {
        let mut scene = Scene::checkerboard(1.0);
        scene.objects.push(BoxObject {
            min: [4.0, -1.0, 0.0],
            max: [5.0, 1.0, 1.5],
            intensity: 1.0,
        });
        let origin = Vector3::new(0.0, 0.0, 1.0);
        let toward_box = Vector3::new(1.0, 0.0, -0.1);
        let past_box = Vector3::new(1.0, 2.0, -0.1).normalize();
        assert_eq!(scene.trace(&origin, &toward_box), 1.0);
        assert!(scene.trace(&origin, &past_box) != 1.0);
        assert_eq!(scene.trace(&origin, &Vector3::new(0.0, 0.0, 1.0)), 0.5);
    }
}
