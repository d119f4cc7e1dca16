//! Fisheye lens geometry.
//!
//! The lens maps the incident angle `theta` (between a ray and the optical
//! axis) to an image radius in pixels with a fourth-order polynomial
//! `r = a1*theta + a2*theta^2 + a3*theta^3 + a4*theta^4`. The camera frame has
//! `z` along the optical axis, `x` along increasing `u` and `y` along
//! increasing `v` (image origin top-left, `v` pointing down).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default upper bound on the incident angle, a little beyond the half-FOV of
/// a 190 degree lens.
pub const DEFAULT_THETA_MAX: f64 = 1.8;

const NEWTON_TOLERANCE: f64 = 1e-10;
const NEWTON_MAX_ITERATIONS: usize = 50;
const MONOTONICITY_SAMPLES: usize = 4096;

/// Polynomial fisheye intrinsics. Constructed through [`FisheyeIntrinsics::new`],
/// which checks that the polynomial is strictly increasing on `[0, theta_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRecord", into = "IntrinsicsRecord")]
pub struct FisheyeIntrinsics {
    coeffs: [f64; 4],
    u0: f64,
    v0: f64,
    width: u32,
    height: u32,
    theta_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    a1: f64,
    a2: f64,
    a3: f64,
    a4: f64,
    u0: f64,
    v0: f64,
    width: u32,
    height: u32,
    #[serde(default = "default_theta_max")]
    theta_max: f64,
}

fn default_theta_max() -> f64 {
    DEFAULT_THETA_MAX
}

impl TryFrom<IntrinsicsRecord> for FisheyeIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRecord) -> Result<Self> {
        FisheyeIntrinsics::with_theta_max(
            [r.a1, r.a2, r.a3, r.a4],
            r.u0,
            r.v0,
            r.width,
            r.height,
            r.theta_max,
        )
    }
}

impl From<FisheyeIntrinsics> for IntrinsicsRecord {
    fn from(i: FisheyeIntrinsics) -> Self {
        IntrinsicsRecord {
            a1: i.coeffs[0],
            a2: i.coeffs[1],
            a3: i.coeffs[2],
            a4: i.coeffs[3],
            u0: i.u0,
            v0: i.v0,
            width: i.width,
            height: i.height,
            theta_max: i.theta_max,
        }
    }
}

impl FisheyeIntrinsics {
    /// Intrinsics with the default `theta_max`.
    pub fn new(coeffs: [f64; 4], u0: f64, v0: f64, width: u32, height: u32) -> Result<Self> {
        Self::with_theta_max(coeffs, u0, v0, width, height, DEFAULT_THETA_MAX)
    }

    pub fn with_theta_max(
        coeffs: [f64; 4],
        u0: f64,
        v0: f64,
        width: u32,
        height: u32,
        theta_max: f64,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size {width}x{height} must be positive"
            )));
        }
        if !(u0.is_finite() && v0.is_finite())
            || u0 < 0.0
            || v0 < 0.0
            || u0 >= f64::from(width)
            || v0 >= f64::from(height)
        {
            return Err(Error::InvalidIntrinsics(format!(
                "principal point ({u0}, {v0}) outside the {width}x{height} image"
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidIntrinsics("non-finite coefficient".into()));
        }
        if coeffs[0] <= 0.0 {
            return Err(Error::InvalidIntrinsics(format!(
                "a1 = {} must be positive",
                coeffs[0]
            )));
        }
        if !(theta_max.is_finite() && theta_max > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "theta_max = {theta_max} must be positive"
            )));
        }
        let intr = FisheyeIntrinsics {
            coeffs,
            u0,
            v0,
            width,
            height,
            theta_max,
        };
        for k in 0..=MONOTONICITY_SAMPLES {
            let theta = theta_max * k as f64 / MONOTONICITY_SAMPLES as f64;
            let slope = intr.derivative(theta);
            if slope <= 0.0 {
                return Err(Error::InvalidIntrinsics(format!(
                    "polynomial is not strictly increasing: f'({theta:.6}) = {slope}"
                )));
            }
        }
        Ok(intr)
    }

    /// Equidistant lens (`r = focal * theta`) centred on the image.
    pub fn equidistant(focal: f64, width: u32, height: u32) -> Result<Self> {
        Self::new(
            [focal, 0.0, 0.0, 0.0],
            f64::from(width) / 2.0,
            f64::from(height) / 2.0,
            width,
            height,
        )
    }

    pub fn coeffs(&self) -> [f64; 4] {
        self.coeffs
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (self.u0, self.v0)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn theta_max(&self) -> f64 {
        self.theta_max
    }

    /// Image radius reached at `theta_max`.
    pub fn max_radius(&self) -> f64 {
        self.eval(self.theta_max)
    }

    /// Whether `p` lies inside the image rectangle `[0, width) x [0, height)`.
    pub fn contains(&self, p: PixelPoint) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < f64::from(self.width) && p.v < f64::from(self.height)
    }

    fn eval(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.coeffs;
        theta * (a1 + theta * (a2 + theta * (a3 + theta * a4)))
    }

    fn derivative(&self, theta: f64) -> f64 {
        let [a1, a2, a3, a4] = self.coeffs;
        a1 + theta * (2.0 * a2 + theta * (3.0 * a3 + theta * 4.0 * a4))
    }
}

/// A continuous pixel coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        PixelPoint { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

impl From<[f64; 2]> for PixelPoint {
    fn from([u, v]: [f64; 2]) -> Self {
        PixelPoint { u, v }
    }
}

impl From<PixelPoint> for [f64; 2] {
    fn from(p: PixelPoint) -> Self {
        [p.u, p.v]
    }
}

/// Intersection of a viewing ray with the unit sphere around the camera centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitRay {
    pub xs: f64,
    pub ys: f64,
    pub zs: f64,
}

impl UnitRay {
    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.xs, self.ys, self.zs)
    }
}

/// `r = f(theta)`.
pub fn forward_polynomial(theta: f64, intr: &FisheyeIntrinsics) -> Result<f64> {
    if !(0.0..=intr.theta_max).contains(&theta) {
        return Err(Error::AngleOutOfDomain {
            theta,
            theta_max: intr.theta_max,
        });
    }
    Ok(intr.eval(theta))
}

/// `theta = f^-1(r)` by Newton-Raphson started at `r / a1`.
pub fn invert_polynomial(radius: f64, intr: &FisheyeIntrinsics) -> Result<f64> {
    let max_radius = intr.max_radius();
    if !(radius >= 0.0 && radius <= max_radius) {
        return Err(Error::RadiusOutOfRange { radius, max_radius });
    }
    if radius == 0.0 {
        return Ok(0.0);
    }
    let mut theta = (radius / intr.coeffs[0]).clamp(0.0, intr.theta_max);
    for _ in 0..NEWTON_MAX_ITERATIONS {
        let residual = intr.eval(theta) - radius;
        if residual.abs() < NEWTON_TOLERANCE {
            return Ok(theta);
        }
        theta = (theta - residual / intr.derivative(theta)).clamp(0.0, intr.theta_max);
    }
    // A last check covers the case where the final step landed on the root.
    if (intr.eval(theta) - radius).abs() < NEWTON_TOLERANCE {
        return Ok(theta);
    }
    Err(Error::NoConvergence {
        radius,
        iterations: NEWTON_MAX_ITERATIONS,
    })
}

/// Unprojects a pixel to its viewing direction on the unit sphere.
pub fn pixel_to_ray(p: PixelPoint, intr: &FisheyeIntrinsics) -> Result<UnitRay> {
    let du = p.u - intr.u0;
    let dv = p.v - intr.v0;
    let radius = du.hypot(dv);
    let theta = invert_polynomial(radius, intr)?;
    let alpha = dv.atan2(du);
    let (sin_t, cos_t) = theta.sin_cos();
    let (sin_a, cos_a) = alpha.sin_cos();
    Ok(UnitRay {
        xs: sin_t * cos_a,
        ys: sin_t * sin_a,
        zs: cos_t,
    })
}

/// Projects a camera-frame point to the image. Depth does not matter.
pub fn ray_to_pixel(point: &Vector3<f64>, intr: &FisheyeIntrinsics) -> Result<PixelPoint> {
    let lateral = point.x.hypot(point.y);
    if lateral == 0.0 && point.z == 0.0 {
        return Err(Error::DegeneratePoint);
    }
    let theta = lateral.atan2(point.z);
    if theta > intr.theta_max {
        return Err(Error::OutOfFov {
            theta,
            theta_max: intr.theta_max,
        });
    }
    let radius = intr.eval(theta);
    let alpha = point.y.atan2(point.x);
    Ok(PixelPoint {
        u: intr.u0 + radius * alpha.cos(),
        v: intr.v0 + radius * alpha.sin(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn poly_lens() -> FisheyeIntrinsics {
        FisheyeIntrinsics::new([300.0, 10.0, -5.0, 0.5], 640.0, 400.0, 1280, 800).unwrap()
    }

    fn unit_lens() -> FisheyeIntrinsics {
        FisheyeIntrinsics::new([1.0, 0.0, 0.0, 0.0], 5.0, 5.0, 10, 10).unwrap()
    }

    #[test]
    fn forward_examples() {
        assert_eq!(forward_polynomial(0.0, &poly_lens()).unwrap(), 0.0);
        assert_eq!(forward_polynomial(0.7, &unit_lens()).unwrap(), 0.7);
        // 300 + 10 - 5 + 0.5
        assert!((forward_polynomial(1.0, &poly_lens()).unwrap() - 305.5).abs() < 1e-12);
    }

    #[test]
    fn forward_rejects_out_of_domain() {
        assert!(matches!(
            forward_polynomial(-0.1, &poly_lens()),
            Err(Error::AngleOutOfDomain { .. })
        ));
        assert!(matches!(
            forward_polynomial(1.81, &poly_lens()),
            Err(Error::AngleOutOfDomain { .. })
        ));
    }

    #[test]
    fn inverse_examples() {
        let lens = poly_lens();
        assert_eq!(invert_polynomial(0.0, &lens).unwrap(), 0.0);
        assert!((invert_polynomial(0.9, &unit_lens()).unwrap() - 0.9).abs() < 1e-12);
        let theta = invert_polynomial(305.5, &lens).unwrap();
        assert!((theta - 1.0).abs() < 1e-9);
        assert!((forward_polynomial(theta, &lens).unwrap() - 305.5).abs() < 1e-9);
    }

    #[test]
    fn inverse_rejects_large_radius() {
        let lens = poly_lens();
        let r = lens.max_radius() + 1.0;
        assert!(matches!(
            invert_polynomial(r, &lens),
            Err(Error::RadiusOutOfRange { .. })
        ));
        assert!(invert_polynomial(-1.0, &lens).is_err());
    }

    #[test]
    fn rejects_non_monotonic_polynomial() {
        // f'(theta) = 100 - 3 * 200 * theta^2 turns negative near 0.41 rad.
        let err = FisheyeIntrinsics::new([100.0, 0.0, -200.0, 0.0], 10.0, 10.0, 20, 20);
        assert!(matches!(err, Err(Error::InvalidIntrinsics(_))));
    }

    #[test]
    fn rejects_bad_principal_point_and_a1() {
        assert!(FisheyeIntrinsics::new([1.0, 0.0, 0.0, 0.0], 10.0, 5.0, 10, 10).is_err());
        assert!(FisheyeIntrinsics::new([0.0, 1.0, 0.0, 0.0], 5.0, 5.0, 10, 10).is_err());
        assert!(FisheyeIntrinsics::new([1.0, 0.0, 0.0, 0.0], 5.0, 5.0, 0, 10).is_err());
    }

    #[test]
    fn principal_point_is_optical_axis() {
        let lens = poly_lens();
        let ray = pixel_to_ray(PixelPoint::new(640.0, 400.0), &lens).unwrap();
        assert_eq!((ray.xs, ray.ys, ray.zs), (0.0, 0.0, 1.0));
    }

    #[test]
    fn quarter_turn_along_u() {
        let lens = unit_lens();
        let ray = pixel_to_ray(PixelPoint::new(5.0 + FRAC_PI_2, 5.0), &lens).unwrap();
        assert!((ray.xs - 1.0).abs() < 1e-9);
        assert!(ray.ys.abs() < 1e-9);
        assert!(ray.zs.abs() < 1e-9);
    }

    #[test]
    fn all_quadrants_resolve() {
        let lens = poly_lens();
        for (du, dv) in [(50.0, 30.0), (-50.0, 30.0), (-50.0, -30.0), (50.0, -30.0)] {
            let ray = pixel_to_ray(PixelPoint::new(640.0 + du, 400.0 + dv), &lens).unwrap();
            assert_eq!(ray.xs.signum(), f64::signum(du));
            assert_eq!(ray.ys.signum(), f64::signum(dv));
        }
    }

    #[test]
    fn projection_is_depth_independent() {
        let lens = poly_lens();
        let p = ray_to_pixel(&Vector3::new(0.0, 0.0, 5.0), &lens).unwrap();
        assert_eq!((p.u, p.v), (640.0, 400.0));
        let q = ray_to_pixel(&Vector3::new(0.0, 0.0, 0.1), &lens).unwrap();
        assert_eq!(p, q);
        let point = Vector3::new(0.3, -0.7, 1.2);
        let base = ray_to_pixel(&point, &lens).unwrap();
        for s in [0.1, 1.0, 10.0] {
            let scaled = ray_to_pixel(&(point * s), &lens).unwrap();
            assert!(base.distance(&scaled) < 1e-9);
        }
    }

    #[test]
    fn projection_rejects_behind_lens() {
        let lens = poly_lens();
        assert!(matches!(
            ray_to_pixel(&Vector3::new(0.0, 0.1, -1.0), &lens),
            Err(Error::OutOfFov { .. })
        ));
        assert!(matches!(
            ray_to_pixel(&Vector3::zeros(), &lens),
            Err(Error::DegeneratePoint)
        ));
    }

    #[test]
    fn intrinsics_json_defaults_theta_max() {
        let json = r#"{"a1":300,"a2":10,"a3":-5,"a4":0.5,"u0":640,"v0":400,"width":1280,"height":800}"#;
        let intr: FisheyeIntrinsics = serde_json::from_str(json).unwrap();
        assert_eq!(intr.theta_max(), DEFAULT_THETA_MAX);
        let bad = r#"{"a1":-1,"a2":0,"a3":0,"a4":0,"u0":5,"v0":5,"width":10,"height":10}"#;
        assert!(serde_json::from_str::<FisheyeIntrinsics>(bad).is_err());
    }
}
