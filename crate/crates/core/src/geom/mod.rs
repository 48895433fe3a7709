//! Spherical geometry: viewport layouts, the gnomonic tangent-plane map,
//! precomputed resampling grids and overlap weights.

mod cache;
mod grid;
mod layout;

pub use cache::GridCache;
pub use grid::{
    angular_coordinate_maps, backproject_tangent_to_erp, backprojection_matrix,
    build_forward_grid, build_inverse_grid, coverage_scan, project_erp_to_tangent, sample_entries, Coverage,
    ForwardGrid, InverseEntry, InverseGrid, OverlapWeights, WeightMode,
};
pub use layout::{augment_layout, make_layout, Augmentation, LayoutKind, TangentLayout};

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point is {0:.6} rad from the tangent point; gnomonic map needs < pi/2")]
    OutOfHemisphere(f64),
    #[error("latitude {0} outside [-pi/2, pi/2]")]
    Latitude(f64),
    #[error("unsupported layout: {0}")]
    Layout(String),
    #[error("equirectangular image must be 2:1, got {height}x{width}")]
    Aspect { height: usize, width: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("overlap weights must be normalized for backprojection")]
    Unnormalized,
    #[error("grid cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A direction on the unit sphere: latitude `phi` in [-pi/2, pi/2] and
/// longitude `theta` in [-pi, pi).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularCoord {
    pub phi: f64,
    pub theta: f64,
}

impl AngularCoord {
    pub fn new(phi: f64, theta: f64) -> Result<Self, GeomError> {
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&phi) {
            return Err(GeomError::Latitude(phi));
        }
        Ok(Self {
            phi,
            theta: wrap_longitude(theta),
        })
    }

    pub fn from_degrees(lat: f64, lon: f64) -> Result<Self, GeomError> {
        Self::new(lat.to_radians(), lon.to_radians())
    }

    pub fn to_degrees(self) -> (f64, f64) {
        (self.phi.to_degrees(), self.theta.to_degrees())
    }

    pub fn to_unit(self) -> [f64; 3] {
        let (sp, cp) = self.phi.sin_cos();
        let (st, ct) = self.theta.sin_cos();
        [cp * ct, cp * st, sp]
    }

    pub fn from_unit(v: [f64; 3]) -> Self {
        let r = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let phi = (v[2] / r).clamp(-1.0, 1.0).asin();
        let theta = v[1].atan2(v[0]);
        Self {
            phi,
            theta: wrap_longitude(theta),
        }
    }

    /// Great-circle distance in radians.
    pub fn angular_distance(self, other: AngularCoord) -> f64 {
        let a = self.to_unit();
        let b = other.to_unit();
        let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        cn.atan2(dot)
    }
}

/// Wraps a longitude into [-pi, pi).
pub fn wrap_longitude(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU
    if t >= PI {
        t - TAU
    } else {
        t
    }
}

/// Gnomonic projection of `point` onto the plane tangent at `center`.
pub fn gnomonic_forward(center: AngularCoord, point: AngularCoord) -> Result<(f64, f64), GeomError> {
    let (s1, c1) = center.phi.sin_cos();
    let (s, c) = point.phi.sin_cos();
    let (sd, cd) = (point.theta - center.theta).sin_cos();
    let cos_c = s1 * s + c1 * c * cd;
    // points on the horizon map to infinity
    if cos_c <= 1e-12 {
        return Err(GeomError::OutOfHemisphere(center.angular_distance(point)));
    }
    let x = c * sd / cos_c;
    let y = (c1 * s - s1 * c * cd) / cos_c;
    Ok((x, y))
}

/// Inverse gnomonic map from tangent-plane coordinates back to the sphere.
pub fn gnomonic_inverse(center: AngularCoord, x: f64, y: f64) -> AngularCoord {
    let rho = x.hypot(y);
    if rho == 0.0 {
        return center;
    }
    let c = rho.atan();
    let (sc, cc) = c.sin_cos();
    let (s1, c1) = center.phi.sin_cos();
    let phi = (cc * s1 + y * sc * c1 / rho).clamp(-1.0, 1.0).asin();
    let theta = center.theta + (x * sc).atan2(rho * c1 * cc - y * s1 * sc);
    AngularCoord {
        phi,
        theta: wrap_longitude(theta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn ac(phi: f64, theta: f64) -> AngularCoord {
        AngularCoord::new(phi, theta).unwrap()
    }

    #[test]
    fn forward_examples() {
        let o = ac(0.0, 0.0);
        assert_eq!(gnomonic_forward(o, o).unwrap(), (0.0, 0.0));
        let (x, y) = gnomonic_forward(o, ac(0.0, FRAC_PI_4)).unwrap();
        assert!((x - 1.0).abs() < 1e-15 && y.abs() < 1e-15);
        let (x, y) = gnomonic_forward(o, ac(FRAC_PI_4, 0.0)).unwrap();
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_far_hemisphere() {
        let o = ac(0.0, 0.0);
        assert!(matches!(
            gnomonic_forward(o, ac(0.0, FRAC_PI_2)),
            Err(GeomError::OutOfHemisphere(_))
        ));
        assert!(gnomonic_forward(o, ac(0.0, -PI)).is_err());
    }

    #[test]
    fn inverse_examples() {
        let o = ac(0.0, 0.0);
        assert_eq!(gnomonic_inverse(o, 0.0, 0.0), o);
        let p = gnomonic_inverse(o, 1.0, 0.0);
        assert!(p.phi.abs() < 1e-15 && (p.theta - FRAC_PI_4).abs() < 1e-15);
        let north = ac(FRAC_PI_2, 0.0);
        let p = gnomonic_inverse(north, 0.0, -1.0);
        assert!((p.phi - FRAC_PI_4).abs() < 1e-12, "{p:?}");
        assert!(p.theta.abs() < 1e-12);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_longitude(PI), -PI);
        assert_eq!(wrap_longitude(-PI), -PI);
        assert!((wrap_longitude(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert!(AngularCoord::new(2.0, 0.0).is_err());
    }

    #[test]
    fn distance_is_symmetric_and_bounded() {
        let a = ac(0.3, -2.0);
        let b = ac(-1.1, 2.9);
        let d = a.angular_distance(b);
        assert!((d - b.angular_distance(a)).abs() < 1e-15);
        assert!(d > 0.0 && d <= PI);
        assert!(a.angular_distance(a) < 1e-15);
    }
}
