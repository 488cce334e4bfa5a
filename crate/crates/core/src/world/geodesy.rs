//! WGS-84 geodetic coordinates and the local east-north-up tangent plane.
//!
//! Points are projected through earth-centred earth-fixed coordinates, so the
//! mapping is exact (no small-angle approximation) and the inverse round-trips
//! to floating point precision. The tangent plane itself ignores curvature,
//! which is adequate for scenario extents of a few tens of kilometres.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Real;
use crate::world::geometry::LocalPoint;

pub const WGS84_A: f64 = 6_378_137.0;
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

#[inline]
pub fn wgs84_e2() -> f64 {
    WGS84_F * (2.0 - WGS84_F)
}

/// Latitude/longitude in degrees, altitude in metres above the ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPoint<T = f64> {
    pub lat: T,
    pub lon: T,
    pub alt: T,
}

impl<T: Real> GeodeticPoint<T> {
    pub fn new(lat: T, lon: T, alt: T) -> Self {
        Self { lat, lon, alt }
    }

    pub fn validate(&self) -> Result<()> {
        let lat = self.lat.to_f64_lossy();
        let lon = self.lon.to_f64_lossy();
        let alt = self.alt.to_f64_lossy();
        if !(lat.is_finite() && lon.is_finite() && alt.is_finite()) {
            return Err(SimError::validation("geodetic coordinates must be finite"));
        }
        if lat.abs() > 90.0 {
            return Err(SimError::validation(format!("latitude {lat} out of range")));
        }
        if lon.abs() > 180.0 {
            return Err(SimError::validation(format!("longitude {lon} out of range")));
        }
        Ok(())
    }
}

fn to_ecef<T: Real>(p: &GeodeticPoint<T>) -> [T; 3] {
    let a = T::lit(WGS84_A);
    let e2 = T::lit(wgs84_e2());
    let lat = p.lat.to_radians_();
    let lon = p.lon.to_radians_();
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    let n = a / (T::one() - e2 * slat * slat).sqrt();
    [
        (n + p.alt) * clat * clon,
        (n + p.alt) * clat * slon,
        (n * (T::one() - e2) + p.alt) * slat,
    ]
}

fn from_ecef<T: Real>(x: T, y: T, z: T) -> GeodeticPoint<T> {
    let a = T::lit(WGS84_A);
    let e2 = T::lit(wgs84_e2());
    let lon = y.atan2(x);
    let p = (x * x + y * y).sqrt();
    let mut lat = z.atan2(p * (T::one() - e2));
    let mut alt = T::zero();
    for _ in 0..12 {
        let s = lat.sin();
        let n = a / (T::one() - e2 * s * s).sqrt();
        // Near the poles cos(lat) vanishes; use the z-based height there.
        alt = if lat.abs() < T::lit(std::f64::consts::FRAC_PI_4) {
            p / lat.cos() - n
        } else {
            z / s - n * (T::one() - e2)
        };
        lat = z.atan2(p * (T::one() - e2 * n / (n + alt)));
    }
    GeodeticPoint {
        lat: lat.to_degrees_(),
        lon: lon.to_degrees_(),
        alt,
    }
}

/// Projects a geodetic point into the ENU tangent plane anchored at `datum`.
pub fn geodetic_to_local<T: Real>(
    lat: T,
    lon: T,
    alt: T,
    datum: &GeodeticPoint<T>,
) -> Result<LocalPoint<T>> {
    let point = GeodeticPoint::new(lat, lon, alt);
    point.validate()?;
    datum.validate()?;
    let [x, y, z] = to_ecef(&point);
    let [x0, y0, z0] = to_ecef(datum);
    let (dx, dy, dz) = (x - x0, y - y0, z - z0);
    let (slat, clat) = datum.lat.to_radians_().sin_cos();
    let (slon, clon) = datum.lon.to_radians_().sin_cos();
    Ok(LocalPoint::new(
        -slon * dx + clon * dy,
        -slat * clon * dx - slat * slon * dy + clat * dz,
        clat * clon * dx + clat * slon * dy + slat * dz,
    ))
}

/// Inverse of [`geodetic_to_local`].
pub fn local_to_geodetic<T: Real>(p: &LocalPoint<T>, datum: &GeodeticPoint<T>) -> Result<GeodeticPoint<T>> {
    datum.validate()?;
    if !p.is_finite() {
        return Err(SimError::Numeric("local point not finite".into()));
    }
    let [x0, y0, z0] = to_ecef(datum);
    let (slat, clat) = datum.lat.to_radians_().sin_cos();
    let (slon, clon) = datum.lon.to_radians_().sin_cos();
    let (e, n, u) = (p.east, p.north, p.up);
    let dx = -slon * e - slat * clon * n + clat * clon * u;
    let dy = clon * e - slat * slon * n + clat * slon * u;
    let dz = clat * n + slat * u;
    Ok(from_ecef(x0 + dx, y0 + dy, z0 + dz))
}

trait Angle {
    fn to_radians_(self) -> Self;
    fn to_degrees_(self) -> Self;
}

impl<T: Real> Angle for T {
    fn to_radians_(self) -> Self {
        self * T::pi() / T::lit(180.0)
    }
    fn to_degrees_(self) -> Self {
        self * T::lit(180.0) / T::pi()
    }
}
