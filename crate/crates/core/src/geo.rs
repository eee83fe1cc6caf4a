//! Spherical-Earth geometry shared by the orbital and ground models.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Standard gravitational parameter of the Earth, m^3/s^2.
pub const EARTH_MU: f64 = 3.986_004_418e14;
/// Sidereal rotation rate, rad/s.
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_9e-5;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub type Vec3 = Vector3<f64>;

/// Geodetic coordinate on the spherical Earth, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatLon {
    pub lat_deg: f64,
    pub lon_deg: f64,
}

impl LatLon {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Self {
        Self { lat_deg, lon_deg }
    }

    /// Earth-fixed position of this point at the given radius from the centre.
    pub fn to_ecef(&self, radius_m: f64) -> Vec3 {
        let (lat, lon) = (self.lat_deg.to_radians(), self.lon_deg.to_radians());
        Vec3::new(
            radius_m * lat.cos() * lon.cos(),
            radius_m * lat.cos() * lon.sin(),
            radius_m * lat.sin(),
        )
    }

    /// Point on the Earth surface.
    pub fn surface_ecef(&self) -> Vec3 {
        self.to_ecef(EARTH_RADIUS_M)
    }

    /// Great-circle distance along the surface (haversine).
    pub fn great_circle_m(&self, other: &LatLon) -> f64 {
        let (p1, p2) = (self.lat_deg.to_radians(), other.lat_deg.to_radians());
        let dp = p2 - p1;
        let dl = (other.lon_deg - self.lon_deg).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
    }
}

/// Elevation angle of `target` seen from `observer` on the surface, in degrees.
///
/// Computed as the angle between the line of sight and the local horizontal
/// plane (the plane normal to the observer's radial direction).
pub fn elevation_deg(observer: &Vec3, target: &Vec3) -> f64 {
    let los = target - observer;
    let range = los.norm();
    if range == 0.0 {
        return 90.0;
    }
    let up = observer.normalize();
    (los.dot(&up) / range).clamp(-1.0, 1.0).asin().to_degrees()
}

/// Zenith angle of `target` seen from `observer`, in degrees.
pub fn zenith_angle_deg(observer: &Vec3, target: &Vec3) -> f64 {
    let los = target - observer;
    let range = los.norm();
    if range == 0.0 {
        return 0.0;
    }
    let up = observer.normalize();
    (los.dot(&up) / range).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Slant range from a surface point to a satellite at `altitude_m` seen at
/// elevation `elevation_deg`.
pub fn slant_range_m(altitude_m: f64, elevation_deg: f64) -> f64 {
    let re = EARTH_RADIUS_M;
    let s = elevation_deg.to_radians().sin();
    let rs = re + altitude_m;
    -re * s + ((re * s).powi(2) + rs * rs - re * re).sqrt()
}

/// Area of the spherical patch bounded by two parallels and two meridians.
pub fn patch_area_m2(lat_south_deg: f64, lat_north_deg: f64, lon_west_deg: f64, lon_east_deg: f64) -> f64 {
    EARTH_RADIUS_M.powi(2)
        * (lat_north_deg.to_radians().sin() - lat_south_deg.to_radians().sin())
        * (lon_east_deg - lon_west_deg).to_radians()
}
