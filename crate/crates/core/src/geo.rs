//! Geodetic positions, a local east/north plane around a reference point, and
//! great-circle distances on a spherical Earth.
//!
//! The local plane is the spherical azimuthal-equidistant projection centred
//! on the reference: distance and bearing from the reference are preserved
//! exactly, and the distortion of distances between two points within 20 km of
//! the reference stays in the parts-per-million range. Everything happens on a
//! sphere of radius [`EARTH_RADIUS_M`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Largest distance from the reference point for which [`to_enu`] is accepted.
pub const MAX_PLANE_DISTANCE_M: f64 = 100_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} is not finite")]
    Longitude(f64),
    #[error("point is {0:.0} m from the plane reference, beyond the {MAX_PLANE_DISTANCE_M} m regime")]
    OutOfRegime(f64),
    #[error("local coordinates ({0}, {1}) are not finite")]
    NonFinite(f64, f64),
}

/// A geodetic position in degrees.
///
/// Longitude is always stored normalized into `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::Latitude(lat_deg));
        }
        if !lon_deg.is_finite() {
            return Err(GeoError::Longitude(lon_deg));
        }
        Ok(Self {
            lat_deg,
            lon_deg: normalize_lon(lon_deg),
        })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.6}, {:.6})", self.lat_deg, self.lon_deg)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// A point in the local east/north plane of `reference`, in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnuPoint {
    pub x_m: f64,
    pub y_m: f64,
    pub reference: GeoPoint,
}

impl EnuPoint {
    pub fn new(x_m: f64, y_m: f64, reference: GeoPoint) -> Self {
        Self { x_m, y_m, reference }
    }

    pub fn origin(reference: GeoPoint) -> Self {
        Self::new(0.0, 0.0, reference)
    }

    /// Planar distance to another point of the same plane.
    pub fn distance_to(&self, other: &EnuPoint) -> f64 {
        let dx = self.x_m - other.x_m;
        let dy = self.y_m - other.y_m;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn offset(&self, dx_m: f64, dy_m: f64) -> Self {
        Self::new(self.x_m + dx_m, self.y_m + dy_m, self.reference)
    }
}

/// Project `p` onto the local plane around `reference`.
pub fn to_enu(p: GeoPoint, reference: GeoPoint) -> Result<EnuPoint, GeoError> {
    if p == reference {
        return Ok(EnuPoint::origin(reference));
    }
    let central = central_angle(reference, p);
    let dist = central * EARTH_RADIUS_M;
    if dist >= MAX_PLANE_DISTANCE_M {
        return Err(GeoError::OutOfRegime(dist));
    }
    let (lat0, lat) = (reference.lat_deg.to_radians(), p.lat_deg.to_radians());
    let dlon = normalize_lon(p.lon_deg - reference.lon_deg).to_radians();

    // k = c / sin(c) rescales the orthographic components to arc length
    let k = if central < 1e-12 { 1.0 } else { central / central.sin() };
    let x = EARTH_RADIUS_M * k * lat.cos() * dlon.sin();
    let y = EARTH_RADIUS_M * k * (lat0.cos() * lat.sin() - lat0.sin() * lat.cos() * dlon.cos());
    Ok(EnuPoint::new(x, y, reference))
}

/// Inverse of [`to_enu`].
pub fn from_enu(p: &EnuPoint) -> Result<GeoPoint, GeoError> {
    if !p.x_m.is_finite() || !p.y_m.is_finite() {
        return Err(GeoError::NonFinite(p.x_m, p.y_m));
    }
    let rho = (p.x_m * p.x_m + p.y_m * p.y_m).sqrt();
    if rho == 0.0 {
        return Ok(p.reference);
    }
    let c = rho / EARTH_RADIUS_M;
    let lat0 = p.reference.lat_deg.to_radians();
    let (sin_c, cos_c) = c.sin_cos();
    let sin_lat = (cos_c * lat0.sin() + p.y_m * sin_c * lat0.cos() / rho).clamp(-1.0, 1.0);
    let lat = sin_lat.asin();
    let dlon = (p.x_m * sin_c).atan2(rho * lat0.cos() * cos_c - p.y_m * lat0.sin() * sin_c);
    GeoPoint::new(lat.to_degrees(), p.reference.lon_deg + dlon.to_degrees())
}

fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat_a, lat_b) = (a.lat_deg.to_radians(), b.lat_deg.to_radians());
    let dlat = lat_b - lat_a;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat_a.cos() * lat_b.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    central_angle(a, b) * EARTH_RADIUS_M
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bcn() -> GeoPoint {
        GeoPoint::new(41.3851, 2.1734).unwrap()
    }

    // Spherical law of cosines, kept separate from the haversine route.
    fn cosine_law_m(a: GeoPoint, b: GeoPoint) -> f64 {
        let (p1, p2) = (a.lat_deg().to_radians(), b.lat_deg().to_radians());
        let dl = (b.lon_deg() - a.lon_deg()).to_radians();
        let c = p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos();
        c.clamp(-1.0, 1.0).acos() * EARTH_RADIUS_M
    }

    /// Point at `dist_m` along `bearing_rad` from `origin` (direct geodesic on the sphere).
    fn destination(origin: GeoPoint, bearing_rad: f64, dist_m: f64) -> GeoPoint {
        let d = dist_m / EARTH_RADIUS_M;
        let lat1 = origin.lat_deg().to_radians();
        let lat2 = (lat1.sin() * d.cos() + lat1.cos() * d.sin() * bearing_rad.cos()).asin();
        let dlon = (bearing_rad.sin() * d.sin() * lat1.cos()).atan2(d.cos() - lat1.sin() * lat2.sin());
        GeoPoint::new(lat2.to_degrees(), origin.lon_deg() + dlon.to_degrees()).unwrap()
    }

    #[test]
    fn validation() {
        assert!(matches!(GeoPoint::new(90.5, 0.0), Err(GeoError::Latitude(_))));
        assert!(matches!(GeoPoint::new(f64::NAN, 0.0), Err(GeoError::Latitude(_))));
        assert!(matches!(GeoPoint::new(0.0, f64::INFINITY), Err(GeoError::Longitude(_))));
        assert_eq!(GeoPoint::new(0.0, 180.0).unwrap().lon_deg(), -180.0);
        assert_eq!(GeoPoint::new(0.0, 190.0).unwrap().lon_deg(), -170.0);
        assert_eq!(GeoPoint::new(0.0, -540.0).unwrap().lon_deg(), -180.0);
    }

    #[test]
    fn origin_maps_to_origin() {
        let e = to_enu(bcn(), bcn()).unwrap();
        assert_eq!((e.x_m, e.y_m), (0.0, 0.0));
        assert_eq!(from_enu(&EnuPoint::origin(bcn())).unwrap(), bcn());
    }

    #[test]
    fn north_offset_matches_haversine() {
        let r = bcn();
        let p = GeoPoint::new(r.lat_deg() + 0.001, r.lon_deg()).unwrap();
        let e = to_enu(p, r).unwrap();
        assert_eq!(e.x_m, 0.0);
        let oracle = cosine_law_m(r, p);
        assert!((e.y_m - oracle).abs() < 1e-3, "{} vs {}", e.y_m, oracle);
        assert!((e.y_m - 111.19).abs() < 0.01);

        let back = from_enu(&EnuPoint::new(0.0, e.y_m, r)).unwrap();
        assert!((back.lat_deg() - (r.lat_deg() + 0.001)).abs() < 1e-10);
        assert!((back.lon_deg() - r.lon_deg()).abs() < 1e-12);
    }

    #[test]
    fn east_west_mirror() {
        let r = bcn();
        let east = GeoPoint::new(r.lat_deg() + 0.01, r.lon_deg() + 0.02).unwrap();
        let west = GeoPoint::new(r.lat_deg() + 0.01, r.lon_deg() - 0.02).unwrap();
        let (a, b) = (to_enu(east, r).unwrap(), to_enu(west, r).unwrap());
        assert!((a.x_m + b.x_m).abs() < 1e-9);
        assert!((a.y_m - b.y_m).abs() < 1e-9);
    }

    #[test]
    fn regime_limit() {
        let far = destination(bcn(), 0.3, 150_000.0);
        assert!(matches!(to_enu(far, bcn()), Err(GeoError::OutOfRegime(_))));
        assert!(to_enu(destination(bcn(), 0.3, 99_000.0), bcn()).is_ok());
    }

    #[test]
    fn dateline_neighbours() {
        let r = GeoPoint::new(0.0, 179.999).unwrap();
        let p = GeoPoint::new(0.0, -179.999).unwrap();
        let e = to_enu(p, r).unwrap();
        assert!((e.x_m - haversine_m(r, p)).abs() < 1e-6);
        let back = from_enu(&e).unwrap();
        assert!((back.lon_deg() - p.lon_deg()).abs() < 1e-9);
    }

    #[test]
    fn barcelona_madrid() {
        let madrid = GeoPoint::new(40.4168, -3.7038).unwrap();
        let d = haversine_m(bcn(), madrid);
        let oracle = cosine_law_m(bcn(), madrid);
        assert!((d - oracle).abs() / oracle < 0.005);
        assert!((d - 504_600.0).abs() / 504_600.0 < 0.005, "{d}");
        assert_eq!(haversine_m(bcn(), bcn()), 0.0);
        assert_eq!(haversine_m(bcn(), madrid), haversine_m(madrid, bcn()));
    }

    fn near(max_m: f64) -> impl Strategy<Value = GeoPoint> {
        (0.0..std::f64::consts::TAU, 0.0..1.0f64)
            .prop_map(move |(b, u)| destination(bcn(), b, max_m * u.sqrt()))
    }

    fn anywhere() -> impl Strategy<Value = GeoPoint> {
        (-89.0..89.0f64, -180.0..180.0f64).prop_map(|(a, b)| GeoPoint::new(a, b).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn round_trip_within_50km(p in near(50_000.0)) {
            let back = from_enu(&to_enu(p, bcn()).unwrap()).unwrap();
            prop_assert!(haversine_m(p, back) < 0.01);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn plane_distance_tracks_great_circle(a in near(20_000.0), b in near(20_000.0)) {
            let d = haversine_m(a, b);
            prop_assume!(d > 1.0);
            let planar = to_enu(a, bcn()).unwrap().distance_to(&to_enu(b, bcn()).unwrap());
            prop_assert!((planar - d).abs() / d < 1e-3, "planar {} great-circle {}", planar, d);
        }

        #[test]
        fn haversine_is_a_metric(a in anywhere(), b in anywhere(), c in anywhere()) {
            let (ab, ba) = (haversine_m(a, b), haversine_m(b, a));
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(haversine_m(a, a), 0.0);
            prop_assert!(haversine_m(a, c) <= ab + haversine_m(b, c) + 1e-6);
        }
    }
}
