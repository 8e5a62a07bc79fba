//! Local equirectangular projection on a spherical Earth.

/// Mean Earth radius (IUGG).
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

pub fn meters_per_deg_lat() -> f64 {
    EARTH_RADIUS_M * std::f64::consts::PI / 180.0
}

pub fn meters_per_deg_lon(lat_deg: f64) -> f64 {
    meters_per_deg_lat() * lat_deg.to_radians().cos()
}

/// East/north displacement in meters from `a` to `b`, scaled at their mean latitude.
pub fn local_displacement_m(a_lon: f64, a_lat: f64, b_lon: f64, b_lat: f64) -> (f64, f64) {
    let mid = 0.5 * (a_lat + b_lat);
    (
        (b_lon - a_lon) * meters_per_deg_lon(mid),
        (b_lat - a_lat) * meters_per_deg_lat(),
    )
}
