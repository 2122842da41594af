use nalgebra::Matrix3;

use super::{wrap_two_pi, Epoch, GroundSite, StateVector, Vec3, EARTH_ROT, FLATTENING, GMST_J2000, RE};

/// Greenwich sidereal angle under the linear rotation model, rad.
pub fn gmst(t: Epoch) -> f64 {
    wrap_two_pi(GMST_J2000 + EARTH_ROT * t.seconds())
}

fn rot_z(angle: f64, v: &Vec3) -> Vec3 {
    let (s, c) = angle.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Earth-fixed site position on the WGS-84 ellipsoid, km.
pub fn site_ecef(site: &GroundSite) -> Vec3 {
    let e2 = FLATTENING * (2.0 - FLATTENING);
    let (sl, cl) = site.lat.sin_cos();
    let (so, co) = site.lon.sin_cos();
    let n = RE / (1.0 - e2 * sl * sl).sqrt();
    Vec3::new(
        (n + site.alt) * cl * co,
        (n + site.alt) * cl * so,
        (n * (1.0 - e2) + site.alt) * sl,
    )
}

/// Inertial site position at `t`.
pub fn site_eci(site: &GroundSite, t: Epoch) -> Vec3 {
    rot_z(gmst(t), &site_ecef(site))
}

/// Rows are the local east, north and up unit vectors in the Earth-fixed frame.
fn enu_basis(site: &GroundSite) -> Matrix3<f64> {
    let (sl, cl) = site.lat.sin_cos();
    let (so, co) = site.lon.sin_cos();
    Matrix3::new(-so, co, 0.0, -sl * co, -sl * so, cl, cl * co, cl * so, sl)
}

/// Azimuth (clockwise from north, [0, 2π)), elevation and slant range of a
/// state seen from a site.
pub fn topocentric_angles(s: &StateVector, site: &GroundSite) -> (f64, f64, f64) {
    let r_ecef = rot_z(-gmst(s.epoch), &s.r);
    let rho = r_ecef - site_ecef(site);
    let enu = enu_basis(site) * rho;
    let az = wrap_two_pi(enu.x.atan2(enu.y));
    let horiz = enu.x.hypot(enu.y);
    let el = enu.z.atan2(horiz);
    (az, el, rho.norm())
}

/// Topocentric right ascension ([0, 2π)), declination and range.
pub fn radec_angles(s: &StateVector, site: &GroundSite) -> (f64, f64, f64) {
    let rho = s.r - site_eci(site, s.epoch);
    let ra = wrap_two_pi(rho.y.atan2(rho.x));
    let dec = rho.z.atan2(rho.x.hypot(rho.y));
    (ra, dec, rho.norm())
}

/// East-north-up unit vector for an azimuth/elevation pair.
pub fn angles_to_unit_vector(az: f64, el: f64) -> Vec3 {
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    Vec3::new(ce * sa, ce * ca, se)
}

/// Inertial line-of-sight unit vector for an observation. `radec` selects
/// whether the angle pair is right ascension/declination or azimuth/elevation.
pub fn los_eci(site: &GroundSite, t: Epoch, angle1: f64, angle2: f64, radec: bool) -> Vec3 {
    if radec {
        let (sa, ca) = angle1.sin_cos();
        let (sd, cd) = angle2.sin_cos();
        Vec3::new(cd * ca, cd * sa, sd)
    } else {
        let enu = angles_to_unit_vector(angle1, angle2);
        let ecef = enu_basis(site).transpose() * enu;
        rot_z(gmst(t), &ecef)
    }
}

/// Great-circle separation of two directions given as (longitude-like,
/// latitude-like) angle pairs, in [0, π].
pub fn angular_separation(a1: f64, e1: f64, a2: f64, e2: f64) -> f64 {
    let s_lat = ((e2 - e1) / 2.0).sin();
    let s_lon = ((a2 - a1) / 2.0).sin();
    let h = s_lat * s_lat + e1.cos() * e2.cos() * s_lon * s_lon;
    2.0 * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Columns are the radial, along-track and cross-track unit vectors of a state.
pub fn rsw_basis(s: &StateVector) -> Matrix3<f64> {
    let r_hat = s.r.normalize();
    let w_hat = s.r.cross(&s.v).normalize();
    let s_hat = w_hat.cross(&r_hat);
    Matrix3::from_columns(&[r_hat, s_hat, w_hat])
}
