//! Time, frames, Keplerian machinery and the reference propagator.
//!
//! Everything here is a pure function of its inputs. The propagator is a
//! fixed-step RK4 over two-body gravity, the J2 zonal term and an
//! exponential-atmosphere drag model scaled by a ballistic coefficient.

mod cache;
mod frames;
mod kepler;
mod propagate;
mod time;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{Trajectory, TrajectoryCache};
pub use frames::{
    angles_to_unit_vector, angular_separation, gmst, los_eci, radec_angles, rsw_basis,
    site_ecef, site_eci, topocentric_angles,
};
pub use kepler::{
    kepler_to_state, propagate_two_body, solve_kepler, state_to_kepler, universal_fg,
};
pub use propagate::{
    acceleration, ephemeris, orbital_energy, propagate_j2, propagate_state, PropagatorConfig,
};
pub use time::Epoch;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Ground sites by id.
pub type SiteRegistry = std::collections::BTreeMap<String, GroundSite>;

/// Gravitational parameter of the Earth, km^3/s^2.
pub const MU: f64 = 398600.4418;
/// Second zonal harmonic.
pub const J2: f64 = 1.08262668e-3;
/// Equatorial radius, km.
pub const RE: f64 = 6378.137;
/// Earth rotation rate, rad/s.
pub const EARTH_ROT: f64 = 7.2921159e-5;
/// Greenwich sidereal angle at the J2000 epoch, rad.
pub const GMST_J2000: f64 = 4.894961212823;
/// WGS-84 flattening, used only for geodetic site positions.
pub const FLATTENING: f64 = 1.0 / 298.257223563;

pub const SECONDS_PER_DAY: f64 = 86400.0;
pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Physical constants echoed into scenario reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub mu: f64,
    pub j2: f64,
    pub re: f64,
    pub earth_rot: f64,
    pub gmst_j2000: f64,
    pub flattening: f64,
    pub drag_rho0: f64,
    pub drag_h0: f64,
    pub drag_scale_height: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self {
            mu: MU,
            j2: J2,
            re: RE,
            earth_rot: EARTH_ROT,
            gmst_j2000: GMST_J2000,
            flattening: FLATTENING,
            drag_rho0: propagate::RHO0,
            drag_h0: propagate::H0,
            drag_scale_height: propagate::SCALE_HEIGHT,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AstroError {
    #[error("Kepler equation did not converge after {iterations} iterations (M={mean_anomaly}, e={eccentricity})")]
    KeplerNonConvergent {
        iterations: u32,
        mean_anomaly: f64,
        eccentricity: f64,
    },
    #[error("invalid orbital elements: {0}")]
    InvalidElements(String),
    #[error("unsupported regime: {0}")]
    Unsupported(String),
    #[error("object {object} decayed below 100 km altitude at t={at}")]
    Decay { object: String, at: Epoch },
    #[error("invalid propagation request: {0}")]
    InvalidRequest(String),
}

/// Osculating Keplerian elements; angles in radians, `a` in km.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeplerianElements {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub raan: f64,
    pub argp: f64,
    pub mean_anomaly: f64,
    pub epoch: Epoch,
}

/// Wraps an angle into [0, 2π).
pub fn wrap_two_pi(x: f64) -> f64 {
    let y = x.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if y >= TWO_PI {
        0.0
    } else {
        y
    }
}

/// Wraps an angle difference into (-π, π].
pub fn wrap_pi(x: f64) -> f64 {
    let y = wrap_two_pi(x);
    if y > std::f64::consts::PI {
        y - TWO_PI
    } else {
        y
    }
}

impl KeplerianElements {
    /// Builds elements, normalizing the three angles into [0, 2π).
    pub fn new(
        a: f64,
        e: f64,
        i: f64,
        raan: f64,
        argp: f64,
        mean_anomaly: f64,
        epoch: Epoch,
    ) -> Result<Self, AstroError> {
        let el = Self {
            a,
            e,
            i,
            raan: wrap_two_pi(raan),
            argp: wrap_two_pi(argp),
            mean_anomaly: wrap_two_pi(mean_anomaly),
            epoch,
        };
        el.check()?;
        Ok(el)
    }

    pub fn check(&self) -> Result<(), AstroError> {
        let all = [self.a, self.e, self.i, self.raan, self.argp, self.mean_anomaly];
        if all.iter().any(|x| !x.is_finite()) || !self.epoch.seconds().is_finite() {
            return Err(AstroError::InvalidElements(format!("non-finite field in {self:?}")));
        }
        if self.a <= 0.0 {
            return Err(AstroError::InvalidElements(format!("a={} must be positive", self.a)));
        }
        if !(0.0..1.0).contains(&self.e) {
            return Err(AstroError::InvalidElements(format!(
                "e={} outside [0,1)",
                self.e
            )));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.i) {
            return Err(AstroError::InvalidElements(format!("i={} outside [0,pi]", self.i)));
        }
        for (name, x) in [("raan", self.raan), ("argp", self.argp), ("M", self.mean_anomaly)] {
            if !(0.0..TWO_PI).contains(&x) {
                return Err(AstroError::InvalidElements(format!("{name}={x} outside [0,2pi)")));
            }
        }
        Ok(())
    }

    pub fn mean_motion(&self) -> f64 {
        (MU / self.a.powi(3)).sqrt()
    }

    pub fn period(&self) -> f64 {
        TWO_PI / self.mean_motion()
    }
}

/// Propagation state in the ECI frame; km and km/s.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub epoch: Epoch,
    pub r: Vec3,
    pub v: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectSource {
    Cataloged,
    Mined,
    Calibration,
}

/// A catalog entry: elements, a drag coefficient and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub object_id: String,
    pub elements: KeplerianElements,
    /// Ballistic coefficient, 1/km.
    pub bstar: f64,
    pub source: ObjectSource,
}

impl OrbitRecord {
    pub fn check(&self) -> Result<(), AstroError> {
        if self.object_id.is_empty() {
            return Err(AstroError::InvalidElements("empty object_id".into()));
        }
        if !self.bstar.is_finite() {
            return Err(AstroError::InvalidElements("non-finite bstar".into()));
        }
        self.elements.check()
    }
}

/// Ground sensor location on the WGS-84 ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundSite {
    pub site_id: String,
    /// Geodetic latitude, rad.
    pub lat: f64,
    pub lon: f64,
    /// Height above the ellipsoid, km.
    pub alt: f64,
}

impl GroundSite {
    pub fn new(site_id: impl Into<String>, lat_deg: f64, lon_deg: f64, alt_km: f64) -> Self {
        Self {
            site_id: site_id.into(),
            lat: lat_deg.to_radians(),
            lon: lon_deg.to_radians(),
            alt: alt_km,
        }
    }

    pub fn check(&self) -> Result<(), AstroError> {
        if self.site_id.is_empty()
            || !(self.lat.abs() <= std::f64::consts::FRAC_PI_2)
            || !(self.alt >= 0.0)
            || !self.lon.is_finite()
        {
            return Err(AstroError::InvalidRequest(format!("invalid ground site {self:?}")));
        }
        Ok(())
    }
}
