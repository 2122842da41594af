//! Initial orbit determination and least-squares refinement.
//!
//! Ranging TDMs go through Gibbs, angles-only TDMs through Gauss. Both return
//! osculating elements at the middle observation. [`refine_elements`] then
//! fits the reference propagator to any number of TDMs by Gauss-Newton.

mod gauss;
mod gibbs;
mod refine;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{
    angular_separation, kepler_to_state, los_eci, propagate_two_body, radec_angles, site_eci,
    topocentric_angles, AstroError, Epoch, GroundSite, KeplerianElements, StateVector, Vec3,
};
use crate::tdm::{AngleMode, ObservationRecord, Tdm};

pub use gauss::{iod_gauss, iod_gauss_candidates};
pub use gibbs::iod_gibbs;
pub use refine::{refine_elements, refine_elements_with, RefineOptions, RefineOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IodMethod {
    Gibbs,
    Gauss,
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IodSolution {
    pub elements: KeplerianElements,
    /// RMS angular residual over the observations used, rad.
    pub rms_residual: f64,
    pub method: IodMethod,
    pub n_obs: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IodError {
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("degenerate geometry: {0}; the Herrick-Gibbs regime is not supported")]
    Degenerate(String),
    #[error("no admissible root of the range polynomial")]
    NoSolution,
    #[error("Gauss iteration did not converge: {0}")]
    Convergence(String),
    #[error("precondition: {0}")]
    Precondition(String),
    #[error("normal matrix is rank deficient; weakest direction is {weak}")]
    Rank { weak: &'static str },
    #[error("refinement diverged: cost rose on {0} consecutive steps")]
    Divergence(u32),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error(transparent)]
    Astro(#[from] AstroError),
}

/// Predicted angle pair of a state for a given angle mode.
pub fn predicted_angles(s: &StateVector, site: &GroundSite, mode: AngleMode) -> (f64, f64, f64) {
    match mode {
        AngleMode::Azel => topocentric_angles(s, site),
        AngleMode::Radec => radec_angles(s, site),
    }
}

/// Inertial line of sight of an observation.
pub fn observation_los(obs: &ObservationRecord, site: &GroundSite, mode: AngleMode) -> Vec3 {
    los_eci(site, obs.epoch, obs.angle1, obs.angle2, mode.is_radec())
}

/// Root mean square of a residual list.
pub fn rms(residuals: &[f64]) -> f64 {
    if residuals.is_empty() {
        return 0.0;
    }
    (residuals.iter().map(|x| x * x).sum::<f64>() / residuals.len() as f64).sqrt()
}

/// RMS angular residual of observations against two-body motion from `s`.
pub fn two_body_rms(
    s: &StateVector,
    obs: &[ObservationRecord],
    site: &GroundSite,
    mode: AngleMode,
) -> Result<f64, IodError> {
    let mut res = Vec::with_capacity(obs.len());
    for o in obs {
        let p = propagate_two_body(s, o.epoch)?;
        let (a1, a2, _) = predicted_angles(&p, site, mode);
        res.push(angular_separation(o.angle1, o.angle2, a1, a2));
    }
    Ok(rms(&res))
}

/// First, middle and last records of a TDM.
pub fn triplet(tdm: &Tdm) -> [ObservationRecord; 3] {
    let r = tdm.records();
    [r[0], r[r.len() / 2], r[r.len() - 1]]
}

/// IOD for a single TDM: Gibbs for ranging data, Gauss otherwise, on the
/// first/middle/last records. The RMS covers every record of the TDM.
pub fn initial_orbit(tdm: &Tdm, site: &GroundSite) -> Result<IodSolution, IodError> {
    let obs = triplet(tdm);
    let mode = tdm.meta().mode;
    let candidates = if tdm.meta().has_range {
        vec![iod_gibbs(&obs, site, mode)?]
    } else {
        iod_gauss_candidates(&obs, site, mode)?
    };
    let mut best: Option<IodSolution> = None;
    for mut c in candidates {
        let s = kepler_to_state(&c.elements, c.elements.epoch)?;
        c.rms_residual = two_body_rms(&s, tdm.records(), site, mode)?;
        c.n_obs = tdm.records().len();
        if best.as_ref().is_none_or(|b| c.rms_residual < b.rms_residual) {
            best = Some(c);
        }
    }
    best.ok_or(IodError::NoSolution)
}

pub(crate) fn site_position(site: &GroundSite, t: Epoch) -> Vec3 {
    site_eci(site, t)
}
