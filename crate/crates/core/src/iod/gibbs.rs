use super::{observation_los, site_position, two_body_rms, IodError, IodMethod, IodSolution};
use crate::astro::{state_to_kepler, GroundSite, StateVector, MU};
use crate::tdm::{AngleMode, ObservationRecord};

const MAX_COPLANARITY_DEG: f64 = 3.0;
const MIN_SEPARATION_DEG: f64 = 1.0;

/// Gibbs three-position IOD for range-bearing observations. The velocity is
/// built at the middle observation.
pub fn iod_gibbs(
    obs: &[ObservationRecord; 3],
    site: &GroundSite,
    mode: AngleMode,
) -> Result<IodSolution, IodError> {
    let mut r = [crate::astro::Vec3::zeros(); 3];
    for (k, o) in obs.iter().enumerate() {
        let rho = o
            .range
            .ok_or_else(|| IodError::Precondition("Gibbs needs range measurements".into()))?;
        r[k] = site_position(site, o.epoch) + rho * observation_los(o, site, mode);
    }
    let [r1, r2, r3] = r;
    let (m1, m2, m3) = (r1.norm(), r2.norm(), r3.norm());

    let min_sep = [(r1, r2), (r2, r3), (r1, r3)]
        .iter()
        .map(|(a, b)| a.cross(b).norm().atan2(a.dot(b)).to_degrees())
        .fold(f64::INFINITY, f64::min);
    if !(min_sep >= MIN_SEPARATION_DEG) {
        return Err(IodError::Degenerate(format!(
            "position vectors {min_sep:.4} deg apart, need {MIN_SEPARATION_DEG}"
        )));
    }

    let z12 = r1.cross(&r2);
    let z23 = r2.cross(&r3);
    let z31 = r3.cross(&r1);
    let cop = (90.0 - (z23.dot(&r1) / (z23.norm() * m1)).clamp(-1.0, 1.0).acos().to_degrees()).abs();
    if cop > MAX_COPLANARITY_DEG {
        return Err(IodError::Geometry(format!(
            "positions {cop:.3} deg out of plane, limit {MAX_COPLANARITY_DEG}"
        )));
    }

    let n = m1 * z23 + m2 * z31 + m3 * z12;
    let d = z12 + z23 + z31;
    let s = (m2 - m3) * r1 + (m3 - m1) * r2 + (m1 - m2) * r3;
    let nd = n.dot(&d);
    if !(nd > 0.0) {
        return Err(IodError::Degenerate("N.D is not positive".into()));
    }
    let lg = (MU / nd).sqrt();
    let v2 = lg / m2 * d.cross(&r2) + lg * s;
    let state = StateVector { epoch: obs[1].epoch, r: r2, v: v2 };
    let elements = state_to_kepler(&state)?;
    let rms_residual = two_body_rms(&state, obs, site, mode)?;
    Ok(IodSolution { elements, rms_residual, method: IodMethod::Gibbs, n_obs: 3 })
}
