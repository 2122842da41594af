use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{AngleMode, ObservationRecord, Tdm, TdmError, TdmMeta};
use crate::astro::{
    radec_angles, topocentric_angles, Epoch, GroundSite, OrbitRecord, PropagatorConfig,
    StateVector, TrajectoryCache,
};
use crate::fedprop::ResidualModel;

pub const ELEVATION_MASK_DEG: f64 = 10.0;

/// Sensor and truth settings for [`synth_tdm_with`].
#[derive(Clone, Debug, Default)]
pub struct SynthOptions {
    /// Claimed object; `None` claims the record's own id.
    pub participant: Option<String>,
    pub mode: Option<AngleMode>,
    pub has_range: bool,
    pub cfg: PropagatorConfig,
    /// Great-circle displacement added to every observation before noise, rad.
    /// Used to model spoofed data.
    pub angle_offset: f64,
    /// Extra truth dynamics beyond the reference propagator.
    pub truth_model: Option<ResidualModel>,
    pub cache: Option<TrajectoryCache>,
}

/// Simulated sensor: reference-propagated angles with seeded Gaussian noise.
pub fn synth_tdm(
    record: &OrbitRecord,
    site: &GroundSite,
    epochs: &[Epoch],
    noise_std: f64,
    seed: u64,
) -> Result<Tdm, TdmError> {
    synth_tdm_with(record, site, epochs, noise_std, seed, &SynthOptions::default())
}

pub(crate) fn truth_state(
    record: &OrbitRecord,
    t: Epoch,
    opts: &SynthOptions,
) -> Result<StateVector, TdmError> {
    let s = match &opts.cache {
        Some(c) => c.state_at(record, &opts.cfg, t)?,
        None => crate::astro::propagate_j2(&record.elements, record.bstar, t, &opts.cfg)?,
    };
    Ok(match &opts.truth_model {
        Some(m) => m.apply(&record.elements, record.bstar, &s),
        None => s,
    })
}

/// Noise is isotropic on the sky: the second angle gets `noise_std`, the first
/// gets `noise_std / cos(angle2)`. Range noise has standard deviation
/// `noise_std * range`.
pub fn synth_tdm_with(
    record: &OrbitRecord,
    site: &GroundSite,
    epochs: &[Epoch],
    noise_std: f64,
    seed: u64,
    opts: &SynthOptions,
) -> Result<Tdm, TdmError> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(TdmError::Validation(format!("noise_std {noise_std} must be >= 0")));
    }
    let mode = opts.mode.unwrap_or(AngleMode::Azel);
    let mask = ELEVATION_MASK_DEG.to_radians();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hidden = Vec::new();
    let mut records = Vec::with_capacity(epochs.len());
    for &t in epochs {
        // the wire form keeps microseconds; observe at the epoch it will carry
        let t = t.round_to_micros();
        let s = truth_state(record, t, opts)?;
        let (az, el, range) = topocentric_angles(&s, site);
        if el <= mask {
            hidden.push(t);
            continue;
        }
        let (mut a1, mut a2) = match mode {
            AngleMode::Azel => (az, el),
            AngleMode::Radec => {
                let (ra, dec, _) = radec_angles(&s, site);
                (ra, dec)
            }
        };
        if opts.angle_offset != 0.0 {
            a2 = if a2 + opts.angle_offset <= std::f64::consts::FRAC_PI_2 {
                a2 + opts.angle_offset
            } else {
                a2 - opts.angle_offset
            };
        }
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let n3: f64 = rng.sample(StandardNormal);
        a2 = (a2 + noise_std * n2).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
        a1 += noise_std * n1 / a2.cos().max(1e-6);
        let range = opts.has_range.then(|| (range * (1.0 + noise_std * n3)).max(1e-3));
        records.push(ObservationRecord { epoch: t, angle1: a1, angle2: a2, range });
    }
    if !hidden.is_empty() {
        return Err(TdmError::Visibility { mask_deg: ELEVATION_MASK_DEG, epochs: hidden });
    }
    let meta = TdmMeta {
        site_id: site.site_id.clone(),
        participant: opts.participant.clone().unwrap_or_else(|| record.object_id.clone()),
        mode,
        has_range: opts.has_range,
    };
    Tdm::new(meta, records)
}
