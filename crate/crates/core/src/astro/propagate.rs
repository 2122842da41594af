use serde::{Deserialize, Serialize};

use super::{
    kepler_to_state, AstroError, Epoch, KeplerianElements, StateVector, Vec3, EARTH_ROT, J2, MU,
    RE, SECONDS_PER_DAY,
};

/// Reference density of the exponential atmosphere, kg/km^3.
pub(crate) const RHO0: f64 = 1e-4;
/// Reference altitude of the exponential atmosphere, km.
pub(crate) const H0: f64 = 400.0;
/// Density scale height, km.
pub(crate) const SCALE_HEIGHT: f64 = 60.0;

const DECAY_ALTITUDE: f64 = 100.0;
const MAX_SPAN: f64 = 30.0 * SECONDS_PER_DAY;

/// Integrator settings. `j2` and `drag` switch the perturbations off for tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagatorConfig {
    pub step_s: f64,
    pub j2: bool,
    pub drag: bool,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        Self {
            step_s: 10.0,
            j2: true,
            drag: true,
        }
    }
}

impl PropagatorConfig {
    pub fn two_body(step_s: f64) -> Self {
        Self {
            step_s,
            j2: false,
            drag: false,
        }
    }

    pub fn check(&self) -> Result<(), AstroError> {
        if !(1.0..=60.0).contains(&self.step_s) {
            return Err(AstroError::InvalidRequest(format!(
                "step {} s outside [1, 60]",
                self.step_s
            )));
        }
        Ok(())
    }
}

/// ECI acceleration, km/s^2.
pub fn acceleration(r: &Vec3, v: &Vec3, bstar: f64, cfg: &PropagatorConfig) -> Vec3 {
    let r2 = r.norm_squared();
    let rm = r2.sqrt();
    let mut acc = -MU / (r2 * rm) * r;
    if cfg.j2 {
        let z2 = r.z * r.z / r2;
        let k = -1.5 * J2 * MU * RE * RE / (r2 * r2);
        acc += Vec3::new(
            k * (1.0 - 5.0 * z2) * r.x / rm,
            k * (1.0 - 5.0 * z2) * r.y / rm,
            k * (3.0 - 5.0 * z2) * r.z / rm,
        );
    }
    if cfg.drag && bstar != 0.0 {
        let h = rm - RE;
        let rho = RHO0 * (-(h - H0) / SCALE_HEIGHT).exp();
        let v_rel = Vec3::new(v.x + EARTH_ROT * r.y, v.y - EARTH_ROT * r.x, v.z);
        acc -= bstar * rho * v_rel.norm() * v_rel;
    }
    acc
}

/// Specific energy including the J2 potential; conserved without drag.
pub fn orbital_energy(s: &StateVector, cfg: &PropagatorConfig) -> f64 {
    let rm = s.r.norm();
    let mut u = -MU / rm;
    if cfg.j2 {
        let sin2 = (s.r.z / rm).powi(2);
        u += MU / rm * J2 * (RE / rm).powi(2) * 0.5 * (3.0 * sin2 - 1.0);
    }
    s.v.norm_squared() / 2.0 + u
}

pub(crate) fn rk4_step(r: &Vec3, v: &Vec3, h: f64, bstar: f64, cfg: &PropagatorConfig) -> (Vec3, Vec3) {
    let a1 = acceleration(r, v, bstar, cfg);
    let r2 = r + 0.5 * h * v;
    let v2 = v + 0.5 * h * a1;
    let a2 = acceleration(&r2, &v2, bstar, cfg);
    let r3 = r + 0.5 * h * v2;
    let v3 = v + 0.5 * h * a2;
    let a3 = acceleration(&r3, &v3, bstar, cfg);
    let r4 = r + h * v3;
    let v4 = v + h * a3;
    let a4 = acceleration(&r4, &v4, bstar, cfg);
    (
        r + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4),
        v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4),
    )
}

/// Position on the fixed step grid anchored at the start epoch: `n` whole
/// steps followed by a final partial step of `rem` seconds, both in the
/// direction `dir`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct GridPoint {
    pub dir: f64,
    pub n: u64,
    pub rem: f64,
}

pub(crate) fn grid_point(span: f64, step: f64) -> GridPoint {
    let dir = if span < 0.0 { -1.0 } else { 1.0 };
    let abs = span.abs();
    let mut n = (abs / step).floor() as u64;
    let mut rem = abs - n as f64 * step;
    if rem < 0.0 && n > 0 {
        n -= 1;
        rem += step;
    }
    GridPoint {
        dir,
        n,
        rem: rem.max(0.0),
    }
}

pub(crate) fn check_span(start: Epoch, t: Epoch) -> Result<f64, AstroError> {
    let span = t - start;
    if !span.is_finite() || span.abs() > MAX_SPAN {
        return Err(AstroError::InvalidRequest(format!(
            "propagation span {span} s exceeds 30 days"
        )));
    }
    Ok(span)
}

pub(crate) fn check_altitude(r: &Vec3, object: &str, at: Epoch) -> Result<(), AstroError> {
    if r.norm() - RE < DECAY_ALTITUDE {
        return Err(AstroError::Decay {
            object: object.to_string(),
            at,
        });
    }
    Ok(())
}

/// Walks whole grid steps from `(r, v)`, checking altitude after each.
#[allow(clippy::too_many_arguments)]
pub(crate) fn walk(
    r: &mut Vec3,
    v: &mut Vec3,
    steps: u64,
    h: f64,
    bstar: f64,
    cfg: &PropagatorConfig,
    object: &str,
    time_of: impl Fn(u64) -> Epoch,
) -> Result<(), AstroError> {
    for k in 1..=steps {
        let (nr, nv) = rk4_step(r, v, h, bstar, cfg);
        *r = nr;
        *v = nv;
        check_altitude(r, object, time_of(k))?;
    }
    Ok(())
}

pub(crate) fn finish(
    r: &Vec3,
    v: &Vec3,
    rem: f64,
    dir: f64,
    bstar: f64,
    cfg: &PropagatorConfig,
    object: &str,
    t: Epoch,
) -> Result<StateVector, AstroError> {
    let (r, v) = if rem > 0.0 {
        rk4_step(r, v, dir * rem, bstar, cfg)
    } else {
        (*r, *v)
    };
    check_altitude(&r, object, t)?;
    Ok(StateVector { epoch: t, r, v })
}

/// Integrates a state to `t` on the grid anchored at `s.epoch`.
pub fn propagate_state(
    s: &StateVector,
    bstar: f64,
    t: Epoch,
    cfg: &PropagatorConfig,
) -> Result<StateVector, AstroError> {
    cfg.check()?;
    let span = check_span(s.epoch, t)?;
    let g = grid_point(span, cfg.step_s);
    let (mut r, mut v) = (s.r, s.v);
    check_altitude(&r, "state", s.epoch)?;
    let h = g.dir * cfg.step_s;
    walk(&mut r, &mut v, g.n, h, bstar, cfg, "state", |k| s.epoch + h * k as f64)?;
    finish(&r, &v, g.rem, g.dir, bstar, cfg, "state", t)
}

/// Reference propagator: RK4 over two-body + J2 + exponential drag from the
/// element epoch to `t`.
pub fn propagate_j2(
    el: &KeplerianElements,
    bstar: f64,
    t: Epoch,
    cfg: &PropagatorConfig,
) -> Result<StateVector, AstroError> {
    let s0 = kepler_to_state(el, el.epoch)?;
    propagate_state(&s0, bstar, t, cfg)
}

/// Propagates to many epochs in one pass. Each output is bit-identical to
/// calling [`propagate_j2`] for that epoch alone.
pub fn ephemeris(
    el: &KeplerianElements,
    bstar: f64,
    epochs: &[Epoch],
    cfg: &PropagatorConfig,
) -> Result<Vec<StateVector>, AstroError> {
    cfg.check()?;
    let s0 = kepler_to_state(el, el.epoch)?;
    check_altitude(&s0.r, "elements", el.epoch)?;
    let mut out: Vec<Option<StateVector>> = vec![None; epochs.len()];
    let mut order: Vec<(usize, GridPoint)> = Vec::with_capacity(epochs.len());
    for (idx, t) in epochs.iter().enumerate() {
        let span = check_span(el.epoch, *t)?;
        order.push((idx, grid_point(span, cfg.step_s)));
    }
    for dir in [1.0, -1.0] {
        let mut pts: Vec<_> = order.iter().filter(|(_, g)| g.dir == dir).collect();
        pts.sort_by_key(|(_, g)| g.n);
        let (mut r, mut v) = (s0.r, s0.v);
        let mut at = 0u64;
        let h = dir * cfg.step_s;
        for (idx, g) in pts {
            let base = at;
            walk(&mut r, &mut v, g.n - at, h, bstar, cfg, "elements", |k| {
                el.epoch + h * (base + k) as f64
            })?;
            at = g.n;
            out[*idx] = Some(finish(&r, &v, g.rem, g.dir, bstar, cfg, "elements", epochs[*idx])?);
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every epoch visited")).collect())
}
