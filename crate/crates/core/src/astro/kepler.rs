use super::{wrap_two_pi, AstroError, Epoch, KeplerianElements, StateVector, Vec3, MU};

const MAX_KEPLER_ITER: u32 = 50;

/// Solves Kepler's equation `E - e sin E = M` by Newton iteration.
pub fn solve_kepler(mean_anomaly: f64, e: f64) -> Result<f64, AstroError> {
    let m = wrap_two_pi(mean_anomaly);
    let mut ecc = if e < 0.8 { m } else { std::f64::consts::PI };
    for _ in 0..MAX_KEPLER_ITER {
        let f = ecc - e * ecc.sin() - m;
        let fp = 1.0 - e * ecc.cos();
        let step = f / fp;
        ecc -= step;
        if step.abs() < 1e-14 {
            return Ok(ecc);
        }
    }
    Err(AstroError::KeplerNonConvergent {
        iterations: MAX_KEPLER_ITER,
        mean_anomaly: m,
        eccentricity: e,
    })
}

fn rotation_pqw_to_eci(raan: f64, i: f64, argp: f64) -> nalgebra::Matrix3<f64> {
    let (so, co) = raan.sin_cos();
    let (si, ci) = i.sin_cos();
    let (sw, cw) = argp.sin_cos();
    nalgebra::Matrix3::new(
        co * cw - so * sw * ci,
        -co * sw - so * cw * ci,
        so * si,
        so * cw + co * sw * ci,
        -so * sw + co * cw * ci,
        -co * si,
        sw * si,
        cw * si,
        ci,
    )
}

/// Two-body state at `t` for the orbit described by `el`.
pub fn kepler_to_state(el: &KeplerianElements, t: Epoch) -> Result<StateVector, AstroError> {
    el.check()?;
    let dt = t - el.epoch;
    if !dt.is_finite() {
        return Err(AstroError::InvalidRequest("non-finite time offset".into()));
    }
    let n = el.mean_motion();
    let m = el.mean_anomaly + n * dt;
    let ecc = solve_kepler(m, el.e)?;
    let (se, ce) = ecc.sin_cos();
    let b = (1.0 - el.e * el.e).sqrt();
    let r_mag = el.a * (1.0 - el.e * ce);
    let r_pqw = Vec3::new(el.a * (ce - el.e), el.a * b * se, 0.0);
    let k = n * el.a * el.a / r_mag;
    let v_pqw = Vec3::new(-k * se, k * b * ce, 0.0);
    let rot = rotation_pqw_to_eci(el.raan, el.i, el.argp);
    Ok(StateVector {
        epoch: t,
        r: rot * r_pqw,
        v: rot * v_pqw,
    })
}

const CIRCULAR_E: f64 = 1e-12;
const EQUATORIAL_N: f64 = 1e-12;

/// Osculating elements of an elliptic ECI state.
pub fn state_to_kepler(s: &StateVector) -> Result<KeplerianElements, AstroError> {
    let r = s.r;
    let v = s.v;
    if r.iter().chain(v.iter()).any(|x| !x.is_finite()) {
        return Err(AstroError::InvalidRequest("non-finite state".into()));
    }
    let h = r.cross(&v);
    let h_mag = h.norm();
    if h_mag <= 1e-9 {
        return Err(AstroError::Unsupported(format!("rectilinear state |r x v|={h_mag}")));
    }
    let r_mag = r.norm();
    let v2 = v.norm_squared();
    let energy = v2 / 2.0 - MU / r_mag;
    let e_vec = ((v2 - MU / r_mag) * r - r.dot(&v) * v) / MU;
    let e = e_vec.norm();
    if energy >= 0.0 || e >= 1.0 {
        return Err(AstroError::Unsupported(format!(
            "non-elliptic state (e={e}, energy={energy})"
        )));
    }
    let a = -MU / (2.0 * energy);
    let h_hat = h / h_mag;
    let i = (h_hat.z.clamp(-1.0, 1.0)).acos();

    let node = Vec3::new(-h.y, h.x, 0.0);
    let node_mag = node.norm();
    let (raan, node_hat) = if node_mag / h_mag > EQUATORIAL_N {
        (wrap_two_pi(node.y.atan2(node.x)), node / node_mag)
    } else {
        (0.0, Vec3::x())
    };
    let angle_from_node = |w: &Vec3| node_hat.cross(w).dot(&h_hat).atan2(node_hat.dot(w));

    let (argp, nu) = if e > CIRCULAR_E {
        let argp = angle_from_node(&e_vec);
        let nu = e_vec.cross(&r).dot(&h_hat).atan2(e_vec.dot(&r));
        (argp, nu)
    } else {
        (0.0, angle_from_node(&r))
    };
    let b = (1.0 - e * e).sqrt();
    let (sn, cn) = nu.sin_cos();
    let ecc = (b * sn).atan2(e + cn);
    let m = ecc - e * ecc.sin();
    KeplerianElements::new(a, e, i, raan, argp, m, s.epoch)
}

fn stumpff_c(z: f64) -> f64 {
    if z > 1e-6 {
        (1.0 - z.sqrt().cos()) / z
    } else if z < -1e-6 {
        ((-z).sqrt().cosh() - 1.0) / (-z)
    } else {
        1.0 / 2.0 - z / 24.0 + z * z / 720.0
    }
}

fn stumpff_s(z: f64) -> f64 {
    if z > 1e-6 {
        let sz = z.sqrt();
        (sz - sz.sin()) / sz.powi(3)
    } else if z < -1e-6 {
        let sz = (-z).sqrt();
        (sz.sinh() - sz) / sz.powi(3)
    } else {
        1.0 / 6.0 - z / 120.0 + z * z / 5040.0
    }
}

/// Lagrange coefficients `(f, g, fdot, gdot)` for a two-body flight of `dt`
/// seconds from `(r0, v0)`, valid for any conic.
pub fn universal_fg(r0: &Vec3, v0: &Vec3, dt: f64) -> Result<(f64, f64, f64, f64), AstroError> {
    let r0m = r0.norm();
    let vr0 = r0.dot(v0) / r0m;
    let alpha = 2.0 / r0m - v0.norm_squared() / MU;
    let smu = MU.sqrt();
    let mut chi = smu * alpha.abs() * dt;
    if alpha.abs() < 1e-12 || !chi.is_finite() {
        chi = smu * dt / r0m;
    }
    let mut converged = false;
    for _ in 0..100 {
        let z = alpha * chi * chi;
        let c = stumpff_c(z);
        let s = stumpff_s(z);
        let f = r0m * vr0 / smu * chi * chi * c + (1.0 - alpha * r0m) * chi.powi(3) * s
            + r0m * chi
            - smu * dt;
        let fp = r0m * vr0 / smu * chi * (1.0 - z * s) + (1.0 - alpha * r0m) * chi * chi * c + r0m;
        let step = f / fp;
        chi -= step;
        if !chi.is_finite() {
            break;
        }
        if step.abs() < 1e-12 * (1.0 + chi.abs()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(AstroError::KeplerNonConvergent {
            iterations: 100,
            mean_anomaly: dt,
            eccentricity: f64::NAN,
        });
    }
    let z = alpha * chi * chi;
    let c = stumpff_c(z);
    let s = stumpff_s(z);
    let f = 1.0 - chi * chi / r0m * c;
    let g = dt - chi.powi(3) / smu * s;
    let r = f * r0 + g * v0;
    let rm = r.norm();
    let fdot = smu / (rm * r0m) * (alpha * chi.powi(3) * s - chi);
    let gdot = 1.0 - chi * chi / rm * c;
    Ok((f, g, fdot, gdot))
}

/// Two-body propagation of a state by universal variables.
pub fn propagate_two_body(s: &StateVector, t: Epoch) -> Result<StateVector, AstroError> {
    let (f, g, fd, gd) = universal_fg(&s.r, &s.v, t - s.epoch)?;
    Ok(StateVector {
        epoch: t,
        r: f * s.r + g * s.v,
        v: fd * s.r + gd * s.v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::astro::{wrap_pi, RE, TWO_PI};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circ7000() -> KeplerianElements {
        KeplerianElements::new(7000.0, 0.0, 0.0, 0.0, 0.0, 0.0, Epoch::J2000).unwrap()
    }

    #[test]
    fn circular_at_epoch() {
        let s = kepler_to_state(&circ7000(), Epoch::J2000).unwrap();
        assert!((s.r - Vec3::new(7000.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((s.v - Vec3::new(0.0, (MU / 7000.0).sqrt(), 0.0)).norm() < 1e-15);
    }

    #[test]
    fn circular_quarter_period() {
        let el = circ7000();
        let t = Epoch::J2000 + el.period() / 4.0;
        let s = kepler_to_state(&el, t).unwrap();
        assert!((s.r - Vec3::new(0.0, 7000.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn full_period_is_identity() {
        let el = KeplerianElements::new(7200.0, 0.1, 0.7, 1.0, 2.0, 0.3, Epoch::J2000).unwrap();
        let a = kepler_to_state(&el, el.epoch).unwrap();
        let b = kepler_to_state(&el, el.epoch + el.period()).unwrap();
        assert!((a.r - b.r).norm() < 1e-8);
    }

    #[test]
    fn energy_matches_semi_major_axis() {
        let el = KeplerianElements::new(8000.0, 0.3, 1.1, 4.0, 5.0, 6.0, Epoch::J2000).unwrap();
        for k in 0..20 {
            let s = kepler_to_state(&el, el.epoch + 500.0 * k as f64).unwrap();
            let en = s.v.norm_squared() / 2.0 - MU / s.r.norm();
            let want = -MU / (2.0 * el.a);
            assert!(((en - want) / want).abs() < 1e-10);
        }
    }

    #[test]
    fn circular_state_back_to_elements() {
        let s = StateVector {
            epoch: Epoch::J2000,
            r: Vec3::new(7000.0, 0.0, 0.0),
            v: Vec3::new(0.0, (MU / 7000.0).sqrt(), 0.0),
        };
        let el = state_to_kepler(&s).unwrap();
        assert!((el.a - 7000.0).abs() / 7000.0 < 1e-9);
        assert!(el.e < 1e-9);
    }

    #[test]
    fn hyperbolic_and_rectilinear_rejected() {
        let hyper = StateVector {
            epoch: Epoch::J2000,
            r: Vec3::new(7000.0, 0.0, 0.0),
            v: Vec3::new(0.0, 12.0, 0.0),
        };
        assert!(matches!(state_to_kepler(&hyper), Err(AstroError::Unsupported(_))));
        let radial = StateVector {
            epoch: Epoch::J2000,
            r: Vec3::new(7000.0, 0.0, 0.0),
            v: Vec3::new(1.0, 0.0, 0.0),
        };
        assert!(matches!(state_to_kepler(&radial), Err(AstroError::Unsupported(_))));
    }

    #[test]
    fn kepler_solver_high_eccentricity() {
        for k in 0..100 {
            let m = k as f64 * 0.0628;
            let e_anom = solve_kepler(m, 0.99).unwrap();
            assert!((e_anom - 0.99 * e_anom.sin() - m).abs() < 1e-12);
        }
    }

    fn random_elements(rng: &mut ChaCha8Rng) -> KeplerianElements {
        KeplerianElements::new(
            rng.random_range(RE + 200.0..45000.0),
            rng.random_range(0.001..0.8),
            rng.random_range(0.01..3.13),
            rng.random_range(0.0..TWO_PI),
            rng.random_range(0.0..TWO_PI),
            rng.random_range(0.0..TWO_PI),
            Epoch::from_seconds(rng.random_range(-1e8..1e8)),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_all_fields_at_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let el = random_elements(&mut rng);
            let back = state_to_kepler(&kepler_to_state(&el, el.epoch).unwrap()).unwrap();
            assert!(((back.a - el.a) / el.a).abs() < 1e-9, "{el:?} {back:?}");
            assert!(((back.e - el.e) / el.e).abs() < 1e-9);
            assert!(((back.i - el.i) / el.i).abs() < 1e-9);
            for (x, y) in [
                (back.raan, el.raan),
                (back.argp, el.argp),
                (back.mean_anomaly, el.mean_anomaly),
            ] {
                assert!(wrap_pi(x - y).abs() < 1e-9 * y.max(1.0), "{el:?} {back:?}");
            }
        }
    }

    #[test]
    fn round_trip_preserves_shape_after_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let el = random_elements(&mut rng);
            let t = el.epoch + rng.random_range(-1e6..1e6);
            let back = state_to_kepler(&kepler_to_state(&el, t).unwrap()).unwrap();
            assert!(((back.a - el.a) / el.a).abs() < 1e-9);
            assert!(((back.e - el.e) / el.e).abs() < 1e-9);
            assert!(((back.i - el.i) / el.i).abs() < 1e-9);
        }
    }

    #[test]
    fn universal_variables_match_kepler() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let el = random_elements(&mut rng);
            let dt = rng.random_range(-20000.0..20000.0);
            let s0 = kepler_to_state(&el, el.epoch).unwrap();
            let a = propagate_two_body(&s0, el.epoch + dt).unwrap();
            let b = kepler_to_state(&el, el.epoch + dt).unwrap();
            assert!((a.r - b.r).norm() < 1e-6 * el.a / 7000.0, "{:?}", (a.r - b.r).norm());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn angle_outputs_in_range(a in 6600.0f64..50000.0, e in 0.0f64..0.9, i in 0.0f64..3.14159,
                                  o in -10.0f64..10.0, w in -10.0f64..10.0, m in -10.0f64..10.0,
                                  dt in -1e6f64..1e6) {
            let el = KeplerianElements::new(a, e, i, o, w, m, Epoch::J2000).unwrap();
            let s = kepler_to_state(&el, Epoch::J2000 + dt).unwrap();
            let back = state_to_kepler(&s).unwrap();
            prop_assert!(back.check().is_ok());
        }
    }
}
