//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sda_core::astro::{
    ephemeris, state_to_kepler, Epoch, KeplerianElements, PropagatorConfig, J2, MU, RE,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// First-order J2 secular rates (raan_dot, argp_dot) in rad/s.
pub fn j2_secular_rates(a: f64, e: f64, i: f64) -> (f64, f64) {
    let n = (MU / a.powi(3)).sqrt();
    let p = a * (1.0 - e * e);
    let k = 1.5 * J2 * n * (RE / p).powi(2);
    (-k * i.cos(), 0.5 * k * (4.0 - 5.0 * i.sin().powi(2)))
}

/// Random LEO orbit with moderate eccentricity, away from the critical and
/// polar inclinations where one of the secular rates vanishes.
pub fn random_leo(rng: &mut ChaCha8Rng, epoch: Epoch) -> KeplerianElements {
    let a = rng.random_range(7000.0..7900.0);
    let e_max = (1.0 - (RE + 300.0) / a).min(0.1);
    let e = rng.random_range(0.02..e_max);
    let mut i_deg: f64 = rng.random_range(15.0..55.0);
    if rng.random_bool(0.5) {
        i_deg = 180.0 - i_deg;
    }
    KeplerianElements::new(
        a,
        e,
        i_deg.to_radians(),
        rng.random_range(0.0..6.28),
        rng.random_range(0.0..6.28),
        rng.random_range(0.0..6.28),
        epoch,
    )
    .unwrap()
}

fn unwrap(series: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut off = 0.0;
    for (k, x) in series.iter().enumerate() {
        if k > 0 {
            let prev = series[k - 1];
            let d = x - prev;
            if d > std::f64::consts::PI {
                off -= 2.0 * std::f64::consts::PI;
            } else if d < -std::f64::consts::PI {
                off += 2.0 * std::f64::consts::PI;
            }
        }
        out.push(x + off);
    }
    out
}

/// Measured secular RAAN and argp rates over `span` seconds: osculating
/// elements averaged over the first and the last whole orbit, differenced.
/// Also returns the orbit-averaged semi-major axis for the analytic oracle.
pub fn measured_secular_rates(el: &KeplerianElements, span: f64) -> (f64, f64, f64) {
    let period = el.period();
    let samples = 720usize;
    let windows = [0.0, span - period];
    let mut means = Vec::new();
    let mut a_mean = 0.0;
    let mut raw_raan = Vec::new();
    let mut raw_argp = Vec::new();
    for w in windows {
        let epochs: Vec<Epoch> = (0..samples)
            .map(|k| el.epoch + w + period * k as f64 / samples as f64)
            .collect();
        let states = ephemeris(el, 0.0, &epochs, &PropagatorConfig::default()).unwrap();
        for s in &states {
            let k = state_to_kepler(s).unwrap();
            raw_raan.push(k.raan);
            raw_argp.push(k.argp);
            a_mean += k.a;
        }
    }
    a_mean /= (2 * samples) as f64;
    // unwrap each window separately, then align the second to the first
    for series in [&raw_raan, &raw_argp] {
        let first = unwrap(&series[..samples]);
        let mut second = unwrap(&series[samples..]);
        let m1 = first.iter().sum::<f64>() / samples as f64;
        let mut m2 = second.iter().sum::<f64>() / samples as f64;
        let guess = m1; // drift over one day stays well below π for LEO
        while m2 - guess > std::f64::consts::PI {
            second.iter_mut().for_each(|x| *x -= 2.0 * std::f64::consts::PI);
            m2 -= 2.0 * std::f64::consts::PI;
        }
        while m2 - guess < -std::f64::consts::PI {
            second.iter_mut().for_each(|x| *x += 2.0 * std::f64::consts::PI);
            m2 += 2.0 * std::f64::consts::PI;
        }
        means.push((m2 - m1) / (span - period));
    }
    (means[0], means[1], a_mean)
}

use sda_core::astro::{gmst, propagate_j2, GroundSite, ObjectSource, OrbitRecord};

pub fn record(id: &str, el: KeplerianElements, bstar: f64) -> OrbitRecord {
    OrbitRecord { object_id: id.into(), elements: el, bstar, source: ObjectSource::Cataloged }
}

/// A site directly below the object at `t` (geocentric latitude, which is
/// close enough to put the object near zenith).
pub fn site_under(rec: &OrbitRecord, t: Epoch, id: &str, cfg: &PropagatorConfig) -> GroundSite {
    let s = propagate_j2(&rec.elements, rec.bstar, t, cfg).unwrap();
    GroundSite {
        site_id: id.into(),
        lat: (s.r.z / s.r.norm()).asin(),
        lon: s.r.y.atan2(s.r.x) - gmst(t),
        alt: 0.0,
    }
}

/// Epochs `center + k*spacing` for k in -half..=half.
pub fn epochs_around(center: Epoch, spacing: f64, half: i32) -> Vec<Epoch> {
    (-half..=half).map(|k| center + spacing * k as f64).collect()
}

/// Relative error for magnitudes, absolute error for angles near zero.
pub fn element_errors(a: &KeplerianElements, b: &KeplerianElements) -> [f64; 6] {
    use sda_core::astro::wrap_pi;
    [
        ((a.a - b.a) / b.a).abs(),
        (a.e - b.e).abs(),
        (a.i - b.i).abs(),
        wrap_pi(a.raan - b.raan).abs(),
        wrap_pi(a.argp - b.argp).abs(),
        wrap_pi(a.mean_anomaly - b.mean_anomaly).abs(),
    ]
}

/// Elements advanced to a new epoch along the two-body orbit.
pub fn two_body_at(el: &KeplerianElements, t: Epoch) -> KeplerianElements {
    use sda_core::astro::{kepler_to_state, state_to_kepler};
    state_to_kepler(&kepler_to_state(el, t).unwrap()).unwrap()
}
