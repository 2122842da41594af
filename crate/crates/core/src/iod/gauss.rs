use super::{observation_los, site_position, two_body_rms, IodError, IodMethod, IodSolution};
use crate::astro::{state_to_kepler, universal_fg, Epoch, GroundSite, StateVector, Vec3, MU, RE};
use crate::tdm::{AngleMode, ObservationRecord};

const MIN_DT: f64 = 30.0;
const MAX_DT: f64 = 1200.0;
const MIN_LOS_SEP_DEG: f64 = 0.5;
const MIN_ALT: f64 = 100.0;
const MAX_ALT: f64 = 100_000.0;
const MAX_ITER: usize = 50;
const TOL: f64 = 1e-10;
const SCAN_POINTS: usize = 4000;

/// Gauss angles-only IOD; returns the admissible solution with the smallest
/// residual over the three observations.
pub fn iod_gauss(
    obs: &[ObservationRecord; 3],
    site: &GroundSite,
    mode: AngleMode,
) -> Result<IodSolution, IodError> {
    let mut c = iod_gauss_candidates(obs, site, mode)?;
    c.sort_by(|a, b| {
        a.rms_residual
            .total_cmp(&b.rms_residual)
            .then(a.elements.a.total_cmp(&b.elements.a))
    });
    c.into_iter().next().ok_or(IodError::NoSolution)
}

struct Geometry {
    rho_hat: [Vec3; 3],
    site: [Vec3; 3],
    t2: Epoch,
    tau1: f64,
    tau3: f64,
    d0: f64,
    d: [[f64; 3]; 3],
}

fn precheck(obs: &[ObservationRecord; 3], site: &GroundSite, mode: AngleMode) -> Result<Geometry, IodError> {
    if obs.iter().any(|o| o.range.is_some()) {
        return Err(IodError::Precondition("Gauss takes angles-only observations".into()));
    }
    let t: Vec<f64> = obs.iter().map(|o| o.epoch.seconds()).collect();
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let dt = t[j] - t[i];
        if !(MIN_DT..=MAX_DT).contains(&dt) {
            return Err(IodError::Degenerate(format!(
                "observations {i} and {j} are {dt:.1} s apart, need [{MIN_DT}, {MAX_DT}] s in order"
            )));
        }
    }
    let rho_hat = [0, 1, 2].map(|k| observation_los(&obs[k], site, mode));
    for (i, j) in [(0, 1), (1, 2)] {
        let sep = rho_hat[i].cross(&rho_hat[j]).norm().atan2(rho_hat[i].dot(&rho_hat[j]));
        if sep.to_degrees() < MIN_LOS_SEP_DEG {
            return Err(IodError::Degenerate(format!(
                "lines of sight {i} and {j} are {:.4} deg apart, need {MIN_LOS_SEP_DEG}",
                sep.to_degrees()
            )));
        }
    }
    let r_site = [0, 1, 2].map(|k| site_position(site, obs[k].epoch));
    let p = [
        rho_hat[1].cross(&rho_hat[2]),
        rho_hat[0].cross(&rho_hat[2]),
        rho_hat[0].cross(&rho_hat[1]),
    ];
    let d0 = rho_hat[0].dot(&p[0]);
    if d0.abs() < 1e-14 {
        return Err(IodError::Degenerate("lines of sight are coplanar".into()));
    }
    let mut d = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = r_site[i].dot(&p[j]);
        }
    }
    Ok(Geometry { rho_hat, site: r_site, t2: obs[1].epoch, tau1: t[0] - t[1], tau3: t[2] - t[1], d0, d })
}

fn poly(x: f64, a: f64, b: f64, c: f64) -> f64 {
    let x3 = x * x * x;
    x3 * x3 * x * x + a * x3 * x3 + b * x3 + c
}

/// Real roots of `x^8 + a x^6 + b x^3 + c` inside `[lo, hi]` by a
/// geometric scan followed by bisection.
fn roots_in(a: f64, b: f64, c: f64, lo: f64, hi: f64) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / SCAN_POINTS as f64);
    let mut out = Vec::new();
    let mut x0 = lo;
    let mut f0 = poly(x0, a, b, c);
    for k in 1..=SCAN_POINTS {
        let x1 = if k == SCAN_POINTS { hi } else { lo * ratio.powi(k as i32) };
        let f1 = poly(x1, a, b, c);
        if f0 == 0.0 {
            out.push(x0);
        } else if f0.signum() != f1.signum() && f1 != 0.0 {
            let (mut l, mut h, mut fl) = (x0, x1, f0);
            for _ in 0..200 {
                let m = 0.5 * (l + h);
                let fm = poly(m, a, b, c);
                if fm == 0.0 {
                    l = m;
                    h = m;
                    break;
                }
                if fm.signum() == fl.signum() {
                    l = m;
                    fl = fm;
                } else {
                    h = m;
                }
                if h - l <= 1e-12 * m {
                    break;
                }
            }
            out.push(0.5 * (l + h));
        }
        x0 = x1;
        f0 = f1;
    }
    if f0 == 0.0 {
        out.push(x0);
    }
    out
}

/// Every admissible Gauss solution (altitude in [100, 100000] km, elliptic,
/// positive ranges).
pub fn iod_gauss_candidates(
    obs: &[ObservationRecord; 3],
    site: &GroundSite,
    mode: AngleMode,
) -> Result<Vec<IodSolution>, IodError> {
    let g = precheck(obs, site, mode)?;
    let (t1, t3) = (g.tau1, g.tau3);
    let tau = t3 - t1;
    let d = &g.d;
    let a_c = (-d[0][1] * t3 / tau + d[1][1] + d[2][1] * t1 / tau) / g.d0;
    let b_c = (d[0][1] * (t3 * t3 - tau * tau) * t3 / tau + d[2][1] * (tau * tau - t1 * t1) * t1 / tau)
        / (6.0 * g.d0);
    let e_c = g.site[1].dot(&g.rho_hat[1]);
    let r2s = g.site[1].norm_squared();
    let pa = -(a_c * a_c + 2.0 * a_c * e_c + r2s);
    let pb = -2.0 * MU * b_c * (a_c + e_c);
    let pc = -MU * MU * b_c * b_c;

    let mut out = Vec::new();
    let mut last_err = IodError::NoSolution;
    for root in roots_in(pa, pb, pc, RE + MIN_ALT, RE + MAX_ALT) {
        match solve_from_root(&g, root, a_c, b_c) {
            Ok(state) => {
                let alt = state.r.norm() - RE;
                if !(MIN_ALT..=MAX_ALT).contains(&alt) {
                    continue;
                }
                let Ok(elements) = state_to_kepler(&state) else { continue };
                let rms_residual = two_body_rms(&state, obs, site, mode)?;
                out.push(IodSolution { elements, rms_residual, method: IodMethod::Gauss, n_obs: 3 });
            }
            Err(e @ IodError::Convergence(_)) => last_err = e,
            Err(_) => {}
        }
    }
    if out.is_empty() {
        return Err(last_err);
    }
    Ok(out)
}

fn lagrange_series(tau: f64, r: f64) -> (f64, f64) {
    let u = MU / (r * r * r);
    (1.0 - 0.5 * u * tau * tau, tau - u * tau * tau * tau / 6.0)
}

type Coeffs = [f64; 4];

/// Slant ranges implied by Lagrange coefficients `(f1, g1, f3, g3)`.
fn ranges(g: &Geometry, c: &Coeffs) -> [f64; 3] {
    let d = &g.d;
    let [f1, g1, f3, g3] = *c;
    let den = f1 * g3 - f3 * g1;
    let c1 = g3 / den;
    let c3 = -g1 / den;
    [
        (-d[0][0] + d[1][0] / c1 - d[2][0] * c3 / c1) / g.d0,
        (-c1 * d[0][1] + d[1][1] - c3 * d[2][1]) / g.d0,
        (-d[0][2] * c1 / c3 + d[1][2] / c3 - d[2][2]) / g.d0,
    ]
}

fn middle_state(g: &Geometry, rho: &[f64; 3], c: &Coeffs) -> (Vec3, Vec3) {
    let [f1, g1, f3, g3] = *c;
    let pos = |k: usize| g.site[k] + rho[k] * g.rho_hat[k];
    let den = f1 * g3 - f3 * g1;
    (pos(1), (-f3 * pos(0) + f1 * pos(2)) / den)
}

/// One pass of the classical refinement: coefficients to ranges to the
/// middle state, then exact two-body coefficients from that state.
fn refine_map(g: &Geometry, c: &Coeffs) -> Result<([f64; 3], Coeffs), IodError> {
    let rho = ranges(g, c);
    if rho.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(IodError::Geometry("iteration produced a non-positive slant range".into()));
    }
    let (r2, v2) = middle_state(g, &rho, c);
    let (f1, g1, _, _) = universal_fg(&r2, &v2, g.tau1)?;
    let (f3, g3, _, _) = universal_fg(&r2, &v2, g.tau3)?;
    Ok((rho, [f1, g1, f3, g3]))
}

/// Newton step on the fixed point `refine_map(c) = c` with a forward
/// difference Jacobian.
fn newton_step(g: &Geometry, c: &Coeffs, mapped: &Coeffs) -> Option<Coeffs> {
    let h0 = nalgebra::Vector4::from_fn(|k, _| mapped[k] - c[k]);
    let mut jac = nalgebra::Matrix4::<f64>::zeros();
    for j in 0..4 {
        let step = 1e-7 * c[j].abs().max(1e-3);
        let mut cp = *c;
        cp[j] += step;
        let (_, mp) = refine_map(g, &cp).ok()?;
        for k in 0..4 {
            let hk = mp[k] - cp[k];
            jac[(k, j)] = (hk - h0[k]) / step;
        }
    }
    let delta = jac.lu().solve(&(-h0))?;
    let next = [c[0] + delta[0], c[1] + delta[1], c[2] + delta[2], c[3] + delta[3]];
    next.iter().all(|x| x.is_finite()).then_some(next)
}

fn solve_from_root(g: &Geometry, r2: f64, a_c: f64, b_c: f64) -> Result<StateVector, IodError> {
    let (t1, t3) = (g.tau1, g.tau3);
    let tau = t3 - t1;
    let d = &g.d;
    let r23 = r2 * r2 * r2;
    let mut rho = [
        ((6.0 * (d[2][0] * t1 / t3 + d[1][0] * tau / t3) * r23
            + MU * d[2][0] * (tau * tau - t1 * t1) * t1 / t3)
            / (6.0 * r23 + MU * (tau * tau - t3 * t3))
            - d[0][0])
            / g.d0,
        a_c + MU * b_c / r23,
        ((6.0 * (d[0][2] * t3 / t1 - d[1][2] * tau / t1) * r23
            + MU * d[0][2] * (tau * tau - t3 * t3) * t3 / t1)
            / (6.0 * r23 + MU * (tau * tau - t1 * t1))
            - d[2][2])
            / g.d0,
    ];
    if rho.iter().any(|x| !(*x > 0.0)) {
        return Err(IodError::Geometry("root gives a non-positive slant range".into()));
    }
    let (f1, g1) = lagrange_series(t1, r2);
    let (f3, g3) = lagrange_series(t3, r2);
    let series = [f1, g1, f3, g3];
    let (r2v, v2) = middle_state(g, &rho, &series);
    let mut c = {
        let (a, b, _, _) = universal_fg(&r2v, &v2, t1)?;
        let (e, f, _, _) = universal_fg(&r2v, &v2, t3)?;
        [a, b, e, f]
    };
    for _ in 0..MAX_ITER {
        let (new_rho, mapped) = refine_map(g, &c)?;
        let change = (0..3)
            .map(|k| ((new_rho[k] - rho[k]) / new_rho[k]).abs())
            .fold(0.0, f64::max);
        rho = new_rho;
        if change < TOL {
            let (r, v) = middle_state(g, &rho, &c);
            return Ok(StateVector { epoch: g.t2, r, v });
        }
        c = newton_step(g, &c, &mapped).unwrap_or(mapped);
    }
    Err(IodError::Convergence(format!("slant ranges still changing after {MAX_ITER} iterations")))
}
