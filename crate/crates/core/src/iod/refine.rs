use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use super::{predicted_angles, IodError, IodMethod, IodSolution};
use crate::astro::{
    angles_to_unit_vector, angular_separation, ephemeris, wrap_pi, Epoch, GroundSite,
    KeplerianElements, PropagatorConfig, SiteRegistry, Vec3,
};
use crate::fedprop::ResidualModel;
use crate::tdm::{AngleMode, Tdm};

const NAMES: [&str; 6] = ["a", "e", "i", "raan", "argp", "mean_anomaly"];
const FD_STEPS: [f64; 6] = [1e-3, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7];
/// Fitted components required: six angle-only records or four with range.
const MIN_ROWS: usize = 12;
const BASIN_DEG: f64 = 2.0;
const RANK_RATIO: f64 = 1e-12;
const REL_TOL: f64 = 1e-10;
const MAX_HALVINGS: u32 = 10;
const MAX_FAILURES: u32 = 3;
/// Mean squared residual below which further steps are meaningless, rad^2.
const NOISE_FLOOR: f64 = 1e-20;

#[derive(Clone, Debug)]
pub struct RefineOptions {
    pub bstar: f64,
    pub cfg: PropagatorConfig,
    /// Correction applied to every prediction, so fits agree with validation.
    pub model: Option<ResidualModel>,
    pub max_iterations: u32,
    /// Also fit ranges, as `(observed - predicted) / observed`. Relative range
    /// noise then weighs like angular noise of the same magnitude.
    pub use_range: bool,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            bstar: 0.0,
            cfg: PropagatorConfig::default(),
            model: None,
            max_iterations: 25,
            use_range: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineOutcome {
    pub solution: IodSolution,
    /// Jacobian evaluations performed.
    pub iterations: u32,
    pub initial_rms: f64,
}

struct Obs<'a> {
    epoch: Epoch,
    a1: f64,
    a2: f64,
    mode: AngleMode,
    site: &'a GroundSite,
    range: Option<f64>,
    unit: Vec3,
    east: Vec3,
    north: Vec3,
}

impl<'a> Obs<'a> {
    fn new(epoch: Epoch, a1: f64, a2: f64, range: Option<f64>, mode: AngleMode, site: &'a GroundSite) -> Self {
        let (s1, c1) = a1.sin_cos();
        let (s2, c2) = a2.sin_cos();
        Self {
            epoch,
            a1,
            a2,
            mode,
            site,
            range,
            unit: angles_to_unit_vector(a1, a2),
            east: Vec3::new(c1, -s1, 0.0),
            north: Vec3::new(-s2 * s1, -s2 * c1, c2),
        }
    }
}

struct Problem<'a> {
    obs: Vec<Obs<'a>>,
    epochs: Vec<Epoch>,
    epoch0: Epoch,
    opts: &'a RefineOptions,
    rows: usize,
}

/// Maps an unconstrained parameter vector onto valid elements, absorbing sign
/// flips of `e` and `i` into the angles.
fn to_elements(p: &Vector6<f64>, epoch: Epoch) -> Option<KeplerianElements> {
    let (mut e, mut i, mut raan, mut argp, mut m) = (p[1], p[2], p[3], p[4], p[5]);
    if e < 0.0 {
        e = -e;
        argp += std::f64::consts::PI;
        m += std::f64::consts::PI;
    }
    let i_wrapped = wrap_pi(i);
    if i_wrapped < 0.0 {
        i = -i_wrapped;
        raan += std::f64::consts::PI;
        argp += std::f64::consts::PI;
    } else {
        i = i_wrapped;
    }
    KeplerianElements::new(p[0], e, i, raan, argp, m, epoch).ok()
}

fn to_params(el: &KeplerianElements) -> Vector6<f64> {
    Vector6::new(el.a, el.e, el.i, el.raan, el.argp, el.mean_anomaly)
}

impl Problem<'_> {
    /// Per record, the observed-minus-predicted unit vector projected on the
    /// tangent plane at the observed direction, plus the summed squared
    /// angular separation. The projection stays smooth at the poles of the
    /// angle pair. Ranges, when fitted, add one relative component each.
    fn evaluate(&self, el: &KeplerianElements) -> Result<(DVector<f64>, f64), IodError> {
        let states = ephemeris(el, self.opts.bstar, &self.epochs, &self.opts.cfg)?;
        let mut r = DVector::zeros(self.rows);
        let mut cost = 0.0;
        let mut k = 0;
        for (o, s) in self.obs.iter().zip(&states) {
            let s = match &self.opts.model {
                Some(m) => m.apply(el, self.opts.bstar, s),
                None => *s,
            };
            let (p1, p2, rho) = predicted_angles(&s, o.site, o.mode);
            let d = o.unit - angles_to_unit_vector(p1, p2);
            r[k] = d.dot(&o.east);
            r[k + 1] = d.dot(&o.north);
            k += 2;
            if let Some(obs_rho) = o.range {
                r[k] = (obs_rho - rho) / obs_rho;
                k += 1;
            }
            cost += angular_separation(o.a1, o.a2, p1, p2).powi(2);
        }
        Ok((r, cost))
    }

    /// Fitted cost and angular cost at `p`.
    fn cost_at(&self, p: &Vector6<f64>) -> (f64, f64) {
        match to_elements(p, self.epoch0).map(|el| self.evaluate(&el)) {
            Some(Ok((r, c))) if c.is_finite() => (r.norm_squared(), c),
            _ => (f64::INFINITY, f64::INFINITY),
        }
    }

    fn jacobian(&self, p: &Vector6<f64>) -> Result<DMatrix<f64>, IodError> {
        let mut j = DMatrix::zeros(self.rows, 6);
        for c in 0..6 {
            let h = FD_STEPS[c];
            let mut hi = *p;
            let mut lo = *p;
            hi[c] += h;
            // one-sided in e when the central stencil would cross zero
            let span = if c == 1 && p[1] - h < 0.0 { h } else { 2.0 * h };
            if span == 2.0 * h {
                lo[c] -= h;
            }
            let eval = |q: &Vector6<f64>| -> Result<DVector<f64>, IodError> {
                let el = to_elements(q, self.epoch0)
                    .ok_or_else(|| IodError::Precondition("finite-difference step left the elliptic domain".into()))?;
                Ok(self.evaluate(&el)?.0)
            };
            let col = (eval(&hi)? - eval(&lo)?) / span;
            j.set_column(c, &col);
        }
        Ok(j)
    }
}

/// Least-squares element fit with default options.
pub fn refine_elements(
    initial: &KeplerianElements,
    tdms: &[Tdm],
    sites: &SiteRegistry,
) -> Result<IodSolution, IodError> {
    Ok(refine_elements_with(initial, tdms, sites, &RefineOptions::default())?.solution)
}

/// Gauss-Newton over `(a, e, i, raan, argp, M)` with central-difference
/// Jacobians and step halving. Accepted steps never raise the fitted cost;
/// with angles only, the returned RMS never exceeds the initial one.
pub fn refine_elements_with(
    initial: &KeplerianElements,
    tdms: &[Tdm],
    sites: &SiteRegistry,
    opts: &RefineOptions,
) -> Result<RefineOutcome, IodError> {
    initial.check()?;
    let mut obs = Vec::new();
    for t in tdms {
        let site = sites
            .get(&t.meta().site_id)
            .ok_or_else(|| IodError::UnknownSite(t.meta().site_id.clone()))?;
        for r in t.records() {
            let range = if opts.use_range { r.range } else { None };
            obs.push(Obs::new(r.epoch, r.angle1, r.angle2, range, t.meta().mode, site));
        }
    }
    let n = obs.len();
    let rows = obs.iter().map(|o| 2 + o.range.is_some() as usize).sum();
    if rows < MIN_ROWS {
        return Err(IodError::Precondition(format!(
            "{rows} residual components from {n} records, refinement needs at least {MIN_ROWS}"
        )));
    }
    let problem = Problem {
        epochs: obs.iter().map(|o| o.epoch).collect(),
        obs,
        epoch0: initial.epoch,
        opts,
        rows,
    };
    let rms_of = |cost: f64| (cost / n as f64).sqrt();

    let mut p = to_params(initial);
    let (r0, mut angular) = problem.evaluate(initial)?;
    let mut cost = r0.norm_squared();
    let initial_rms = rms_of(angular);
    if !(initial_rms < BASIN_DEG.to_radians()) {
        return Err(IodError::Precondition(format!(
            "initial RMS {:.4} deg outside the {BASIN_DEG} deg convergence basin",
            initial_rms.to_degrees()
        )));
    }

    let mut iterations = 0;
    let mut failures = 0u32;
    while iterations < opts.max_iterations {
        iterations += 1;
        let el = to_elements(&p, problem.epoch0).expect("accepted parameters are valid");
        let (r, _) = problem.evaluate(&el)?;
        let j = problem.jacobian(&p)?;
        let normal: Matrix6<f64> = (j.transpose() * &j).fixed_view::<6, 6>(0, 0).into_owned();
        let grad: Vector6<f64> = (j.transpose() * &r).fixed_view::<6, 1>(0, 0).into_owned();

        let mut scale = Vector6::zeros();
        for c in 0..6 {
            let d = normal[(c, c)];
            if !(d > 0.0) {
                return Err(IodError::Rank { weak: NAMES[c] });
            }
            scale[c] = 1.0 / d.sqrt();
        }
        let scaled = Matrix6::from_fn(|a, b| normal[(a, b)] * scale[a] * scale[b]);
        let eig = scaled.symmetric_eigen();
        let (mut lo, mut hi) = (0, 0);
        for k in 1..6 {
            if eig.eigenvalues[k] < eig.eigenvalues[lo] {
                lo = k;
            }
            if eig.eigenvalues[k] > eig.eigenvalues[hi] {
                hi = k;
            }
        }
        if !(eig.eigenvalues[lo] > RANK_RATIO * eig.eigenvalues[hi]) {
            let v = eig.eigenvectors.column(lo);
            let weak = (0..6).max_by(|a, b| v[*a].abs().total_cmp(&v[*b].abs())).unwrap_or(0);
            return Err(IodError::Rank { weak: NAMES[weak] });
        }

        let damping = if failures == 0 { 0.0 } else { 1e-3 * 10f64.powi(failures as i32 - 1) };
        let damped = scaled + Matrix6::identity() * damping;
        let rhs = Vector6::from_fn(|c, _| grad[c] * scale[c]);
        let Some(chol) = damped.cholesky() else {
            return Err(IodError::Rank { weak: NAMES[lo] });
        };
        let step = -chol.solve(&rhs).component_mul(&scale);

        // Gauss-Newton predicted decrease of the component cost.
        let lin = &r + &j * DVector::from_column_slice(step.as_slice());
        let predicted = r.norm_squared() - lin.norm_squared();
        if !(predicted > REL_TOL * cost) || predicted < NOISE_FLOOR * n as f64 {
            break;
        }

        let mut accepted = None;
        let mut lambda = 1.0;
        for _ in 0..=MAX_HALVINGS {
            let trial = p + step * lambda;
            let (c, ang) = problem.cost_at(&trial);
            if c < cost {
                accepted = Some((trial, c, ang));
                break;
            }
            lambda *= 0.5;
        }
        match accepted {
            Some((trial, c, ang)) => {
                failures = 0;
                let rel = (cost - c) / cost;
                p = to_params(&to_elements(&trial, problem.epoch0).expect("finite cost implies valid"));
                cost = c;
                angular = ang;
                if rel < REL_TOL {
                    break;
                }
            }
            None => {
                failures += 1;
                if failures >= MAX_FAILURES {
                    return Err(IodError::Divergence(failures));
                }
            }
        }
    }

    let elements = to_elements(&p, problem.epoch0).expect("accepted parameters are valid");
    Ok(RefineOutcome {
        solution: IodSolution {
            elements,
            rms_residual: rms_of(angular),
            method: IodMethod::Refined,
            n_obs: n,
        },
        iterations,
        initial_rms,
    })
}
