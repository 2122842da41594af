//! Validator pipeline: correlate a TDM with the catalog, decide a verdict,
//! associate uncorrelated tracks and mine new objects from them.
//!
//! Everything here is a pure function of its inputs so that independent
//! validators reach byte-identical reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{
    angular_separation, propagate_j2, state_to_kepler, wrap_pi, AstroError, Epoch,
    KeplerianElements, ObjectSource, OrbitRecord, PropagatorConfig, SiteRegistry, StateVector,
    TrajectoryCache, SECONDS_PER_DAY,
};
use crate::fedprop::ResidualModel;
use crate::iod::{
    initial_orbit, predicted_angles, refine_elements_with, IodError, IodSolution, RefineOptions,
};
use crate::tdm::{ObservationRecord, Tdm};
use crate::Digest32;

/// How far back prior verified TDMs of a matched object are replayed.
pub const HISTORY_WINDOW_S: f64 = 7.0 * SECONDS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationParams {
    /// RMS at or below which a TDM is verified, rad.
    pub theta_verify: f64,
    /// RMS of the claimed object above which a TDM is rejected, rad.
    pub theta_reject: f64,
    /// Catalog gating radius on the first observation, rad.
    pub theta_gate: f64,
    /// Association threshold on the weighted element distance.
    pub d_assoc: f64,
    /// Weights over `(a [km], e, i [rad], raan [rad])`.
    pub weights: [f64; 4],
}

impl Default for ValidationParams {
    fn default() -> Self {
        Self {
            theta_verify: 0.1f64.to_radians(),
            theta_reject: 0.5f64.to_radians(),
            theta_gate: 1.0f64.to_radians(),
            d_assoc: 0.05,
            weights: [1.0 / 100.0, 1.0 / 0.01, 1.0 / 0.5f64.to_radians(), 1.0 / 1.0f64.to_radians()],
        }
    }
}

impl ValidationParams {
    pub fn check(&self) -> Result<(), ValidationError> {
        let all = [self.theta_verify, self.theta_reject, self.theta_gate, self.d_assoc];
        if !all.iter().chain(&self.weights).all(|x| x.is_finite() && *x > 0.0) {
            return Err(ValidationError::Params("thresholds and weights must be positive".into()));
        }
        if !(self.theta_verify < self.theta_reject && self.theta_reject <= self.theta_gate) {
            return Err(ValidationError::Params(
                "need theta_verify < theta_reject <= theta_gate".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ValidationError {
    #[error("site {0} is not registered")]
    UnknownSite(String),
    #[error("invalid validation parameters: {0}")]
    Params(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Verified,
    Rejected,
    Ambiguous,
    Uct,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Verified => "verified",
            Verdict::Rejected => "rejected",
            Verdict::Ambiguous => "ambiguous",
            Verdict::Uct => "uct",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub tdm_hash: Digest32,
    pub verdict: Verdict,
    pub matched_object: Option<String>,
    /// Verified: RMS over this TDM and the replayed history. Rejected: RMS of
    /// the claimed object over this TDM. Otherwise the best candidate's RMS,
    /// or 0 with no candidate. rad.
    pub rms_residual: f64,
    /// RMS of the matched object over its prior TDMs alone, rad.
    pub history_rms: Option<f64>,
    pub history_records: usize,
    pub candidates_checked: usize,
    /// Candidates dropped because propagation failed, with the reason.
    pub skipped: Vec<(String, String)>,
    pub proposed_elements: Option<KeplerianElements>,
    /// RMS of the proposed elements over this TDM, rad.
    pub proposed_rms: Option<f64>,
    /// Why no elements were proposed for an ambiguous or uct verdict.
    pub iod_failure: Option<String>,
}

impl ValidationReport {
    /// Digest validators attest to.
    pub fn digest(&self) -> Digest32 {
        Digest32::of(&serde_json::to_vec(self).expect("report serializes"))
    }

    pub fn needs_retask(&self) -> bool {
        matches!(self.verdict, Verdict::Ambiguous | Verdict::Uct)
    }

    /// The proposed orbit as an IOD solution over this TDM.
    pub fn proposed_solution(&self, n_obs: usize) -> Option<IodSolution> {
        Some(IodSolution {
            elements: self.proposed_elements?,
            rms_residual: self.proposed_rms?,
            method: crate::iod::IodMethod::Refined,
            n_obs,
        })
    }
}

/// Verified TDMs on chain, keyed by object id.
pub type History = BTreeMap<String, Vec<Tdm>>;

/// Read-only chain state a validator works against.
#[derive(Clone, Debug, Default)]
pub struct CatalogSnapshot {
    pub catalog: Vec<OrbitRecord>,
    pub sites: SiteRegistry,
    pub model: ResidualModel,
    pub history: History,
    pub cfg: PropagatorConfig,
    /// Shared memo of catalog trajectories; results are identical without it.
    pub cache: Option<TrajectoryCache>,
}

impl CatalogSnapshot {
    pub fn new(catalog: Vec<OrbitRecord>, sites: SiteRegistry) -> Self {
        Self { catalog, sites, ..Self::default() }
    }

    fn state(&self, rec: &OrbitRecord, t: Epoch) -> Result<StateVector, AstroError> {
        let s = match &self.cache {
            Some(c) => c.state_at(rec, &self.cfg, t)?,
            None => propagate_j2(&rec.elements, rec.bstar, t, &self.cfg)?,
        };
        Ok(self.model.apply(&rec.elements, rec.bstar, &s))
    }

    /// Angular residual of every record of `tdm` against `rec`.
    pub(crate) fn residuals(&self, rec: &OrbitRecord, tdm: &Tdm) -> Result<Vec<f64>, String> {
        let site = self
            .sites
            .get(&tdm.meta().site_id)
            .ok_or_else(|| format!("site {} is not registered", tdm.meta().site_id))?;
        tdm.records()
            .iter()
            .map(|o| self.residual(rec, o, site, tdm))
            .collect()
    }

    fn residual(
        &self,
        rec: &OrbitRecord,
        o: &ObservationRecord,
        site: &crate::astro::GroundSite,
        tdm: &Tdm,
    ) -> Result<f64, String> {
        let s = self.state(rec, o.epoch).map_err(|e| e.to_string())?;
        let (p1, p2, _) = predicted_angles(&s, site, tdm.meta().mode);
        Ok(angular_separation(o.angle1, o.angle2, p1, p2))
    }

    /// Residuals of the object's verified TDMs in the week before `before`.
    fn history_residuals(&self, rec: &OrbitRecord, before: Epoch) -> Vec<f64> {
        let Some(prior) = self.history.get(&rec.object_id) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for t in prior {
            let Some(site) = self.sites.get(&t.meta().site_id) else {
                continue;
            };
            for o in t.records() {
                let age = before - o.epoch;
                if age > 0.0 && age <= HISTORY_WINDOW_S {
                    if let Ok(r) = self.residual(rec, o, site, t) {
                        out.push(r);
                    }
                }
            }
        }
        out
    }
}

fn rms(x: &[f64]) -> f64 {
    crate::iod::rms(x)
}

struct Scored<'a> {
    rec: &'a OrbitRecord,
    rms: f64,
}

/// Correlates `tdm` with the catalog and decides a verdict.
///
/// Verified needs both the TDM alone and the TDM plus replayed history at or
/// below `theta_verify`. The claimed object is scored even when it falls
/// outside the gate, so large spoofing offsets are still rejected.
pub fn validate_tdm(
    tdm: &Tdm,
    snap: &CatalogSnapshot,
    params: &ValidationParams,
) -> Result<ValidationReport, ValidationError> {
    params.check()?;
    let site_id = &tdm.meta().site_id;
    let site = snap
        .sites
        .get(site_id)
        .ok_or_else(|| ValidationError::UnknownSite(site_id.clone()))?;
    let first = tdm.records()[0];
    let claimed = tdm.meta().claims_object();

    let mut scored: Vec<Scored> = Vec::new();
    let mut skipped = Vec::new();
    let mut claimed_rms = None;
    for rec in &snap.catalog {
        let is_claimed = claimed == Some(rec.object_id.as_str());
        let gated = match snap.residual(rec, &first, site, tdm) {
            Ok(r) => r <= params.theta_gate,
            Err(e) => {
                skipped.push((rec.object_id.clone(), e));
                continue;
            }
        };
        if !gated && !is_claimed {
            continue;
        }
        match snap.residuals(rec, tdm) {
            Ok(res) => {
                let r = rms(&res);
                if is_claimed {
                    claimed_rms = Some(r);
                }
                if gated {
                    scored.push(Scored { rec, rms: r });
                }
            }
            Err(e) => skipped.push((rec.object_id.clone(), e)),
        }
    }
    scored.sort_by(|a, b| a.rms.total_cmp(&b.rms).then_with(|| a.rec.object_id.cmp(&b.rec.object_id)));

    let mut report = ValidationReport {
        tdm_hash: tdm.content_hash(),
        verdict: Verdict::Uct,
        matched_object: None,
        rms_residual: 0.0,
        history_rms: None,
        history_records: 0,
        candidates_checked: scored.len(),
        skipped,
        proposed_elements: None,
        proposed_rms: None,
        iod_failure: None,
    };

    // The first candidate whose TDM fits also has to fit its history.
    for c in scored.iter().take_while(|c| c.rms <= params.theta_verify) {
        let hist = snap.history_residuals(c.rec, tdm.first_epoch());
        let n = tdm.records().len() as f64;
        let folded = ((c.rms * c.rms * n + hist.iter().map(|x| x * x).sum::<f64>())
            / (n + hist.len() as f64))
            .sqrt();
        if folded <= params.theta_verify {
            report.verdict = Verdict::Verified;
            report.matched_object = Some(c.rec.object_id.clone());
            report.rms_residual = folded;
            report.history_rms = (!hist.is_empty()).then(|| rms(&hist));
            report.history_records = hist.len();
            return Ok(report);
        }
    }

    if let (Some(id), Some(r)) = (claimed, claimed_rms) {
        if r > params.theta_reject {
            report.verdict = Verdict::Rejected;
            report.matched_object = Some(id.to_string());
            report.rms_residual = r;
            return Ok(report);
        }
    }

    match scored.first().filter(|c| c.rms <= params.theta_gate) {
        Some(best) => {
            report.verdict = Verdict::Ambiguous;
            report.matched_object = Some(best.rec.object_id.clone());
            report.rms_residual = best.rms;
        }
        None => report.verdict = Verdict::Uct,
    }
    match propose_orbit(tdm, snap) {
        Ok(sol) => {
            report.proposed_elements = Some(sol.elements);
            report.proposed_rms = Some(sol.rms_residual);
        }
        Err(e) => report.iod_failure = Some(e.to_string()),
    }
    Ok(report)
}

/// Single-TDM orbit estimate: IOD, then a refinement over the same records
/// when it improves the fit.
pub fn propose_orbit(tdm: &Tdm, snap: &CatalogSnapshot) -> Result<IodSolution, IodError> {
    let site = snap
        .sites
        .get(&tdm.meta().site_id)
        .ok_or_else(|| IodError::UnknownSite(tdm.meta().site_id.clone()))?;
    let iod = initial_orbit(tdm, site)?;
    let opts = RefineOptions { cfg: snap.cfg, use_range: true, ..RefineOptions::default() };
    match refine_elements_with(&iod.elements, std::slice::from_ref(tdm), &snap.sites, &opts) {
        Ok(out) if out.solution.rms_residual < iod.rms_residual => Ok(out.solution),
        _ => Ok(iod),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatch {
    pub tdm_hash: Digest32,
    pub distance: f64,
}

/// Weighted element distance over `(a, e, i, raan)`; RAAN differences wrap.
pub fn element_distance(x: &KeplerianElements, y: &KeplerianElements, w: &[f64; 4]) -> f64 {
    w[0] * (x.a - y.a).abs()
        + w[1] * (x.e - y.e).abs()
        + w[2] * (x.i - y.i).abs()
        + w[3] * wrap_pi(x.raan - y.raan).abs()
}

/// Osculating elements of `el` carried to `t` by the reference propagator.
pub fn elements_at(el: &KeplerianElements, t: Epoch, cfg: &PropagatorConfig) -> Result<KeplerianElements, AstroError> {
    if t == el.epoch {
        return Ok(*el);
    }
    state_to_kepler(&propagate_j2(el, 0.0, t, cfg)?)
}

/// Pool entries within `d_assoc` of `new_sol`, nearest first, ties by hash.
/// Pool elements are propagated to the new solution's epoch before
/// comparison; entries that cannot be propagated are left out.
pub fn associate_uct(
    new_sol: &IodSolution,
    pool: &[(Digest32, IodSolution)],
    params: &ValidationParams,
) -> Vec<AssociationMatch> {
    let cfg = PropagatorConfig::default();
    let t = new_sol.elements.epoch;
    let mut out: Vec<AssociationMatch> = pool
        .iter()
        .filter_map(|(h, sol)| {
            let aligned = elements_at(&sol.elements, t, &cfg).ok()?;
            let d = element_distance(&new_sol.elements, &aligned, &params.weights);
            (d <= params.d_assoc).then_some(AssociationMatch { tdm_hash: *h, distance: d })
        })
        .collect();
    out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.tdm_hash.cmp(&b.tdm_hash)));
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MiningError {
    #[error("mining needs at least two TDMs")]
    TooFewTdms,
    #[error("no starting orbit: {0}")]
    NoStart(String),
    #[error("best fit RMS {rms:.3e} rad exceeds theta_verify")]
    PoorFit { rms: f64 },
}

pub fn mined_object_id(tdms: &[Tdm]) -> Option<String> {
    let first = tdms.iter().min_by(|a, b| {
        a.first_epoch().cmp(&b.first_epoch()).then_with(|| a.content_hash().cmp(&b.content_hash()))
    })?;
    Some(format!("MINED-{}", first.content_hash().short()))
}

/// Fits one orbit to a set of associated UCT TDMs. Each TDM's own estimate
/// is tried as the starting point; the best converged fit wins.
pub fn mine_object(
    tdms: &[Tdm],
    snap: &CatalogSnapshot,
    params: &ValidationParams,
) -> Result<OrbitRecord, MiningError> {
    if tdms.len() < 2 {
        return Err(MiningError::TooFewTdms);
    }
    let mut ordered: Vec<&Tdm> = tdms.iter().collect();
    ordered.sort_by(|a, b| {
        a.first_epoch().cmp(&b.first_epoch()).then_with(|| a.content_hash().cmp(&b.content_hash()))
    });
    let all: Vec<Tdm> = ordered.iter().map(|t| (*t).clone()).collect();
    let opts = RefineOptions {
        cfg: snap.cfg,
        model: Some(snap.model.clone()),
        use_range: true,
        ..RefineOptions::default()
    };

    let mut best: Option<IodSolution> = None;
    let mut last_err = String::from("no TDM produced an initial orbit");
    for t in &ordered {
        let start = match propose_orbit(t, snap) {
            Ok(s) => s,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        match refine_elements_with(&start.elements, &all, &snap.sites, &opts) {
            Ok(out) => {
                if best.as_ref().is_none_or(|b| out.solution.rms_residual < b.rms_residual) {
                    best = Some(out.solution);
                }
            }
            Err(e) => last_err = e.to_string(),
        }
    }
    let best = best.ok_or(MiningError::NoStart(last_err))?;
    if best.rms_residual > params.theta_verify {
        return Err(MiningError::PoorFit { rms: best.rms_residual });
    }
    Ok(OrbitRecord {
        object_id: mined_object_id(tdms).expect("non-empty"),
        elements: best.elements,
        bstar: 0.0,
        source: ObjectSource::Mined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_are_consistent() {
        let p = ValidationParams::default();
        p.check().unwrap();
        assert!((p.weights[0] * 100.0 - 1.0).abs() < 1e-15);
        assert!((p.weights[3] * 1f64.to_radians() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn params_reject_inverted_thresholds() {
        let p = ValidationParams { theta_reject: 0.01f64.to_radians(), ..Default::default() };
        assert!(p.check().is_err());
        let p = ValidationParams { d_assoc: 0.0, ..Default::default() };
        assert!(p.check().is_err());
    }

    #[test]
    fn distance_wraps_raan() {
        let w = ValidationParams::default().weights;
        let a = KeplerianElements::new(7000.0, 0.001, 1.0, 0.001, 0.0, 0.0, Epoch::J2000).unwrap();
        let mut b = a;
        b.raan = std::f64::consts::TAU - 0.001;
        let d = element_distance(&a, &b, &w);
        assert!((d - w[3] * 0.002).abs() < 1e-9, "{d}");
    }
}
