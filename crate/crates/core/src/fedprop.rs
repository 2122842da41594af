//! Propagation-residual model and the propose/verify/vote/merge loop.
//!
//! The model is a 3x6 linear map from [`features`] to a position correction in
//! the radial/along-track/cross-track frame of the propagated state. Honest
//! verifiers evaluate a proposal on the deterministic holdout half of the
//! on-chain calibration samples, so their votes agree bit for bit.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{
    los_eci, propagate_j2, rsw_basis, site_eci, AstroError, Epoch, GroundSite, KeplerianElements,
    OrbitRecord, PropagatorConfig, StateVector, TrajectoryCache, Vec3, SECONDS_PER_DAY,
};
use crate::tdm::Tdm;
use crate::Digest32;

pub type Weights = [[f64; 6]; 3];

pub const RIDGE_LAMBDA: f64 = 1e-2;
pub const MIN_TRAIN_SAMPLES: usize = 12;
pub const MIN_HOLDOUT: usize = 10;
pub const ACCEPT_RATIO: f64 = 0.98;
pub const MERGE_WEIGHT: f64 = 0.5;
/// Largest admissible weight magnitude.
pub const WEIGHT_BOUND: f64 = 1e3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FedError {
    #[error("{got} training samples, at least {need} required")]
    TooFewSamples { got: usize, need: usize },
    #[error("model weights non-finite or above {WEIGHT_BOUND}")]
    WeightsOutOfBounds,
    #[error("proposal parent version {parent} does not match global version {global}")]
    StaleParent { parent: u64, global: u64 },
    #[error("calibration samples need range measurements")]
    NoRange,
    #[error(transparent)]
    Astro(#[from] AstroError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualModel {
    pub w: Weights,
    pub version: u64,
    pub trained_on: u64,
}

impl Default for ResidualModel {
    fn default() -> Self {
        Self {
            w: [[0.0; 6]; 3],
            version: 0,
            trained_on: 0,
        }
    }
}

pub fn weights_valid(w: &Weights) -> bool {
    w.iter().flatten().all(|x| x.is_finite() && x.abs() <= WEIGHT_BOUND)
}

pub fn apply_weights(w: &Weights, x: &[f64; 6]) -> Vec3 {
    let row = |k: usize| w[k].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    Vec3::new(row(0), row(1), row(2))
}

impl ResidualModel {
    pub fn is_zero(&self) -> bool {
        self.w.iter().flatten().all(|x| *x == 0.0)
    }

    /// RSW correction in km for a record propagated `dt` seconds.
    pub fn correction(&self, el: &KeplerianElements, bstar: f64, dt: f64) -> Vec3 {
        apply_weights(&self.w, &features(el, bstar, dt))
    }

    /// Shifts the position of a propagated state by the model correction.
    pub fn apply(&self, el: &KeplerianElements, bstar: f64, s: &StateVector) -> StateVector {
        if self.is_zero() {
            return *s;
        }
        let dr = rsw_basis(s) * self.correction(el, bstar, s.epoch - el.epoch);
        StateVector { epoch: s.epoch, r: s.r + dr, v: s.v }
    }
}

/// Model input: `[1, d, d^2, bstar*1e4, e, (a-7000)/1000]` with `d` in days.
pub fn features(el: &KeplerianElements, bstar: f64, dt: f64) -> [f64; 6] {
    let d = dt / SECONDS_PER_DAY;
    [1.0, d, d * d, bstar * 1e4, el.e, (el.a - 7000.0) / 1000.0]
}

/// [`propagate_j2`] plus the model correction; velocity is left unchanged.
pub fn corrected_propagate(
    el: &KeplerianElements,
    bstar: f64,
    t: Epoch,
    model: &ResidualModel,
    cfg: &PropagatorConfig,
) -> Result<StateVector, AstroError> {
    let s = propagate_j2(el, bstar, t, cfg)?;
    Ok(model.apply(el, bstar, &s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// Digest of the object id and epoch; its low bit selects the holdout half.
    pub key: Digest32,
    pub x: [f64; 6],
    /// Observed minus propagated position in RSW, km.
    pub y: [f64; 3],
}

impl CalibrationSample {
    pub fn in_holdout(&self) -> bool {
        self.key.0[31] & 1 == 1
    }
}

pub fn sample_key(object_id: &str, epoch: Epoch) -> Digest32 {
    Digest32::of_parts(&[object_id.as_bytes(), &[0], &epoch.micros().to_be_bytes()])
}

/// Supervision from a ranging TDM of a calibration object: the measured
/// position minus the reference prediction from the object's record.
pub fn calibration_samples(
    tdm: &Tdm,
    record: &OrbitRecord,
    site: &GroundSite,
    cfg: &PropagatorConfig,
    cache: Option<&TrajectoryCache>,
) -> Result<Vec<CalibrationSample>, FedError> {
    if !tdm.meta().has_range {
        return Err(FedError::NoRange);
    }
    let radec = tdm.meta().mode.is_radec();
    let el = &record.elements;
    let mut out = Vec::with_capacity(tdm.records().len());
    for obs in tdm.records() {
        let s = match cache {
            Some(c) => c.state_at(record, cfg, obs.epoch)?,
            None => propagate_j2(el, record.bstar, obs.epoch, cfg)?,
        };
        let rho = obs.range.ok_or(FedError::NoRange)?;
        let pos = site_eci(site, obs.epoch) + rho * los_eci(site, obs.epoch, obs.angle1, obs.angle2, radec);
        let y = rsw_basis(&s).transpose() * (pos - s.r);
        out.push(CalibrationSample {
            key: sample_key(&record.object_id, obs.epoch),
            x: features(el, record.bstar, obs.epoch - el.epoch),
            y: [y.x, y.y, y.z],
        });
    }
    Ok(out)
}

/// Splits samples into (training, holdout) halves.
pub fn split(samples: &[CalibrationSample]) -> (Vec<CalibrationSample>, Vec<CalibrationSample>) {
    samples.iter().partition(|s| !s.in_holdout())
}

/// Closed-form ridge regression per output row, with the penalty scaled per
/// sample so a duplicated dataset yields the same weights.
pub fn train_local(samples: &[([f64; 6], [f64; 3])], lambda: f64) -> Result<Weights, FedError> {
    if samples.len() < MIN_TRAIN_SAMPLES {
        return Err(FedError::TooFewSamples { got: samples.len(), need: MIN_TRAIN_SAMPLES });
    }
    let lambda = if lambda > 0.0 { lambda } else { RIDGE_LAMBDA };
    let n = samples.len() as f64;
    let mut a = Matrix6::<f64>::zeros();
    let mut b = [Vector6::<f64>::zeros(); 3];
    for (x, y) in samples {
        let xv = Vector6::from_row_slice(x);
        a += xv * xv.transpose();
        for k in 0..3 {
            b[k] += xv * y[k];
        }
    }
    a /= n;
    a += Matrix6::identity() * lambda;
    let chol = a.cholesky().ok_or(FedError::WeightsOutOfBounds)?;
    let mut w = [[0.0; 6]; 3];
    for k in 0..3 {
        let sol = chol.solve(&(b[k] / n));
        w[k].copy_from_slice(sol.as_slice());
    }
    if !weights_valid(&w) {
        return Err(FedError::WeightsOutOfBounds);
    }
    Ok(w)
}

/// Trains on the non-holdout half of the calibration samples.
pub fn train_on_calibration(samples: &[CalibrationSample]) -> Result<Weights, FedError> {
    let (train, _) = split(samples);
    let pairs: Vec<_> = train.iter().map(|s| (s.x, s.y)).collect();
    train_local(&pairs, RIDGE_LAMBDA)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelProposal {
    pub w_new: Weights,
    pub proposer: String,
    /// Proposer's own holdout RMS, km; informational only.
    pub claimed_rms: f64,
    pub parent_version: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Accept,
    Reject,
    /// Too little holdout data; not counted toward quorum.
    Abstain,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub rms_new: Option<f64>,
    pub rms_old: Option<f64>,
    pub vote: Vote,
}

/// Position RMS in km of a weight matrix over a sample set.
pub fn holdout_rms(w: &Weights, samples: &[CalibrationSample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples
        .iter()
        .map(|s| (Vec3::from(s.y) - apply_weights(w, &s.x)).norm_squared())
        .sum();
    (sum / samples.len() as f64).sqrt()
}

pub fn verify_proposal(
    p: &ModelProposal,
    global: &ResidualModel,
    samples: &[CalibrationSample],
) -> Verification {
    let (_, holdout) = split(samples);
    if holdout.len() < MIN_HOLDOUT {
        return Verification { rms_new: None, rms_old: None, vote: Vote::Abstain };
    }
    let rms_old = holdout_rms(&global.w, &holdout);
    if !weights_valid(&p.w_new) || p.parent_version != global.version {
        return Verification { rms_new: None, rms_old: Some(rms_old), vote: Vote::Reject };
    }
    let rms_new = holdout_rms(&p.w_new, &holdout);
    let vote = if rms_new.is_finite() && rms_new <= ACCEPT_RATIO * rms_old {
        Vote::Accept
    } else {
        Vote::Reject
    };
    Verification { rms_new: Some(rms_new), rms_old: Some(rms_old), vote }
}

/// Blends an accepted proposal into the global model. Quorum is the ledger's job.
pub fn merge_model(
    global: &ResidualModel,
    p: &ModelProposal,
    new_samples: u64,
) -> Result<ResidualModel, FedError> {
    if p.parent_version != global.version {
        return Err(FedError::StaleParent { parent: p.parent_version, global: global.version });
    }
    if !weights_valid(&p.w_new) {
        return Err(FedError::WeightsOutOfBounds);
    }
    let mut w = global.w;
    for (row, new_row) in w.iter_mut().zip(&p.w_new) {
        for (x, y) in row.iter_mut().zip(new_row) {
            *x = (1.0 - MERGE_WEIGHT) * *x + MERGE_WEIGHT * y;
        }
    }
    Ok(ResidualModel {
        w,
        version: global.version + 1,
        trained_on: global.trained_on + new_samples,
    })
}
