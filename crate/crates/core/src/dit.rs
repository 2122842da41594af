//! Detectability, trackability and identifiability scores per cataloged
//! object, computed from verified TDMs on the chain.
//!
//! For an object over a trailing window ending at the block time:
//!
//! - `D = min(1, N / n_sat) * min(1, sites / site_sat)` with `N` verified
//!   TDMs from `sites` distinct sites;
//! - `T` is the fraction of window days with at least one verified TDM;
//! - `I = clamp(1 - median_rms / theta_verify, 0, 1)`, and 0 with no TDMs;
//! - the composite is the mean of the three.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{Epoch, SECONDS_PER_DAY};
use crate::ledger::{LedgerState, TdmStatus};
use crate::validation::Verdict;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitParams {
    /// Verified TDM count at which detectability saturates.
    pub n_sat: u32,
    /// Distinct-site count at which detectability saturates.
    pub site_sat: u32,
    pub window_days: u32,
}

impl Default for DitParams {
    fn default() -> Self {
        Self { n_sat: 10, site_sat: 3, window_days: 30 }
    }
}

impl DitParams {
    pub fn check(&self) -> Result<(), String> {
        if self.n_sat == 0 || self.site_sat == 0 || self.window_days == 0 {
            return Err("DIT saturation constants and window must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitScore {
    pub object_id: String,
    pub detectability: f64,
    pub trackability: f64,
    pub identifiability: f64,
    pub composite: f64,
    pub window: (Epoch, Epoch),
    pub as_of_block: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DitError {
    #[error("object {0} is not on chain")]
    NotFound(String),
}

/// One verified TDM as the scores see it.
#[derive(Clone, Debug, PartialEq)]
pub struct DitInput {
    pub epoch: Epoch,
    pub site_id: String,
    pub rms: f64,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Scores from explicit inputs; those outside `(end - window, end]` are ignored.
pub fn score_inputs(
    object_id: &str,
    inputs: &[DitInput],
    end: Epoch,
    theta_verify: f64,
    p: &DitParams,
    as_of_block: u64,
) -> DitScore {
    let span = p.window_days as f64 * SECONDS_PER_DAY;
    let start = end - span;
    let inside: Vec<&DitInput> = inputs.iter().filter(|x| x.epoch > start && x.epoch <= end).collect();
    let n = inside.len() as f64;
    let sites: BTreeSet<&str> = inside.iter().map(|x| x.site_id.as_str()).collect();
    let days: BTreeSet<i64> =
        inside.iter().map(|x| (((x.epoch - start) / SECONDS_PER_DAY).ceil() as i64 - 1).clamp(0, p.window_days as i64 - 1)).collect();
    let d = (n / p.n_sat as f64).min(1.0) * (sites.len() as f64 / p.site_sat as f64).min(1.0);
    let t = days.len() as f64 / p.window_days as f64;
    let i = median(inside.iter().map(|x| x.rms).collect()).map_or(0.0, |m| (1.0 - m / theta_verify).clamp(0.0, 1.0));
    DitScore {
        object_id: object_id.into(),
        detectability: d,
        trackability: t,
        identifiability: i,
        composite: (d + t + i) / 3.0,
        window: (start, end),
        as_of_block,
    }
}

/// Verified TDMs of `object_id` recorded in `state`, keyed by last epoch.
pub fn inputs_from_chain(state: &LedgerState, object_id: &str) -> Vec<DitInput> {
    state
        .tdms()
        .iter()
        .filter(|(_, e)| e.status == TdmStatus::Final(Verdict::Verified))
        .filter_map(|(h, e)| {
            let r = e.report.as_ref()?;
            (r.matched_object.as_deref() == Some(object_id)).then_some(())?;
            let tdm = state.tdm(h)?;
            Some(DitInput { epoch: tdm.last_epoch(), site_id: tdm.meta().site_id.clone(), rms: r.rms_residual })
        })
        .collect()
}

pub fn dit_score(state: &LedgerState, object_id: &str, p: &DitParams) -> Result<DitScore, DitError> {
    if !state.catalog().contains_key(object_id) {
        return Err(DitError::NotFound(object_id.into()));
    }
    let inputs = inputs_from_chain(state, object_id);
    Ok(score_inputs(object_id, &inputs, state.time(), state.validation().theta_verify, p, state.height()))
}

/// Every cataloged object, composite descending, ties by id.
pub fn dit_leaderboard(state: &LedgerState, p: &DitParams) -> Vec<DitScore> {
    let mut out: Vec<DitScore> =
        state.catalog().keys().map(|id| dit_score(state, id, p).expect("cataloged")).collect();
    out.sort_by(|a, b| b.composite.total_cmp(&a.composite).then_with(|| a.object_id.cmp(&b.object_id)));
    out
}

pub const LEADERBOARD_HEADER: &str = "object_id,D,T,I,composite,as_of_block";

pub fn leaderboard_csv(scores: &[DitScore]) -> String {
    let mut s = String::from(LEADERBOARD_HEADER);
    s.push('\n');
    for x in scores {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            x.object_id, x.detectability, x.trackability, x.identifiability, x.composite, x.as_of_block
        ));
    }
    s
}
