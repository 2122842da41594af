//! Prioritized observation tasks and sensor assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{
    ephemeris, propagate_j2, topocentric_angles, wrap_pi, Epoch, GroundSite, KeplerianElements,
    ObjectSource, OrbitRecord, PropagatorConfig, StateVector, TrajectoryCache, SECONDS_PER_DAY,
};
use crate::iod::IodSolution;
use crate::tdm::{AngleMode, ELEVATION_MASK_DEG};
use crate::validation::{elements_at, ValidationParams, ValidationReport, Verdict};
use crate::Digest32;

/// Open tasks older than this expire and refund their fee.
pub const TASK_TTL_S: f64 = 48.0 * 3600.0;
/// Sample spacing of a pass plan; also the minimum epoch spacing.
pub const PASS_SPACING_S: f64 = 60.0;
pub const MIN_PASS_EPOCHS: usize = 3;
pub const MAX_PASS_EPOCHS: usize = 10;
pub const MAX_WINDOW_S: f64 = 24.0 * 3600.0;
/// Residual RMS below which a retask region stops shrinking, rad.
pub const REGION_RMS_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskingError {
    #[error("retask needs an ambiguous or uct report, got {0}")]
    NotRetaskable(&'static str),
    #[error("window of {0} s exceeds 24 h or is empty")]
    Window(f64),
}

/// Half-widths of an element box over `(a [km], e, i [rad], raan [rad])`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionTolerance {
    pub a: f64,
    pub e: f64,
    pub i: f64,
    pub raan: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTarget {
    Object { object_id: String },
    /// Follow-up of an uncorrelated track around its IOD estimate.
    Region { elements: KeplerianElements, tolerance: RegionTolerance },
}

impl TaskTarget {
    pub fn is_uct_follow_up(&self) -> bool {
        matches!(self, TaskTarget::Region { .. })
    }

    /// Whether `el` lies in the region once both are at the same epoch.
    /// Object targets contain nothing.
    pub fn region_contains(&self, el: &KeplerianElements, cfg: &PropagatorConfig) -> bool {
        let TaskTarget::Region { elements, tolerance } = self else {
            return false;
        };
        let Ok(c) = elements_at(elements, el.epoch, cfg) else {
            return false;
        };
        (c.a - el.a).abs() <= tolerance.a
            && (c.e - el.e).abs() <= tolerance.e
            && (c.i - el.i).abs() <= tolerance.i
            && wrap_pi(c.raan - el.raan).abs() <= tolerance.raan
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskOrigin {
    External,
    Internal,
    Calibration,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Assigned,
    Fulfilled,
    Expired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: Digest32,
    pub target: TaskTarget,
    pub fee: u64,
    pub urgency: bool,
    pub origin: TaskOrigin,
    pub created_at: Epoch,
    pub status: TaskStatus,
    /// Account refunded on expiry; `None` for protocol-funded tasks.
    pub requester: Option<String>,
}

impl Task {
    pub fn is_live(&self) -> bool {
        matches!(self.status, TaskStatus::Open | TaskStatus::Assigned)
    }

    pub fn expired_at(&self, now: Epoch) -> bool {
        now - self.created_at >= TASK_TTL_S
    }
}

/// Priority weights; genesis-configurable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorityWeights {
    pub urgency: f64,
    pub uct: f64,
    pub age: f64,
    pub fee: f64,
    /// Days at which the age term saturates.
    pub age_saturation_days: f64,
    /// Fee at which the fee term reaches half its weight.
    pub fee_half: f64,
}

impl Default for PriorityWeights {
    fn default() -> Self {
        Self { urgency: 2.0, uct: 1.5, age: 1.0, fee: 0.5, age_saturation_days: 7.0, fee_half: 100.0 }
    }
}

/// Time each object was last seen in a verified TDM.
pub type LastVerified = BTreeMap<String, Epoch>;

/// Weighted sum of urgency, UCT follow-up, staleness and fee. Objects never
/// verified, and regions, count as fully stale.
pub fn priority(task: &Task, last_verified: &LastVerified, now: Epoch, w: &PriorityWeights) -> f64 {
    let age_term = match &task.target {
        TaskTarget::Object { object_id } => match last_verified.get(object_id) {
            Some(t) => ((now - *t) / SECONDS_PER_DAY / w.age_saturation_days).clamp(0.0, 1.0),
            None => 1.0,
        },
        TaskTarget::Region { .. } => 1.0,
    };
    let fee = task.fee as f64;
    w.urgency * f64::from(u8::from(task.urgency))
        + w.uct * f64::from(u8::from(task.target.is_uct_follow_up()))
        + w.age * age_term
        + w.fee * fee / (fee + w.fee_half)
}

/// Live tasks, highest priority first, ties by task id.
pub fn order_queue<'a>(
    queue: &'a [Task],
    last_verified: &LastVerified,
    now: Epoch,
    w: &PriorityWeights,
) -> Vec<(&'a Task, f64)> {
    let mut v: Vec<(&Task, f64)> = queue
        .iter()
        .filter(|t| t.is_live())
        .map(|t| (t, priority(t, last_verified, now, w)))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.task_id.cmp(&b.0.task_id)));
    v
}

/// A ground sensor and what it measures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub site: GroundSite,
    pub mode: AngleMode,
    pub has_range: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: Digest32,
    pub object: String,
    pub epochs: Vec<Epoch>,
}

/// Orbit a task points the sensor at, if the target can be resolved.
pub fn target_record(target: &TaskTarget, catalog: &BTreeMap<String, OrbitRecord>) -> Option<OrbitRecord> {
    match target {
        TaskTarget::Object { object_id } => catalog.get(object_id).cloned(),
        TaskTarget::Region { elements, .. } => Some(OrbitRecord {
            object_id: format!("REGION-{}", Digest32::of(&serde_json::to_vec(elements).ok()?).short()),
            elements: *elements,
            bstar: 0.0,
            source: ObjectSource::Mined,
        }),
    }
}

/// First pass of `rec` over `site` in the window with at least
/// [`MIN_PASS_EPOCHS`] samples above the mask, sampled every
/// [`PASS_SPACING_S`] and capped at [`MAX_PASS_EPOCHS`].
pub fn plan_pass(
    rec: &OrbitRecord,
    site: &GroundSite,
    window: (Epoch, Epoch),
    cfg: &PropagatorConfig,
    cache: Option<&TrajectoryCache>,
) -> Option<Vec<Epoch>> {
    let n = ((window.1 - window.0) / PASS_SPACING_S).floor() as usize + 1;
    let grid: Vec<Epoch> = (0..n).map(|k| window.0 + PASS_SPACING_S * k as f64).collect();
    let states: Vec<StateVector> = match cache {
        Some(c) => grid.iter().map(|t| c.state_at(rec, cfg, *t)).collect::<Result<_, _>>().ok()?,
        None => ephemeris(&rec.elements, rec.bstar, &grid, cfg).ok()?,
    };
    let mask = ELEVATION_MASK_DEG.to_radians();
    let mut run: Vec<Epoch> = Vec::new();
    for (t, s) in grid.iter().zip(&states) {
        if topocentric_angles(s, site).1 > mask {
            run.push(*t);
            if run.len() == MAX_PASS_EPOCHS {
                return Some(run);
            }
        } else if run.len() >= MIN_PASS_EPOCHS {
            return Some(run);
        } else {
            run.clear();
        }
    }
    (run.len() >= MIN_PASS_EPOCHS).then_some(run)
}

/// Highest-priority live task whose target makes a usable pass over the
/// sensor inside `window`. The chosen task is marked assigned in `queue`.
#[allow(clippy::too_many_arguments)]
pub fn assign(
    queue: &mut [Task],
    sensor: &Sensor,
    window: (Epoch, Epoch),
    catalog: &BTreeMap<String, OrbitRecord>,
    last_verified: &LastVerified,
    w: &PriorityWeights,
    cfg: &PropagatorConfig,
    cache: Option<&TrajectoryCache>,
) -> Result<Option<Assignment>, TaskingError> {
    let len = window.1 - window.0;
    if !(len > 0.0 && len <= MAX_WINDOW_S) {
        return Err(TaskingError::Window(len));
    }
    let ordered: Vec<Digest32> = order_queue(queue, last_verified, window.0, w)
        .into_iter()
        .filter(|(t, _)| t.status == TaskStatus::Open)
        .map(|(t, _)| t.task_id)
        .collect();
    for id in ordered {
        let task = queue.iter_mut().find(|t| t.task_id == id).expect("id from queue");
        let Some(rec) = target_record(&task.target, catalog) else {
            continue;
        };
        if let Some(epochs) = plan_pass(&rec, &sensor.site, window, cfg, cache) {
            task.status = TaskStatus::Assigned;
            return Ok(Some(Assignment { task_id: id, object: rec.object_id, epochs }));
        }
    }
    Ok(None)
}

/// Box half-widths of three times the association scale, widened in
/// proportion to how far the IOD residual exceeds [`REGION_RMS_FLOOR`].
pub fn retask_tolerance(rms: f64, params: &ValidationParams) -> RegionTolerance {
    let k = 3.0 * (rms / REGION_RMS_FLOOR).max(1.0) * params.d_assoc;
    let w = params.weights;
    RegionTolerance { a: k / w[0], e: k / w[1], i: k / w[2], raan: k / w[3] }
}

/// Follow-up task for an ambiguous or uncorrelated report. The id depends
/// only on the report and the estimate, so spawning twice is idempotent.
pub fn spawn_internal_retask(
    report: &ValidationReport,
    iod: &IodSolution,
    params: &ValidationParams,
    fee: u64,
    now: Epoch,
) -> Result<Task, TaskingError> {
    if !report.needs_retask() {
        return Err(TaskingError::NotRetaskable(report.verdict.as_str()));
    }
    let target = TaskTarget::Region {
        elements: iod.elements,
        tolerance: retask_tolerance(iod.rms_residual, params),
    };
    let body = serde_json::to_vec(&target).expect("target serializes");
    Ok(Task {
        task_id: Digest32::of_parts(&[b"internal", report.digest().as_bytes(), &body]),
        target,
        fee,
        urgency: false,
        origin: TaskOrigin::Internal,
        created_at: now,
        status: TaskStatus::Open,
        requester: None,
    })
}

/// Follow-up on a known object after an ambiguous verdict without an orbit
/// estimate.
pub fn spawn_object_retask(report: &ValidationReport, fee: u64, now: Epoch) -> Result<Task, TaskingError> {
    if report.verdict != Verdict::Ambiguous {
        return Err(TaskingError::NotRetaskable(report.verdict.as_str()));
    }
    let object_id = report.matched_object.clone().ok_or(TaskingError::NotRetaskable("ambiguous without match"))?;
    Ok(Task {
        task_id: Digest32::of_parts(&[b"internal-object", report.digest().as_bytes()]),
        target: TaskTarget::Object { object_id },
        fee,
        urgency: false,
        origin: TaskOrigin::Internal,
        created_at: now,
        status: TaskStatus::Open,
        requester: None,
    })
}

/// Whether `rec` is visible above the mask from `site` at `t`.
pub fn visible(rec: &OrbitRecord, site: &GroundSite, t: Epoch, cfg: &PropagatorConfig) -> bool {
    propagate_j2(&rec.elements, rec.bstar, t, cfg)
        .map(|s| topocentric_angles(&s, site).1 > ELEVATION_MASK_DEG.to_radians())
        .unwrap_or(false)
}
