//! Deterministic discrete-event simulation of observer, compute and
//! requester nodes driving the ledger over a lossy, latent network.
//!
//! Everything random is drawn from streams seeded by the scenario seed, and
//! events are totally ordered by `(time, sequence)`, so a scenario and seed
//! reproduce the same chain bytes.

mod report;
mod sim;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{
    propagate_j2, state_to_kepler, Epoch, GroundSite, KeplerianElements, ObjectSource, OrbitRecord,
    PropagatorConfig, Vec3, MU, RE,
};
use crate::dit::DitParams;
use crate::fedprop::{weights_valid, Weights};
use crate::ledger::{EconomicsParams, Genesis, GenesisAccount, Role};
use crate::tasking::{RegionTolerance, TaskTarget};
use crate::tdm::AngleMode;
use crate::validation::ValidationParams;
use crate::Digest32;

pub use report::{
    AccountPnl, BalanceRow, MinedObject, ModelPoint, ProposalOutcome, ProposalRecord, SimOutput,
    SimReport, VerdictRow,
};
pub use sim::{run_scenario, RunOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    Observer,
    Compute,
    Requester,
}

impl NodeRole {
    fn ledger_role(self) -> Role {
        match self {
            NodeRole::Observer => Role::Observer,
            NodeRole::Compute => Role::Compute,
            NodeRole::Requester => Role::Requester,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    /// Observer that displaces every observation by `spoof_offset_deg`.
    Spoofer,
    /// Validator that attests a verified verdict without checking, and
    /// accepts every model proposal.
    LazyValidator,
    /// Validator that proposes wildly scaled weights and rejects other
    /// proposals; it validates TDMs honestly.
    ModelPoisoner,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Honest => "honest",
            Behavior::Spoofer => "spoofer",
            Behavior::LazyValidator => "lazy_validator",
            Behavior::ModelPoisoner => "model_poisoner",
        }
    }
}

fn default_noise() -> f64 {
    1e-4
}

fn default_offset() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub account: String,
    pub role: NodeRole,
    #[serde(default)]
    pub site: Option<String>,
    #[serde(default)]
    pub behavior: Behavior,
    /// Angle noise, rad; range noise is this fraction of the range.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub has_range: bool,
    #[serde(default)]
    pub mode: Option<AngleMode>,
    pub balance: u64,
    #[serde(default)]
    pub stake: u64,
    #[serde(default = "default_offset")]
    pub spoof_offset_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Uniform one-way latency bounds, ms.
    pub latency_ms: [f64; 2],
    pub drop_prob: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { latency_ms: [50.0, 500.0], drop_prob: 0.01 }
    }
}

/// Background demand: each requester posts one task per `interval` for a
/// random cataloged object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub interval: f64,
    pub fee: [u64; 2],
    pub urgency_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub at: Epoch,
    pub requester: String,
    pub target: TaskTarget,
    pub fee: u64,
    pub urgency: bool,
}

fn default_block() -> f64 {
    600.0
}
fn default_cycle() -> f64 {
    3.0 * 3600.0
}
fn default_fed() -> f64 {
    86400.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default)]
    pub start: Epoch,
    /// Simulated seconds.
    pub duration: f64,
    #[serde(default = "default_block")]
    pub block_interval: f64,
    /// Period at which sensors poll the task queue.
    #[serde(default = "default_cycle")]
    pub observation_cycle: f64,
    #[serde(default = "default_fed")]
    pub fedprop_interval: f64,
    /// Ground truth, including uncataloged objects.
    pub truth_orbits: Vec<OrbitRecord>,
    /// Objects that exist only from the given time (fragments).
    #[serde(default)]
    pub appearances: BTreeMap<String, Epoch>,
    /// Ids of truth objects placed in the genesis catalog.
    pub initial_catalog: Vec<String>,
    /// Position residual of the true dynamics over the reference propagator,
    /// as model weights.
    #[serde(default)]
    pub truth_residual: Option<Weights>,
    pub sites: Vec<GroundSite>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub requests: Option<RequestSpec>,
    #[serde(default)]
    pub scheduled_tasks: Vec<ScheduledTask>,
    #[serde(default)]
    pub economics: EconomicsParams,
    #[serde(default)]
    pub validation: ValidationParams,
    #[serde(default)]
    pub propagator: PropagatorConfig,
    #[serde(default)]
    pub dit: DitParams,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid scenario:\n  {}", .0.join("\n  "))]
pub struct ScenarioError(pub Vec<String>);

impl Scenario {
    pub fn digest(&self) -> Digest32 {
        Digest32::of(&serde_json::to_vec(self).expect("scenario serializes"))
    }

    pub fn end(&self) -> Epoch {
        self.start + self.duration
    }

    pub fn node(&self, account: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.account == account)
    }

    /// Every problem with the scenario, collected before anything runs.
    pub fn check(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let mut e = |m: String| errs.push(m);
        if !(self.duration > 0.0 && self.duration <= 30.0 * 86400.0) {
            e(format!("duration {} s must lie in (0, 30 days]", self.duration));
        }
        for (name, v) in [
            ("block_interval", self.block_interval),
            ("observation_cycle", self.observation_cycle),
            ("fedprop_interval", self.fedprop_interval),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                e(format!("{name} must be positive"));
            }
        }
        if !(self.observation_cycle <= 86400.0) {
            e("observation_cycle must not exceed one day".into());
        }
        if !(0.0..1.0).contains(&self.network.drop_prob) {
            e(format!("drop_prob {} must lie in [0, 1)", self.network.drop_prob));
        }
        let [lo, hi] = self.network.latency_ms;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            e(format!("latency range [{lo}, {hi}] ms is invalid"));
        }
        if hi / 1000.0 >= self.block_interval {
            e("latency must stay below the block interval".into());
        }
        if let Err(m) = self.economics.check() {
            e(format!("economics: {m}"));
        }
        if let Err(m) = self.validation.check() {
            e(format!("validation: {m}"));
        }
        if let Err(m) = self.propagator.check() {
            e(format!("propagator: {m}"));
        }
        if let Err(m) = self.dit.check() {
            e(format!("dit: {m}"));
        }
        if let Some(w) = &self.truth_residual {
            if !weights_valid(w) {
                e("truth_residual weights are out of bounds".into());
            }
        }

        let mut truth = BTreeSet::new();
        for r in &self.truth_orbits {
            if let Err(m) = r.check() {
                e(format!("truth orbit {}: {m}", r.object_id));
            }
            if !truth.insert(r.object_id.as_str()) {
                e(format!("truth orbit {} is repeated", r.object_id));
            }
        }
        let mut cat = BTreeSet::new();
        for id in &self.initial_catalog {
            if !truth.contains(id.as_str()) {
                e(format!("initial_catalog entry {id} is not a truth orbit"));
            }
            if !cat.insert(id) {
                e(format!("initial_catalog entry {id} is repeated"));
            }
        }
        for id in self.appearances.keys() {
            if !truth.contains(id.as_str()) {
                e(format!("appearance of unknown object {id}"));
            }
            if cat.contains(id) {
                e(format!("{id} cannot be cataloged and appear later"));
            }
        }
        let mut sites = BTreeSet::new();
        for s in &self.sites {
            if let Err(m) = s.check() {
                e(format!("site {}: {m}", s.site_id));
            }
            if !sites.insert(s.site_id.as_str()) {
                e(format!("site {} is repeated", s.site_id));
            }
        }

        let mut accounts = BTreeSet::new();
        let mut compute_stake = 0u64;
        let mut requesters = BTreeSet::new();
        for n in &self.nodes {
            if n.account.is_empty() || !accounts.insert(n.account.as_str()) {
                e(format!("account {:?} is empty or repeated", n.account));
            }
            match n.role {
                NodeRole::Observer => {
                    match &n.site {
                        Some(s) if sites.contains(s.as_str()) => {}
                        Some(s) => e(format!("{}: unknown site {s}", n.account)),
                        None => e(format!("{}: observers need a site", n.account)),
                    }
                    if n.balance < self.economics.observer_stake_min {
                        e(format!("{}: balance {} is below the observer stake", n.account, n.balance));
                    }
                    if !(n.noise_std >= 0.0 && n.noise_std.is_finite()) {
                        e(format!("{}: noise_std must be >= 0", n.account));
                    }
                    if matches!(n.behavior, Behavior::LazyValidator | Behavior::ModelPoisoner) {
                        e(format!("{}: {} is a validator behavior", n.account, n.behavior.as_str()));
                    }
                    if n.behavior == Behavior::Spoofer && !(n.spoof_offset_deg > 0.0 && n.spoof_offset_deg < 90.0) {
                        e(format!("{}: spoof_offset_deg must lie in (0, 90)", n.account));
                    }
                }
                NodeRole::Compute => {
                    compute_stake += n.stake;
                    if n.behavior == Behavior::Spoofer {
                        e(format!("{}: spoofer is an observer behavior", n.account));
                    }
                }
                NodeRole::Requester => {
                    requesters.insert(n.account.as_str());
                    if n.behavior != Behavior::Honest {
                        e(format!("{}: requesters are honest", n.account));
                    }
                }
            }
            if n.stake > 0 && n.role != NodeRole::Compute {
                e(format!("{}: only compute nodes stake", n.account));
            }
        }
        if compute_stake == 0 {
            e("at least one compute node must stake".into());
        }
        if let Some(r) = &self.requests {
            if !(r.interval > 0.0) || r.fee[0] > r.fee[1] || !(0.0..=1.0).contains(&r.urgency_prob) {
                e("requests: interval must be positive, fee a range, urgency_prob in [0, 1]".into());
            }
            if requesters.is_empty() {
                e("requests need a requester node".into());
            }
        }
        for t in &self.scheduled_tasks {
            if !requesters.contains(t.requester.as_str()) {
                e(format!("scheduled task by {} who is not a requester", t.requester));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError(errs))
        }
    }

    pub fn genesis(&self) -> Genesis {
        let truth: BTreeMap<&str, &OrbitRecord> = self.truth_orbits.iter().map(|r| (r.object_id.as_str(), r)).collect();
        Genesis {
            chain_id: format!("sim-{}", self.seed),
            time: self.start,
            accounts: self
                .nodes
                .iter()
                .map(|n| GenesisAccount {
                    account_id: n.account.clone(),
                    balance: n.balance,
                    staked: n.stake,
                    roles: [n.role.ledger_role()].into(),
                })
                .collect(),
            economics: self.economics.clone(),
            validation: self.validation.clone(),
            propagator: self.propagator,
            sites: self.sites.clone(),
            catalog: self.initial_catalog.iter().map(|id| truth[id.as_str()].clone()).collect(),
            dit: self.dit.clone(),
        }
    }
}

/// Largest fragment velocity change, km/s.
pub const MAX_BREAKUP_DV: f64 = 0.1;

/// Adds `n` fragments of `parent` released at `t` and an urgent search task
/// over the debris region, posted by the first requester.
pub fn inject_breakup(sc: &Scenario, parent: &str, n: usize, t: Epoch) -> Result<Scenario, String> {
    let p = sc
        .truth_orbits
        .iter()
        .find(|r| r.object_id == parent)
        .ok_or_else(|| format!("{parent} is not a truth orbit"))?
        .clone();
    let requester = sc
        .nodes
        .iter()
        .find(|n| n.role == NodeRole::Requester)
        .ok_or("a breakup task needs a requester node")?
        .account
        .clone();
    let s = propagate_j2(&p.elements, p.bstar, t, &sc.propagator).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::from_seed(
        Digest32::of_parts(&[b"breakup", &sc.seed.to_be_bytes(), parent.as_bytes(), &t.micros().to_be_bytes()]).0,
    );
    let mut out = sc.clone();
    let mut made = 0;
    while made < n {
        let dir: [f64; 3] = UnitSphere.sample(&mut rng);
        let dv = Vec3::from(dir) * rng.random_range(0.0..=MAX_BREAKUP_DV);
        let mut f = s;
        f.v += dv;
        let Ok(el) = state_to_kepler(&f) else { continue };
        // fragments that reenter at once are not worth tracking
        if el.a * (1.0 - el.e) < RE + 200.0 {
            continue;
        }
        let id = format!("{parent}-F{}", made + 1);
        out.appearances.insert(id.clone(), t);
        out.truth_orbits.push(OrbitRecord { object_id: id, elements: el, bstar: p.bstar, source: ObjectSource::Cataloged });
        made += 1;
    }
    let el = state_to_kepler(&s).map_err(|e| e.to_string())?;
    let target = TaskTarget::Region { elements: el, tolerance: debris_tolerance(&el, s.v.norm()) };
    let fee = sc.requests.as_ref().map_or(50, |r| r.fee[1]);
    out.scheduled_tasks.push(ScheduledTask { at: t, requester, target, fee, urgency: true });
    Ok(out)
}

/// Element spread reachable with an impulse of at most [`MAX_BREAKUP_DV`]
/// from speed `v`, with a 20% margin.
fn debris_tolerance(el: &KeplerianElements, v: f64) -> RegionTolerance {
    let dv = 1.2 * MAX_BREAKUP_DV;
    RegionTolerance {
        a: 2.0 * el.a * el.a * v * dv / MU,
        e: 2.0 * dv * (1.0 + el.e) / v,
        i: dv / v,
        raan: dv / (v * el.i.sin().abs().max(0.1)),
    }
}

/// Random LEO elements with perigee above 300 km.
pub fn random_leo(rng: &mut ChaCha8Rng, epoch: Epoch) -> KeplerianElements {
    loop {
        let a = rng.random_range(6900.0..7600.0);
        let e = rng.random_range(0.001..0.03);
        let i: f64 = rng.random_range(20.0f64..75.0).to_radians();
        let el = KeplerianElements::new(
            a,
            e,
            if rng.random_bool(0.2) { std::f64::consts::PI - i } else { i },
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::TAU),
            epoch,
        );
        if let Ok(el) = el {
            if el.a * (1.0 - el.e) > RE + 300.0 {
                return el;
            }
        }
    }
}

/// Drag-like residual used by the reference scenarios: a constant radial
/// offset and an along-track drift growing with time.
pub fn reference_residual() -> Weights {
    let mut w = [[0.0; 6]; 3];
    w[0][0] = 0.25;
    w[1][0] = 0.1;
    w[1][1] = 0.12;
    w[1][2] = 0.004;
    w
}

fn observer(account: &str, site: &str, behavior: Behavior) -> NodeSpec {
    NodeSpec {
        account: account.into(),
        role: NodeRole::Observer,
        site: Some(site.into()),
        behavior,
        noise_std: 1e-4,
        has_range: true,
        mode: Some(AngleMode::Azel),
        balance: 100,
        stake: 0,
        spoof_offset_deg: 2.0,
    }
}

fn compute(account: &str, behavior: Behavior) -> NodeSpec {
    NodeSpec {
        account: account.into(),
        role: NodeRole::Compute,
        site: None,
        behavior,
        noise_std: 0.0,
        has_range: false,
        mode: None,
        balance: 100,
        stake: 100,
        spoof_offset_deg: 0.0,
    }
}

fn requester(account: &str, balance: u64) -> NodeSpec {
    NodeSpec {
        account: account.into(),
        role: NodeRole::Requester,
        site: None,
        behavior: Behavior::Honest,
        noise_std: 0.0,
        has_range: false,
        mode: None,
        balance,
        stake: 0,
        spoof_offset_deg: 0.0,
    }
}

fn objects(rng: &mut ChaCha8Rng, start: Epoch, n: usize, calibration: usize) -> Vec<OrbitRecord> {
    (0..n)
        .map(|k| OrbitRecord {
            object_id: format!("OBJ-{k:02}"),
            elements: random_leo(rng, start),
            bstar: rng.random_range(0.0..2e-5),
            source: if k >= n - calibration { ObjectSource::Calibration } else { ObjectSource::Cataloged },
        })
        .collect()
}

/// Three honest observers, one spoofer, two honest validators and a model
/// poisoner, a requester, ten cataloged objects (two of them calibration
/// targets) under a drag-like residual, seven days.
pub fn reference_scenario(seed: u64) -> Scenario {
    let start = Epoch::J2000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = objects(&mut rng, start, 10, 2);
    Scenario {
        seed,
        start,
        duration: 7.0 * 86400.0,
        block_interval: default_block(),
        observation_cycle: default_cycle(),
        fedprop_interval: default_fed(),
        initial_catalog: truth.iter().map(|r| r.object_id.clone()).collect(),
        truth_orbits: truth,
        appearances: BTreeMap::new(),
        truth_residual: Some(reference_residual()),
        sites: vec![
            GroundSite::new("S1", 35.0, -5.0, 0.2),
            GroundSite::new("S2", -25.0, 135.0, 0.5),
            GroundSite::new("S3", 40.0, -105.0, 1.6),
            GroundSite::new("S4", 15.0, 60.0, 0.1),
        ],
        nodes: vec![
            observer("obs1", "S1", Behavior::Honest),
            observer("obs2", "S2", Behavior::Honest),
            observer("obs3", "S3", Behavior::Honest),
            observer("obs4", "S4", Behavior::Spoofer),
            compute("val1", Behavior::Honest),
            compute("val2", Behavior::Honest),
            compute("val3", Behavior::ModelPoisoner),
            requester("req", 20_000),
        ],
        network: NetworkSpec::default(),
        requests: Some(RequestSpec { interval: 3600.0, fee: [10, 40], urgency_prob: 0.1 }),
        scheduled_tasks: Vec::new(),
        economics: EconomicsParams::default(),
        validation: ValidationParams::default(),
        propagator: PropagatorConfig::default(),
        dit: DitParams::default(),
    }
}

/// The reference scenario with calibration-grade sensors (1e-5 rad), so the
/// injected residual dominates measurement noise in the training data.
pub fn fedprop_scenario(seed: u64) -> Scenario {
    let mut sc = reference_scenario(seed);
    for n in sc.nodes.iter_mut().filter(|n| n.role == NodeRole::Observer) {
        n.noise_std = 1e-5;
    }
    sc
}

/// One uncataloged object among five cataloged ones, four honest radar
/// observers, three honest validators, two days.
pub fn uct_scenario(seed: u64) -> Scenario {
    let start = Epoch::J2000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5543_5400);
    let mut truth = objects(&mut rng, start, 6, 0);
    truth[5].object_id = "UNKNOWN-1".into();
    Scenario {
        seed,
        start,
        duration: 2.0 * 86400.0,
        block_interval: default_block(),
        observation_cycle: default_cycle(),
        fedprop_interval: default_fed(),
        initial_catalog: truth[..5].iter().map(|r| r.object_id.clone()).collect(),
        truth_orbits: truth,
        appearances: BTreeMap::new(),
        truth_residual: None,
        sites: vec![
            GroundSite::new("S1", 35.0, -5.0, 0.2),
            GroundSite::new("S2", -25.0, 135.0, 0.5),
            GroundSite::new("S3", 40.0, -105.0, 1.6),
            GroundSite::new("S4", 5.0, 60.0, 0.1),
        ],
        nodes: vec![
            observer("obs1", "S1", Behavior::Honest),
            observer("obs2", "S2", Behavior::Honest),
            observer("obs3", "S3", Behavior::Honest),
            observer("obs4", "S4", Behavior::Honest),
            compute("val1", Behavior::Honest),
            compute("val2", Behavior::Honest),
            compute("val3", Behavior::Honest),
            requester("req", 5_000),
        ],
        network: NetworkSpec::default(),
        requests: Some(RequestSpec { interval: 4.0 * 3600.0, fee: [10, 20], urgency_prob: 0.0 }),
        scheduled_tasks: Vec::new(),
        economics: EconomicsParams::default(),
        validation: ValidationParams::default(),
        propagator: PropagatorConfig::default(),
        dit: DitParams::default(),
    }
}
