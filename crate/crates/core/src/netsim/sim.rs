use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::NetStats;
use super::{
    AccountPnl, BalanceRow, Behavior, MinedObject, ModelPoint, NodeRole, NodeSpec, ProposalOutcome, ProposalRecord,
    Scenario, ScenarioError, SimOutput, SimReport, VerdictRow,
};
use crate::astro::{Epoch, GroundSite, OrbitRecord, TrajectoryCache};
use crate::fedprop::{
    holdout_rms, merge_model, split, train_on_calibration, verify_proposal, ModelProposal, ResidualModel, Verification,
    Vote, WEIGHT_BOUND,
};
use crate::iod::IodSolution;
use crate::ledger::{
    genesis_block, produce_block, select_validator, Block, LedgerState, MinedClaim, Payload, TdmStatus, Transaction,
};
use crate::tasking::{assign, plan_pass, Sensor, TaskOrigin, TaskTarget};
use crate::tdm::{synth_tdm_with, AngleMode, SynthOptions, Tdm, UNKNOWN_PARTICIPANT};
use crate::validation::{
    associate_uct, element_distance, elements_at, mine_object, validate_tdm, CatalogSnapshot, ValidationReport, Verdict,
};
use crate::Digest32;

#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Worker threads for validation; results do not depend on it.
    pub threads: usize,
    /// End the run at the first block that catalogs a mined object.
    pub stop_when_mined: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { threads: 1, stop_when_mined: false }
    }
}

/// Entry weight a poisoner proposes, inside the sanity bound.
const POISON: f64 = WEIGHT_BOUND / 2.0;
const VIEW_RING: usize = 64;
const BALANCE_EVERY: u64 = 6;

#[derive(Clone, Debug)]
struct Plan {
    truth: String,
    epochs: Vec<Epoch>,
    task_id: Option<Digest32>,
    participant: String,
}

#[derive(Clone, Debug)]
enum Msg {
    Tx(Transaction),
    Block(u64),
}

#[derive(Clone, Debug)]
enum Ev {
    Block,
    Cycle(usize),
    Observe(usize, Plan),
    Deliver(usize, Msg),
    Request(usize),
    Scheduled(usize),
    Fed,
}

/// Events ordered by `(time, sequence)`.
#[derive(Default)]
struct Queue {
    heap: BinaryHeap<Reverse<(Epoch, u64)>>,
    events: BTreeMap<u64, Ev>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, t: Epoch, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq)));
        self.events.insert(self.seq, ev);
    }

    fn pop(&mut self) -> Option<(Epoch, Ev)> {
        let Reverse((t, s)) = self.heap.pop()?;
        Some((t, self.events.remove(&s).expect("queued")))
    }
}

struct Node {
    spec: NodeSpec,
    site: Option<GroundSite>,
    nonce: u64,
    view: u64,
    mempool: BTreeMap<Digest32, Transaction>,
    surveyed: BTreeMap<String, Epoch>,
    observations: u64,
}

/// Derived per-block work every validator would compute from the post-state.
/// Computing it once is result-identical because each piece is pure.
#[derive(Default)]
struct BlockWork {
    reports: Vec<ValidationReport>,
    verifications: Vec<(Digest32, ModelProposal, Verification)>,
    claims: Vec<MinedClaim>,
}

struct Sim<'a> {
    sc: &'a Scenario,
    opts: RunOptions,
    truth: BTreeMap<String, OrbitRecord>,
    truth_model: Option<ResidualModel>,
    nodes: Vec<Node>,
    compute: Vec<usize>,
    by_account: BTreeMap<String, usize>,
    state: LedgerState,
    blocks: Vec<Block>,
    views: VecDeque<(u64, Arc<LedgerState>)>,
    work: BTreeMap<u64, BlockWork>,
    q: Queue,
    net_rng: ChaCha8Rng,
    req_rng: ChaCha8Rng,
    cache: TrajectoryCache,
    now: Epoch,
    tdm_truth: BTreeMap<Digest32, String>,
    first_seen: BTreeMap<String, Epoch>,
    pending: BTreeSet<Digest32>,
    last_pool: BTreeSet<Digest32>,
    mining_tried: BTreeMap<Vec<Digest32>, Option<OrbitRecord>>,
    proposals: BTreeMap<Digest32, ProposalRecord>,
    mined: Vec<MinedObject>,
    model_points: Vec<ModelPoint>,
    model_versions: Vec<ResidualModel>,
    verdict_rows: Vec<VerdictRow>,
    balance_rows: Vec<BalanceRow>,
    net: NetStats,
    failed_txs: u64,
    honest_rejections: u64,
}

fn stream(seed: u64, tag: &[u8]) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(Digest32::of_parts(&[tag, &seed.to_be_bytes()]).0)
}

/// Runs a scenario to its end and returns the chain, final state and report.
pub fn run_scenario(sc: &Scenario, opts: &RunOptions) -> Result<SimOutput, ScenarioError> {
    sc.check()?;
    let genesis = sc.genesis();
    let (b0, state) = genesis_block(&genesis).map_err(|e| ScenarioError(vec![e.to_string()]))?;
    let sites: BTreeMap<&str, &GroundSite> = sc.sites.iter().map(|s| (s.site_id.as_str(), s)).collect();
    let nodes: Vec<Node> = sc
        .nodes
        .iter()
        .map(|n| Node {
            spec: n.clone(),
            site: n.site.as_ref().map(|s| sites[s.as_str()].clone()),
            nonce: 0,
            view: 0,
            mempool: BTreeMap::new(),
            surveyed: BTreeMap::new(),
            observations: 0,
        })
        .collect();
    let mut sim = Sim {
        sc,
        opts: RunOptions { threads: opts.threads.max(1), ..opts.clone() },
        truth: sc.truth_orbits.iter().map(|r| (r.object_id.clone(), r.clone())).collect(),
        truth_model: sc.truth_residual.map(|w| ResidualModel { w, version: 0, trained_on: 0 }),
        compute: (0..nodes.len()).filter(|k| nodes[*k].spec.role == NodeRole::Compute).collect(),
        by_account: nodes.iter().enumerate().map(|(k, n)| (n.spec.account.clone(), k)).collect(),
        nodes,
        views: VecDeque::from([(0, Arc::new(state.clone()))]),
        state,
        blocks: vec![b0],
        work: BTreeMap::new(),
        q: Queue::default(),
        net_rng: stream(sc.seed, b"network"),
        req_rng: stream(sc.seed, b"requests"),
        cache: TrajectoryCache::new(),
        now: sc.start,
        tdm_truth: BTreeMap::new(),
        first_seen: BTreeMap::new(),
        pending: BTreeSet::new(),
        last_pool: BTreeSet::new(),
        mining_tried: BTreeMap::new(),
        proposals: BTreeMap::new(),
        mined: Vec::new(),
        model_points: Vec::new(),
        model_versions: vec![ResidualModel::default()],
        verdict_rows: Vec::new(),
        balance_rows: Vec::new(),
        net: NetStats::default(),
        failed_txs: 0,
        honest_rejections: 0,
    };
    sim.schedule_start();
    sim.run();
    Ok(sim.finish(genesis))
}

impl Sim<'_> {
    fn schedule_start(&mut self) {
        let start = self.sc.start;
        self.q.push(start + self.sc.block_interval, Ev::Block);
        let observers: Vec<usize> =
            (0..self.nodes.len()).filter(|k| self.nodes[*k].spec.role == NodeRole::Observer).collect();
        let n = observers.len().max(1) as f64;
        for (j, k) in observers.into_iter().enumerate() {
            // stagger sensors across the cycle
            let offset = 60.0 + self.sc.observation_cycle * j as f64 / n;
            self.q.push(start + offset, Ev::Cycle(k));
        }
        if let Some(r) = &self.sc.requests {
            for k in 0..self.nodes.len() {
                if self.nodes[k].spec.role == NodeRole::Requester {
                    self.q.push(start + r.interval / 2.0, Ev::Request(k));
                }
            }
        }
        for (k, t) in self.sc.scheduled_tasks.iter().enumerate() {
            self.q.push(t.at, Ev::Scheduled(k));
        }
        self.q.push(start + self.sc.fedprop_interval, Ev::Fed);
    }

    fn run(&mut self) {
        let end = self.sc.end();
        while let Some((t, ev)) = self.q.pop() {
            if t > end {
                break;
            }
            self.now = t;
            match ev {
                Ev::Block => {
                    self.produce();
                    if self.opts.stop_when_mined && !self.mined.is_empty() {
                        break;
                    }
                    self.q.push(t + self.sc.block_interval, Ev::Block);
                }
                Ev::Cycle(k) => {
                    self.q.push(t + self.sc.observation_cycle, Ev::Cycle(k));
                    self.cycle(k);
                }
                Ev::Observe(k, plan) => self.observe(k, plan),
                Ev::Deliver(k, Msg::Tx(tx)) => {
                    self.nodes[k].mempool.entry(tx.hash()).or_insert(tx);
                }
                Ev::Deliver(k, Msg::Block(h)) => self.catch_up(k, h),
                Ev::Request(k) => {
                    let r = self.sc.requests.as_ref().expect("scheduled with requests");
                    self.q.push(t + r.interval, Ev::Request(k));
                    self.request(k);
                }
                Ev::Scheduled(j) => {
                    let s = &self.sc.scheduled_tasks[j];
                    let k = self.by_account[&s.requester];
                    let payload = Payload::PostTask {
                        target: s.target.clone(),
                        fee: s.fee,
                        urgency: s.urgency,
                        origin: TaskOrigin::External,
                    };
                    self.send(k, payload);
                }
                Ev::Fed => {
                    self.q.push(t + self.sc.fedprop_interval, Ev::Fed);
                    self.fed_round();
                }
            }
        }
    }

    fn view(&self, k: usize) -> Arc<LedgerState> {
        let h = self.nodes[k].view;
        self.views
            .iter()
            .rev()
            .find(|(vh, _)| *vh <= h)
            .or(self.views.front())
            .map(|(_, s)| s.clone())
            .expect("non-empty")
    }

    fn latency(&mut self) -> Option<f64> {
        self.net.sent += 1;
        if self.net_rng.random_bool(self.sc.network.drop_prob) {
            self.net.dropped += 1;
            return None;
        }
        let [lo, hi] = self.sc.network.latency_ms;
        Some(if hi > lo { self.net_rng.random_range(lo..hi) } else { lo } / 1000.0)
    }

    /// Signs a transaction from node `k` and gossips it to every compute node.
    fn send(&mut self, k: usize, payload: Payload) -> Digest32 {
        let n = &mut self.nodes[k];
        n.nonce += 1;
        let tx = Transaction { sender: n.spec.account.clone(), nonce: n.nonce, payload };
        let h = tx.hash();
        for c in self.compute.clone() {
            if c == k {
                self.nodes[c].mempool.insert(h, tx.clone());
            } else if let Some(dt) = self.latency() {
                self.q.push(self.now + dt, Ev::Deliver(c, Msg::Tx(tx.clone())));
            }
        }
        h
    }

    fn produce(&mut self) {
        let height = self.state.height() + 1;
        let stakes = self.state.compute_stakes();
        let Some(winner) = select_validator(&self.state.last_hash(), height, &stakes) else {
            return;
        };
        let k = self.by_account[&winner];
        // synchronous rounds: the proposer holds the head before building on it
        self.catch_up(k, self.state.height());
        let pending: Vec<Transaction> = self.nodes[k].mempool.values().cloned().collect();
        let pool_before = self.state.uct_pool().clone();
        let model_before = self.state.model().clone();
        let props_before: BTreeSet<Digest32> = self.state.proposals().keys().copied().collect();
        let catalog_before = self.state.catalog().len();
        let (block, failed) = produce_block(&mut self.state, pending, self.now).expect("time advances");
        self.failed_txs += failed.len() as u64;
        for (tx, _) in &failed {
            self.nodes[k].mempool.remove(&tx.hash());
        }
        self.record_block(&block, &model_before, &props_before, catalog_before);
        let work = self.derive_work(&block, &pool_before);
        self.work.insert(height, work);
        self.views.push_back((height, Arc::new(self.state.clone())));
        if self.views.len() > VIEW_RING {
            self.views.pop_front();
        }
        self.blocks.push(block);
        self.catch_up(k, height);
        for j in 0..self.nodes.len() {
            if j != k {
                if let Some(dt) = self.latency() {
                    self.q.push(self.now + dt, Ev::Deliver(j, Msg::Block(height)));
                }
            }
        }
        if height % BALANCE_EVERY == 0 {
            for a in self.state.accounts().keys() {
                self.balance_rows.push(BalanceRow {
                    height,
                    time: self.now,
                    account: a.clone(),
                    holdings: self.state.holdings(a).total(),
                });
            }
        }
    }

    /// Bookkeeping for the report: verdicts, proposals, merges, mined objects.
    fn record_block(&mut self, block: &Block, model_before: &ResidualModel, props_before: &BTreeSet<Digest32>, catalog_before: usize) {
        let height = block.height();
        let mut proposed_here = Vec::new();
        for tx in &block.txs {
            match &tx.payload {
                Payload::SubmitTdm { tdm, .. } => {
                    let h = tdm.content_hash();
                    self.pending.insert(h);
                    if let Some(truth) = self.tdm_truth.get(&h) {
                        if !self.state.catalog().contains_key(truth) {
                            self.first_seen.entry(truth.clone()).or_insert(self.now);
                        }
                    }
                }
                Payload::ProposeModel { proposal } => {
                    let h = crate::ledger::proposal_hash(proposal);
                    proposed_here.push(h);
                    let behavior = self.behavior_of(&tx.sender);
                    self.proposals.insert(
                        h,
                        ProposalRecord {
                            hash: h,
                            proposer: tx.sender.clone(),
                            behavior,
                            height,
                            parent_version: proposal.parent_version,
                            honest_vote: Vote::Abstain,
                            rms_new: None,
                            rms_old: None,
                            votes: BTreeMap::new(),
                            outcome: ProposalOutcome::Open,
                            proposal: Some(proposal.clone()),
                        },
                    );
                }
                Payload::VoteModel { proposal_hash, verification } => {
                    if let Some(p) = self.proposals.get_mut(proposal_hash) {
                        p.votes.insert(tx.sender.clone(), verification.vote);
                    }
                }
                Payload::ClaimReward { claim } => {
                    let truth = majority(claim.tdm_hashes.iter().filter_map(|h| self.tdm_truth.get(h)));
                    let first = truth.as_ref().and_then(|t| self.first_seen.get(t)).copied();
                    self.mined.push(MinedObject {
                        object_id: claim.record.object_id.clone(),
                        truth_id: truth,
                        height,
                        time: self.now,
                        first_detection: first,
                        cycles: first.map(|f| (self.now - f) / self.sc.observation_cycle),
                    });
                }
                _ => {}
            }
        }
        debug_assert_eq!(self.mined.len() - self.mined.iter().filter(|m| m.height < height).count(), self.state.catalog().len() - catalog_before);

        let finals: Vec<Digest32> = self
            .pending
            .iter()
            .filter(|h| self.state.tdms().get(h).is_some_and(|e| e.status != TdmStatus::Pending))
            .copied()
            .collect();
        for h in finals {
            self.pending.remove(&h);
            let e = &self.state.tdms()[&h];
            let behavior = self.behavior_of(&e.observer);
            let (verdict, object) = match (&e.status, &e.report) {
                (TdmStatus::Final(v), Some(r)) => (v.as_str().to_string(), r.matched_object.clone()),
                _ => ("lapsed".to_string(), None),
            };
            if verdict == "rejected" && behavior == Behavior::Honest {
                self.honest_rejections += 1;
            }
            self.verdict_rows.push(VerdictRow {
                height,
                time: self.now,
                tdm_hash: h,
                observer: e.observer.clone(),
                behavior,
                truth_id: self.tdm_truth.get(&h).cloned(),
                verdict,
                object,
            });
        }

        let model = self.state.model().clone();
        if model.version != model_before.version {
            for h in props_before.iter().chain(&proposed_here) {
                let Some(p) = self.proposals.get_mut(h) else { continue };
                let merged = p.proposal.as_ref().and_then(|x| merge_model(model_before, x, 0).ok());
                if merged.is_some_and(|m| m.w == model.w) && p.outcome == ProposalOutcome::Open {
                    p.outcome = ProposalOutcome::Merged;
                    break;
                }
            }
            self.model_versions.push(model);
            self.model_point();
        }
        for h in props_before.iter().chain(&proposed_here) {
            if !self.state.proposals().contains_key(h) {
                if let Some(p) = self.proposals.get_mut(h) {
                    if p.outcome == ProposalOutcome::Open {
                        p.outcome = ProposalOutcome::Dropped;
                    }
                }
            }
        }
    }

    fn behavior_of(&self, account: &str) -> Behavior {
        self.by_account.get(account).map_or(Behavior::Honest, |k| self.nodes[*k].spec.behavior)
    }

    fn model_point(&mut self) {
        let samples = self.state.calibration_samples(Some(&self.cache));
        let (_, holdout) = split(&samples);
        let zero = [[0.0; 6]; 3];
        self.model_points.push(ModelPoint {
            height: self.state.height(),
            time: self.now,
            version: self.state.model().version,
            samples: samples.len(),
            holdout: holdout.len(),
            rms_uncorrected: holdout_rms(&zero, &holdout),
            rms_corrected: holdout_rms(&self.state.model().w, &holdout),
        });
    }

    fn derive_work(&mut self, block: &Block, pool_before: &BTreeSet<Digest32>) -> BlockWork {
        let mut work = BlockWork::default();
        let tdms: Vec<&Tdm> = block
            .txs
            .iter()
            .filter_map(|tx| match &tx.payload {
                Payload::SubmitTdm { tdm, .. } => Some(tdm),
                _ => None,
            })
            .collect();
        let needs_snapshot = !tdms.is_empty() || self.state.uct_pool() != pool_before || *self.state.uct_pool() != self.last_pool;
        let snap = needs_snapshot.then(|| self.state.snapshot(Some(self.cache.clone())));
        if let Some(snap) = &snap {
            work.reports = validate_all(&tdms, snap, &self.state, self.opts.threads);
        }

        let props: Vec<&ModelProposal> = block
            .txs
            .iter()
            .filter_map(|tx| match &tx.payload {
                Payload::ProposeModel { proposal } => Some(proposal),
                _ => None,
            })
            .collect();
        if !props.is_empty() {
            let samples = self.state.calibration_samples(Some(&self.cache));
            for p in props {
                let h = crate::ledger::proposal_hash(p);
                let v = verify_proposal(p, self.state.model(), &samples);
                if let Some(r) = self.proposals.get_mut(&h) {
                    r.honest_vote = v.vote;
                    r.rms_new = v.rms_new;
                    r.rms_old = v.rms_old;
                }
                if self.state.proposals().contains_key(&h) {
                    work.verifications.push((h, p.clone(), v));
                }
            }
        }

        if *self.state.uct_pool() != self.last_pool {
            self.last_pool = self.state.uct_pool().clone();
            if let Some(snap) = &snap {
                work.claims = self.mine(snap);
            }
        }
        work
    }

    /// Groups pooled tracks by association and fits each group once.
    fn mine(&mut self, snap: &CatalogSnapshot) -> Vec<MinedClaim> {
        let pool: Vec<(Digest32, IodSolution)> = self
            .state
            .uct_pool()
            .iter()
            .filter_map(|h| {
                let n = self.state.tdm(h)?.records().len();
                let sol = self.state.tdms()[h].report.as_ref()?.proposed_solution(n)?;
                Some((*h, sol))
            })
            .collect();
        let params = self.state.validation().clone();
        let mut used = BTreeSet::new();
        let mut claims = Vec::new();
        for (h, sol) in &pool {
            if used.contains(h) {
                continue;
            }
            let others: Vec<(Digest32, IodSolution)> =
                pool.iter().filter(|(o, _)| o != h && !used.contains(o)).cloned().collect();
            let mut group: Vec<Digest32> = associate_uct(sol, &others, &params).into_iter().map(|m| m.tdm_hash).collect();
            if group.is_empty() {
                continue;
            }
            group.push(*h);
            group.sort();
            let result = match self.mining_tried.get(&group) {
                Some(r) => r.clone(),
                None => {
                    let tdms: Vec<Tdm> = group.iter().map(|g| self.state.tdm(g).expect("pooled").clone()).collect();
                    let r = mine_object(&tdms, snap, &params).ok();
                    self.mining_tried.insert(group.clone(), r.clone());
                    r
                }
            };
            if let Some(rec) = result {
                if !self.state.catalog().contains_key(&rec.object_id) {
                    used.extend(group.iter().copied());
                    claims.push(MinedClaim { record: rec, tdm_hashes: group });
                }
            }
        }
        claims
    }

    /// Node `k` learns blocks up to `h` and reacts to each in order.
    fn catch_up(&mut self, k: usize, h: u64) {
        while self.nodes[k].view < h {
            let next = self.nodes[k].view + 1;
            self.nodes[k].view = next;
            let included: Vec<Digest32> = self.blocks[next as usize].txs.iter().map(|t| t.hash()).collect();
            for t in included {
                self.nodes[k].mempool.remove(&t);
            }
            if self.nodes[k].spec.role == NodeRole::Compute {
                self.react(k, next);
            }
        }
    }

    fn react(&mut self, k: usize, height: u64) {
        let Some(work) = self.work.get(&height) else { return };
        let behavior = self.nodes[k].spec.behavior;
        let me = self.nodes[k].spec.account.clone();
        let mut out = Vec::new();
        for r in &work.reports {
            let report = match behavior {
                Behavior::LazyValidator => rubber_stamp(r, &self.blocks[height as usize]),
                _ => r.clone(),
            };
            out.push(Payload::AttestValidation { report });
        }
        for (h, p, v) in &work.verifications {
            let verification = match behavior {
                Behavior::Honest => *v,
                Behavior::LazyValidator => Verification { rms_new: None, rms_old: None, vote: Vote::Accept },
                Behavior::ModelPoisoner => Verification {
                    rms_new: None,
                    rms_old: None,
                    vote: if p.proposer == me { Vote::Accept } else { Vote::Reject },
                },
                Behavior::Spoofer => continue,
            };
            if verification.vote != Vote::Abstain {
                out.push(Payload::VoteModel { proposal_hash: *h, verification });
            }
        }
        if behavior != Behavior::LazyValidator {
            for c in &work.claims {
                out.push(Payload::ClaimReward { claim: c.clone() });
            }
        }
        for p in out {
            self.send(k, p);
        }
    }

    fn cycle(&mut self, k: usize) {
        let view = self.view(k);
        let node = &self.nodes[k];
        let site = node.site.clone().expect("observers have sites");
        if view.account(&node.spec.account).is_none_or(|a| a.balance < view.economics().observer_stake_min) {
            return;
        }
        let sensor = Sensor { site: site.clone(), mode: node.spec.mode.unwrap_or(AngleMode::Azel), has_range: node.spec.has_range };
        let window = (self.now, self.now + self.sc.observation_cycle);
        let cfg = *view.cfg();
        let mut queue: Vec<_> = view.tasks().values().filter(|t| t.is_live()).cloned().collect();
        let assigned = assign(
            &mut queue,
            &sensor,
            window,
            view.catalog(),
            view.last_verified(),
            &view.economics().priority,
            &cfg,
            Some(&self.cache),
        )
        .ok()
        .flatten();
        let mut plan = None;
        if let Some(a) = assigned {
            let target = &view.tasks()[&a.task_id].target;
            if let Some(truth) = self.truth_for(k, target, &view) {
                let epochs = if truth == a.object {
                    Some(a.epochs.clone())
                } else {
                    plan_pass(&self.truth[&truth], &site, window, &cfg, Some(&self.cache))
                };
                let participant = match target {
                    TaskTarget::Object { object_id } => object_id.clone(),
                    TaskTarget::Region { .. } => UNKNOWN_PARTICIPANT.to_string(),
                };
                plan = epochs.map(|epochs| Plan { truth, epochs, task_id: Some(a.task_id), participant });
            }
        }
        if plan.is_none() {
            plan = self.survey(k, &view, &site, window);
        }
        if let Some(p) = plan {
            self.nodes[k].surveyed.insert(p.truth.clone(), self.now);
            let at = *p.epochs.last().expect("passes are non-empty") + 1.0;
            self.q.push(at, Ev::Observe(k, p));
        }
    }

    fn present(&self, id: &str) -> bool {
        self.sc.appearances.get(id).is_none_or(|t| *t <= self.now)
    }

    /// Whether the network already catalogs `truth`, under its own id or a mined one.
    fn cataloged(&self, truth: &str, view: &LedgerState) -> bool {
        view.catalog().contains_key(truth)
            || self.mined.iter().any(|m| m.truth_id.as_deref() == Some(truth) && view.catalog().contains_key(&m.object_id))
    }

    /// The truth object node `k` pointed at `target` actually sees. A region
    /// search finds uncataloged objects before cataloged ones.
    fn truth_for(&self, k: usize, target: &TaskTarget, view: &LedgerState) -> Option<String> {
        let cfg = *view.cfg();
        match target {
            TaskTarget::Object { object_id } if self.truth.contains_key(object_id) => {
                self.present(object_id).then(|| object_id.clone())
            }
            TaskTarget::Object { object_id } => {
                let el = view.catalog().get(object_id)?.elements;
                let w = view.validation().weights;
                self.truth
                    .values()
                    .filter(|r| self.present(&r.object_id))
                    .filter_map(|r| {
                        let at = elements_at(&r.elements, el.epoch, &cfg).ok()?;
                        Some((element_distance(&el, &at, &w), &r.object_id))
                    })
                    .filter(|(d, _)| *d <= 10.0 * view.validation().d_assoc)
                    .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                    .map(|(_, id)| id.clone())
            }
            TaskTarget::Region { .. } => {
                let surveyed = &self.nodes[k].surveyed;
                self.truth
                    .values()
                    .filter(|r| self.present(&r.object_id) && target.region_contains(&r.elements, &cfg))
                    .map(|r| (self.cataloged(&r.object_id, view), surveyed.get(&r.object_id).copied(), &r.object_id))
                    .min()
                    .map(|(_, _, id)| id.clone())
            }
        }
    }

    /// Idle sensors look at whatever present object they checked least recently.
    fn survey(&self, k: usize, view: &LedgerState, site: &GroundSite, window: (Epoch, Epoch)) -> Option<Plan> {
        let node = &self.nodes[k];
        let mut order: Vec<(Option<Epoch>, &String)> = self
            .truth
            .keys()
            .filter(|id| self.present(id))
            .map(|id| (node.surveyed.get(id).copied(), id))
            .collect();
        order.sort();
        for (_, id) in order {
            let rec = &self.truth[id];
            if let Some(epochs) = plan_pass(rec, site, window, view.cfg(), Some(&self.cache)) {
                let participant =
                    if view.catalog().contains_key(id) { id.clone() } else { UNKNOWN_PARTICIPANT.to_string() };
                return Some(Plan { truth: id.clone(), epochs, task_id: None, participant });
            }
        }
        None
    }

    fn observe(&mut self, k: usize, plan: Plan) {
        let view = self.view(k);
        let node = &mut self.nodes[k];
        node.observations += 1;
        let seed = u64::from_be_bytes(
            Digest32::of_parts(&[b"noise", &self.sc.seed.to_be_bytes(), node.spec.account.as_bytes(), &node.observations.to_be_bytes()]).0
                [..8]
                .try_into()
                .expect("8 bytes"),
        );
        let mut opts = SynthOptions {
            participant: Some(plan.participant.clone()),
            mode: node.spec.mode,
            has_range: node.spec.has_range,
            cfg: self.sc.propagator,
            angle_offset: if node.spec.behavior == Behavior::Spoofer { node.spec.spoof_offset_deg.to_radians() } else { 0.0 },
            truth_model: self.truth_model.clone(),
            cache: Some(self.cache.clone()),
        };
        let site = node.site.clone().expect("observer site");
        let truth = &self.truth[&plan.truth];
        let Ok(mut tdm) = synth_tdm_with(truth, &site, &plan.epochs, node.spec.noise_std, seed, &opts) else {
            return;
        };
        // honest operators do not claim an object their track does not correlate with
        if node.spec.behavior == Behavior::Honest && !claim_holds(&tdm, &plan.participant, &view, &self.cache) {
            opts.participant = Some(UNKNOWN_PARTICIPANT.to_string());
            let Ok(relabeled) = synth_tdm_with(truth, &site, &plan.epochs, node.spec.noise_std, seed, &opts) else {
                return;
            };
            tdm = relabeled;
        }
        self.tdm_truth.insert(tdm.content_hash(), plan.truth.clone());
        self.send(k, Payload::SubmitTdm { tdm, task_id: plan.task_id });
    }

    fn request(&mut self, k: usize) {
        let r = self.sc.requests.clone().expect("requests");
        let view = self.view(k);
        let ids: Vec<&String> = view.catalog().keys().collect();
        if ids.is_empty() {
            return;
        }
        let id = ids[self.req_rng.random_range(0..ids.len())].clone();
        let fee = self.req_rng.random_range(r.fee[0]..=r.fee[1]);
        let urgency = self.req_rng.random_bool(r.urgency_prob);
        let origin = if view.catalog()[&id].source == crate::astro::ObjectSource::Calibration {
            TaskOrigin::Calibration
        } else {
            TaskOrigin::External
        };
        self.send(k, Payload::PostTask { target: TaskTarget::Object { object_id: id }, fee, urgency, origin });
    }

    fn fed_round(&mut self) {
        self.model_point();
        for k in self.compute.clone() {
            let view = self.view(k);
            let me = self.nodes[k].spec.account.clone();
            let parent = view.model().version;
            let proposal = match self.nodes[k].spec.behavior {
                Behavior::Honest => {
                    let samples = view.calibration_samples(Some(&self.cache));
                    let Ok(w) = train_on_calibration(&samples) else { continue };
                    let (_, holdout) = split(&samples);
                    ModelProposal { w_new: w, proposer: me, claimed_rms: holdout_rms(&w, &holdout), parent_version: parent }
                }
                Behavior::ModelPoisoner => {
                    ModelProposal { w_new: [[POISON; 6]; 3], proposer: me, claimed_rms: 0.0, parent_version: parent }
                }
                _ => continue,
            };
            self.send(k, Payload::ProposeModel { proposal });
        }
    }

    fn finish(mut self, genesis: crate::ledger::Genesis) -> SimOutput {
        self.model_point();
        let mut verdicts: BTreeMap<String, u64> = BTreeMap::new();
        let mut by_behavior: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
        for r in &self.verdict_rows {
            *verdicts.entry(r.verdict.clone()).or_default() += 1;
            *by_behavior.entry(r.behavior.as_str().into()).or_default().entry(r.verdict.clone()).or_default() += 1;
        }
        let accounts = self
            .sc
            .nodes
            .iter()
            .map(|n| {
                let h = self.state.holdings(&n.account);
                let initial = n.balance + n.stake;
                AccountPnl {
                    account: n.account.clone(),
                    role: format!("{:?}", n.role).to_lowercase(),
                    behavior: n.behavior,
                    initial,
                    holdings: h,
                    net: h.total() as i64 - initial as i64,
                }
            })
            .collect();
        let mut out = SimOutput {
            report: SimReport {
                seed: self.sc.seed,
                scenario_digest: self.sc.digest(),
                genesis_digest: genesis.digest(),
                final_height: self.state.height(),
                final_state_root: self.blocks.last().expect("genesis").header.state_root,
                chain_digest: Digest32::ZERO,
                accounts,
                verdicts,
                verdicts_by_behavior: by_behavior,
                catalog_initial: self.sc.initial_catalog.len(),
                catalog_final: self.state.catalog().len(),
                mined: self.mined,
                model: self.model_points,
                model_versions: self.model_versions,
                proposals: self.proposals.into_values().collect(),
                network: self.net,
                failed_txs: self.failed_txs,
                honest_rejections: self.honest_rejections,
            },
            genesis,
            blocks: self.blocks,
            state: self.state,
            verdict_rows: self.verdict_rows,
            balance_rows: self.balance_rows,
        };
        out.report.chain_digest = Digest32::of(&out.chain_bytes());
        out
    }
}

/// Whether `tdm` fits the claimed catalog record within the rejection threshold.
fn claim_holds(tdm: &Tdm, participant: &str, view: &LedgerState, cache: &TrajectoryCache) -> bool {
    let Some(rec) = view.catalog().get(participant) else {
        return true;
    };
    let snap = CatalogSnapshot {
        catalog: Vec::new(),
        sites: view.sites().clone(),
        model: view.model().clone(),
        history: Default::default(),
        cfg: *view.cfg(),
        cache: Some(cache.clone()),
    };
    snap.residuals(rec, tdm).is_ok_and(|r| crate::iod::rms(&r) <= view.validation().theta_reject)
}

fn majority<'a>(ids: impl Iterator<Item = &'a String>) -> Option<String> {
    let mut n: BTreeMap<&String, usize> = BTreeMap::new();
    for id in ids {
        *n.entry(id).or_default() += 1;
    }
    n.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0))).map(|(id, _)| id.clone())
}

/// A lazy validator's report: verified as claimed, without looking.
fn rubber_stamp(real: &ValidationReport, block: &Block) -> ValidationReport {
    let claimed = block.txs.iter().find_map(|tx| match &tx.payload {
        Payload::SubmitTdm { tdm, .. } if tdm.content_hash() == real.tdm_hash => tdm.meta().claims_object().map(String::from),
        _ => None,
    });
    ValidationReport {
        tdm_hash: real.tdm_hash,
        verdict: if claimed.is_some() { Verdict::Verified } else { Verdict::Uct },
        matched_object: claimed,
        rms_residual: 0.0,
        history_rms: None,
        history_records: 0,
        candidates_checked: 0,
        skipped: Vec::new(),
        proposed_elements: None,
        proposed_rms: None,
        iod_failure: None,
    }
}

/// Validates in parallel chunks; output order follows `tdms`.
fn validate_all(tdms: &[&Tdm], snap: &CatalogSnapshot, state: &LedgerState, threads: usize) -> Vec<ValidationReport> {
    let params = state.validation();
    let one = |t: &Tdm| validate_tdm(t, snap, params).expect("submitted TDMs name registered sites");
    if threads <= 1 || tdms.len() < 2 {
        return tdms.iter().map(|t| one(t)).collect();
    }
    let chunk = tdms.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = tdms.chunks(chunk).map(|c| s.spawn(move || c.iter().map(|t| one(t)).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("validation worker")).collect()
    })
}
