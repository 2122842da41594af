use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    proposal_hash, wire, Account, EconomicsParams, Genesis, MinedClaim, Payload, Role, Transaction,
    TxError, BPS,
};
use crate::astro::{angular_separation, ephemeris, Epoch, ObjectSource, OrbitRecord, PropagatorConfig, SiteRegistry, TrajectoryCache};
use crate::fedprop::{calibration_samples, merge_model, CalibrationSample, weights_valid, ModelProposal, ResidualModel, Verification, Vote};
use crate::iod::predicted_angles;
use crate::tasking::{spawn_internal_retask, spawn_object_retask, LastVerified, Task, TaskOrigin, TaskStatus, TaskTarget, TASK_TTL_S};
use crate::tdm::Tdm;
use crate::validation::{mined_object_id, CatalogSnapshot, History, ValidationParams, ValidationReport, Verdict, HISTORY_WINDOW_S};
use crate::Digest32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdmStatus {
    Pending,
    Final(Verdict),
    /// No quorum within the task lifetime; the escrow went back.
    Lapsed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdmEntry {
    pub observer: String,
    pub escrow: u64,
    pub task_id: Option<Digest32>,
    pub height: u64,
    pub submitted_at: Epoch,
    pub status: TdmStatus,
    /// Attester to (verdict, report digest), while pending.
    pub attestations: BTreeMap<String, (Verdict, Digest32)>,
    pub reports: BTreeMap<Digest32, ValidationReport>,
    /// The report that reached quorum.
    pub report: Option<ValidationReport>,
    pub attesters: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalEntry {
    pub proposal: ModelProposal,
    pub votes: BTreeMap<String, Verification>,
    pub height: u64,
}

/// What an account owns across balance, stake, pending escrows and live
/// task fees it posted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Holdings {
    pub balance: u64,
    pub staked: u64,
    pub escrowed: u64,
    pub task_fees: u64,
}

impl Holdings {
    pub fn total(&self) -> u64 {
        self.balance + self.staked + self.escrowed + self.task_fees
    }
}

/// Chain state. Serialized field order is the state-root commitment; TDM
/// bodies are committed through their content hashes.
#[derive(Clone, Debug, Serialize)]
pub struct LedgerState {
    genesis_digest: Digest32,
    economics: EconomicsParams,
    validation: ValidationParams,
    cfg: PropagatorConfig,
    sites: SiteRegistry,
    supply: u64,
    accounts: BTreeMap<String, Account>,
    burned: u64,
    minted: u64,
    height: u64,
    time: Epoch,
    last_hash: Digest32,
    catalog: BTreeMap<String, OrbitRecord>,
    tdms: BTreeMap<Digest32, TdmEntry>,
    tasks: BTreeMap<Digest32, Task>,
    uct_pool: BTreeSet<Digest32>,
    model: ResidualModel,
    proposals: BTreeMap<Digest32, ProposalEntry>,
    last_verified: LastVerified,
    #[serde(skip)]
    store: BTreeMap<Digest32, Arc<Tdm>>,
}

fn add(a: u64, b: u64) -> Result<u64, TxError> {
    a.checked_add(b).ok_or(TxError::Overflow)
}

fn bps(x: u64, bps: u64) -> u64 {
    (x as u128 * bps as u128 / BPS as u128) as u64
}

impl LedgerState {
    pub fn from_genesis(g: &Genesis) -> Result<Self, String> {
        g.check()?;
        let accounts = g
            .accounts
            .iter()
            .map(|a| {
                (
                    a.account_id.clone(),
                    Account {
                        account_id: a.account_id.clone(),
                        balance: a.balance,
                        staked: a.staked,
                        roles: a.roles.clone(),
                        nonce: 0,
                    },
                )
            })
            .collect();
        Ok(Self {
            genesis_digest: g.digest(),
            economics: g.economics.clone(),
            validation: g.validation.clone(),
            cfg: g.propagator,
            sites: g.sites.iter().map(|s| (s.site_id.clone(), s.clone())).collect(),
            supply: g.supply(),
            accounts,
            burned: 0,
            minted: 0,
            height: 0,
            time: g.time,
            last_hash: Digest32::ZERO,
            catalog: g.catalog.iter().map(|r| (r.object_id.clone(), r.clone())).collect(),
            tdms: BTreeMap::new(),
            tasks: BTreeMap::new(),
            uct_pool: BTreeSet::new(),
            model: ResidualModel::default(),
            proposals: BTreeMap::new(),
            last_verified: LastVerified::new(),
            store: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> Digest32 {
        Digest32::of(&wire::encode(self))
    }

    pub fn genesis_digest(&self) -> Digest32 {
        self.genesis_digest
    }
    pub fn economics(&self) -> &EconomicsParams {
        &self.economics
    }
    pub fn validation(&self) -> &ValidationParams {
        &self.validation
    }
    pub fn cfg(&self) -> &PropagatorConfig {
        &self.cfg
    }
    pub fn sites(&self) -> &SiteRegistry {
        &self.sites
    }
    pub fn supply(&self) -> u64 {
        self.supply
    }
    pub fn burned(&self) -> u64 {
        self.burned
    }
    pub fn minted(&self) -> u64 {
        self.minted
    }
    pub fn height(&self) -> u64 {
        self.height
    }
    pub fn time(&self) -> Epoch {
        self.time
    }
    pub fn last_hash(&self) -> Digest32 {
        self.last_hash
    }
    pub fn accounts(&self) -> &BTreeMap<String, Account> {
        &self.accounts
    }
    pub fn account(&self, id: &str) -> Option<&Account> {
        self.accounts.get(id)
    }
    pub fn catalog(&self) -> &BTreeMap<String, OrbitRecord> {
        &self.catalog
    }
    pub fn tdms(&self) -> &BTreeMap<Digest32, TdmEntry> {
        &self.tdms
    }
    pub fn tdm(&self, h: &Digest32) -> Option<&Tdm> {
        self.store.get(h).map(|t| t.as_ref())
    }
    pub fn tasks(&self) -> &BTreeMap<Digest32, Task> {
        &self.tasks
    }
    pub fn uct_pool(&self) -> &BTreeSet<Digest32> {
        &self.uct_pool
    }
    pub fn model(&self) -> &ResidualModel {
        &self.model
    }
    pub fn proposals(&self) -> &BTreeMap<Digest32, ProposalEntry> {
        &self.proposals
    }
    pub fn last_verified(&self) -> &LastVerified {
        &self.last_verified
    }

    /// Compute stake by account, for the lottery and quorums.
    pub fn compute_stakes(&self) -> BTreeMap<String, u64> {
        self.accounts
            .values()
            .filter(|a| a.roles.contains(&Role::Compute) && a.staked > 0)
            .map(|a| (a.account_id.clone(), a.staked))
            .collect()
    }

    pub fn holdings(&self, id: &str) -> Holdings {
        let Some(a) = self.accounts.get(id) else {
            return Holdings::default();
        };
        let escrowed = self
            .tdms
            .values()
            .filter(|e| e.status == TdmStatus::Pending && e.observer == id)
            .map(|e| e.escrow)
            .sum();
        let task_fees = self
            .tasks
            .values()
            .filter(|t| t.is_live() && t.requester.as_deref() == Some(id))
            .map(|t| t.fee)
            .sum();
        Holdings { balance: a.balance, staked: a.staked, escrowed, task_fees }
    }

    /// Left side of the conservation identity: everything held plus burned,
    /// minus minted. Equals the genesis supply.
    pub fn conserved_total(&self) -> i128 {
        let held: u128 = self.accounts.values().map(|a| a.balance as u128 + a.staked as u128).sum();
        let escrow: u128 = self.tdms.values().filter(|e| e.status == TdmStatus::Pending).map(|e| e.escrow as u128).sum();
        let fees: u128 = self.tasks.values().filter(|t| t.is_live()).map(|t| t.fee as u128).sum();
        (held + escrow + fees + self.burned as u128) as i128 - self.minted as i128
    }

    /// Verified TDMs per object whose last record lies within the history
    /// window before `now`.
    pub fn history(&self, now: Epoch) -> History {
        let mut h = History::new();
        for (hash, e) in &self.tdms {
            if let (TdmStatus::Final(Verdict::Verified), Some(r)) = (e.status, &e.report) {
                let (Some(obj), Some(t)) = (&r.matched_object, self.store.get(hash)) else {
                    continue;
                };
                if now - t.last_epoch() <= HISTORY_WINDOW_S {
                    h.entry(obj.clone()).or_default().push(t.as_ref().clone());
                }
            }
        }
        h
    }

    /// Supervision samples from verified ranging TDMs of calibration objects,
    /// in TDM hash order.
    pub fn calibration_samples(&self, cache: Option<&TrajectoryCache>) -> Vec<CalibrationSample> {
        let mut out = Vec::new();
        for (h, e) in &self.tdms {
            let Some(r) = e.report.as_ref().filter(|_| e.status == TdmStatus::Final(Verdict::Verified)) else {
                continue;
            };
            let Some(rec) = r.matched_object.as_ref().and_then(|o| self.catalog.get(o)) else {
                continue;
            };
            let tdm = &self.store[h];
            if rec.source != ObjectSource::Calibration || !tdm.meta().has_range {
                continue;
            }
            let Some(site) = self.sites.get(&tdm.meta().site_id) else {
                continue;
            };
            if let Ok(s) = calibration_samples(tdm, rec, site, &self.cfg, cache) {
                out.extend(s);
            }
        }
        out
    }

    /// Read-only view validators check TDMs against.
    pub fn snapshot(&self, cache: Option<TrajectoryCache>) -> CatalogSnapshot {
        CatalogSnapshot {
            catalog: self.catalog.values().cloned().collect(),
            sites: self.sites.clone(),
            model: self.model.clone(),
            history: self.history(self.time),
            cfg: self.cfg,
            cache,
        }
    }

    fn sender(&self, tx: &Transaction, role: Role) -> Result<&Account, TxError> {
        let a = self.accounts.get(&tx.sender).ok_or_else(|| TxError::UnknownAccount(tx.sender.clone()))?;
        if tx.nonce <= a.nonce {
            return Err(TxError::Nonce { sender: tx.sender.clone(), last: a.nonce, got: tx.nonce });
        }
        if !a.roles.contains(&role) {
            return Err(TxError::Role { account: tx.sender.clone(), role });
        }
        Ok(a)
    }

    fn acct(&mut self, id: &str) -> &mut Account {
        self.accounts.get_mut(id).expect("checked account")
    }

    fn credit(&mut self, id: &str, amount: u64) {
        let a = self.acct(id);
        a.balance = a.balance.checked_add(amount).expect("supply fits u64");
    }

    /// Applies one transaction. On error the state is unchanged.
    pub fn apply_transaction(&mut self, tx: &Transaction) -> Result<(), TxError> {
        match &tx.payload {
            Payload::SubmitTdm { tdm, task_id } => self.submit_tdm(tx, tdm, *task_id)?,
            Payload::PostTask { target, fee, urgency, origin } => {
                self.post_task(tx, target, *fee, *urgency, *origin)?
            }
            Payload::RegisterStake { amount } => {
                let a = self.sender(tx, Role::Compute)?;
                if a.balance < *amount {
                    return Err(TxError::Insufficient { need: *amount, have: a.balance });
                }
                if *amount == 0 {
                    return Err(TxError::Invalid("zero stake".into()));
                }
                add(a.staked, *amount)?;
                let a = self.acct(&tx.sender);
                a.balance -= amount;
                a.staked += amount;
            }
            Payload::AttestValidation { report } => self.attest(tx, report)?,
            Payload::ProposeModel { proposal } => self.propose(tx, proposal)?,
            Payload::VoteModel { proposal_hash, verification } => self.vote(tx, proposal_hash, verification)?,
            Payload::ClaimReward { claim } => self.claim(tx, claim)?,
        }
        self.acct(&tx.sender).nonce = tx.nonce;
        Ok(())
    }

    fn submit_tdm(&mut self, tx: &Transaction, tdm: &Tdm, task_id: Option<Digest32>) -> Result<(), TxError> {
        let a = self.sender(tx, Role::Observer)?;
        let stake = self.economics.observer_stake_min;
        if a.balance < stake {
            return Err(TxError::Insufficient { need: stake, have: a.balance });
        }
        let h = tdm.content_hash();
        if self.tdms.contains_key(&h) {
            return Err(TxError::DuplicateTdm(h));
        }
        if !self.sites.contains_key(&tdm.meta().site_id) {
            return Err(TxError::UnknownSite(tdm.meta().site_id.clone()));
        }
        if let Some(id) = task_id {
            if !self.tasks.get(&id).is_some_and(|t| t.is_live()) {
                return Err(TxError::UnknownTask(id));
            }
        }
        self.acct(&tx.sender).balance -= stake;
        if let Some(t) = task_id.and_then(|id| self.tasks.get_mut(&id)) {
            t.status = TaskStatus::Assigned;
        }
        self.tdms.insert(
            h,
            TdmEntry {
                observer: tx.sender.clone(),
                escrow: stake,
                task_id,
                height: self.height,
                submitted_at: self.time,
                status: TdmStatus::Pending,
                attestations: BTreeMap::new(),
                reports: BTreeMap::new(),
                report: None,
                attesters: Vec::new(),
            },
        );
        self.store.insert(h, Arc::new(tdm.clone()));
        Ok(())
    }

    fn post_task(
        &mut self,
        tx: &Transaction,
        target: &TaskTarget,
        fee: u64,
        urgency: bool,
        origin: TaskOrigin,
    ) -> Result<(), TxError> {
        let a = self.sender(tx, Role::Requester)?;
        if a.balance < fee {
            return Err(TxError::Insufficient { need: fee, have: a.balance });
        }
        if origin == TaskOrigin::Internal {
            return Err(TxError::Invalid("internal tasks are protocol-generated".into()));
        }
        if let TaskTarget::Object { object_id } = target {
            if !self.catalog.contains_key(object_id) {
                return Err(TxError::Invalid(format!("object {object_id} is not cataloged")));
            }
        }
        let task_id = Digest32::of_parts(&[b"task", tx.sender.as_bytes(), &[0], &tx.nonce.to_be_bytes()]);
        self.acct(&tx.sender).balance -= fee;
        self.tasks.insert(
            task_id,
            Task {
                task_id,
                target: target.clone(),
                fee,
                urgency,
                origin,
                created_at: self.time,
                status: TaskStatus::Open,
                requester: Some(tx.sender.clone()),
            },
        );
        Ok(())
    }

    fn attest(&mut self, tx: &Transaction, report: &ValidationReport) -> Result<(), TxError> {
        let a = self.sender(tx, Role::Compute)?;
        if a.staked == 0 {
            return Err(TxError::Invalid("attester has no stake".into()));
        }
        let h = report.tdm_hash;
        let entry = self.tdms.get(&h).ok_or(TxError::UnknownTdm(h))?;
        if entry.status != TdmStatus::Pending {
            return Err(TxError::TdmFinal(h));
        }
        if entry.attestations.contains_key(&tx.sender) {
            return Err(TxError::Duplicate(tx.sender.clone()));
        }
        if matches!(report.verdict, Verdict::Verified | Verdict::Rejected)
            && !report.matched_object.as_ref().is_some_and(|o| self.catalog.contains_key(o))
        {
            return Err(TxError::Invalid("verified and rejected reports name a cataloged object".into()));
        }
        let digest = report.digest();
        let key = (report.verdict, digest);
        let stakes = self.compute_stakes();
        let total: u64 = stakes.values().sum();
        let entry = self.tdms.get_mut(&h).expect("checked");
        entry.attestations.insert(tx.sender.clone(), key);
        entry.reports.entry(digest).or_insert_with(|| report.clone());
        let attesters: Vec<String> = entry
            .attestations
            .iter()
            .filter(|(_, v)| **v == key)
            .map(|(k, _)| k.clone())
            .collect();
        let support: u64 = attesters.iter().map(|k| stakes.get(k).copied().unwrap_or(0)).sum();
        if self.economics.quorum_met(support, total) {
            self.finalize(h, digest, attesters, &stakes);
        }
        Ok(())
    }

    /// Pays the task fee to `observer`, less the validator cut split pro rata
    /// among `attesters` by stake. Rounding dust goes to the first attester.
    fn pay_task(&mut self, task_id: Digest32, observer: &str, attesters: &[String], stakes: &BTreeMap<String, u64>) {
        let Some(task) = self.tasks.get_mut(&task_id) else {
            return;
        };
        let fee = task.fee;
        task.status = TaskStatus::Fulfilled;
        let weights: Vec<(String, u64)> =
            attesters.iter().map(|a| (a.clone(), stakes.get(a).copied().unwrap_or(0))).collect();
        let total: u64 = weights.iter().map(|w| w.1).sum();
        let cut = if total == 0 { 0 } else { bps(fee, self.economics.validator_fee_cut_bps) };
        self.credit(observer, fee - cut);
        let mut paid = 0;
        for (a, s) in &weights {
            let share = (cut as u128 * *s as u128 / total.max(1) as u128) as u64;
            paid += share;
            self.credit(a, share);
        }
        if cut > paid {
            self.credit(&weights[0].0, cut - paid);
        }
    }

    fn reopen(&mut self, task_id: Option<Digest32>) {
        if let Some(t) = task_id.and_then(|id| self.tasks.get_mut(&id)) {
            if t.status == TaskStatus::Assigned {
                t.status = TaskStatus::Open;
            }
        }
    }

    fn add_internal_task(&mut self, task: Task) {
        if self.tasks.contains_key(&task.task_id) {
            return;
        }
        let fee = task.fee;
        self.minted += fee;
        self.tasks.insert(task.task_id, task);
    }

    fn finalize(&mut self, h: Digest32, digest: Digest32, attesters: Vec<String>, stakes: &BTreeMap<String, u64>) {
        let entry = self.tdms.get_mut(&h).expect("pending entry");
        let report = entry.reports.remove(&digest).expect("attested report");
        entry.status = TdmStatus::Final(report.verdict);
        entry.attestations.clear();
        entry.reports.clear();
        entry.report = Some(report.clone());
        entry.attesters = attesters.clone();
        let (observer, escrow, task_id) = (entry.observer.clone(), entry.escrow, entry.task_id);
        let n_obs = self.store[&h].records().len();
        let last_epoch = self.store[&h].last_epoch();

        match report.verdict {
            Verdict::Verified => {
                self.credit(&observer, escrow);
                let obj = report.matched_object.clone().expect("verified reports carry a match");
                let seen = self.last_verified.entry(obj.clone()).or_insert(last_epoch);
                if *seen < last_epoch {
                    *seen = last_epoch;
                }
                if let Some(id) = task_id {
                    let fits = match self.tasks.get(&id) {
                        Some(t) if t.is_live() => match &t.target {
                            TaskTarget::Object { object_id } => *object_id == obj,
                            region => self.catalog.get(&obj).is_some_and(|r| region.region_contains(&r.elements, &self.cfg)),
                        },
                        _ => false,
                    };
                    if fits {
                        self.pay_task(id, &observer, &attesters, stakes);
                    } else {
                        self.reopen(task_id);
                    }
                }
            }
            Verdict::Rejected => {
                let slash = bps(escrow, self.economics.slash_fraction_bps);
                self.burned += slash;
                self.credit(&observer, escrow - slash);
                self.reopen(task_id);
            }
            Verdict::Ambiguous | Verdict::Uct => {
                self.credit(&observer, escrow);
                self.reopen(task_id);
                let fee = self.economics.internal_task_fee;
                match report.proposed_solution(n_obs) {
                    Some(sol) => {
                        if report.verdict == Verdict::Uct {
                            self.uct_pool.insert(h);
                        }
                        let covered = self.tasks.values().any(|t| {
                            t.is_live() && t.origin == TaskOrigin::Internal && t.target.region_contains(&sol.elements, &self.cfg)
                        });
                        if !covered {
                            if let Ok(t) = spawn_internal_retask(&report, &sol, &self.validation, fee, self.time) {
                                self.add_internal_task(t);
                            }
                        }
                    }
                    None if report.verdict == Verdict::Ambiguous => {
                        let obj = report.matched_object.clone();
                        let covered = self.tasks.values().any(|t| {
                            t.is_live()
                                && t.origin == TaskOrigin::Internal
                                && matches!(&t.target, TaskTarget::Object { object_id } if Some(object_id) == obj.as_ref())
                        });
                        if !covered {
                            if let Ok(t) = spawn_object_retask(&report, fee, self.time) {
                                self.add_internal_task(t);
                            }
                        }
                    }
                    None => {}
                }
            }
        }
    }

    fn propose(&mut self, tx: &Transaction, p: &ModelProposal) -> Result<(), TxError> {
        self.sender(tx, Role::Compute)?;
        if p.proposer != tx.sender {
            return Err(TxError::Invalid("proposer must be the sender".into()));
        }
        if p.parent_version != self.model.version {
            return Err(TxError::Stale { parent: p.parent_version, global: self.model.version });
        }
        if !weights_valid(&p.w_new) || !p.claimed_rms.is_finite() {
            return Err(TxError::Invalid("weights out of bounds".into()));
        }
        let h = proposal_hash(p);
        if self.proposals.contains_key(&h) {
            return Err(TxError::Duplicate(format!("proposal {}", h.short())));
        }
        self.proposals.insert(h, ProposalEntry { proposal: p.clone(), votes: BTreeMap::new(), height: self.height });
        Ok(())
    }

    fn vote(&mut self, tx: &Transaction, h: &Digest32, v: &Verification) -> Result<(), TxError> {
        let a = self.sender(tx, Role::Compute)?;
        if a.staked == 0 {
            return Err(TxError::Invalid("voter has no stake".into()));
        }
        let entry = self.proposals.get(h).ok_or(TxError::UnknownProposal(*h))?;
        if entry.votes.contains_key(&tx.sender) {
            return Err(TxError::Duplicate(tx.sender.clone()));
        }
        let stakes = self.compute_stakes();
        let total: u64 = stakes.values().sum();
        let entry = self.proposals.get_mut(h).expect("checked");
        entry.votes.insert(tx.sender.clone(), *v);
        let tally = |want: Vote| -> u64 {
            entry.votes.iter().filter(|(_, x)| x.vote == want).map(|(k, _)| stakes.get(k).copied().unwrap_or(0)).sum()
        };
        let (accept, reject) = (tally(Vote::Accept), tally(Vote::Reject));
        if self.economics.quorum_met(accept, total) {
            let p = entry.proposal.clone();
            let merged = merge_model(&self.model, &p, 0).expect("checked at proposal time");
            self.model = merged;
            // every other open proposal now has a stale parent
            self.proposals.clear();
            let r = self.economics.r_model;
            self.minted += r;
            self.credit(&p.proposer, r);
        } else if self.economics.quorum_blocked(reject, total) {
            self.proposals.remove(h);
        }
        Ok(())
    }

    /// Angular RMS of `rec` (plus the global model) over the records of `tdms`.
    fn fit_rms(&self, rec: &OrbitRecord, tdms: &[Arc<Tdm>]) -> Result<f64, String> {
        let mut sq = 0.0;
        let mut n = 0usize;
        for t in tdms {
            let site = self.sites.get(&t.meta().site_id).ok_or("unregistered site")?;
            let states = ephemeris(&rec.elements, rec.bstar, &t.epochs(), &self.cfg).map_err(|e| e.to_string())?;
            for (o, s) in t.records().iter().zip(&states) {
                let s = self.model.apply(&rec.elements, rec.bstar, s);
                let (p1, p2, _) = predicted_angles(&s, site, t.meta().mode);
                sq += angular_separation(o.angle1, o.angle2, p1, p2).powi(2);
                n += 1;
            }
        }
        Ok((sq / n.max(1) as f64).sqrt())
    }

    fn claim(&mut self, tx: &Transaction, c: &MinedClaim) -> Result<(), TxError> {
        self.sender(tx, Role::Compute)?;
        let hashes: BTreeSet<Digest32> = c.tdm_hashes.iter().copied().collect();
        if hashes.len() < 2 || hashes.len() != c.tdm_hashes.len() {
            return Err(TxError::Invalid("a claim needs two or more distinct TDMs".into()));
        }
        if let Some(h) = hashes.iter().find(|h| !self.uct_pool.contains(h)) {
            return Err(TxError::Invalid(format!("TDM {} is not in the UCT pool", h.short())));
        }
        let tdms: Vec<Arc<Tdm>> = hashes.iter().map(|h| self.store[h].clone()).collect();
        let owned: Vec<Tdm> = tdms.iter().map(|t| t.as_ref().clone()).collect();
        let rec = &c.record;
        if Some(&rec.object_id) != mined_object_id(&owned).as_ref() || rec.source != ObjectSource::Mined {
            return Err(TxError::Invalid("mined record id or source does not match its TDMs".into()));
        }
        if self.catalog.contains_key(&rec.object_id) {
            return Err(TxError::Invalid(format!("{} already cataloged", rec.object_id)));
        }
        rec.check().map_err(|e| TxError::Invalid(e.to_string()))?;
        let rms = self.fit_rms(rec, &tdms).map_err(TxError::Invalid)?;
        if !(rms <= self.validation.theta_verify) {
            return Err(TxError::Invalid(format!("claimed orbit fits with RMS {rms:.3e} rad")));
        }

        let last = tdms.iter().map(|t| t.last_epoch()).max().expect("non-empty");
        self.catalog.insert(rec.object_id.clone(), rec.clone());
        self.last_verified.insert(rec.object_id.clone(), last);
        let mut observers = BTreeSet::new();
        for h in &hashes {
            self.uct_pool.remove(h);
            let e = &self.tdms[h];
            observers.insert(e.observer.clone());
            let (observer, task_id) = (e.observer.clone(), e.task_id);
            if let Some(id) = task_id {
                if self.tasks.get(&id).is_some_and(|t| t.is_live() && t.target.region_contains(&rec.elements, &self.cfg)) {
                    let stakes = self.compute_stakes();
                    let attesters = self.tdms[h].attesters.clone();
                    self.pay_task(id, &observer, &attesters, &stakes);
                }
            }
        }
        let r = self.economics.r_mint;
        self.minted += r;
        let share = r / observers.len() as u64;
        for (k, o) in observers.iter().enumerate() {
            let dust = if k == 0 { r - share * observers.len() as u64 } else { 0 };
            self.credit(o, share + dust);
        }
        Ok(())
    }

    /// Block boundary: start of a block at `time`, before its transactions.
    pub(super) fn begin_block(&mut self, height: u64, time: Epoch) {
        self.height = height;
        self.time = time;
    }

    /// Block boundary after the transactions: task expiry, lapsed escrows,
    /// the proposer subsidy.
    pub(super) fn end_block(&mut self, proposer: &str) {
        let now = self.time;
        let expired: Vec<Digest32> =
            self.tasks.values().filter(|t| t.is_live() && t.expired_at(now)).map(|t| t.task_id).collect();
        for id in expired {
            let t = self.tasks.get_mut(&id).expect("listed");
            t.status = TaskStatus::Expired;
            let (fee, requester) = (t.fee, t.requester.clone());
            match requester {
                Some(r) if self.accounts.contains_key(&r) => self.credit(&r, fee),
                _ => self.burned += fee,
            }
        }
        let lapsed: Vec<Digest32> = self
            .tdms
            .iter()
            .filter(|(_, e)| e.status == TdmStatus::Pending && now - e.submitted_at >= TASK_TTL_S)
            .map(|(h, _)| *h)
            .collect();
        for h in lapsed {
            let e = self.tdms.get_mut(&h).expect("listed");
            e.status = TdmStatus::Lapsed;
            e.attestations.clear();
            e.reports.clear();
            let (o, esc, task) = (e.observer.clone(), e.escrow, e.task_id);
            self.credit(&o, esc);
            self.reopen(task);
        }
        let s = self.economics.block_subsidy;
        if s > 0 && self.accounts.contains_key(proposer) {
            self.minted += s;
            self.credit(proposer, s);
        }
    }

    pub(super) fn seal(&mut self, hash: Digest32) {
        self.last_hash = hash;
    }
}
