mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use common::{epochs_around, random_leo, record, rng, site_under};
use proptest::prelude::*;
use rand::Rng;
use sda_core::astro::{Epoch, KeplerianElements, OrbitRecord, PropagatorConfig};
use sda_core::fedprop::{ModelProposal, Verification, Vote};
use sda_core::ledger::{
    genesis_block, produce_block, select_validator, verify_chain, verify_dir, wire, write_chain, Block,
    ChainError, EconomicsParams, Genesis, GenesisAccount, LedgerState, MinedClaim, Payload, Role,
    Transaction, TdmStatus, TxError, CHAIN_LOG,
};
use sda_core::tasking::{TaskOrigin, TaskStatus, TaskTarget};
use sda_core::tdm::{synth_tdm_with, SynthOptions, Tdm, UNKNOWN_PARTICIPANT};
use sda_core::validation::{mine_object, validate_tdm, ValidationParams, ValidationReport, Verdict};
use sda_core::Digest32;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const T0: f64 = 3600.0;
const N_OBJ: usize = 4;

struct Fixture {
    genesis: Genesis,
    honest: Vec<Tdm>,
    spoofed: Vec<Tdm>,
    /// Radar passes of an uncataloged object, six hours apart.
    uct: Vec<Tdm>,
}

fn account(id: &str, balance: u64, staked: u64, roles: &[Role]) -> GenesisAccount {
    GenesisAccount { account_id: id.into(), balance, staked, roles: roles.iter().copied().collect() }
}

fn build_fixture() -> Fixture {
    let cfg = PropagatorConfig::default();
    let mut r = rng(11);
    let catalog: Vec<OrbitRecord> =
        (0..N_OBJ).map(|k| record(&format!("OBJ-{k}"), random_leo(&mut r, Epoch::J2000), 0.0)).collect();
    let stranger = record("X", random_leo(&mut r, Epoch::J2000), 0.0);
    let mut sites = Vec::new();
    let mut honest = Vec::new();
    let mut spoofed = Vec::new();
    for (k, rec) in catalog.iter().enumerate() {
        let t = Epoch::from_seconds(T0 + 900.0 * k as f64);
        let site = site_under(rec, t, &format!("S{k}"), &cfg);
        let epochs = epochs_around(t, 30.0, 2);
        honest.push(synth_tdm_with(rec, &site, &epochs, 1e-5, k as u64, &SynthOptions::default()).unwrap());
        let spoof = SynthOptions { angle_offset: 1f64.to_radians(), ..Default::default() };
        spoofed.push(synth_tdm_with(rec, &site, &epochs_around(t + 5.0, 30.0, 2), 1e-5, 100 + k as u64, &spoof).unwrap());
        sites.push(site);
    }
    let mut uct = Vec::new();
    for (j, dt) in [0.0, 6.0 * 3600.0].into_iter().enumerate() {
        let t = Epoch::from_seconds(T0 + dt);
        let site = site_under(&stranger, t, &format!("U{j}"), &cfg);
        let opts = SynthOptions { has_range: true, participant: Some(UNKNOWN_PARTICIPANT.into()), ..Default::default() };
        uct.push(synth_tdm_with(&stranger, &site, &epochs_around(t, 30.0, 2), 0.0, 7, &opts).unwrap());
        sites.push(site);
    }
    let genesis = Genesis {
        chain_id: "test".into(),
        time: Epoch::J2000,
        accounts: vec![
            account("obs1", 100, 0, &[Role::Observer]),
            account("obs2", 100, 0, &[Role::Observer]),
            account("req", 1000, 0, &[Role::Requester]),
            account("v1", 100, 200, &[Role::Compute]),
            account("v2", 100, 100, &[Role::Compute]),
            account("v3", 100, 100, &[Role::Compute]),
        ],
        economics: EconomicsParams::default(),
        validation: ValidationParams::default(),
        propagator: cfg,
        sites,
        catalog,
        dit: Default::default(),
    };
    Fixture { genesis, honest, spoofed, uct }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(build_fixture)
}

/// A chain under construction with per-sender nonces.
struct Chain {
    state: LedgerState,
    blocks: Vec<Block>,
    nonces: BTreeMap<String, u64>,
    t: f64,
}

impl Chain {
    fn new(g: &Genesis) -> Self {
        let (b0, state) = genesis_block(g).unwrap();
        Self { state, blocks: vec![b0], nonces: BTreeMap::new(), t: 10_000.0 }
    }

    fn tx(&mut self, sender: &str, payload: Payload) -> Transaction {
        let n = self.nonces.entry(sender.into()).or_insert(0);
        *n += 1;
        Transaction { sender: sender.into(), nonce: *n, payload }
    }

    fn block(&mut self, txs: Vec<Transaction>) -> Vec<(Transaction, TxError)> {
        self.t += 600.0;
        let (b, failed) = produce_block(&mut self.state, txs, Epoch::from_seconds(self.t)).unwrap();
        self.blocks.push(b);
        failed
    }

    fn ok(&mut self, txs: Vec<Transaction>) {
        let failed = self.block(txs);
        assert!(failed.is_empty(), "{failed:?}");
    }

    fn report(&self, tdm: &Tdm) -> ValidationReport {
        validate_tdm(tdm, &self.state.snapshot(None), self.state.validation()).unwrap()
    }

    fn attest(&mut self, who: &str, report: &ValidationReport) -> Transaction {
        self.tx(who, Payload::AttestValidation { report: report.clone() })
    }

    fn assert_conserved(&self) {
        assert_eq!(self.state.conserved_total(), self.state.supply() as i128);
    }
}

fn submit(c: &mut Chain, who: &str, tdm: &Tdm, task: Option<Digest32>) {
    let tx = c.tx(who, Payload::SubmitTdm { tdm: tdm.clone(), task_id: task });
    c.ok(vec![tx]);
}

#[test]
fn submit_escrows_the_minimum_stake() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    submit(&mut c, "obs1", &f.honest[0], None);
    let h = c.state.holdings("obs1");
    assert_eq!(h.balance, 90);
    assert_eq!(h.escrowed, 10);
    assert_eq!(c.state.tdms()[&f.honest[0].content_hash()].status, TdmStatus::Pending);
    c.assert_conserved();
}

#[test]
fn rejected_quorum_burns_the_escrow() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    submit(&mut c, "obs1", &f.spoofed[0], None);
    let rep = c.report(&f.spoofed[0]);
    assert_eq!(rep.verdict, Verdict::Rejected);
    let txs = vec![c.attest("v2", &rep), c.attest("v3", &rep)];
    c.ok(txs);
    let h = c.state.tdms()[&f.spoofed[0].content_hash()].clone();
    // 200 of 400 stake is short of two thirds.
    assert_eq!(h.status, TdmStatus::Pending);
    let tx = c.attest("v1", &rep);
    c.ok(vec![tx]);
    assert_eq!(c.state.tdms()[&f.spoofed[0].content_hash()].status, TdmStatus::Final(Verdict::Rejected));
    assert_eq!(c.state.burned(), 10);
    assert_eq!(c.state.holdings("obs1").total(), 90);
    c.assert_conserved();
}

#[test]
fn conflicting_reports_below_quorum_stay_pending() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    submit(&mut c, "obs1", &f.spoofed[1], None);
    let rep = c.report(&f.spoofed[1]);
    let mut other = rep.clone();
    other.rms_residual *= 1.5;
    let txs = vec![c.attest("v1", &rep), c.attest("v2", &other), c.attest("v3", &other)];
    c.ok(txs);
    let e = &c.state.tdms()[&f.spoofed[1].content_hash()];
    assert_eq!(e.status, TdmStatus::Pending);
    assert_eq!(e.escrow, 10);
    assert_eq!(c.state.burned(), 0);
    assert_eq!(c.state.holdings("obs1").escrowed, 10);
    c.assert_conserved();
}

#[test]
fn attestation_of_unknown_tdm_is_rejected() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let mut rep = {
        submit(&mut c, "obs1", &f.honest[0], None);
        c.report(&f.honest[0])
    };
    rep.tdm_hash = Digest32::of(b"nothing");
    let tx = c.attest("v1", &rep);
    let before = c.state.root();
    let err = c.state.clone().apply_transaction(&tx).unwrap_err();
    assert!(matches!(err, TxError::UnknownTdm(_)));
    assert_eq!(c.state.root(), before);
}

#[test]
fn verified_task_pays_observer_and_attesters_by_stake() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let target = TaskTarget::Object { object_id: "OBJ-2".into() };
    let tx = c.tx("req", Payload::PostTask { target, fee: 100, urgency: false, origin: TaskOrigin::External });
    c.ok(vec![tx]);
    let task_id = *c.state.tasks().keys().next().unwrap();
    assert_eq!(c.state.holdings("req").task_fees, 100);
    submit(&mut c, "obs2", &f.honest[2], Some(task_id));
    assert_eq!(c.state.tasks()[&task_id].status, TaskStatus::Assigned);
    let rep = c.report(&f.honest[2]);
    assert_eq!(rep.verdict, Verdict::Verified);
    let before: BTreeMap<&str, u64> =
        ["v1", "v2", "v3"].iter().map(|v| (*v, c.state.account(v).unwrap().balance)).collect();
    let proposer_gain = |c: &Chain, v: &str| c.state.accounts()[v].balance;
    let txs = vec![c.attest("v1", &rep), c.attest("v2", &rep)];
    c.ok(txs);
    let proposer = c.blocks.last().unwrap().header.proposer.clone();
    let sub = |v: &str| if v == proposer { 1 } else { 0 };
    // cut 10 of 100 split 200:100; 6 + 3, one token of dust to the first attester
    assert_eq!(proposer_gain(&c, "v1") - before["v1"] - sub("v1"), 7);
    assert_eq!(proposer_gain(&c, "v2") - before["v2"] - sub("v2"), 3);
    assert_eq!(proposer_gain(&c, "v3") - before["v3"] - sub("v3"), 0);
    assert_eq!(c.state.account("obs2").unwrap().balance, 100 + 90);
    assert_eq!(c.state.tasks()[&task_id].status, TaskStatus::Fulfilled);
    assert_eq!(c.state.last_verified().get("OBJ-2"), Some(&f.honest[2].last_epoch()));
    let late = c.attest("v3", &rep);
    assert!(matches!(c.block(vec![late])[0].1, TxError::TdmFinal(_)));
    c.assert_conserved();
}

#[test]
fn empty_block_mints_the_subsidy() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    c.ok(vec![]);
    let b = c.blocks.last().unwrap();
    assert!(b.txs.is_empty());
    assert_eq!(c.state.minted(), 1);
    assert_eq!(c.state.holdings(&b.header.proposer).balance, 101);
    c.assert_conserved();
}

#[test]
fn single_staker_always_wins_and_draws_repeat() {
    let one: BTreeMap<String, u64> = [("solo".to_string(), 5)].into();
    for k in 0..50u64 {
        let h = Digest32::of(&k.to_be_bytes());
        assert_eq!(select_validator(&h, k, &one).as_deref(), Some("solo"));
    }
    let two: BTreeMap<String, u64> = [("a".to_string(), 30), ("b".to_string(), 70)].into();
    let h = Digest32::of(b"x");
    assert_eq!(select_validator(&h, 9, &two), select_validator(&h, 9, &two));
    assert_eq!(select_validator(&h, 9, &BTreeMap::new()), None);
}

/// Independent reduction: long division of the 256-bit seed, one 64-bit limb at a time.
fn lottery_oracle(prev: &Digest32, round: u64, stakes: &[(&str, u64)]) -> String {
    use sha2::{Digest, Sha256};
    let seed: [u8; 32] = Sha256::new().chain_update(prev.as_bytes()).chain_update(round.to_be_bytes()).finalize().into();
    let total: u64 = stakes.iter().map(|s| s.1).sum();
    let mut rem: u128 = 0;
    for limb in seed.chunks(8) {
        let v = u64::from_be_bytes(limb.try_into().unwrap());
        rem = ((rem << 64) + v as u128) % total as u128;
    }
    let mut sorted = stakes.to_vec();
    sorted.sort();
    let mut lo = 0u128;
    for (id, s) in sorted {
        if rem < lo + s as u128 {
            return id.to_string();
        }
        lo += s as u128;
    }
    unreachable!()
}

#[test]
fn lottery_matches_the_long_division_oracle() {
    let stakes = [("zeta", 7u64), ("alpha", 1_000_003), ("mid", u32::MAX as u64)];
    let map: BTreeMap<String, u64> = stakes.iter().map(|(a, s)| (a.to_string(), *s)).collect();
    for k in 0..2000u64 {
        let prev = Digest32::of(&k.to_le_bytes());
        assert_eq!(select_validator(&prev, k, &map).unwrap(), lottery_oracle(&prev, k, &stakes));
    }
}

#[test]
fn lottery_frequencies_follow_stake() {
    let stakes: BTreeMap<String, u64> = [("a".to_string(), 30), ("b".to_string(), 70)].into();
    let n = 100_000u64;
    let mut a = 0u64;
    for k in 0..n {
        let prev = Digest32::of(&k.to_be_bytes());
        if select_validator(&prev, k, &stakes).unwrap() == "a" {
            a += 1;
        }
    }
    let (ea, eb) = (0.3 * n as f64, 0.7 * n as f64);
    let chi2 = (a as f64 - ea).powi(2) / ea + ((n - a) as f64 - eb).powi(2) / eb;
    let p = 1.0 - ChiSquared::new(1.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi2 {chi2}, p {p}");
}

/// Blocks 1..=5 with transactions in every block but the first.
fn sample_chain() -> Chain {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    c.ok(vec![]);
    submit(&mut c, "obs1", &f.honest[0], None);
    let rep = c.report(&f.honest[0]);
    let txs = vec![c.attest("v1", &rep), c.attest("v2", &rep)];
    c.ok(txs);
    let tx = c.tx("v3", Payload::RegisterStake { amount: 50 });
    c.ok(vec![tx]);
    submit(&mut c, "obs2", &f.spoofed[3], None);
    c
}

#[test]
fn identical_inputs_give_byte_identical_blocks() {
    let f = fixture();
    let mut a = Chain::new(&f.genesis);
    let mut b = Chain::new(&f.genesis);
    for c in [&mut a, &mut b] {
        submit(c, "obs1", &f.honest[1], None);
    }
    // pending sets in different orders
    let ta = vec![a.tx("obs2", Payload::SubmitTdm { tdm: f.honest[3].clone(), task_id: None }), a.tx("v1", Payload::RegisterStake { amount: 5 })];
    let mut tb = vec![b.tx("obs2", Payload::SubmitTdm { tdm: f.honest[3].clone(), task_id: None }), b.tx("v1", Payload::RegisterStake { amount: 5 })];
    tb.reverse();
    a.ok(ta);
    b.ok(tb);
    assert_eq!(wire::encode(a.blocks.last().unwrap()), wire::encode(b.blocks.last().unwrap()));
}

#[test]
fn persisted_chain_replays_to_the_stored_root() {
    let f = fixture();
    let c = sample_chain();
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), &f.genesis, &c.blocks).unwrap();
    let (blocks, state) = verify_dir(dir.path()).unwrap();
    assert_eq!(blocks, c.blocks);
    assert_eq!(state.root(), c.state.root());
    assert_eq!(state.last_hash(), c.blocks.last().unwrap().hash);
    assert_eq!(state.tdm(&f.spoofed[3].content_hash()), Some(&f.spoofed[3]));
}

fn record_offsets(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let len = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        out.push((at, at + 4 + len));
        at += 4 + len;
    }
    out
}

fn first_bad(dir: &std::path::Path) -> Option<u64> {
    match verify_dir(dir) {
        Ok(_) => None,
        Err(ChainError::Bad(b)) => Some(b.height),
        Err(e) => panic!("unexpected {e}"),
    }
}

#[test]
fn flipped_byte_in_block_three_tx_area_is_found() {
    let f = fixture();
    let c = sample_chain();
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), &f.genesis, &c.blocks).unwrap();
    let path = dir.path().join(CHAIN_LOG);
    let clean = std::fs::read(&path).unwrap();
    let (start, end) = record_offsets(&clean)[3];
    let header_len = wire::encode(&c.blocks[3].header).len();
    let tx_area = start + 4 + header_len + 8..end - 32;
    assert!(!c.blocks[3].txs.is_empty());
    for pos in tx_area.step_by(97) {
        let mut bytes = clean.clone();
        bytes[pos] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(first_bad(dir.path()), Some(3), "byte {pos}");
    }
}

#[test]
fn any_flipped_byte_is_found_at_its_block() {
    let f = fixture();
    let c = sample_chain();
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), &f.genesis, &c.blocks).unwrap();
    let path = dir.path().join(CHAIN_LOG);
    let clean = std::fs::read(&path).unwrap();
    let offsets = record_offsets(&clean);
    let mut r = rng(5);
    for _ in 0..1000 {
        let pos = r.random_range(0..clean.len());
        let mut bytes = clean.clone();
        bytes[pos] ^= 1 << r.random_range(0..8);
        std::fs::write(&path, &bytes).unwrap();
        let k = offsets.iter().position(|(a, b)| pos >= *a && pos < *b).unwrap() as u64;
        assert_eq!(first_bad(dir.path()), Some(k), "byte {pos}");
    }
}

#[test]
fn altered_proposer_fails_the_lottery_check() {
    let f = fixture();
    let c = sample_chain();
    for k in 1..c.blocks.len() {
        let mut blocks = c.blocks.clone();
        let winner = blocks[k].header.proposer.clone();
        let other = ["v1", "v2", "v3"].into_iter().find(|v| *v != winner).unwrap();
        blocks[k].header.proposer = other.into();
        let err = verify_chain(&f.genesis, &blocks).unwrap_err();
        assert_eq!(err.height, k as u64);
        assert!(err.reason.contains("lottery"), "{}", err.reason);
    }
    assert!(verify_chain(&f.genesis, &c.blocks).is_ok());
}

#[test]
fn rejected_submissions_strictly_shrink_holdings() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let mut last = c.state.holdings("obs2").total();
    for tdm in &f.spoofed {
        submit(&mut c, "obs2", tdm, None);
        let rep = c.report(tdm);
        assert_eq!(rep.verdict, Verdict::Rejected);
        let txs = vec![c.attest("v1", &rep), c.attest("v2", &rep)];
        c.ok(txs);
        let now = c.state.holdings("obs2").total();
        assert!(now < last, "{now} !< {last}");
        last = now;
    }
    c.assert_conserved();
}

#[test]
fn model_vote_merges_and_pays_the_proposer() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let mut w = [[0.0; 6]; 3];
    w[1][1] = 0.5;
    let p = ModelProposal { w_new: w, proposer: "v2".into(), claimed_rms: 0.1, parent_version: 0 };
    let tx = c.tx("v2", Payload::ProposeModel { proposal: p.clone() });
    c.ok(vec![tx]);
    let h = *c.state.proposals().keys().next().unwrap();
    let yes = Verification { rms_new: Some(1.0), rms_old: Some(2.0), vote: Vote::Accept };
    let before = c.state.account("v2").unwrap().balance;
    let txs = vec![c.tx("v1", Payload::VoteModel { proposal_hash: h, verification: yes }), c.tx("v3", Payload::VoteModel { proposal_hash: h, verification: yes })];
    c.ok(txs);
    assert_eq!(c.state.model().version, 1);
    assert_eq!(c.state.model().w[1][1], 0.25);
    let sub = u64::from(c.blocks.last().unwrap().header.proposer == "v2");
    assert_eq!(c.state.account("v2").unwrap().balance - before - sub, 20);
    assert!(c.state.proposals().is_empty());
    // the same parent is now stale
    let tx = c.tx("v2", Payload::ProposeModel { proposal: p });
    assert!(matches!(c.block(vec![tx])[0].1, TxError::Stale { parent: 0, global: 1 }));
    c.assert_conserved();
}

#[test]
fn rejected_model_proposal_is_dropped() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let p = ModelProposal { w_new: [[1.0; 6]; 3], proposer: "v3".into(), claimed_rms: 0.0, parent_version: 0 };
    let tx = c.tx("v3", Payload::ProposeModel { proposal: p });
    c.ok(vec![tx]);
    let h = *c.state.proposals().keys().next().unwrap();
    let no = Verification { rms_new: Some(9.0), rms_old: Some(1.0), vote: Vote::Reject };
    let tx = c.tx("v2", Payload::VoteModel { proposal_hash: h, verification: no });
    c.ok(vec![tx]);
    assert_eq!(c.state.proposals().len(), 1);
    let tx = c.tx("v1", Payload::VoteModel { proposal_hash: h, verification: no });
    c.ok(vec![tx]);
    assert!(c.state.proposals().is_empty());
    assert_eq!(c.state.model().version, 0);
}

#[test]
fn uct_tracks_are_pooled_then_mined_for_a_reward() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let observers = ["obs1", "obs2"];
    for (tdm, who) in f.uct.iter().zip(observers) {
        submit(&mut c, who, tdm, None);
        let rep = c.report(tdm);
        assert_eq!(rep.verdict, Verdict::Uct);
        let txs = vec![c.attest("v1", &rep), c.attest("v2", &rep)];
        c.ok(txs);
    }
    assert_eq!(c.state.uct_pool().len(), 2);
    // one follow-up region task per distinct orbit
    let internal = c.state.tasks().values().filter(|t| t.origin == TaskOrigin::Internal).count();
    assert!((1..=2).contains(&internal));
    let snap = c.state.snapshot(None);
    let rec = mine_object(&f.uct, &snap, c.state.validation()).unwrap();
    let hashes: Vec<Digest32> = f.uct.iter().map(|t| t.content_hash()).collect();
    let before: Vec<u64> = observers.iter().map(|o| c.state.account(o).unwrap().balance).collect();

    let mut bad = rec.clone();
    bad.elements = KeplerianElements { a: rec.elements.a + 20.0, ..rec.elements };
    let tx = c.tx("v3", Payload::ClaimReward { claim: MinedClaim { record: bad, tdm_hashes: hashes.clone() } });
    assert!(matches!(c.block(vec![tx])[0].1, TxError::Invalid(_)));

    let tx = c.tx("v3", Payload::ClaimReward { claim: MinedClaim { record: rec.clone(), tdm_hashes: hashes.clone() } });
    c.ok(vec![tx]);
    assert!(c.state.catalog().contains_key(&rec.object_id));
    assert!(c.state.uct_pool().is_empty());
    for (o, b) in observers.iter().zip(before) {
        let sub = u64::from(c.blocks.last().unwrap().header.proposer == *o);
        assert_eq!(c.state.account(o).unwrap().balance - b - sub, 25);
    }
    let again = c.tx("v3", Payload::ClaimReward { claim: MinedClaim { record: rec, tdm_hashes: hashes } });
    assert!(matches!(c.block(vec![again])[0].1, TxError::Invalid(_)));
    c.assert_conserved();
    let dir = tempfile::tempdir().unwrap();
    write_chain(dir.path(), &f.genesis, &c.blocks).unwrap();
    assert_eq!(verify_dir(dir.path()).unwrap().1.root(), c.state.root());
}

#[test]
fn tasks_expire_with_refunds_and_pending_escrows_lapse() {
    let f = fixture();
    let mut c = Chain::new(&f.genesis);
    let target = TaskTarget::Object { object_id: "OBJ-0".into() };
    let tx = c.tx("req", Payload::PostTask { target, fee: 40, urgency: true, origin: TaskOrigin::External });
    c.ok(vec![tx]);
    submit(&mut c, "obs1", &f.honest[0], None);
    assert_eq!(c.state.account("req").unwrap().balance, 960);
    c.t += 49.0 * 3600.0;
    c.ok(vec![]);
    assert!(c.state.tasks().values().all(|t| t.status == TaskStatus::Expired));
    assert_eq!(c.state.account("req").unwrap().balance, 1000);
    assert_eq!(c.state.tdms()[&f.honest[0].content_hash()].status, TdmStatus::Lapsed);
    assert_eq!(c.state.holdings("obs1").total(), 100);
    c.assert_conserved();
}

#[derive(Clone, Debug)]
enum Op {
    Stake(usize, u64),
    Task(usize, u64, usize),
    Submit(usize, usize, bool),
    Attest(usize, usize, u8),
    Vote(usize),
    Block(u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..6, 0u64..150).prop_map(|(a, x)| Op::Stake(a, x)),
        (0usize..6, 0u64..400, 0usize..N_OBJ + 1).prop_map(|(a, x, o)| Op::Task(a, x, o)),
        (0usize..6, 0usize..2 * N_OBJ, any::<bool>()).prop_map(|(a, k, t)| Op::Submit(a, k, t)),
        (0usize..6, 0usize..2 * N_OBJ, 0u8..3).prop_map(|(a, k, m)| Op::Attest(a, k, m)),
        (0usize..6).prop_map(Op::Vote),
        (0u32..100_000).prop_map(Op::Block),
    ]
}

const IDS: [&str; 6] = ["obs1", "obs2", "req", "v1", "v2", "v3"];

fn reports() -> &'static Vec<ValidationReport> {
    static R: OnceLock<Vec<ValidationReport>> = OnceLock::new();
    R.get_or_init(|| {
        let f = fixture();
        let c = Chain::new(&f.genesis);
        f.honest.iter().chain(&f.spoofed).map(|t| c.report(t)).collect()
    })
}

/// Drives random operations through blocks, checking the invariants after each block.
fn fuzz(ops: &[Op], nonce_slip: bool) -> Chain {
    let f = fixture();
    let tdms: Vec<&Tdm> = f.honest.iter().chain(&f.spoofed).collect();
    let mut c = Chain::new(&f.genesis);
    let mut pending = Vec::new();
    let mut pool: BTreeSet<Digest32> = BTreeSet::new();
    for op in ops {
        match op {
            Op::Stake(a, x) => {
                let tx = c.tx(IDS[*a], Payload::RegisterStake { amount: *x });
                pending.push(tx);
            }
            Op::Task(a, fee, o) => {
                let target = TaskTarget::Object { object_id: format!("OBJ-{o}") };
                let tx = c.tx(IDS[*a], Payload::PostTask { target, fee: *fee, urgency: false, origin: TaskOrigin::External });
                pending.push(tx);
            }
            Op::Submit(a, k, with_task) => {
                let task = if *with_task { c.state.tasks().keys().next().copied() } else { None };
                let tx = c.tx(IDS[*a], Payload::SubmitTdm { tdm: tdms[*k].clone(), task_id: task });
                pending.push(tx);
            }
            Op::Attest(a, k, mode) => {
                let mut rep = reports()[*k].clone();
                match mode {
                    0 => {}
                    1 => rep.verdict = Verdict::Ambiguous,
                    _ => rep.tdm_hash = Digest32::of(b"missing"),
                }
                let tx = c.attest(IDS[*a], &rep);
                pending.push(tx);
            }
            Op::Vote(a) => {
                let h = pool.iter().next().copied().unwrap_or(Digest32::ZERO);
                let v = Verification { rms_new: None, rms_old: None, vote: Vote::Accept };
                let tx = c.tx(IDS[*a], Payload::VoteModel { proposal_hash: h, verification: v });
                pending.push(tx);
            }
            Op::Block(dt) => {
                if nonce_slip {
                    // replayed nonces must be refused
                    if let Some(t) = pending.first().cloned() {
                        pending.push(t);
                    }
                }
                c.t += *dt as f64;
                c.block(std::mem::take(&mut pending));
                pool = c.state.proposals().keys().copied().collect();
                c.assert_conserved();
            }
        }
    }
    c.block(pending);
    c.assert_conserved();
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_transactions_conserve_tokens(ops in prop::collection::vec(op(), 1..60), slip in any::<bool>()) {
        let c = fuzz(&ops, slip);
        let supply = c.state.supply() + c.state.minted();
        for id in IDS {
            let h = c.state.holdings(id);
            prop_assert!(h.total() <= supply);
        }
        let replay = verify_chain(&fixture().genesis, &c.blocks).unwrap();
        prop_assert_eq!(replay.root(), c.state.root());
    }
}
