use sda_core::astro::propagate_j2;
use sda_core::ledger::{verify_chain, verify_dir};
use sda_core::netsim::{
    fedprop_scenario, inject_breakup, reference_scenario, run_scenario, uct_scenario, Behavior, NodeRole,
    ProposalOutcome, RunOptions, Scenario,
};
use sda_core::tasking::TaskTarget;

const SERIAL: RunOptions = RunOptions { threads: 1, stop_when_mined: false };

/// One observer, one compute node, one cataloged object, no requests.
fn tiny(seed: u64, behavior: Behavior) -> Scenario {
    let mut sc = reference_scenario(seed);
    sc.duration = 2.0 * 86400.0;
    sc.truth_orbits.truncate(1);
    sc.initial_catalog.truncate(1);
    sc.truth_residual = None;
    sc.requests = None;
    sc.nodes.retain(|n| n.account == "obs1" || n.account == "val1");
    sc.nodes[0].behavior = behavior;
    sc
}

#[test]
fn smoke_run_verifies_and_pays_nothing_negative() {
    let out = run_scenario(&tiny(4, Behavior::Honest), &SERIAL).unwrap();
    assert!(out.report.verdicts.get("verified").copied().unwrap_or(0) >= 1, "{:?}", out.report.verdicts);
    assert!(out.report.account("obs1").unwrap().net >= 0);
}

#[test]
fn same_seed_gives_same_root() {
    let sc = tiny(5, Behavior::Honest);
    let a = run_scenario(&sc, &SERIAL).unwrap();
    let b = run_scenario(&sc, &SERIAL).unwrap();
    assert_eq!(a.report.final_state_root, b.report.final_state_root);
    assert_eq!(a.chain_bytes(), b.chain_bytes());
}

#[test]
fn lone_spoofer_is_slashed() {
    let out = run_scenario(&tiny(6, Behavior::Spoofer), &SERIAL).unwrap();
    assert!(out.report.verdicts.get("rejected").copied().unwrap_or(0) >= 1);
    assert!(out.report.account("obs1").unwrap().net < 0);
}

#[test]
fn breakup_with_no_fragments_only_adds_the_task() {
    let sc = reference_scenario(2);
    let t = sc.start + 3600.0;
    let out = inject_breakup(&sc, "OBJ-03", 0, t).unwrap();
    assert_eq!(out.truth_orbits, sc.truth_orbits);
    assert_eq!(out.appearances, sc.appearances);
    assert_eq!(out.initial_catalog, sc.initial_catalog);
    assert_eq!(out.scheduled_tasks.len(), sc.scheduled_tasks.len() + 1);
    let task = out.scheduled_tasks.last().unwrap();
    assert!(task.urgency);
    assert_eq!(task.at, t);
    let mut back = out.clone();
    back.scheduled_tasks.pop();
    assert_eq!(back, sc);
}

#[test]
fn fragments_start_at_the_parent_position() {
    let sc = reference_scenario(2);
    let t = sc.start + 5000.0;
    let out = inject_breakup(&sc, "OBJ-01", 8, t).unwrap();
    let parent = out.truth_orbits.iter().find(|r| r.object_id == "OBJ-01").unwrap();
    let p = propagate_j2(&parent.elements, parent.bstar, t, &sc.propagator).unwrap();
    let frags: Vec<_> = out.truth_orbits.iter().filter(|r| r.object_id.starts_with("OBJ-01-F")).collect();
    assert_eq!(frags.len(), 8);
    for f in frags {
        let s = propagate_j2(&f.elements, f.bstar, t, &sc.propagator).unwrap();
        assert!((s.r - p.r).norm() < 1.0, "{}", f.object_id);
        assert!((s.v - p.v).norm() <= 0.1 + 1e-9);
        assert_eq!(out.appearances[&f.object_id], t);
        assert!(!out.initial_catalog.contains(&f.object_id));
    }
    // the search region covers every fragment
    let TaskTarget::Region { .. } = &out.scheduled_tasks.last().unwrap().target else {
        panic!("breakup task should search a region");
    };
    let target = &out.scheduled_tasks.last().unwrap().target;
    for f in out.truth_orbits.iter().filter(|r| r.object_id.starts_with("OBJ-01-F")) {
        assert!(target.region_contains(&f.elements, &sc.propagator), "{}", f.object_id);
    }
}

#[test]
fn breakup_fragments_get_mined() {
    let seeds = 0..20u64;
    let mut hits = 0;
    for seed in seeds.clone() {
        let sc = reference_scenario(seed);
        let sc = inject_breakup(&sc, "OBJ-00", 3, sc.start + 86400.0).unwrap();
        let out = run_scenario(&sc, &SERIAL).unwrap();
        if out.report.mined.iter().any(|m| m.truth_id.as_deref().is_some_and(|t| t.starts_with("OBJ-00-F"))) {
            hits += 1;
        }
    }
    assert!(hits * 100 >= 95 * seeds.count(), "{hits}/20");
}

#[test]
fn worker_threads_do_not_change_the_chain() {
    let sc = reference_scenario(3);
    let serial = run_scenario(&sc, &SERIAL).unwrap();
    let parallel = run_scenario(&sc, &RunOptions { threads: 4, stop_when_mined: false }).unwrap();
    assert_eq!(serial.chain_bytes(), parallel.chain_bytes());
    assert_eq!(serial.report, parallel.report);
}

#[test]
fn heavy_drops_keep_ledger_invariants() {
    let mut sc = reference_scenario(8);
    sc.duration = 2.0 * 86400.0;
    sc.network.drop_prob = 0.4;
    let out = run_scenario(&sc, &SERIAL).unwrap();
    assert!(out.report.network.dropped > 0);
    let replayed = verify_chain(&out.genesis, &out.blocks).unwrap();
    assert_eq!(replayed.root(), out.state.root());
    assert_eq!(replayed.conserved_total(), replayed.supply() as i128);
    assert_eq!(out.report.honest_rejections, 0);
}

#[test]
fn lazy_minority_cannot_slash_honest_observers() {
    let mut sc = reference_scenario(9);
    sc.duration = 3.0 * 86400.0;
    for n in &mut sc.nodes {
        if n.account == "val3" {
            n.behavior = Behavior::LazyValidator;
        }
    }
    let out = run_scenario(&sc, &SERIAL).unwrap();
    assert_eq!(out.report.honest_rejections, 0);
    assert_eq!(out.state.conserved_total(), out.state.supply() as i128);
    for a in out.report.accounts.iter().filter(|a| a.behavior == Behavior::Honest && a.role == "observer") {
        assert!(a.net > 0, "{}", a.account);
    }
}

#[test]
fn poisoned_models_never_merge() {
    let out = run_scenario(&fedprop_scenario(1), &SERIAL).unwrap();
    let poisoned: Vec<_> = out.report.proposals.iter().filter(|p| p.behavior == Behavior::ModelPoisoner).collect();
    assert!(!poisoned.is_empty());
    for p in poisoned {
        assert_ne!(p.outcome, ProposalOutcome::Merged);
        for (voter, vote) in &p.votes {
            if out.report.accounts.iter().any(|a| &a.account == voter && a.behavior == Behavior::Honest) {
                assert_eq!(*vote, sda_core::fedprop::Vote::Reject, "{voter}");
            }
        }
    }
    assert!(out.report.model_versions.len() > 3);
}

#[test]
fn uct_object_is_mined_and_paid() {
    let out = run_scenario(&uct_scenario(11), &RunOptions { threads: 1, stop_when_mined: true }).unwrap();
    let m = &out.report.mined[0];
    assert_eq!(m.truth_id.as_deref(), Some("UNKNOWN-1"));
    assert!(out.state.catalog().contains_key(&m.object_id));
    assert_eq!(out.report.catalog_final, out.report.catalog_initial + 1);
}

#[test]
fn persisted_run_replays_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_scenario(&tiny(7, Behavior::Honest), &SERIAL).unwrap();
    out.persist(dir.path()).unwrap();
    let (blocks, state) = verify_dir(dir.path()).unwrap();
    assert_eq!(blocks.len(), out.blocks.len());
    assert_eq!(state.root(), out.state.root());
    assert_eq!(std::fs::read(dir.path().join("chain.log")).unwrap(), out.chain_bytes());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["final_height"], out.report.final_height);
    for f in ["verdicts.csv", "balances.csv", "model_rms.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn scenario_problems_are_all_listed() {
    let mut sc = reference_scenario(1);
    sc.network.drop_prob = 1.0;
    sc.nodes.retain(|n| n.role != NodeRole::Compute);
    sc.nodes[0].site = Some("NOWHERE".into());
    sc.initial_catalog.push("GHOST".into());
    let err = run_scenario(&sc, &SERIAL).unwrap_err();
    assert_eq!(err.0.len(), 4, "{err}");
    assert!(err.0.iter().any(|m| m.contains("drop_prob")));
    assert!(err.0.iter().any(|m| m.contains("compute")));
    assert!(err.0.iter().any(|m| m.contains("NOWHERE")));
    assert!(err.0.iter().any(|m| m.contains("GHOST")));
}

#[test]
fn scenario_json_round_trips() {
    let sc = inject_breakup(&reference_scenario(4), "OBJ-02", 2, reference_scenario(4).start + 100.0).unwrap();
    let text = serde_json::to_string_pretty(&sc).unwrap();
    let back: Scenario = serde_json::from_str(&text).unwrap();
    assert_eq!(back, sc);
    assert_eq!(back.digest(), sc.digest());
}
