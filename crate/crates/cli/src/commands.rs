use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sda_core::astro::{Epoch, GroundSite, PropagatorConfig, SiteRegistry, SECONDS_PER_DAY};
use sda_core::dit::{dit_leaderboard, dit_score, leaderboard_csv, DitParams};
use sda_core::fedprop::{holdout_rms, split, train_on_calibration, ModelProposal};
use sda_core::iod::{initial_orbit, refine_elements_with, IodSolution, RefineOptions};
use sda_core::ledger::{read_chain, verify_chain, ChainError, Genesis, LedgerState};
use sda_core::netsim::{fedprop_scenario, reference_scenario, run_scenario, uct_scenario, RunOptions, Scenario};
use sda_core::tasking::plan_pass;
use sda_core::tdm::{parse_tdm_bytes, synth_tdm_with, SynthOptions, Tdm};
use sda_core::validation::{validate_tdm, ValidationParams};
use sda_core::Digest32;
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command, DitCmd, ExampleKind, Format, LedgerCmd, ModelCmd, SimCmd, TdmCmd};

/// Misuse of the command line; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Sim(c) => sim(cli, c),
        Command::Tdm(c) => tdm(cli, c),
        Command::Iod { tdms, sites } => iod(cli, tdms, sites),
        Command::Ledger(c) => ledger(cli, c),
        Command::Model(c) => model(cli, c),
        Command::Dit(c) => dit(cli, c),
    }
}

fn format(cli: &Cli, default: Format, allowed: &[Format]) -> Result<Format> {
    let f = cli.format.unwrap_or(default);
    if !allowed.contains(&f) {
        return Err(Usage(format!("--format {f:?} is not supported here", f = f).to_lowercase()).into());
    }
    Ok(f)
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

fn announce(kind: &str, d: Digest32) {
    eprintln!("{kind} {d}");
}

/// Digest of the built-in defaults, for commands that run without a genesis.
fn default_config_digest() -> Digest32 {
    let cfg = json!({
        "propagator": PropagatorConfig::default(),
        "validation": ValidationParams::default(),
    });
    Digest32::of(&serde_json::to_vec(&cfg).expect("config serializes"))
}

struct Loaded {
    genesis: Genesis,
    state: LedgerState,
    /// State root committed in the head block header.
    head_root: Digest32,
}

fn ledger_dir(cli: &Cli) -> Result<&Path> {
    cli.ledger.as_deref().ok_or_else(|| Usage("this command needs --ledger <dir>".into()).into())
}

fn load(cli: &Cli) -> Result<Loaded> {
    let dir = ledger_dir(cli)?;
    let (genesis, blocks) = read_chain(dir).with_context(|| format!("reading {}", dir.display()))?;
    announce("genesis", genesis.digest());
    let state = verify_chain(&genesis, &blocks).map_err(ChainError::Bad)?;
    let head_root = blocks.last().map_or(Digest32::ZERO, |b| b.header.state_root);
    Ok(Loaded { genesis, state, head_root })
}

fn read_tdm(path: &Path) -> Result<Tdm> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_tdm_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn sim(cli: &Cli, c: &SimCmd) -> Result<String> {
    match c {
        SimCmd::Example { kind } => {
            format(cli, Format::Json, &[Format::Json])?;
            let seed = cli.seed.unwrap_or(1);
            let sc = match kind {
                ExampleKind::Reference => reference_scenario(seed),
                ExampleKind::Uct => uct_scenario(seed),
                ExampleKind::Fedprop => fedprop_scenario(seed),
            };
            announce("scenario", sc.digest());
            Ok(to_json(&sc))
        }
        SimCmd::Run { scenario, out, threads } => {
            let fmt = format(cli, Format::Json, &[Format::Json, Format::Text])?;
            let text = fs::read(scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let mut sc: Scenario =
                serde_json::from_slice(&text).with_context(|| format!("parsing {}", scenario.display()))?;
            if let Some(seed) = cli.seed {
                sc.seed = seed;
            }
            announce("scenario", sc.digest());
            announce("genesis", sc.genesis().digest());
            let run = run_scenario(&sc, &RunOptions { threads: (*threads).max(1), stop_when_mined: false })?;
            if let Some(dir) = out {
                run.persist(dir).with_context(|| format!("writing {}", dir.display()))?;
            }
            let r = &run.report;
            let summary = json!({
                "seed": r.seed,
                "scenario_digest": r.scenario_digest,
                "genesis_digest": r.genesis_digest,
                "final_height": r.final_height,
                "final_state_root": r.final_state_root,
                "chain_digest": r.chain_digest,
                "verdicts": r.verdicts,
                "catalog": [r.catalog_initial, r.catalog_final],
                "mined": r.mined.len(),
                "model_version": run.state.model().version,
                "accounts": r.accounts.iter().map(|a| json!({"account": a.account, "behavior": a.behavior, "initial": a.initial, "final": a.holdings.total(), "net": a.net})).collect::<Vec<_>>(),
            });
            Ok(match fmt {
                Format::Text => {
                    let mut s = String::new();
                    let _ = writeln!(s, "height {} root {}", r.final_height, r.final_state_root);
                    let _ = writeln!(s, "chain {}", r.chain_digest);
                    for (v, n) in &r.verdicts {
                        let _ = writeln!(s, "verdict {v} {n}");
                    }
                    for a in &r.accounts {
                        let _ = writeln!(s, "account {} {} {} -> {} ({:+})", a.account, a.behavior.as_str(), a.initial, a.holdings.total(), a.net);
                    }
                    s
                }
                _ => to_json(&summary),
            })
        }
    }
}

fn tdm(cli: &Cli, c: &TdmCmd) -> Result<String> {
    match c {
        TdmCmd::Parse { file } => {
            let fmt = format(cli, Format::Json, &[Format::Json, Format::Text])?;
            announce("config", default_config_digest());
            let t = read_tdm(file)?;
            Ok(match fmt {
                Format::Text => t.to_kvn(),
                _ => to_json(&t),
            })
        }
        TdmCmd::Gen { object, site, after, noise, out } => {
            format(cli, Format::Text, &[Format::Text])?;
            let l = load(cli)?;
            let rec = l.state.catalog().get(object).ok_or_else(|| anyhow!("object {object} is not cataloged"))?;
            let s = l.state.sites().get(site).ok_or_else(|| anyhow!("site {site} is not registered"))?;
            let start = after.map(Epoch::from_seconds).unwrap_or(l.state.time());
            let cfg = *l.state.cfg();
            let epochs = plan_pass(rec, s, (start, start + SECONDS_PER_DAY), &cfg, None)
                .ok_or_else(|| anyhow!("{object} has no pass over {site} within a day of {start}"))?;
            let opts = SynthOptions { participant: Some(object.clone()), cfg, ..SynthOptions::default() };
            let t = synth_tdm_with(rec, s, &epochs, *noise, cli.seed.unwrap_or(0), &opts)?;
            let kvn = t.to_kvn();
            match out {
                Some(p) => {
                    fs::write(p, &kvn).with_context(|| format!("writing {}", p.display()))?;
                    Ok(format!("{}\n", t.content_hash()))
                }
                None => Ok(kvn),
            }
        }
        TdmCmd::Validate { tdm } => {
            format(cli, Format::Json, &[Format::Json])?;
            let l = load(cli)?;
            let t = read_tdm(tdm)?;
            let report = validate_tdm(&t, &l.state.snapshot(None), l.state.validation())?;
            Ok(to_json(&report))
        }
    }
}

fn read_sites(path: &Path) -> Result<SiteRegistry> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(map) = serde_json::from_slice::<SiteRegistry>(&bytes) {
        return Ok(map);
    }
    let list: Vec<GroundSite> =
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok(list.into_iter().map(|s| (s.site_id.clone(), s)).collect())
}

fn iod(cli: &Cli, paths: &[PathBuf], sites: &Path) -> Result<String> {
    format(cli, Format::Json, &[Format::Json])?;
    announce("config", default_config_digest());
    let sites = read_sites(sites)?;
    let tdms = paths.iter().map(|p| read_tdm(p)).collect::<Result<Vec<_>>>()?;
    let opts = RefineOptions { use_range: tdms.iter().all(|t| t.meta().has_range), ..RefineOptions::default() };
    // Any single pass may seed the fit; keep the best refinement that converges.
    let mut best: Option<IodSolution> = None;
    let mut last_err = None;
    for seed in &tdms {
        let site = sites
            .get(&seed.meta().site_id)
            .ok_or_else(|| anyhow!("site {} is not in the registry", seed.meta().site_id))?;
        let iod = match initial_orbit(seed, site) {
            Ok(s) => s,
            Err(e) => {
                last_err = Some(anyhow!(e));
                continue;
            }
        };
        let cand = match refine_elements_with(&iod.elements, &tdms, &sites, &opts) {
            Ok(out) if tdms.len() > 1 || out.solution.rms_residual < iod.rms_residual => out.solution,
            Ok(_) => iod,
            Err(e) if tdms.len() > 1 => {
                last_err = Some(anyhow!("refinement over {} TDMs failed: {e}", tdms.len()));
                continue;
            }
            Err(_) => iod,
        };
        if best.as_ref().is_none_or(|b| cand.rms_residual < b.rms_residual) {
            best = Some(cand);
        }
    }
    let Some(best) = best else {
        return Err(last_err.expect("at least one TDM"));
    };
    Ok(to_json(&best))
}

fn ledger(cli: &Cli, c: &LedgerCmd) -> Result<String> {
    match c {
        LedgerCmd::Verify => {
            let fmt = format(cli, Format::Text, &[Format::Json, Format::Text])?;
            let dir = ledger_dir(cli)?;
            let checked = read_chain(dir).and_then(|(g, blocks)| {
                announce("genesis", g.digest());
                verify_chain(&g, &blocks).map(|_| blocks).map_err(ChainError::Bad)
            });
            match checked {
                Ok(blocks) => {
                    let head = &blocks.last().expect("verified chains hold block 0").header;
                    Ok(match fmt {
                        Format::Json => to_json(&json!({"ok": true, "blocks": blocks.len(), "height": head.height, "state_root": head.state_root})),
                        _ => format!("ok: {} blocks, height {}, state root {}\n", blocks.len(), head.height, head.state_root),
                    })
                }
                Err(ChainError::Bad(b)) => bail!("first bad block at height {}: {}", b.height, b.reason),
                Err(e) => Err(e.into()),
            }
        }
        LedgerCmd::Inspect { tasks } => {
            let fmt = format(cli, Format::Json, &[Format::Json, Format::Text])?;
            let l = load(cli)?;
            let s = &l.state;
            let mut summary = json!({
                "chain_id": l.genesis.chain_id,
                "height": s.height(),
                "time": s.time(),
                "state_root": l.head_root,
                "last_hash": s.last_hash(),
                "supply": s.supply(),
                "minted": s.minted(),
                "burned": s.burned(),
                "accounts": s.accounts().keys().map(|a| (a.clone(), s.holdings(a))).collect::<std::collections::BTreeMap<_, _>>(),
                "catalog": s.catalog().keys().collect::<Vec<_>>(),
                "tdms": s.tdms().len(),
                "uct_pool": s.uct_pool().len(),
                "model_version": s.model().version,
                "open_proposals": s.proposals().len(),
            });
            if *tasks {
                summary["tasks"] = serde_json::to_value(s.tasks().values().collect::<Vec<_>>())?;
            }
            Ok(match fmt {
                Format::Text => {
                    let mut out = String::new();
                    let _ = writeln!(out, "chain {} height {} time {}", l.genesis.chain_id, s.height(), s.time());
                    let _ = writeln!(out, "state root {}", l.head_root);
                    let _ = writeln!(out, "supply {} minted {} burned {}", s.supply(), s.minted(), s.burned());
                    for a in s.accounts().keys() {
                        let h = s.holdings(a);
                        let _ = writeln!(out, "account {a} balance {} staked {} escrowed {}", h.balance, h.staked, h.escrowed);
                    }
                    let _ = writeln!(out, "catalog {} objects, {} TDMs, {} pooled UCTs, model v{}", s.catalog().len(), s.tdms().len(), s.uct_pool().len(), s.model().version);
                    if *tasks {
                        for t in s.tasks().values() {
                            let _ = writeln!(out, "task {} {:?} fee {} urgent {} {:?}", t.task_id, t.status, t.fee, t.urgency, t.origin);
                        }
                    }
                    out
                }
                _ => to_json(&summary),
            })
        }
    }
}

fn model(cli: &Cli, c: &ModelCmd) -> Result<String> {
    format(cli, Format::Json, &[Format::Json])?;
    let l = load(cli)?;
    let s = &l.state;
    let samples = s.calibration_samples(None);
    let (_, holdout) = split(&samples);
    match c {
        ModelCmd::Train { account } => {
            if s.account(account).is_none() {
                bail!("account {account} is not on the ledger");
            }
            let w = train_on_calibration(&samples)?;
            let p = ModelProposal {
                w_new: w,
                proposer: account.clone(),
                claimed_rms: holdout_rms(&w, &holdout),
                parent_version: s.model().version,
            };
            Ok(to_json(&p))
        }
        ModelCmd::Eval => Ok(to_json(&json!({
            "version": s.model().version,
            "samples": samples.len(),
            "holdout": holdout.len(),
            "rms_uncorrected_km": holdout_rms(&[[0.0; 6]; 3], &holdout),
            "rms_corrected_km": holdout_rms(&s.model().w, &holdout),
        }))),
    }
}

fn dit(cli: &Cli, c: &DitCmd) -> Result<String> {
    let l = load(cli)?;
    let p: &DitParams = &l.genesis.dit;
    eprintln!("dit n_sat {} site_sat {} window_days {}", p.n_sat, p.site_sat, p.window_days);
    match c {
        DitCmd::Score { object } => {
            let fmt = format(cli, Format::Json, &[Format::Json, Format::Csv])?;
            let score = dit_score(&l.state, object, p)?;
            Ok(match fmt {
                Format::Csv => leaderboard_csv(std::slice::from_ref(&score)),
                _ => to_json(&json!({ "params": p, "score": score })),
            })
        }
        DitCmd::Leaderboard => {
            let fmt = format(cli, Format::Csv, &[Format::Json, Format::Csv])?;
            let board = dit_leaderboard(&l.state, p);
            Ok(match fmt {
                Format::Json => to_json(&json!({ "params": p, "scores": board })),
                _ => leaderboard_csv(&board),
            })
        }
    }
}
