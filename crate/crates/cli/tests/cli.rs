use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn sda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sda")).args(args).output().expect("spawn sda")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// A one-day reference run shared by the ledger tests.
fn ledger() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let o = sda(&["sim", "example", "reference", "--seed", "3"]);
        assert!(o.status.success());
        let mut sc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        sc["duration"] = 86400.0.into();
        let path = dir.path().join("scenario.json");
        std::fs::write(&path, serde_json::to_vec(&sc).unwrap()).unwrap();
        let out = dir.path().join("led");
        let o = sda(&["sim", "run", "--scenario", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        dir
    })
    .path()
}

fn led() -> String {
    ledger().join("led").to_string_lossy().into_owned()
}

#[test]
fn tdm_parse_matches_golden() {
    let o = sda(&["tdm", "parse", data("obj03_s1.tdm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), std::fs::read_to_string(data("obj03_s1.json")).unwrap());
    assert!(stderr(&o).starts_with("config "));
}

#[test]
fn tdm_parse_text_round_trips_the_file() {
    let o = sda(&["tdm", "parse", "--format", "text", data("obj03_s1.tdm").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), std::fs::read_to_string(data("obj03_s1.tdm")).unwrap());
}

#[test]
fn malformed_tdm_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tdm");
    std::fs::write(&bad, "CCSDS_TDM_VERS = 2.0\nMETA_START\n").unwrap();
    let o = sda(&["tdm", "parse", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(sda(&["bogus"]).status.code(), Some(2));
    assert_eq!(sda(&["ledger", "verify"]).status.code(), Some(2));
    assert_eq!(sda(&["--format", "xml", "ledger", "verify"]).status.code(), Some(2));
    let o = sda(&["dit", "leaderboard", "--ledger", &led(), "--format", "text"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(sda(&["--help"]).status.code(), Some(0));
}

#[test]
fn sim_example_is_deterministic() {
    let a = sda(&["sim", "example", "uct", "--seed", "9"]);
    let b = sda(&["sim", "example", "uct", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(stderr(&a), stderr(&b));
    assert!(stderr(&a).starts_with("scenario "));
    assert_ne!(a.stdout, sda(&["sim", "example", "uct", "--seed", "10"]).stdout);
}

#[test]
fn verify_reports_the_head() {
    let o = sda(&["ledger", "verify", "--ledger", &led(), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["ok"], true);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ledger().join("led/report.json")).unwrap()).unwrap();
    assert_eq!(v["height"], report["final_height"]);
    assert_eq!(v["state_root"], report["final_state_root"]);
    assert!(stderr(&o).starts_with("genesis "));
}

#[test]
fn tampered_chain_names_the_bad_height() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(ledger().join("led/genesis.json"), dir.path().join("genesis.json")).unwrap();
    let mut chain = std::fs::read(ledger().join("led/chain.log")).unwrap();
    let mid = chain.len() / 2;
    chain[mid] ^= 1;
    std::fs::write(dir.path().join("chain.log"), chain).unwrap();
    let o = sda(&["ledger", "verify", "--ledger", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("first bad block at height "), "{}", stderr(&o));
}

#[test]
fn generated_tdm_validates_against_its_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let tdm = dir.path().join("g.tdm");
    let o = sda(&["tdm", "gen", "--ledger", &led(), "--object", "OBJ-03", "--site", "S1", "--seed", "7", "--out", tdm.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = sda(&["tdm", "validate", "--ledger", &led(), "--tdm", tdm.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["verdict"], "verified");
    assert_eq!(v["matched_object"], "OBJ-03");

    let o = sda(&["tdm", "gen", "--ledger", &led(), "--object", "NOPE", "--site", "S1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn iod_recovers_a_single_pass() {
    let dir = tempfile::tempdir().unwrap();
    let genesis: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ledger().join("led/genesis.json")).unwrap()).unwrap();
    let sites = dir.path().join("sites.json");
    std::fs::write(&sites, serde_json::to_vec(&genesis["sites"]).unwrap()).unwrap();
    let o = sda(&["iod", "--tdm", data("obj03_s1.tdm").to_str().unwrap(), "--sites", sites.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["n_obs"], 6);
    assert!(v["rms_residual"].as_f64().unwrap() < 1e-3);
    assert!(v["elements"]["a"].as_f64().unwrap() > 6378.0);
}

#[test]
fn ledger_reads_are_deterministic() {
    for args in [
        &["ledger", "inspect", "--tasks"][..],
        &["dit", "leaderboard"],
        &["dit", "score", "--object", "OBJ-01"],
        &["model", "eval"],
        &["model", "train", "--account", "val1"],
    ] {
        let mut full = args.to_vec();
        let l = led();
        full.extend(["--ledger", l.as_str()]);
        let a = sda(&full);
        let b = sda(&full);
        assert_eq!(a.status.code(), Some(0), "{args:?}: {}", stderr(&a));
        assert_eq!(a.stdout, b.stdout, "{args:?}");
    }
}

#[test]
fn leaderboard_defaults_to_csv() {
    let o = sda(&["dit", "leaderboard", "--ledger", &led()]);
    let text = stdout(&o);
    assert!(text.starts_with("object_id,"), "{text}");
    assert!(stderr(&o).contains("window_days 30"));
}
