use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Behavior;
use crate::astro::Epoch;
use crate::fedprop::{ModelProposal, ResidualModel, Vote};
use crate::ledger::{write_chain, Block, ChainError, Genesis, Holdings, LedgerState};
use crate::Digest32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccountPnl {
    pub account: String,
    pub role: String,
    pub behavior: Behavior,
    pub initial: u64,
    pub holdings: Holdings,
    pub net: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedObject {
    pub object_id: String,
    /// Truth object most of the claimed TDMs observed.
    pub truth_id: Option<String>,
    pub height: u64,
    pub time: Epoch,
    /// Inclusion time of the first on-chain TDM of that truth object.
    pub first_detection: Option<Epoch>,
    /// Elapsed observation cycles from first detection to the claim.
    pub cycles: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub height: u64,
    pub time: Epoch,
    pub version: u64,
    pub samples: usize,
    pub holdout: usize,
    /// Holdout position RMS of the bare reference propagator, km.
    pub rms_uncorrected: f64,
    /// Holdout position RMS with the global model applied, km.
    pub rms_corrected: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalOutcome {
    Merged,
    Dropped,
    Open,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub hash: Digest32,
    pub proposer: String,
    pub behavior: Behavior,
    pub height: u64,
    pub parent_version: u64,
    /// Vote every honest verifier computes.
    pub honest_vote: Vote,
    pub rms_new: Option<f64>,
    pub rms_old: Option<f64>,
    /// Included votes by voter.
    pub votes: BTreeMap<String, Vote>,
    pub outcome: ProposalOutcome,
    #[serde(skip)]
    pub proposal: Option<ModelProposal>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub height: u64,
    pub time: Epoch,
    pub tdm_hash: Digest32,
    pub observer: String,
    pub behavior: Behavior,
    pub truth_id: Option<String>,
    pub verdict: String,
    pub object: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub height: u64,
    pub time: Epoch,
    pub account: String,
    pub holdings: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetStats {
    pub sent: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub scenario_digest: Digest32,
    pub genesis_digest: Digest32,
    pub final_height: u64,
    pub final_state_root: Digest32,
    /// SHA-256 of the `chain.log` bytes.
    pub chain_digest: Digest32,
    pub accounts: Vec<AccountPnl>,
    pub verdicts: BTreeMap<String, u64>,
    pub verdicts_by_behavior: BTreeMap<String, BTreeMap<String, u64>>,
    pub catalog_initial: usize,
    pub catalog_final: usize,
    pub mined: Vec<MinedObject>,
    pub model: Vec<ModelPoint>,
    pub model_versions: Vec<ResidualModel>,
    pub proposals: Vec<ProposalRecord>,
    pub network: NetStats,
    pub failed_txs: u64,
    /// Honest observers' TDMs finalized as rejected.
    pub honest_rejections: u64,
}

impl SimReport {
    pub fn account(&self, id: &str) -> Option<&AccountPnl> {
        self.accounts.iter().find(|a| a.account == id)
    }
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub report: SimReport,
    pub genesis: Genesis,
    pub blocks: Vec<Block>,
    pub state: LedgerState,
    pub verdict_rows: Vec<VerdictRow>,
    pub balance_rows: Vec<BalanceRow>,
}

impl SimOutput {
    /// The `chain.log` bytes.
    pub fn chain_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        for b in &self.blocks {
            crate::ledger::wire::write_block(&mut v, b).expect("in-memory write");
        }
        v
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = String::from("height,time,tdm_hash,observer,behavior,truth_id,verdict,object\n");
        for r in &self.verdict_rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.height,
                r.time,
                r.tdm_hash,
                r.observer,
                r.behavior.as_str(),
                r.truth_id.as_deref().unwrap_or(""),
                r.verdict,
                r.object.as_deref().unwrap_or("")
            );
        }
        s
    }

    pub fn balances_csv(&self) -> String {
        let mut s = String::from("height,time,account,holdings\n");
        for r in &self.balance_rows {
            let _ = writeln!(s, "{},{},{},{}", r.height, r.time, r.account, r.holdings);
        }
        s
    }

    pub fn model_csv(&self) -> String {
        let mut s = String::from("height,time,version,samples,holdout,rms_uncorrected_km,rms_corrected_km\n");
        for p in &self.report.model {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6}",
                p.height, p.time, p.version, p.samples, p.holdout, p.rms_uncorrected, p.rms_corrected
            );
        }
        s
    }

    /// Writes `genesis.json`, `chain.log`, `report.json` and the CSV timelines.
    pub fn persist(&self, dir: &Path) -> Result<(), ChainError> {
        write_chain(dir, &self.genesis, &self.blocks)?;
        let json = serde_json::to_vec_pretty(&self.report).map_err(|e| ChainError::Genesis(e.to_string()))?;
        std::fs::write(dir.join("report.json"), json)?;
        std::fs::write(dir.join("verdicts.csv"), self.verdicts_csv())?;
        std::fs::write(dir.join("balances.csv"), self.balances_csv())?;
        std::fs::write(dir.join("model_rms.csv"), self.model_csv())?;
        Ok(())
    }
}
