//! Proof-of-stake ledger: accounts, transactions, blocks, the proposer
//! lottery, rewards and slashing, and the hash-chained block log.
//!
//! Token amounts are integers and every transfer is explicit, so
//! `balances + stakes + escrows + burned - minted == genesis supply` holds
//! exactly after every transaction.

mod chain;
mod state;
pub mod wire;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dit::DitParams;
use crate::astro::{Epoch, GroundSite, OrbitRecord, PropagatorConfig};
use crate::fedprop::{ModelProposal, Verification};
use crate::tasking::{PriorityWeights, TaskOrigin, TaskTarget};
use crate::tdm::Tdm;
use crate::validation::{ValidationParams, ValidationReport};
use crate::Digest32;

pub use chain::{
    apply_block, genesis_block, produce_block, read_chain, select_validator, verify_chain, verify_dir, write_chain, BadBlock,
    ChainError, CHAIN_LOG, GENESIS_FILE,
};
pub use state::{Holdings, LedgerState, ProposalEntry, TdmEntry, TdmStatus};

pub const BPS: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Observer,
    Compute,
    Requester,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub balance: u64,
    /// Compute stake; weighs the proposer lottery and attestation quorum.
    pub staked: u64,
    pub roles: BTreeSet<Role>,
    /// Last nonce used; transactions must use a larger one.
    pub nonce: u64,
}

/// Genesis economics. Fractions are in basis points so that every payout is
/// integer arithmetic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EconomicsParams {
    pub observer_stake_min: u64,
    pub slash_fraction_bps: u64,
    pub validator_fee_cut_bps: u64,
    pub r_mint: u64,
    pub r_model: u64,
    pub block_subsidy: u64,
    /// Attestation quorum as a fraction of total compute stake.
    pub quorum_num: u64,
    pub quorum_den: u64,
    /// Minted into each protocol-generated follow-up task.
    pub internal_task_fee: u64,
    pub priority: PriorityWeights,
}

impl Default for EconomicsParams {
    fn default() -> Self {
        Self {
            observer_stake_min: 10,
            slash_fraction_bps: BPS,
            validator_fee_cut_bps: 1_000,
            r_mint: 50,
            r_model: 20,
            block_subsidy: 1,
            quorum_num: 2,
            quorum_den: 3,
            internal_task_fee: 5,
            priority: PriorityWeights::default(),
        }
    }
}

impl EconomicsParams {
    pub fn check(&self) -> Result<(), String> {
        if self.slash_fraction_bps > BPS || self.validator_fee_cut_bps > BPS {
            return Err("basis-point fractions must lie in [0, 10000]".into());
        }
        if self.quorum_den == 0 || 2 * self.quorum_num <= self.quorum_den || self.quorum_num > self.quorum_den {
            return Err("quorum must lie in (1/2, 1]".into());
        }
        Ok(())
    }

    /// Whether `part` of `total` stake meets the quorum.
    pub fn quorum_met(&self, part: u64, total: u64) -> bool {
        total > 0 && part as u128 * self.quorum_den as u128 >= total as u128 * self.quorum_num as u128
    }

    /// Whether more than `1 - quorum` of the stake opposes, so quorum is out of reach.
    pub fn quorum_blocked(&self, against: u64, total: u64) -> bool {
        against as u128 * self.quorum_den as u128 > total as u128 * (self.quorum_den - self.quorum_num) as u128
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenesisAccount {
    pub account_id: String,
    pub balance: u64,
    pub staked: u64,
    pub roles: BTreeSet<Role>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genesis {
    pub chain_id: String,
    pub time: Epoch,
    pub accounts: Vec<GenesisAccount>,
    pub economics: EconomicsParams,
    pub validation: ValidationParams,
    pub propagator: PropagatorConfig,
    pub sites: Vec<GroundSite>,
    pub catalog: Vec<OrbitRecord>,
    #[serde(default)]
    pub dit: DitParams,
}

impl Genesis {
    pub fn digest(&self) -> Digest32 {
        Digest32::of(&wire::encode(self))
    }

    pub fn supply(&self) -> u64 {
        self.accounts.iter().map(|a| a.balance + a.staked).sum()
    }

    pub fn check(&self) -> Result<(), String> {
        self.economics.check()?;
        self.validation.check().map_err(|e| e.to_string())?;
        self.propagator.check().map_err(|e| e.to_string())?;
        self.dit.check()?;
        let mut ids = BTreeSet::new();
        for a in &self.accounts {
            if a.account_id.is_empty() || !ids.insert(&a.account_id) {
                return Err(format!("account id {:?} is empty or repeated", a.account_id));
            }
            if a.staked > 0 && !a.roles.contains(&Role::Compute) {
                return Err(format!("{} stakes without the compute role", a.account_id));
            }
        }
        let mut sites = BTreeSet::new();
        for s in &self.sites {
            if !sites.insert(&s.site_id) {
                return Err(format!("site {} is repeated", s.site_id));
            }
        }
        let mut objs = BTreeSet::new();
        for r in &self.catalog {
            r.check().map_err(|e| e.to_string())?;
            if !objs.insert(&r.object_id) {
                return Err(format!("object {} is repeated", r.object_id));
            }
        }
        Ok(())
    }
}

/// Proof that a set of uncorrelated tracks is one new object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinedClaim {
    pub record: OrbitRecord,
    pub tdm_hashes: Vec<Digest32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    SubmitTdm { tdm: Tdm, task_id: Option<Digest32> },
    PostTask { target: TaskTarget, fee: u64, urgency: bool, origin: TaskOrigin },
    RegisterStake { amount: u64 },
    AttestValidation { report: ValidationReport },
    ProposeModel { proposal: ModelProposal },
    VoteModel { proposal_hash: Digest32, verification: Verification },
    ClaimReward { claim: MinedClaim },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    SubmitTdm,
    PostTask,
    RegisterStake,
    AttestValidation,
    ProposeModel,
    VoteModel,
    ClaimReward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: String,
    pub nonce: u64,
    pub payload: Payload,
}

impl Transaction {
    pub fn kind(&self) -> TxKind {
        match self.payload {
            Payload::SubmitTdm { .. } => TxKind::SubmitTdm,
            Payload::PostTask { .. } => TxKind::PostTask,
            Payload::RegisterStake { .. } => TxKind::RegisterStake,
            Payload::AttestValidation { .. } => TxKind::AttestValidation,
            Payload::ProposeModel { .. } => TxKind::ProposeModel,
            Payload::VoteModel { .. } => TxKind::VoteModel,
            Payload::ClaimReward { .. } => TxKind::ClaimReward,
        }
    }

    pub fn hash(&self) -> Digest32 {
        Digest32::of(&wire::encode(self))
    }
}

/// Canonical block order: by sender, then nonce, then content hash.
pub fn canonical_order(txs: &mut [Transaction]) {
    txs.sort_by_cached_key(|t| (t.sender.clone(), t.nonce, t.hash()));
}

pub fn proposal_hash(p: &ModelProposal) -> Digest32 {
    Digest32::of(&wire::encode(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub height: u64,
    pub prev_hash: Digest32,
    pub time: Epoch,
    pub tx_root: Digest32,
    pub state_root: Digest32,
    pub proposer: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub txs: Vec<Transaction>,
    /// Digest of the canonical header.
    pub hash: Digest32,
}

impl Block {
    pub fn height(&self) -> u64 {
        self.header.height
    }
}

pub fn tx_root(txs: &[Transaction]) -> Digest32 {
    Digest32::of(&wire::encode(&txs))
}

pub fn header_hash(h: &BlockHeader) -> Digest32 {
    Digest32::of(&wire::encode(h))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TxError {
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("nonce {got} of {sender} does not exceed {last}")]
    Nonce { sender: String, last: u64, got: u64 },
    #[error("{account} lacks the {role:?} role")]
    Role { account: String, role: Role },
    #[error("insufficient balance: need {need}, have {have}")]
    Insufficient { need: u64, have: u64 },
    #[error("unknown TDM {0}")]
    UnknownTdm(Digest32),
    #[error("TDM {0} already submitted")]
    DuplicateTdm(Digest32),
    #[error("TDM {0} is already final")]
    TdmFinal(Digest32),
    #[error("unknown or closed task {0}")]
    UnknownTask(Digest32),
    #[error("unknown site {0}")]
    UnknownSite(String),
    #[error("{0} already attested or voted")]
    Duplicate(String),
    #[error("stale proposal: parent {parent}, global {global}")]
    Stale { parent: u64, global: u64 },
    #[error("unknown proposal {0}")]
    UnknownProposal(Digest32),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("arithmetic overflow")]
    Overflow,
}
