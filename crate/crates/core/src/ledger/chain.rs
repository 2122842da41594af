use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use super::{canonical_order, header_hash, tx_root, wire, Block, BlockHeader, Genesis, LedgerState, Transaction, TxError};
use crate::astro::Epoch;
use crate::Digest32;

pub const CHAIN_LOG: &str = "chain.log";
pub const GENESIS_FILE: &str = "genesis.json";

/// First block that fails verification.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("block {height}: {reason}")]
pub struct BadBlock {
    pub height: u64,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("genesis: {0}")]
    Genesis(String),
    #[error("no account holds compute stake")]
    NoValidators,
    #[error("block time {next} does not follow {prev}")]
    Time { prev: Epoch, next: Epoch },
    #[error(transparent)]
    Bad(#[from] BadBlock),
}

/// Stake-weighted proposer lottery. The seed `SHA-256(prev_hash || round)`
/// read as a big-endian integer, reduced modulo total stake, selects the
/// account whose cumulative stake interval (in account-id order) contains it.
pub fn select_validator(prev_hash: &Digest32, round: u64, stakes: &BTreeMap<String, u64>) -> Option<String> {
    let total: u64 = stakes.values().sum();
    if total == 0 {
        return None;
    }
    let mut h = Sha256::new();
    h.update(prev_hash.as_bytes());
    h.update(round.to_be_bytes());
    let seed = h.finalize();
    let mut x: u128 = 0;
    for b in seed {
        x = ((x << 8) | b as u128) % total as u128;
    }
    let mut acc = 0u128;
    for (id, s) in stakes {
        acc += *s as u128;
        if x < acc {
            return Some(id.clone());
        }
    }
    unreachable!("x < total")
}

/// Block 0 and the state it seals.
pub fn genesis_block(g: &Genesis) -> Result<(Block, LedgerState), ChainError> {
    let mut state = LedgerState::from_genesis(g).map_err(ChainError::Genesis)?;
    let header = BlockHeader {
        height: 0,
        prev_hash: Digest32::ZERO,
        time: g.time,
        tx_root: tx_root(&[]),
        state_root: state.root(),
        proposer: String::new(),
    };
    let hash = header_hash(&header);
    state.seal(hash);
    Ok((Block { header, txs: Vec::new(), hash }, state))
}

/// Builds the next block from `pending` at `time`. Transactions that fail
/// to apply are left out and returned with their errors.
pub fn produce_block(
    state: &mut LedgerState,
    mut pending: Vec<Transaction>,
    time: Epoch,
) -> Result<(Block, Vec<(Transaction, TxError)>), ChainError> {
    if time <= state.time() {
        return Err(ChainError::Time { prev: state.time(), next: time });
    }
    let height = state.height() + 1;
    let prev_hash = state.last_hash();
    let proposer = select_validator(&prev_hash, height, &state.compute_stakes()).ok_or(ChainError::NoValidators)?;
    canonical_order(&mut pending);
    state.begin_block(height, time);
    let mut txs = Vec::with_capacity(pending.len());
    let mut failed = Vec::new();
    for tx in pending {
        match state.apply_transaction(&tx) {
            Ok(()) => txs.push(tx),
            Err(e) => failed.push((tx, e)),
        }
    }
    state.end_block(&proposer);
    let header = BlockHeader { height, prev_hash, time, tx_root: tx_root(&txs), state_root: state.root(), proposer };
    let hash = header_hash(&header);
    state.seal(hash);
    Ok((Block { header, txs, hash }, failed))
}

/// Checks `b` against `state` and applies it, returning the new state.
pub fn apply_block(state: &LedgerState, b: &Block) -> Result<LedgerState, BadBlock> {
    let height = b.header.height;
    let bad = |reason: String| BadBlock { height, reason };
    if height != state.height() + 1 {
        return Err(bad(format!("expected height {}", state.height() + 1)));
    }
    if b.header.prev_hash != state.last_hash() {
        return Err(bad("previous hash does not link".into()));
    }
    if b.header.time <= state.time() {
        return Err(bad("time does not advance".into()));
    }
    let expect = select_validator(&state.last_hash(), height, &state.compute_stakes());
    if expect.as_deref() != Some(b.header.proposer.as_str()) {
        return Err(bad(format!("proposer {:?} did not win the lottery", b.header.proposer)));
    }
    let mut sorted = b.txs.clone();
    canonical_order(&mut sorted);
    if sorted != b.txs {
        return Err(bad("transactions are not in canonical order".into()));
    }
    if tx_root(&b.txs) != b.header.tx_root {
        return Err(bad("transaction root mismatch".into()));
    }
    let mut next = state.clone();
    next.begin_block(height, b.header.time);
    for (k, tx) in b.txs.iter().enumerate() {
        next.apply_transaction(tx).map_err(|e| bad(format!("transaction {k}: {e}")))?;
    }
    next.end_block(&b.header.proposer);
    if next.root() != b.header.state_root {
        return Err(bad("state root mismatch".into()));
    }
    if header_hash(&b.header) != b.hash {
        return Err(bad("block hash mismatch".into()));
    }
    next.seal(b.hash);
    Ok(next)
}

/// Replays a chain from genesis, returning the final state or the first
/// failing block.
pub fn verify_chain(g: &Genesis, blocks: &[Block]) -> Result<LedgerState, BadBlock> {
    let (b0, mut state) = genesis_block(g).map_err(|e| BadBlock { height: 0, reason: e.to_string() })?;
    match blocks.first() {
        None => return Err(BadBlock { height: 0, reason: "missing genesis block".into() }),
        Some(b) if *b != b0 => return Err(BadBlock { height: 0, reason: "genesis block does not match genesis file".into() }),
        _ => {}
    }
    for (k, b) in blocks.iter().enumerate().skip(1) {
        // report the position, which a tampered header cannot move
        state = apply_block(&state, b).map_err(|e| BadBlock { height: k as u64, reason: e.reason })?;
    }
    Ok(state)
}

/// Writes `genesis.json` and `chain.log` into `dir`.
pub fn write_chain(dir: &Path, g: &Genesis, blocks: &[Block]) -> Result<(), ChainError> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(g).map_err(|e| ChainError::Genesis(e.to_string()))?;
    fs::write(dir.join(GENESIS_FILE), json)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(CHAIN_LOG))?);
    for b in blocks {
        wire::write_block(&mut w, b)?;
    }
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// Reads a ledger directory. A log record that does not decode is reported
/// as a bad block at its index.
pub fn read_chain(dir: &Path) -> Result<(Genesis, Vec<Block>), ChainError> {
    let g: Genesis = serde_json::from_slice(&fs::read(dir.join(GENESIS_FILE))?)
        .map_err(|e| ChainError::Genesis(e.to_string()))?;
    let bytes = fs::read(dir.join(CHAIN_LOG))?;
    match wire::read_blocks(&bytes) {
        (blocks, None) => Ok((g, blocks)),
        (_, Some((height, reason))) => Err(BadBlock { height, reason }.into()),
    }
}

/// Reads and replays a ledger directory.
pub fn verify_dir(dir: &Path) -> Result<(Vec<Block>, LedgerState), ChainError> {
    let (g, blocks) = read_chain(dir)?;
    let state = verify_chain(&g, &blocks)?;
    Ok((blocks, state))
}
