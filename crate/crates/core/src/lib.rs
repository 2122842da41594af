//! Library for a space domain awareness chain.
//!
//! Observers submit staked Tracking Data Messages (TDMs), validators check them
//! against the on-chain catalog with a reference propagator, and a
//! proof-of-stake ledger pays or slashes the observers. A federated
//! residual model refines the propagator and the DIT dApp scores objects
//! from the verified history.
//!
//! Module map:
//! - [`astro`]: time, frames, Keplerian machinery and the J2/drag propagator
//! - [`tdm`]: KVN tracking data messages and the simulated sensor
//! - [`iod`]: Gibbs, Gauss and least-squares refinement
//! - [`validation`]: the validator pipeline and UCT mining
//! - [`ledger`]: accounts, transactions, blocks, lottery and persistence
//! - [`tasking`]: the prioritized observation queue
//! - [`fedprop`]: the residual model and its propose/verify/vote/merge loop
//! - [`netsim`]: deterministic discrete-event scenarios
//! - [`dit`]: detectability/trackability/identifiability scores

pub mod astro;
pub mod dit;
pub mod fedprop;
pub mod hash;
pub mod iod;
pub mod ledger;
pub mod netsim;
pub mod tasking;
pub mod tdm;
pub mod validation;

pub use hash::Digest32;
