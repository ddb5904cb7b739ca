//! Core of the PASSION ledger: membership services, the per-channel block
//! store and world state, the execute-order-validate transaction pipeline and
//! the built-in IoT access-control contract.

pub mod codec;
pub mod identity;
pub mod ledger;
pub mod txflow;
pub mod chaincode;
pub mod config;
