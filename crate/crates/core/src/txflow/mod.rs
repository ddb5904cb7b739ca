//! Execute-order-validate: peers simulate and endorse proposals, a solo
//! orderer batches endorsed transactions into blocks, and every peer
//! validates and commits each block independently.

mod clock;
mod network;
mod orderer;
mod peer;
mod policy;
mod proposal;
mod stub;
mod validate;

pub use clock::{Clock, ManualClock, SystemClock};
pub use network::{Client, CommitResult, Network, NetworkOptions, PendingTx};
pub use orderer::{OrdererConfig, OrdererMode, OrdererService, SoloOrderer};
pub use peer::{CommitEvent, Peer, ProposalResponse, MAX_CLOCK_SKEW_MS};
pub use policy::{check_policy, EndorsementPolicy, PolicyParseError};
pub use proposal::{str_args, Proposal};
pub use stub::{Chaincode, ChaincodeError, ChaincodeRegistry, Lifecycle, TxContext, LIFECYCLE_CHAINCODE, LIFECYCLE_PREFIX};
pub use validate::validate_block;

use crate::identity::IdentityError;
use crate::ledger::LedgerError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TxFlowError {
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("chaincode error {0}")]
    Chaincode(#[from] ChaincodeError),
    #[error("org {org:?} is not a member of channel {channel:?}")]
    NotMember { org: String, channel: String },
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("endorsements carry different read/write sets")]
    MixedReadWriteSets,
    #[error("endorsement policy not satisfied: {0}")]
    PolicyUnsatisfied(String),
    #[error("transaction {0} was already submitted")]
    DuplicateTransaction(String),
    #[error("no commit notification for {0} before the deadline")]
    Timeout(String),
    #[error("ordering service unavailable")]
    OrdererUnavailable,
    #[error("unknown peer {0:?}")]
    UnknownPeer(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Ledger(LedgerError),
}

impl From<LedgerError> for TxFlowError {
    fn from(e: LedgerError) -> Self {
        match e {
            LedgerError::NotMember { org, channel } => TxFlowError::NotMember { org, channel },
            LedgerError::UnknownChannel(c) => TxFlowError::UnknownChannel(c),
            other => TxFlowError::Ledger(other),
        }
    }
}

#[cfg(test)]
mod tests;
