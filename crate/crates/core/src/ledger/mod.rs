//! Per-channel hash-chained block store, versioned world state and history.

mod block;
mod channel;
mod export;
mod state;

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

pub use block::{
    verify_chain, verify_encoded_chain, Block, BlockHeader, BrokenLink, ChannelConfig, Endorsement, KvRead,
    KvWrite, ObservedKey, ProposalFields, RangeRead, ReadWriteSet, Transaction, ValidationCode, Version,
    CONFIG_CHAINCODE, CONFIG_FUNCTION,
};
pub use channel::{Channel, HistoryEntry, LedgerView};
pub use export::{block_file_name, export_block, export_channel, read_exported};
pub use state::{Backend, DocumentStore, EmbeddedKv, StateStore, VersionedValue};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("channel {0:?} already exists")]
    ChannelExists(String),
    #[error("prev_hash of block {block} does not match the chain head")]
    ChainMismatch { block: u64 },
    #[error("expected block {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("invalid range [{start:?}, {end:?})")]
    InvalidRange { start: String, end: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("org {org:?} is not a member of channel {channel:?}")]
    NotMember { org: String, channel: String },
    #[error("malformed block: {0}")]
    MalformedBlock(String),
}

/// The channels a peer has joined.
#[derive(Debug, Default)]
pub struct Ledger {
    channels: RwLock<HashMap<String, Arc<Channel>>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn join(&self, genesis: Block, backend: Backend) -> Result<Arc<Channel>, LedgerError> {
        let channel = Arc::new(Channel::create(genesis, backend)?);
        self.insert(channel.clone())?;
        Ok(channel)
    }

    pub fn insert(&self, channel: Arc<Channel>) -> Result<(), LedgerError> {
        let id = channel.id();
        let mut channels = self.channels.write();
        if channels.contains_key(&id) {
            return Err(LedgerError::ChannelExists(id));
        }
        channels.insert(id, channel);
        Ok(())
    }

    pub fn channel(&self, id: &str) -> Result<Arc<Channel>, LedgerError> {
        self.channels
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| LedgerError::UnknownChannel(id.to_string()))
    }

    /// The channel, provided `org` is one of its members.
    pub fn channel_for(&self, org: &str, id: &str) -> Result<Arc<Channel>, LedgerError> {
        let channel = self.channel(id)?;
        channel.ensure_member(org)?;
        Ok(channel)
    }

    pub fn channel_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.channels.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn state_get(&self, channel: &str, key: &str) -> Result<Option<VersionedValue>, LedgerError> {
        Ok(self.channel(channel)?.state_get(key))
    }

    pub fn range_query(
        &self,
        channel: &str,
        start: &str,
        end: &str,
    ) -> Result<Vec<(String, VersionedValue)>, LedgerError> {
        self.channel(channel)?.range_query(start, end)
    }

    pub fn history_query(&self, channel: &str, key: &str) -> Result<Vec<HistoryEntry>, LedgerError> {
        Ok(self.channel(channel)?.history_query(key))
    }
}
