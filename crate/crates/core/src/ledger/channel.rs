use std::collections::{BTreeSet, HashMap};

use parking_lot::{RwLock, RwLockReadGuard};

use super::block::{verify_chain, Block, BrokenLink, ChannelConfig, Transaction, ValidationCode, Version};
use super::state::{Backend, StateStore, VersionedValue};
use super::LedgerError;
use crate::codec::Digest;

/// One committed write to a key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    pub tx_id: String,
    /// `None` marks a deletion.
    pub value: Option<Vec<u8>>,
    pub timestamp: u64,
    pub version: Version,
}

#[derive(Debug, Clone, Copy)]
struct TxLocation {
    block: u64,
    index: usize,
}

#[derive(Debug)]
pub struct ChannelState {
    config: ChannelConfig,
    blocks: Vec<Block>,
    head_hash: Digest,
    state: Box<dyn StateStore>,
    history: HashMap<String, Vec<HistoryEntry>>,
    tx_index: HashMap<String, TxLocation>,
}

/// A channel's ledger: the block sequence, its world state and history index.
///
/// The commit path is the only writer; it holds the write lock for a whole
/// block so readers always observe a fully applied block.
#[derive(Debug)]
pub struct Channel {
    inner: RwLock<ChannelState>,
}

impl Channel {
    /// Opens a channel from its genesis block.
    pub fn create(genesis: Block, backend: Backend) -> Result<Channel, LedgerError> {
        let config = ChannelConfig::from_genesis(&genesis)
            .ok_or_else(|| LedgerError::MalformedBlock("block 0 is not a channel config block".into()))?;
        if genesis.prev_hash != Digest::ZERO || !genesis.is_self_consistent() {
            return Err(LedgerError::MalformedBlock("genesis digests do not match".into()));
        }
        let mut state = ChannelState {
            config,
            blocks: Vec::new(),
            head_hash: Digest::ZERO,
            state: backend.open(),
            history: HashMap::new(),
            tx_index: HashMap::new(),
        };
        state.commit(genesis);
        Ok(Channel {
            inner: RwLock::new(state),
        })
    }

    /// Rebuilds a channel (state and indexes) from a block sequence alone.
    pub fn replay(blocks: impl IntoIterator<Item = Block>, backend: Backend) -> Result<Channel, LedgerError> {
        let mut iter = blocks.into_iter();
        let genesis = iter
            .next()
            .ok_or_else(|| LedgerError::MalformedBlock("empty block sequence".into()))?;
        let channel = Channel::create(genesis, backend)?;
        for block in iter {
            channel.append_block(block)?;
        }
        Ok(channel)
    }

    pub fn id(&self) -> String {
        self.inner.read().config.channel_id.clone()
    }

    pub fn config(&self) -> ChannelConfig {
        self.inner.read().config.clone()
    }

    pub fn members(&self) -> BTreeSet<String> {
        self.inner.read().config.members.clone()
    }

    pub fn is_member(&self, org: &str) -> bool {
        self.inner.read().config.members.contains(org)
    }

    pub fn ensure_member(&self, org: &str) -> Result<(), LedgerError> {
        if self.is_member(org) {
            Ok(())
        } else {
            Err(LedgerError::NotMember {
                org: org.to_string(),
                channel: self.id(),
            })
        }
    }

    pub fn backend(&self) -> Backend {
        self.inner.read().state.backend()
    }

    /// A consistent read-only view; blocks the commit path while held.
    pub fn view(&self) -> LedgerView<'_> {
        LedgerView {
            guard: self.inner.read(),
        }
    }

    /// Stores a validated, sealed block and applies its valid writes.
    pub fn append_block(&self, block: Block) -> Result<(), LedgerError> {
        let mut inner = self.inner.write();
        let height = inner.blocks.len() as u64;
        if block.number != height {
            return Err(LedgerError::OutOfOrder {
                expected: height,
                got: block.number,
            });
        }
        if block.prev_hash != inner.head_hash {
            return Err(LedgerError::ChainMismatch { block: block.number });
        }
        if !block.is_self_consistent() {
            return Err(LedgerError::MalformedBlock(format!(
                "block {} digests or flags do not match its content",
                block.number
            )));
        }
        inner.commit(block);
        Ok(())
    }

    pub fn height(&self) -> u64 {
        self.inner.read().blocks.len() as u64
    }

    pub fn head_hash(&self) -> Digest {
        self.inner.read().head_hash
    }

    pub fn state_get(&self, key: &str) -> Option<VersionedValue> {
        self.view().state_get(key)
    }

    pub fn range_query(&self, start: &str, end: &str) -> Result<Vec<(String, VersionedValue)>, LedgerError> {
        self.view().range_query(start, end)
    }

    pub fn history_query(&self, key: &str) -> Vec<HistoryEntry> {
        self.view().history_query(key)
    }

    pub fn get_block(&self, number: u64) -> Result<Block, LedgerError> {
        self.view().get_block(number).cloned()
    }

    pub fn get_transaction(&self, tx_id: &str) -> Result<(u64, Transaction, ValidationCode), LedgerError> {
        let view = self.view();
        view.get_transaction(tx_id).map(|(n, tx, flag)| (n, tx.clone(), flag))
    }

    pub fn blocks(&self) -> Vec<Block> {
        self.inner.read().blocks.clone()
    }

    pub fn blocks_from(&self, start: u64) -> Vec<Block> {
        let inner = self.inner.read();
        inner.blocks.iter().skip(start as usize).cloned().collect()
    }

    pub fn verify_chain(&self) -> Result<(), BrokenLink> {
        verify_chain(&self.inner.read().blocks)
    }

    /// Every world-state entry in key order.
    pub fn state_dump(&self) -> Vec<(String, VersionedValue)> {
        self.inner.read().state.dump()
    }

    #[cfg(test)]
    pub(crate) fn tamper<F: FnOnce(&mut Block)>(&self, number: u64, f: F) {
        f(&mut self.inner.write().blocks[number as usize]);
    }
}

impl ChannelState {
    fn commit(&mut self, block: Block) {
        let number = block.number;
        for (i, (tx, flag)) in block.transactions.iter().zip(&block.validation_flags).enumerate() {
            self.tx_index.insert(tx.tx_id.clone(), TxLocation { block: number, index: i });
            if !flag.is_valid() {
                continue;
            }
            let version = Version::new(number, i as u64);
            for w in &tx.rw_set.writes {
                self.state.apply(&w.key, w.value.as_deref(), version);
                self.history.entry(w.key.clone()).or_default().push(HistoryEntry {
                    tx_id: tx.tx_id.clone(),
                    value: w.value.clone(),
                    timestamp: block.timestamp,
                    version,
                });
            }
        }
        self.head_hash = block.header_hash();
        self.blocks.push(block);
    }
}

/// Snapshot access to a channel, used for simulation and validation.
pub struct LedgerView<'a> {
    guard: RwLockReadGuard<'a, ChannelState>,
}

impl LedgerView<'_> {
    pub fn config(&self) -> &ChannelConfig {
        &self.guard.config
    }

    pub fn height(&self) -> u64 {
        self.guard.blocks.len() as u64
    }

    pub fn state_get(&self, key: &str) -> Option<VersionedValue> {
        self.guard.state.get(key)
    }

    pub fn range_query(&self, start: &str, end: &str) -> Result<Vec<(String, VersionedValue)>, LedgerError> {
        if start > end {
            return Err(LedgerError::InvalidRange {
                start: start.to_string(),
                end: end.to_string(),
            });
        }
        Ok(self.guard.state.range(start, end))
    }

    pub fn history_query(&self, key: &str) -> Vec<HistoryEntry> {
        self.guard.history.get(key).cloned().unwrap_or_default()
    }

    pub fn get_block(&self, number: u64) -> Result<&Block, LedgerError> {
        self.guard
            .blocks
            .get(number as usize)
            .ok_or_else(|| LedgerError::NotFound(format!("block {number}")))
    }

    pub fn get_transaction(&self, tx_id: &str) -> Result<(u64, &Transaction, ValidationCode), LedgerError> {
        let loc = self
            .guard
            .tx_index
            .get(tx_id)
            .ok_or_else(|| LedgerError::NotFound(format!("transaction {tx_id}")))?;
        let block = &self.guard.blocks[loc.block as usize];
        Ok((loc.block, &block.transactions[loc.index], block.validation_flags[loc.index]))
    }

    pub fn contains_tx(&self, tx_id: &str) -> bool {
        self.guard.tx_index.contains_key(tx_id)
    }
}
