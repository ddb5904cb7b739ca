use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::identity::{Certificate, MspRegistry};
use crate::ledger::{HistoryEntry, KvRead, KvWrite, LedgerView, ObservedKey, RangeRead, ReadWriteSet, Version};

/// World-state prefix under which deployed chaincode definitions live.
pub const LIFECYCLE_PREFIX: &str = "_lifecycle/";

/// A failure reported by a chaincode function; rejects the proposal.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ChaincodeError {
    pub code: String,
    pub message: String,
}

impl ChaincodeError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        ChaincodeError {
            code: code.into(),
            message: message.into(),
        }
    }
}

/// Contract code run by endorsing peers. Implementations must be pure over
/// (function, args, proposal header, state snapshot) so every endorser
/// produces the same read/write set.
pub trait Chaincode: Send + Sync {
    fn invoke(&self, ctx: &mut TxContext<'_>, function: &str, args: &[Vec<u8>]) -> Result<Vec<u8>, ChaincodeError>;
}

#[derive(Default, Clone)]
pub struct ChaincodeRegistry {
    contracts: Arc<RwLock<HashMap<String, Arc<dyn Chaincode>>>>,
}

impl fmt::Debug for ChaincodeRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<String> = self.contracts.read().keys().cloned().collect();
        names.sort();
        f.debug_struct("ChaincodeRegistry").field("installed", &names).finish()
    }
}

impl ChaincodeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn install(&self, id: &str, code: Arc<dyn Chaincode>) {
        self.contracts.write().insert(id.to_string(), code);
    }

    pub fn get(&self, id: &str) -> Option<Arc<dyn Chaincode>> {
        self.contracts.read().get(id).cloned()
    }
}

/// Simulation context handed to chaincode. Reads come from the snapshot the
/// peer holds for the duration of the call (a transaction does not observe
/// its own pending writes); every access is recorded for MVCC validation.
pub struct TxContext<'a> {
    view: &'a LedgerView<'a>,
    msp: &'a MspRegistry,
    creator: &'a Certificate,
    tx_id: &'a str,
    channel_id: &'a str,
    timestamp: u64,
    reads: BTreeMap<String, Option<Version>>,
    writes: BTreeMap<String, Option<Vec<u8>>>,
    range_reads: Vec<RangeRead>,
}

impl<'a> TxContext<'a> {
    pub fn new(
        view: &'a LedgerView<'a>,
        msp: &'a MspRegistry,
        creator: &'a Certificate,
        tx_id: &'a str,
        channel_id: &'a str,
        timestamp: u64,
    ) -> Self {
        TxContext {
            view,
            msp,
            creator,
            tx_id,
            channel_id,
            timestamp,
            reads: BTreeMap::new(),
            writes: BTreeMap::new(),
            range_reads: Vec::new(),
        }
    }

    pub fn creator(&self) -> &Certificate {
        self.creator
    }

    pub fn tx_id(&self) -> &str {
        self.tx_id
    }

    pub fn channel_id(&self) -> &str {
        self.channel_id
    }

    /// The proposal's client-supplied timestamp (ms).
    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }

    pub fn msp(&self) -> &MspRegistry {
        self.msp
    }

    pub fn get_state(&mut self, key: &str) -> Option<Vec<u8>> {
        let current = self.view.state_get(key);
        self.reads
            .entry(key.to_string())
            .or_insert_with(|| current.as_ref().map(|v| v.version));
        current.map(|v| v.value)
    }

    pub fn put_state(&mut self, key: &str, value: Vec<u8>) {
        self.writes.insert(key.to_string(), Some(value));
    }

    pub fn del_state(&mut self, key: &str) {
        self.writes.insert(key.to_string(), None);
    }

    /// Committed entries in `[start, end)`, recorded as a range read so a
    /// phantom insert or delete before commit invalidates the transaction.
    pub fn get_state_range(&mut self, start: &str, end: &str) -> Result<Vec<(String, Vec<u8>)>, ChaincodeError> {
        let entries = self
            .view
            .range_query(start, end)
            .map_err(|e| ChaincodeError::new("INVALID_RANGE", e.to_string()))?;
        self.range_reads.push(RangeRead {
            start: start.to_string(),
            end: end.to_string(),
            observed: entries
                .iter()
                .map(|(k, v)| ObservedKey {
                    key: k.clone(),
                    version: v.version,
                })
                .collect(),
        });
        Ok(entries.into_iter().map(|(k, v)| (k, v.value)).collect())
    }

    /// Committed history of `key`; not part of the MVCC read set.
    pub fn get_history(&self, key: &str) -> Vec<HistoryEntry> {
        self.view.history_query(key)
    }

    pub fn into_rw_set(self) -> ReadWriteSet {
        ReadWriteSet {
            reads: self
                .reads
                .into_iter()
                .map(|(key, version)| KvRead { key, version })
                .collect(),
            writes: self
                .writes
                .into_iter()
                .map(|(key, value)| KvWrite { key, value })
                .collect(),
            range_reads: self.range_reads,
        }
    }
}

/// System chaincode that records which contracts are deployed on a channel.
/// `deploy(name, version)` is restricted to admins.
#[derive(Debug, Default, Clone, Copy)]
pub struct Lifecycle;

/// Id under which [`Lifecycle`] is installed.
pub const LIFECYCLE_CHAINCODE: &str = "_lifecycle";

impl Chaincode for Lifecycle {
    fn invoke(&self, ctx: &mut TxContext<'_>, function: &str, args: &[Vec<u8>]) -> Result<Vec<u8>, ChaincodeError> {
        let arg = |i: usize| {
            args.get(i)
                .and_then(|a| std::str::from_utf8(a).ok())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| ChaincodeError::new("BAD_ARGS", format!("argument {i} missing or not text")))
        };
        match function {
            "deploy" => {
                if ctx.creator().role != crate::identity::Role::Admin {
                    return Err(ChaincodeError::new("FORBIDDEN", "only admins deploy chaincode"));
                }
                let (name, version) = (arg(0)?, arg(1)?);
                if name.starts_with('_') {
                    return Err(ChaincodeError::new("BAD_ARGS", "system chaincode is not deployable"));
                }
                let key = format!("{LIFECYCLE_PREFIX}{name}");
                ctx.put_state(&key, version.as_bytes().to_vec());
                Ok(version.as_bytes().to_vec())
            }
            "query" => {
                let key = format!("{LIFECYCLE_PREFIX}{}", arg(0)?);
                ctx.get_state(&key)
                    .ok_or_else(|| ChaincodeError::new("NOT_FOUND", format!("{key} is not deployed")))
            }
            other => Err(ChaincodeError::new("UNKNOWN_FUNCTION", other)),
        }
    }
}
