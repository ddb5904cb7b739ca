use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use log::debug;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::codec::Digest;
use crate::ledger::{Block, Transaction};

use super::clock::Clock;
use super::TxFlowError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrdererMode {
    #[default]
    Solo,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrdererConfig {
    pub mode: OrdererMode,
    pub max_block_txs: usize,
    pub batch_timeout: Duration,
}

impl Default for OrdererConfig {
    fn default() -> Self {
        OrdererConfig {
            mode: OrdererMode::Solo,
            max_block_txs: 10,
            batch_timeout: Duration::from_millis(500),
        }
    }
}

#[derive(Debug)]
struct Cursor {
    next_number: u64,
    prev_hash: Digest,
}

#[derive(Debug)]
struct Batch {
    txs: Vec<Transaction>,
    first_at: Instant,
}

/// Single-node ordering: transactions are batched per channel in arrival
/// order and cut into a block when the batch is full or has waited for the
/// batch timeout. Nothing is validated here.
#[derive(Debug)]
pub struct SoloOrderer {
    config: OrdererConfig,
    cursors: HashMap<String, Cursor>,
    pending: BTreeMap<String, Batch>,
}

impl SoloOrderer {
    pub fn new(config: OrdererConfig) -> Result<Self, TxFlowError> {
        if config.max_block_txs == 0 {
            return Err(TxFlowError::Config("max_block_txs must be at least 1".into()));
        }
        Ok(SoloOrderer {
            config,
            cursors: HashMap::new(),
            pending: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OrdererConfig {
        &self.config
    }

    /// Starts ordering for a channel whose chain currently has `height`
    /// blocks ending in `head_hash`.
    pub fn join(&mut self, channel_id: &str, height: u64, head_hash: Digest) {
        self.cursors.insert(
            channel_id.to_string(),
            Cursor {
                next_number: height,
                prev_hash: head_hash,
            },
        );
    }

    /// Enqueues `tx`; returns a block if this filled the batch.
    pub fn submit(&mut self, tx: Transaction, now: Instant, timestamp: u64) -> Result<Option<Block>, TxFlowError> {
        let channel = tx.channel_id.clone();
        if !self.cursors.contains_key(&channel) {
            return Err(TxFlowError::UnknownChannel(channel));
        }
        let batch = self.pending.entry(channel.clone()).or_insert_with(|| Batch {
            txs: Vec::new(),
            first_at: now,
        });
        batch.txs.push(tx);
        if batch.txs.len() >= self.config.max_block_txs {
            return Ok(self.cut(&channel, timestamp));
        }
        Ok(None)
    }

    /// Cuts whatever is pending for `channel_id`.
    pub fn cut(&mut self, channel_id: &str, timestamp: u64) -> Option<Block> {
        let batch = self.pending.remove(channel_id)?;
        let cursor = self.cursors.get_mut(channel_id)?;
        let block = Block::new(cursor.next_number, cursor.prev_hash, timestamp, batch.txs);
        cursor.next_number += 1;
        cursor.prev_hash = block.header_hash();
        Some(block)
    }

    /// Cuts every batch whose timeout has elapsed.
    pub fn poll(&mut self, now: Instant, timestamp: u64) -> Vec<Block> {
        let due: Vec<String> = self
            .pending
            .iter()
            .filter(|(_, b)| now.duration_since(b.first_at) >= self.config.batch_timeout)
            .map(|(c, _)| c.clone())
            .collect();
        due.iter().filter_map(|c| self.cut(c, timestamp)).collect()
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.pending.values().map(|b| b.first_at + self.config.batch_timeout).min()
    }
}

enum Command {
    Submit(Transaction),
    Join {
        channel_id: String,
        height: u64,
        head_hash: Digest,
    },
    Stop,
}

/// The orderer running on its own thread, broadcasting cut blocks to the
/// committing peers of each channel.
pub struct OrdererService {
    commands: Sender<Command>,
    subscribers: Arc<Mutex<HashMap<String, Vec<Sender<Block>>>>>,
    stopped: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl OrdererService {
    pub fn start(config: OrdererConfig, clock: Arc<dyn Clock>) -> Result<Self, TxFlowError> {
        let core = SoloOrderer::new(config)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let subscribers: Arc<Mutex<HashMap<String, Vec<Sender<Block>>>>> = Arc::default();
        let stopped = Arc::new(AtomicBool::new(false));
        let thread = {
            let subscribers = subscribers.clone();
            let stopped = stopped.clone();
            std::thread::Builder::new()
                .name("solo-orderer".into())
                .spawn(move || run(core, rx, subscribers, clock, stopped))
                .map_err(|e| TxFlowError::Config(e.to_string()))?
        };
        Ok(OrdererService {
            commands: tx,
            subscribers,
            stopped,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn join(&self, channel_id: &str, height: u64, head_hash: Digest, subscribers: Vec<Sender<Block>>) {
        self.subscribers
            .lock()
            .entry(channel_id.to_string())
            .or_default()
            .extend(subscribers);
        let _ = self.commands.send(Command::Join {
            channel_id: channel_id.to_string(),
            height,
            head_hash,
        });
    }

    pub fn submit(&self, tx: Transaction) -> Result<(), TxFlowError> {
        if self.stopped.load(Ordering::SeqCst) {
            return Err(TxFlowError::OrdererUnavailable);
        }
        self.commands
            .send(Command::Submit(tx))
            .map_err(|_| TxFlowError::OrdererUnavailable)
    }

    pub fn is_running(&self) -> bool {
        !self.stopped.load(Ordering::SeqCst)
    }

    /// Stops ordering; later submissions fail and pending transactions are
    /// discarded.
    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
        let _ = self.commands.send(Command::Stop);
        if let Some(handle) = self.thread.lock().take() {
            let _ = handle.join();
        }
    }
}

impl Drop for OrdererService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn run(
    mut core: SoloOrderer,
    rx: Receiver<Command>,
    subscribers: Arc<Mutex<HashMap<String, Vec<Sender<Block>>>>>,
    clock: Arc<dyn Clock>,
    stopped: Arc<AtomicBool>,
) {
    let deliver = |block: Block| {
        let channel = block.transactions[0].channel_id.clone();
        debug!("cut block {} on {channel} with {} txs", block.number, block.transactions.len());
        if let Some(subs) = subscribers.lock().get_mut(&channel) {
            subs.retain(|s| s.send(block.clone()).is_ok());
        }
    };
    loop {
        let msg = match core.next_deadline() {
            Some(deadline) => rx.recv_deadline(deadline),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match msg {
            Ok(Command::Submit(tx)) => match core.submit(tx, Instant::now(), clock.now_ms()) {
                Ok(Some(block)) => deliver(block),
                Ok(None) => {}
                Err(e) => debug!("orderer dropped transaction: {e}"),
            },
            Ok(Command::Join {
                channel_id,
                height,
                head_hash,
            }) => core.join(&channel_id, height, head_hash),
            Ok(Command::Stop) | Err(RecvTimeoutError::Disconnected) => break,
            Err(RecvTimeoutError::Timeout) => {}
        }
        for block in core.poll(Instant::now(), clock.now_ms()) {
            deliver(block);
        }
    }
    stopped.store(true, Ordering::SeqCst);
}
