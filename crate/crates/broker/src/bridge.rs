//! Asynchronous forwarding of device publishes into `store_asset`.

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Sender};
use passion_core::chaincode::{AccessControl, SensorType, CHAINCODE_ID};
use passion_core::ledger::ValidationCode;
use passion_core::txflow::str_args;
use uuid::Uuid;

use crate::broker::BridgeMessage;

/// The sensor type is the last topic level when it names one, else `other`.
pub fn sensor_type_of(topic: &str) -> SensorType {
    topic
        .rsplit('/')
        .next()
        .and_then(|l| SensorType::from_str(l).ok())
        .unwrap_or(SensorType::Other)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BridgeStats {
    pub forwarded: u64,
    pub committed: u64,
    pub failed: u64,
}

#[derive(Default)]
struct Counters {
    forwarded: AtomicU64,
    committed: AtomicU64,
    failed: AtomicU64,
}

/// Submits one `store_asset` per message, each under a fresh asset id.
/// Ledger errors are logged and counted, never reported to the publisher.
pub struct LedgerBridge {
    tx: Option<Sender<BridgeMessage>>,
    counters: Arc<Counters>,
    threads: Vec<JoinHandle<()>>,
}

impl LedgerBridge {
    pub fn start(access: AccessControl) -> Self {
        let (tx, rx) = unbounded::<BridgeMessage>();
        let (pending_tx, pending_rx) = unbounded();
        let counters = Arc::new(Counters::default());

        let c = counters.clone();
        let submitter = thread::spawn(move || {
            for m in rx {
                c.forwarded.fetch_add(1, Ordering::SeqCst);
                let asset_id = Uuid::new_v4().to_string();
                let sensor = sensor_type_of(&m.topic);
                let mut args = str_args([asset_id.as_str(), m.client_id.as_str(), sensor.as_str()]);
                args.push(m.payload);
                args.push(m.timestamp.to_string().into_bytes());
                let client = access.client();
                let proposal = client.proposal(access.channel(), CHAINCODE_ID, "store_asset", args);
                match client.submit_async(&proposal) {
                    Ok(p) => {
                        let _ = pending_tx.send((asset_id, p));
                    }
                    Err(e) => {
                        log::warn!("bridge: store_asset for {} on {} failed: {e}", m.client_id, m.topic);
                        c.failed.fetch_add(1, Ordering::SeqCst);
                    }
                }
            }
        });

        let c = counters.clone();
        let waiter = thread::spawn(move || {
            for (asset_id, pending) in pending_rx {
                let pending: passion_core::txflow::PendingTx = pending;
                match pending.wait() {
                    Ok(r) if r.flag == ValidationCode::Valid => {
                        c.committed.fetch_add(1, Ordering::SeqCst);
                    }
                    Ok(r) => {
                        log::warn!("bridge: asset {asset_id} committed as {:?}", r.flag);
                        c.failed.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(e) => {
                        log::warn!("bridge: asset {asset_id}: {e}");
                        c.failed.fetch_add(1, Ordering::SeqCst);
                    }
                }
            }
        });

        LedgerBridge {
            tx: Some(tx),
            counters,
            threads: vec![submitter, waiter],
        }
    }

    pub fn sender(&self) -> Sender<BridgeMessage> {
        self.tx.clone().expect("bridge running")
    }

    pub fn stats(&self) -> BridgeStats {
        BridgeStats {
            forwarded: self.counters.forwarded.load(Ordering::SeqCst),
            committed: self.counters.committed.load(Ordering::SeqCst),
            failed: self.counters.failed.load(Ordering::SeqCst),
        }
    }

    /// Waits until at least `expected` messages were forwarded and all of
    /// them settled.
    pub fn wait_settled(&self, expected: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            let s = self.stats();
            if s.forwarded >= expected && s.committed + s.failed == s.forwarded {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Stops accepting messages and waits for the outstanding ones.
    /// Every other sender must be dropped first.
    pub fn shutdown(mut self) -> BridgeStats {
        self.tx.take();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.stats()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sensor_type_from_last_level() {
        assert_eq!(sensor_type_of("sensors/dev-1/temperature"), SensorType::Temperature);
        assert_eq!(sensor_type_of("sensors/dev-1/camera_url"), SensorType::CameraUrl);
        assert_eq!(sensor_type_of("sensors/dev-1/raw"), SensorType::Other);
    }
}
