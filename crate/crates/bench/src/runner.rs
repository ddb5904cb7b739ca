use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::unbounded;
use passion_core::chaincode::{AccessControl, CHAINCODE_ID};
use passion_core::ledger::ValidationCode;

use crate::config::{BenchmarkConfig, Round};
use crate::metrics::{summarize, MetricsReport, RoundMetrics, TxSample};
use crate::workload::{self, TxSpec};
use crate::BenchError;

/// Pending submissions allowed while preparing state.
const PREPARE_WINDOW: usize = 200;

/// Drives the contract on one channel as one identity. The identity must be
/// able to write and read the assets of `device_id`.
#[derive(Debug, Clone)]
pub struct Bench {
    access: AccessControl,
    device_id: String,
}

impl Bench {
    pub fn new(access: AccessControl, device_id: impl Into<String>) -> Self {
        Bench {
            access,
            device_id: device_id.into(),
        }
    }

    /// Commits `pool_size` seeded assets and returns their ids.
    pub fn prepare_state(&self, pool_size: usize, seed: u64) -> Result<Vec<String>, BenchError> {
        let client = self.access.client();
        let specs = workload::pool_specs(pool_size, seed);
        let mut ids = Vec::with_capacity(pool_size);
        for chunk in specs.chunks(PREPARE_WINDOW) {
            let mut pending = Vec::with_capacity(chunk.len());
            for (i, (id, payload)) in chunk.iter().enumerate() {
                let args = workload::store_args(id, &self.device_id, payload.clone(), 1_600_000_000_000 + i as u64);
                let p = client.proposal(self.access.channel(), CHAINCODE_ID, "store_asset", args);
                pending.push((id, client.submit_async(&p)?));
            }
            for (id, p) in pending {
                let r = p.wait()?;
                if r.flag != ValidationCode::Valid {
                    return Err(BenchError::Prepare(format!("asset {id} committed as {:?}", r.flag)));
                }
                ids.push(id.clone());
            }
        }
        Ok(ids)
    }

    /// Issues the round's transactions at its fixed rate and waits for every
    /// outcome. Transactions that time out or are invalidated count as failed.
    pub fn run_round(
        &self,
        round: &Round,
        round_index: usize,
        pool: &[String],
        workers: usize,
        seed: u64,
    ) -> Result<RoundMetrics, BenchError> {
        let specs = Arc::new(workload::generate(round, round_index, pool, &self.device_id, seed)?);
        let interval = Duration::from_secs_f64(1.0 / f64::from(round.send_rate_tps.max(1)));
        let next = Arc::new(AtomicUsize::new(0));
        let start = Instant::now();
        let mut handles = Vec::new();
        for _ in 0..workers.max(1) {
            let specs = specs.clone();
            let next = next.clone();
            let access = self.access.clone();
            handles.push(thread::spawn(move || worker(&access, &specs, &next, start, interval)));
        }
        let mut samples = Vec::with_capacity(specs.len());
        for h in handles {
            samples.extend(h.join().map_err(|_| BenchError::Worker)?);
        }
        let m = summarize(&round.label, &samples);
        log::info!(
            "{}: {} submitted, {} committed, {:.1} TPS",
            m.label,
            m.submitted,
            m.committed,
            m.throughput
        );
        Ok(m)
    }

    /// Prepares the largest pool any round needs, then runs the rounds in order.
    pub fn run(&self, config: &BenchmarkConfig) -> Result<MetricsReport, BenchError> {
        config.validate()?;
        let pool = self.prepare_state(config.pool_size(), config.seed)?;
        let mut report = MetricsReport::default();
        for (i, round) in config.rounds.iter().enumerate() {
            report
                .rounds
                .push(self.run_round(round, i, &pool, config.workers, config.seed)?);
        }
        Ok(report)
    }
}

// Workers share one schedule: transaction i is due at start + (i + 1) / rate.
// Each worker hands pending transactions to its own collector thread so
// waiting for commits never delays sending.
fn worker(
    access: &AccessControl,
    specs: &[TxSpec],
    next: &AtomicUsize,
    start: Instant,
    interval: Duration,
) -> Vec<TxSample> {
    let (tx, rx) = unbounded();
    let collector = thread::spawn(move || {
        let mut samples = Vec::new();
        for (pending, submitted_at) in rx {
            let pending: passion_core::txflow::PendingTx = pending;
            let latency = match pending.wait() {
                Ok(r) if r.flag == ValidationCode::Valid => Some(r.latency),
                Ok(r) => {
                    log::debug!("{} committed as {:?}", r.tx_id, r.flag);
                    None
                }
                Err(e) => {
                    log::debug!("{e}");
                    None
                }
            };
            samples.push(TxSample {
                submitted_at,
                done_at: start.elapsed(),
                latency,
            });
        }
        samples
    });
    let client = access.client();
    let mut failed_early = Vec::new();
    loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(spec) = specs.get(i) else { break };
        let due = start + interval * (i as u32 + 1);
        let now = Instant::now();
        if due > now {
            thread::sleep(due - now);
        }
        let proposal = client.proposal(access.channel(), CHAINCODE_ID, &spec.function, spec.args.clone());
        let submitted_at = start.elapsed();
        match client.submit_async(&proposal) {
            Ok(p) => {
                let _ = tx.send((p, submitted_at));
            }
            Err(e) => {
                log::debug!("submit failed: {e}");
                failed_early.push(TxSample {
                    submitted_at,
                    done_at: start.elapsed(),
                    latency: None,
                });
            }
        }
    }
    drop(tx);
    let mut samples = collector.join().unwrap_or_default();
    samples.extend(failed_early);
    samples
}
