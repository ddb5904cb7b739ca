use std::path::PathBuf;

use passion_core::ledger::Backend;
use serde::{Deserialize, Serialize};

use crate::BenchError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Round {
    pub label: String,
    pub function: String,
    pub tx_count: usize,
    pub send_rate_tps: u32,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Assets the round draws from; they are created before the first round.
    #[serde(default)]
    pub asset_pool: usize,
}

fn one() -> usize {
    1
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub state_db: Backend,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_path: Option<PathBuf>,
    pub rounds: Vec<Round>,
}

impl BenchmarkConfig {
    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        let c: BenchmarkConfig = serde_json::from_str(s).map_err(|e| BenchError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.rounds.is_empty() {
            return bad("no rounds configured".into());
        }
        for r in &self.rounds {
            if r.send_rate_tps == 0 {
                return bad(format!("round {}: send_rate_tps must be at least 1", r.label));
            }
            if r.batch_size == 0 {
                return bad(format!("round {}: batch_size must be at least 1", r.label));
            }
            if crate::workload::needs_pool(&r.function) && r.asset_pool == 0 {
                return bad(format!("round {}: {} needs a non-empty asset_pool", r.label, r.function));
            }
            if !crate::workload::FUNCTIONS.contains(&r.function.as_str()) {
                return bad(format!("round {}: unsupported function {:?}", r.label, r.function));
            }
        }
        Ok(())
    }

    /// Largest pool any round needs.
    pub fn pool_size(&self) -> usize {
        self.rounds.iter().map(|r| r.asset_pool).max().unwrap_or(0)
    }

    /// Pool of 500 assets, batch sizes 1/10/20/50 at 50 TPS.
    pub fn batch_sweep(tx_count: usize) -> Self {
        BenchmarkConfig {
            workers: 2,
            seed: 42,
            state_db: Backend::EmbeddedKv,
            report_path: None,
            rounds: [1, 10, 20, 50]
                .into_iter()
                .map(|b| Round {
                    label: format!("batch-{b}"),
                    function: "get_assets_from_batch".into(),
                    tx_count,
                    send_rate_tps: 50,
                    batch_size: b,
                    asset_pool: 500,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_the_documented_example() {
        let c = BenchmarkConfig::from_json(
            r#"{"workers":2,"seed":42,"state_db":"embedded-kv","rounds":[{"label":"batch-10","function":"get_assets_from_batch","tx_count":200,"send_rate_tps":50,"batch_size":10,"asset_pool":500}]}"#,
        )
        .unwrap();
        assert_eq!(c.workers, 2);
        assert_eq!(c.rounds[0].batch_size, 10);
        assert_eq!(c.pool_size(), 500);
    }

    #[test]
    fn rejects_invalid() {
        let mut c = BenchmarkConfig::batch_sweep(10);
        c.workers = 0;
        assert!(c.validate().is_err());
        let mut c = BenchmarkConfig::batch_sweep(10);
        c.rounds[0].send_rate_tps = 0;
        assert!(c.validate().is_err());
        let mut c = BenchmarkConfig::batch_sweep(10);
        c.rounds[1].batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = BenchmarkConfig::batch_sweep(10);
        c.rounds.clear();
        assert!(c.validate().is_err());
        let mut c = BenchmarkConfig::batch_sweep(10);
        c.rounds[0].function = "drop_tables".into();
        assert!(c.validate().is_err());
    }
}
