//! Seeded transaction generation. The same seed always yields the same
//! sequence of calls; only timing varies between runs.

use passion_core::txflow::str_args;
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::config::Round;
use crate::BenchError;

/// Contract functions a round may exercise.
pub const FUNCTIONS: [&str; 6] = [
    "get_assets_from_batch",
    "store_asset",
    "query_checksum",
    "get_asset",
    "get_lineage",
    "get_history",
];

pub fn needs_pool(function: &str) -> bool {
    function != "store_asset"
}

/// One generated call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxSpec {
    pub function: String,
    pub args: Vec<Vec<u8>>,
}

const BASE_TIMESTAMP: u64 = 1_700_000_000_000;

pub(crate) fn round_rng(seed: u64, round_index: usize) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed ^ (round_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// A random (version 4) UUID drawn from `rng`.
pub fn seeded_uuid<R: RngCore>(rng: &mut R) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
}

/// A plausible sensor reading.
pub fn reading<R: Rng>(rng: &mut R) -> Vec<u8> {
    format!("{:.2}", rng.gen_range(15.0..35.0)).into_bytes()
}

/// Store-asset arguments for a new asset.
pub fn store_args(asset_id: &str, device_id: &str, payload: Vec<u8>, timestamp: u64) -> Vec<Vec<u8>> {
    let mut args = str_args([asset_id, device_id, "temperature"]);
    args.push(payload);
    args.push(timestamp.to_string().into_bytes());
    args
}

/// The calls of one round, drawing asset ids from the first
/// `round.asset_pool` entries of `pool`.
pub fn generate(
    round: &Round,
    round_index: usize,
    pool: &[String],
    device_id: &str,
    seed: u64,
) -> Result<Vec<TxSpec>, BenchError> {
    if !FUNCTIONS.contains(&round.function.as_str()) {
        return Err(BenchError::Config(format!("unsupported function {:?}", round.function)));
    }
    let pool = &pool[..round.asset_pool.min(pool.len())];
    if needs_pool(&round.function) && pool.is_empty() {
        return Err(BenchError::Config(format!("round {} has no assets to read", round.label)));
    }
    let mut rng = round_rng(seed, round_index);
    let mut out = Vec::with_capacity(round.tx_count);
    for i in 0..round.tx_count {
        let args = match round.function.as_str() {
            "get_assets_from_batch" => {
                let ids: Vec<&str> = if round.batch_size <= pool.len() {
                    index::sample(&mut rng, pool.len(), round.batch_size)
                        .into_iter()
                        .map(|j| pool[j].as_str())
                        .collect()
                } else {
                    (0..round.batch_size).map(|_| pool[rng.gen_range(0..pool.len())].as_str()).collect()
                };
                str_args(ids)
            }
            "store_asset" => {
                let id = seeded_uuid(&mut rng);
                let payload = reading(&mut rng);
                store_args(&id, device_id, payload, BASE_TIMESTAMP + i as u64 * 1000)
            }
            _ => str_args([pool[rng.gen_range(0..pool.len())].as_str()]),
        };
        out.push(TxSpec {
            function: round.function.clone(),
            args,
        });
    }
    Ok(out)
}

/// Deterministic pool of asset ids and payloads for `prepare_state`.
pub fn pool_specs(pool_size: usize, seed: u64) -> Vec<(String, Vec<u8>)> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..pool_size)
        .map(|_| {
            let id = seeded_uuid(&mut rng);
            (id, reading(&mut rng))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use passion_core::chaincode::validate_uuid;
    use proptest::prelude::*;

    fn round(function: &str, batch: usize) -> Round {
        Round {
            label: "r".into(),
            function: function.into(),
            tx_count: 20,
            send_rate_tps: 10,
            batch_size: batch,
            asset_pool: 30,
        }
    }

    #[test]
    fn pool_ids_are_valid_uuids() {
        for (id, _) in pool_specs(50, 1) {
            validate_uuid(&id).unwrap();
        }
    }

    #[test]
    fn batches_draw_distinct_ids_from_the_pool() {
        let pool: Vec<String> = pool_specs(30, 1).into_iter().map(|p| p.0).collect();
        for spec in generate(&round("get_assets_from_batch", 10), 0, &pool, "d", 9).unwrap() {
            let ids: std::collections::BTreeSet<&Vec<u8>> = spec.args.iter().collect();
            assert_eq!(ids.len(), 10);
            assert!(spec.args.iter().all(|a| pool.iter().any(|p| p.as_bytes() == a.as_slice())));
        }
    }

    proptest! {
        #[test]
        fn same_seed_same_workload(seed in any::<u64>(), batch in 1usize..40, idx in 0usize..4) {
            let pool: Vec<String> = pool_specs(30, seed).into_iter().map(|p| p.0).collect();
            for f in FUNCTIONS {
                let a = generate(&round(f, batch), idx, &pool, "d", seed).unwrap();
                let b = generate(&round(f, batch), idx, &pool, "d", seed).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.len(), 20);
            }
            prop_assert_eq!(pool_specs(30, seed), pool_specs(30, seed));
        }
    }
}
