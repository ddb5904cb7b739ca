//! The IoT access-control contract and a typed client for it.
//!
//! World-state layout: `asset/<id>`, `dev/<id>`, `pol/<subject>/<resource>`,
//! `chal/<id>`, `ver/<asset_id>/<version:010>`, plus the indexes
//! `tx/<tx_id>` and `latest/<device>/<sensor_type>`.

mod contract;
mod model;

use std::collections::BTreeSet;

use serde::de::DeserializeOwned;

pub use contract::{validate_uuid, ContractError, PassionContract, CHAINCODE_ID, DEFAULT_CHALLENGE_TTL_MS};
pub use model::{
    format_rights, parse_rights, AccessPolicy, Asset, AssetHistoryEntry, ChallengeRecord, DeviceRecord, Grant,
    LineageEntry, Right, SensorInfo, SensorType, VerifiedChallenge,
};

use crate::codec;
use crate::ledger::ValidationCode;
use crate::txflow::{str_args, Client, CommitResult, TxFlowError};

#[derive(Debug, thiserror::Error)]
pub enum AccessError {
    #[error(transparent)]
    Flow(#[from] TxFlowError),
    #[error("transaction {tx_id} committed as {flag:?}")]
    Rejected { tx_id: String, flag: ValidationCode },
    #[error("undecodable response: {0}")]
    Decode(String),
}

impl AccessError {
    /// The contract error code, when the contract rejected the call.
    pub fn code(&self) -> Option<&str> {
        match self {
            AccessError::Flow(TxFlowError::Chaincode(e)) => Some(&e.code),
            _ => None,
        }
    }
}

/// Typed calls into the contract on one channel. Updates go through the full
/// pipeline and fail unless committed `Valid`; queries are single-peer.
#[derive(Debug, Clone)]
pub struct AccessControl {
    client: Client,
    channel: String,
}

fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, AccessError> {
    serde_json::from_slice(bytes).map_err(|e| AccessError::Decode(e.to_string()))
}

impl AccessControl {
    pub fn new(client: Client, channel: impl Into<String>) -> Self {
        AccessControl {
            client,
            channel: channel.into(),
        }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    /// Runs `function` through ordering and commit.
    pub fn submit(&self, function: &str, args: Vec<Vec<u8>>) -> Result<CommitResult, AccessError> {
        let r = self.client.invoke(&self.channel, CHAINCODE_ID, function, args)?;
        if r.flag != ValidationCode::Valid {
            return Err(AccessError::Rejected {
                tx_id: r.tx_id,
                flag: r.flag,
            });
        }
        Ok(r)
    }

    pub fn evaluate(&self, function: &str, args: Vec<Vec<u8>>) -> Result<Vec<u8>, AccessError> {
        Ok(self.client.query(&self.channel, CHAINCODE_ID, function, args)?)
    }

    pub fn store_asset(
        &self,
        asset_id: &str,
        device_id: &str,
        sensor_type: SensorType,
        payload: &[u8],
        timestamp: u64,
    ) -> Result<(Asset, CommitResult), AccessError> {
        let mut args = str_args([asset_id, device_id, sensor_type.as_str()]);
        args.push(payload.to_vec());
        args.push(timestamp.to_string().into_bytes());
        let r = self.submit("store_asset", args)?;
        Ok((decode(&r.payload)?, r))
    }

    pub fn query_checksum(&self, asset_id: &str) -> Result<String, AccessError> {
        let b = self.evaluate("query_checksum", str_args([asset_id]))?;
        String::from_utf8(b).map_err(|e| AccessError::Decode(e.to_string()))
    }

    pub fn get_asset(&self, asset_id: &str) -> Result<Asset, AccessError> {
        decode(&self.evaluate("get_asset", str_args([asset_id]))?)
    }

    pub fn get_asset_by_txid(&self, tx_id: &str) -> Result<Asset, AccessError> {
        decode(&self.evaluate("get_asset_by_txid", str_args([tx_id]))?)
    }

    pub fn get_version_by_txid(&self, tx_id: &str) -> Result<u64, AccessError> {
        let b = self.evaluate("get_version_by_txid", str_args([tx_id]))?;
        std::str::from_utf8(&b)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| AccessError::Decode("version is not an integer".into()))
    }

    pub fn get_lineage(&self, asset_id: &str) -> Result<Vec<LineageEntry>, AccessError> {
        decode(&self.evaluate("get_lineage", str_args([asset_id]))?)
    }

    pub fn get_history(&self, asset_id: &str) -> Result<Vec<AssetHistoryEntry>, AccessError> {
        decode(&self.evaluate("get_history", str_args([asset_id]))?)
    }

    pub fn get_asset_version(&self, asset_id: &str, version: u64) -> Result<Asset, AccessError> {
        decode(&self.evaluate("get_asset_version", str_args([asset_id.to_string(), version.to_string()]))?)
    }

    pub fn key_range_query(&self, start_id: &str, end_id: &str) -> Result<Vec<Asset>, AccessError> {
        decode(&self.evaluate("key_range_query", str_args([start_id, end_id]))?)
    }

    pub fn get_sensor_info(&self, device_id: &str) -> Result<SensorInfo, AccessError> {
        decode(&self.evaluate("get_sensor_info", str_args([device_id]))?)
    }

    pub fn register_device(&self, device_id: &str, public_key: &[u8], topics: &[&str]) -> Result<DeviceRecord, AccessError> {
        let r = self.submit(
            "register_device",
            str_args([device_id.to_string(), codec::b64_encode(public_key), topics.join(",")]),
        )?;
        decode(&r.payload)
    }

    pub fn grant(
        &self,
        subject: &str,
        resource: &str,
        rights: &BTreeSet<Right>,
        expires: Option<u64>,
    ) -> Result<AccessPolicy, AccessError> {
        let expires = expires.map_or_else(|| "never".to_string(), |e| e.to_string());
        let r = self.submit(
            "grant",
            str_args([subject.to_string(), resource.to_string(), format_rights(rights), expires]),
        )?;
        decode(&r.payload)
    }

    pub fn revoke_grant(&self, subject: &str, resource: &str) -> Result<(), AccessError> {
        self.submit("revoke_grant", str_args([subject, resource]))?;
        Ok(())
    }

    pub fn get_grants(&self, subject: &str) -> Result<Vec<AccessPolicy>, AccessError> {
        decode(&self.evaluate("get_grants", str_args([subject]))?)
    }

    /// Issues and commits a challenge for `subject`.
    pub fn issue_challenge(&self, subject: &str) -> Result<ChallengeRecord, AccessError> {
        let r = self.submit("issue_challenge", str_args([subject]))?;
        decode(&r.payload)
    }

    /// Verifies the signed challenge and commits its use.
    pub fn verify_challenge(&self, challenge_id: &str, signature: &[u8]) -> Result<VerifiedChallenge, AccessError> {
        let r = self.submit(
            "verify_challenge",
            str_args([challenge_id.to_string(), codec::b64_encode(signature)]),
        )?;
        decode(&r.payload)
    }

    pub fn get_assets_from_batch(&self, ids: &[&str]) -> Result<Vec<Option<Asset>>, AccessError> {
        decode(&self.evaluate("get_assets_from_batch", str_args(ids))?)
    }
}
