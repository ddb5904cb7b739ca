use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorType {
    Temperature,
    Humidity,
    Gas,
    Motion,
    Pressure,
    CameraUrl,
    Other,
}

impl SensorType {
    pub const ALL: [SensorType; 7] = [
        SensorType::Temperature,
        SensorType::Humidity,
        SensorType::Gas,
        SensorType::Motion,
        SensorType::Pressure,
        SensorType::CameraUrl,
        SensorType::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SensorType::Temperature => "temperature",
            SensorType::Humidity => "humidity",
            SensorType::Gas => "gas",
            SensorType::Motion => "motion",
            SensorType::Pressure => "pressure",
            SensorType::CameraUrl => "camera_url",
            SensorType::Other => "other",
        }
    }
}

impl fmt::Display for SensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown sensor type {s:?}"))
    }
}

/// One stored sensor reading and its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Asset {
    pub asset_id: String,
    pub device_id: String,
    pub sensor_type: SensorType,
    #[serde(with = "codec::b64")]
    pub payload: Vec<u8>,
    /// Lowercase hex SHA-256 of `payload`.
    pub checksum: String,
    pub version: u64,
    pub created_tx: String,
    pub updated_tx: String,
    pub owner_org: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Right {
    Read,
    Write,
    Subscribe,
    Publish,
}

impl Right {
    pub fn as_str(&self) -> &'static str {
        match self {
            Right::Read => "read",
            Right::Write => "write",
            Right::Subscribe => "subscribe",
            Right::Publish => "publish",
        }
    }
}

impl fmt::Display for Right {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Right {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "read" => Ok(Right::Read),
            "write" => Ok(Right::Write),
            "subscribe" => Ok(Right::Subscribe),
            "publish" => Ok(Right::Publish),
            other => Err(format!("unknown right {other:?}")),
        }
    }
}

/// Parses `read,write,...`; empty entries are rejected.
pub fn parse_rights(s: &str) -> Result<BTreeSet<Right>, String> {
    s.split(',').map(str::parse).collect()
}

pub fn format_rights(rights: &BTreeSet<Right>) -> String {
    rights.iter().map(Right::as_str).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub subject: String,
    /// A device id or an MQTT-style topic filter.
    pub resource: String,
    pub rights: BTreeSet<Right>,
    pub granted_by: String,
    /// Unix ms after which the grant no longer applies; `None` = never.
    pub expires: Option<u64>,
}

impl AccessPolicy {
    pub fn active_at(&self, now: u64) -> bool {
        self.expires.is_none_or(|e| now <= e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub device_id: String,
    #[serde(with = "codec::b64")]
    pub public_key: Vec<u8>,
    pub owner_org: String,
    pub registered_tx: String,
    pub topics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeRecord {
    pub challenge_id: String,
    #[serde(with = "codec::b64")]
    pub nonce: Vec<u8>,
    pub subject: String,
    pub issued_at: u64,
    pub ttl_ms: u64,
    pub used: bool,
}

impl ChallengeRecord {
    pub fn expired_at(&self, now: u64) -> bool {
        now.saturating_sub(self.issued_at) > self.ttl_ms
    }
}

/// The rights a subject holds on one resource.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub resource: String,
    pub rights: BTreeSet<Right>,
}

/// Outcome of a successful challenge verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifiedChallenge {
    pub subject: String,
    /// Union of all active rights.
    pub rights: BTreeSet<Right>,
    pub grants: Vec<Grant>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub version: u64,
    pub tx_id: String,
    pub checksum: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetHistoryEntry {
    pub tx_id: String,
    pub timestamp: u64,
    pub block_num: u64,
    pub tx_num: u64,
    /// `None` when the key was deleted by this transaction.
    pub asset: Option<Asset>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorInfo {
    pub device: DeviceRecord,
    /// Most recent asset per sensor type, ordered by type.
    pub latest: Vec<Asset>,
}

/// Written next to each version snapshot so assets can be found by the
/// transaction that wrote them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct TxRef {
    pub asset_id: String,
    pub version: u64,
}
