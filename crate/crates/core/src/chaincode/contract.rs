use std::collections::{BTreeMap, BTreeSet};

use serde::de::DeserializeOwned;
use serde::Serialize;
use uuid::Uuid;

use crate::codec::{self, Digest};
use crate::identity::{self, Role};
use crate::txflow::{Chaincode, ChaincodeError, TxContext};

use super::model::*;

/// Id under which the access-control contract is installed.
pub const CHAINCODE_ID: &str = "passion";

pub const DEFAULT_CHALLENGE_TTL_MS: u64 = 60_000;

/// Errors raised by the contract; surfaced to clients as
/// [`ChaincodeError`] with [`ContractError::code`] as the code.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ContractError {
    #[error("{0}")]
    Unauthorized(String),
    #[error("not a valid UUID: {0:?}")]
    MalformedUuid(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid range [{0:?}, {1:?})")]
    InvalidRange(String, String),
    #[error("device {0:?} is already registered")]
    DuplicateDevice(String),
    #[error("no active certificate for {0:?}")]
    UnknownSubject(String),
    #[error("challenge {0} has expired")]
    Expired(String),
    #[error("challenge {0} was already used")]
    AlreadyUsed(String),
    #[error("challenge signature does not verify")]
    BadSignature,
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
}

impl ContractError {
    pub fn code(&self) -> &'static str {
        match self {
            ContractError::Unauthorized(_) => "UNAUTHORIZED",
            ContractError::MalformedUuid(_) => "MALFORMED_UUID",
            ContractError::NotFound(_) => "NOT_FOUND",
            ContractError::InvalidRange(..) => "INVALID_RANGE",
            ContractError::DuplicateDevice(_) => "DUPLICATE_DEVICE",
            ContractError::UnknownSubject(_) => "UNKNOWN_SUBJECT",
            ContractError::Expired(_) => "EXPIRED",
            ContractError::AlreadyUsed(_) => "ALREADY_USED",
            ContractError::BadSignature => "BAD_SIGNATURE",
            ContractError::BadArgs(_) => "BAD_ARGS",
            ContractError::UnknownFunction(_) => "UNKNOWN_FUNCTION",
        }
    }
}

impl From<ContractError> for ChaincodeError {
    fn from(e: ContractError) -> Self {
        ChaincodeError::new(e.code(), e.to_string())
    }
}

type Result<T> = std::result::Result<T, ContractError>;

pub(crate) fn asset_key(id: &str) -> String {
    format!("asset/{id}")
}

pub(crate) fn device_key(id: &str) -> String {
    format!("dev/{id}")
}

pub(crate) fn policy_key(subject: &str, resource: &str) -> String {
    format!("pol/{subject}/{resource}")
}

pub(crate) fn challenge_key(id: &str) -> String {
    format!("chal/{id}")
}

/// Zero-padded so lexical key order is version order.
pub(crate) fn version_key(asset_id: &str, version: u64) -> String {
    format!("ver/{asset_id}/{version:010}")
}

fn tx_key(tx_id: &str) -> String {
    format!("tx/{tx_id}")
}

fn latest_key(device_id: &str, sensor: SensorType) -> String {
    format!("latest/{device_id}/{sensor}")
}

/// `[prefix, prefix+1)`: every key starting with `prefix` (which ends in '/').
fn prefix_range(prefix: &str) -> (String, String) {
    let mut end = prefix.to_string();
    end.pop();
    end.push('0');
    (prefix.to_string(), end)
}

pub fn validate_uuid(s: &str) -> Result<()> {
    match Uuid::try_parse(s) {
        Ok(u) if u.hyphenated().to_string() == s => Ok(()),
        _ => Err(ContractError::MalformedUuid(s.to_string())),
    }
}

/// Challenge material is a function of the transaction id alone, so every
/// endorser computes the same record; the id itself hashes the client's
/// random proposal nonce.
fn challenge_material(tx_id: &str) -> (String, Vec<u8>) {
    let id_bytes = codec::sha256(format!("challenge-id{tx_id}").as_bytes());
    let mut b = [0u8; 16];
    b.copy_from_slice(&id_bytes.0[..16]);
    let id = uuid::Builder::from_random_bytes(b).into_uuid().to_string();
    let nonce = codec::sha256(format!("challenge{tx_id}").as_bytes()).0.to_vec();
    (id, nonce)
}

/// The access-control contract: sensor assets with provenance, device
/// registration, grants, and one-time authentication challenges.
#[derive(Debug, Clone)]
pub struct PassionContract {
    challenge_ttl_ms: u64,
}

impl Default for PassionContract {
    fn default() -> Self {
        PassionContract {
            challenge_ttl_ms: DEFAULT_CHALLENGE_TTL_MS,
        }
    }
}

struct Args<'a> {
    raw: &'a [Vec<u8>],
}

impl<'a> Args<'a> {
    fn bytes(&self, i: usize) -> Result<&'a [u8]> {
        self.raw
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| ContractError::BadArgs(format!("missing argument {i}")))
    }

    fn str(&self, i: usize) -> Result<&'a str> {
        std::str::from_utf8(self.bytes(i)?).map_err(|_| ContractError::BadArgs(format!("argument {i} is not UTF-8")))
    }

    fn opt_str(&self, i: usize) -> Result<Option<&'a str>> {
        if i < self.raw.len() {
            self.str(i).map(Some)
        } else {
            Ok(None)
        }
    }

    fn u64(&self, i: usize) -> Result<u64> {
        let s = self.str(i)?;
        s.parse()
            .map_err(|_| ContractError::BadArgs(format!("argument {i} is not an integer: {s:?}")))
    }

    fn b64(&self, i: usize) -> Result<Vec<u8>> {
        codec::b64_decode(self.str(i)?).map_err(|_| ContractError::BadArgs(format!("argument {i} is not base64")))
    }
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("contract types serialize")
}

fn get_json<T: DeserializeOwned>(ctx: &mut TxContext<'_>, key: &str) -> Result<Option<T>> {
    ctx.get_state(key)
        .map(|v| serde_json::from_slice(&v).map_err(|e| ContractError::BadArgs(format!("corrupt record {key}: {e}"))))
        .transpose()
}

fn require_admin(ctx: &TxContext<'_>) -> Result<()> {
    if ctx.creator().role == Role::Admin {
        Ok(())
    } else {
        Err(ContractError::Unauthorized(format!(
            "{} is not an admin",
            ctx.creator().subject
        )))
    }
}

/// Active grants held by `subject`, keyed by resource.
fn grants_of(ctx: &mut TxContext<'_>, subject: &str) -> Result<Vec<AccessPolicy>> {
    let (start, end) = prefix_range(&format!("pol/{subject}/"));
    let now = ctx.timestamp();
    let rows = ctx
        .get_state_range(&start, &end)
        .map_err(|e| ContractError::InvalidRange(start.clone(), e.message))?;
    rows.into_iter()
        .map(|(k, v)| serde_json::from_slice::<AccessPolicy>(&v).map_err(|e| ContractError::BadArgs(format!("corrupt record {k}: {e}"))))
        .filter(|p| p.as_ref().map_or(true, |p| p.active_at(now)))
        .collect()
}

/// The creator may exercise `right` on `device_id` if it is that device, an
/// admin of the device's org, or holds an active grant naming the device.
fn may(ctx: &mut TxContext<'_>, device_id: &str, owner_org: Option<&str>, right: Right) -> Result<bool> {
    let creator = ctx.creator().clone();
    if creator.subject == device_id {
        return Ok(true);
    }
    if creator.role == Role::Admin && owner_org == Some(creator.org.as_str()) {
        return Ok(true);
    }
    let now = ctx.timestamp();
    let grant: Option<AccessPolicy> = get_json(ctx, &policy_key(&creator.subject, device_id))?;
    Ok(grant.is_some_and(|g| g.active_at(now) && g.rights.contains(&right)))
}

fn ensure(ctx: &mut TxContext<'_>, device_id: &str, owner_org: Option<&str>, right: Right) -> Result<()> {
    if may(ctx, device_id, owner_org, right)? {
        Ok(())
    } else {
        Err(ContractError::Unauthorized(format!(
            "{} may not {right} {device_id}",
            ctx.creator().subject
        )))
    }
}

fn load_asset(ctx: &mut TxContext<'_>, asset_id: &str) -> Result<Asset> {
    get_json(ctx, &asset_key(asset_id))?.ok_or_else(|| ContractError::NotFound(format!("asset {asset_id}")))
}

fn readable_asset(ctx: &mut TxContext<'_>, asset_id: &str) -> Result<Asset> {
    let asset = load_asset(ctx, asset_id)?;
    ensure(ctx, &asset.device_id, Some(&asset.owner_org), Right::Read)?;
    Ok(asset)
}

fn load_version(ctx: &mut TxContext<'_>, asset_id: &str, version: u64) -> Result<Asset> {
    get_json(ctx, &version_key(asset_id, version))?
        .ok_or_else(|| ContractError::NotFound(format!("version {version} of asset {asset_id}")))
}

impl PassionContract {
    pub fn new(challenge_ttl_ms: u64) -> Self {
        PassionContract { challenge_ttl_ms }
    }

    fn dispatch(&self, ctx: &mut TxContext<'_>, function: &str, a: &Args<'_>) -> Result<Vec<u8>> {
        match function {
            "store_asset" => {
                let sensor = a.str(2)?.parse().map_err(ContractError::BadArgs)?;
                let asset = store_asset(ctx, a.str(0)?, a.str(1)?, sensor, a.bytes(3)?.to_vec(), a.u64(4)?)?;
                Ok(to_json(&asset))
            }
            "query_checksum" => Ok(readable_asset(ctx, a.str(0)?)?.checksum.into_bytes()),
            "get_asset" => Ok(to_json(&readable_asset(ctx, a.str(0)?)?)),
            "get_asset_by_txid" => Ok(to_json(&asset_by_txid(ctx, a.str(0)?)?)),
            "get_version_by_txid" => Ok(asset_by_txid(ctx, a.str(0)?)?.version.to_string().into_bytes()),
            "get_lineage" => Ok(to_json(&lineage(ctx, a.str(0)?)?)),
            "get_history" => Ok(to_json(&history(ctx, a.str(0)?)?)),
            "get_asset_version" => {
                let asset_id = a.str(0)?;
                readable_asset(ctx, asset_id)?;
                Ok(to_json(&load_version(ctx, asset_id, a.u64(1)?)?))
            }
            "key_range_query" => Ok(to_json(&key_range(ctx, a.str(0)?, a.str(1)?)?)),
            "get_sensor_info" => Ok(to_json(&sensor_info(ctx, a.str(0)?)?)),
            "register_device" => {
                let topics = match a.opt_str(2)? {
                    Some(t) if !t.is_empty() => t.split(',').map(str::to_string).collect(),
                    _ => Vec::new(),
                };
                Ok(to_json(&register_device(ctx, a.str(0)?, a.b64(1)?, topics)?))
            }
            "grant" => {
                let rights = parse_rights(a.str(2)?).map_err(ContractError::BadArgs)?;
                let expires = match a.opt_str(3)? {
                    None | Some("never") | Some("") => None,
                    Some(_) => Some(a.u64(3)?),
                };
                Ok(to_json(&grant(ctx, a.str(0)?, a.str(1)?, rights, expires)?))
            }
            "revoke_grant" => {
                revoke_grant(ctx, a.str(0)?, a.str(1)?)?;
                Ok(Vec::new())
            }
            "get_grants" => {
                let subject = a.str(0)?;
                if subject != ctx.creator().subject {
                    require_admin(ctx)?;
                }
                Ok(to_json(&grants_of(ctx, subject)?))
            }
            "issue_challenge" => Ok(to_json(&self.issue_challenge(ctx, a.str(0)?)?)),
            "verify_challenge" => {
                // a caller-supplied time may only move the check later
                let now = match a.opt_str(2)? {
                    Some(_) => a.u64(2)?.max(ctx.timestamp()),
                    None => ctx.timestamp(),
                };
                Ok(to_json(&verify_challenge(ctx, a.str(0)?, &a.b64(1)?, now)?))
            }
            "get_assets_from_batch" => {
                let ids = (0..a.raw.len()).map(|i| a.str(i)).collect::<Result<Vec<_>>>()?;
                Ok(to_json(&assets_from_batch(ctx, &ids)?))
            }
            other => Err(ContractError::UnknownFunction(other.to_string())),
        }
    }

    fn issue_challenge(&self, ctx: &mut TxContext<'_>, subject: &str) -> Result<ChallengeRecord> {
        if ctx.msp().active_member(subject, ctx.timestamp()).is_none() {
            return Err(ContractError::UnknownSubject(subject.to_string()));
        }
        let grants = grants_of(ctx, subject)?;
        if !grants
            .iter()
            .any(|g| g.rights.contains(&Right::Subscribe) || g.rights.contains(&Right::Publish))
        {
            return Err(ContractError::Unauthorized(format!(
                "{subject} holds no subscribe or publish right"
            )));
        }
        let (challenge_id, nonce) = challenge_material(ctx.tx_id());
        let record = ChallengeRecord {
            challenge_id,
            nonce,
            subject: subject.to_string(),
            issued_at: ctx.timestamp(),
            ttl_ms: self.challenge_ttl_ms,
            used: false,
        };
        ctx.put_state(&challenge_key(&record.challenge_id), to_json(&record));
        Ok(record)
    }
}

impl Chaincode for PassionContract {
    fn invoke(
        &self,
        ctx: &mut TxContext<'_>,
        function: &str,
        args: &[Vec<u8>],
    ) -> std::result::Result<Vec<u8>, ChaincodeError> {
        Ok(self.dispatch(ctx, function, &Args { raw: args })?)
    }
}

fn store_asset(
    ctx: &mut TxContext<'_>,
    asset_id: &str,
    device_id: &str,
    sensor_type: SensorType,
    payload: Vec<u8>,
    timestamp: u64,
) -> Result<Asset> {
    validate_uuid(asset_id)?;
    let device: DeviceRecord =
        get_json(ctx, &device_key(device_id))?.ok_or_else(|| ContractError::NotFound(format!("device {device_id}")))?;
    if ctx.creator().subject != device_id && !may(ctx, device_id, None, Right::Write)? {
        return Err(ContractError::Unauthorized(format!(
            "{} may not write {device_id}",
            ctx.creator().subject
        )));
    }
    let previous: Option<Asset> = get_json(ctx, &asset_key(asset_id))?;
    if let Some(p) = &previous {
        if p.device_id != device_id {
            return Err(ContractError::Unauthorized(format!(
                "asset {asset_id} belongs to device {}",
                p.device_id
            )));
        }
    }
    let tx_id = ctx.tx_id().to_string();
    let asset = Asset {
        asset_id: asset_id.to_string(),
        device_id: device_id.to_string(),
        sensor_type,
        checksum: Digest::of(&payload).to_hex(),
        payload,
        version: previous.as_ref().map_or(1, |p| p.version + 1),
        created_tx: previous.map_or_else(|| tx_id.clone(), |p| p.created_tx),
        updated_tx: tx_id.clone(),
        owner_org: device.owner_org,
        timestamp,
    };
    let json = to_json(&asset);
    ctx.put_state(&asset_key(asset_id), json.clone());
    ctx.put_state(&version_key(asset_id, asset.version), json);
    ctx.put_state(
        &tx_key(&tx_id),
        to_json(&TxRef {
            asset_id: asset_id.to_string(),
            version: asset.version,
        }),
    );
    ctx.put_state(&latest_key(device_id, sensor_type), asset_id.as_bytes().to_vec());
    Ok(asset)
}

fn asset_by_txid(ctx: &mut TxContext<'_>, tx_id: &str) -> Result<Asset> {
    let r: TxRef = get_json(ctx, &tx_key(tx_id))?.ok_or_else(|| ContractError::NotFound(format!("transaction {tx_id}")))?;
    let asset = load_version(ctx, &r.asset_id, r.version)?;
    ensure(ctx, &asset.device_id, Some(&asset.owner_org), Right::Read)?;
    Ok(asset)
}

fn lineage(ctx: &mut TxContext<'_>, asset_id: &str) -> Result<Vec<LineageEntry>> {
    readable_asset(ctx, asset_id)?;
    let (start, end) = prefix_range(&format!("ver/{asset_id}/"));
    let rows = ctx
        .get_state_range(&start, &end)
        .map_err(|e| ContractError::InvalidRange(start.clone(), e.message))?;
    rows.into_iter()
        .map(|(k, v)| {
            let a: Asset =
                serde_json::from_slice(&v).map_err(|e| ContractError::BadArgs(format!("corrupt record {k}: {e}")))?;
            Ok(LineageEntry {
                version: a.version,
                tx_id: a.updated_tx,
                checksum: a.checksum,
                timestamp: a.timestamp,
            })
        })
        .collect()
}

fn history(ctx: &mut TxContext<'_>, asset_id: &str) -> Result<Vec<AssetHistoryEntry>> {
    readable_asset(ctx, asset_id)?;
    ctx.get_history(&asset_key(asset_id))
        .into_iter()
        .map(|h| {
            let asset = h
                .value
                .map(|v| serde_json::from_slice(&v))
                .transpose()
                .map_err(|e| ContractError::BadArgs(format!("corrupt history of {asset_id}: {e}")))?;
            Ok(AssetHistoryEntry {
                tx_id: h.tx_id,
                timestamp: h.timestamp,
                block_num: h.version.block_num,
                tx_num: h.version.tx_num,
                asset,
            })
        })
        .collect()
}

fn key_range(ctx: &mut TxContext<'_>, start_id: &str, end_id: &str) -> Result<Vec<Asset>> {
    if start_id > end_id {
        return Err(ContractError::InvalidRange(start_id.into(), end_id.into()));
    }
    let (start, end) = (asset_key(start_id), asset_key(end_id));
    let rows = ctx
        .get_state_range(&start, &end)
        .map_err(|_| ContractError::InvalidRange(start_id.into(), end_id.into()))?;
    let mut out = Vec::new();
    let mut allowed: BTreeMap<String, bool> = BTreeMap::new();
    for (k, v) in rows {
        let a: Asset = serde_json::from_slice(&v).map_err(|e| ContractError::BadArgs(format!("corrupt record {k}: {e}")))?;
        let ok = match allowed.get(&a.device_id) {
            Some(ok) => *ok,
            None => {
                let ok = may(ctx, &a.device_id, Some(&a.owner_org), Right::Read)?;
                allowed.insert(a.device_id.clone(), ok);
                ok
            }
        };
        if ok {
            out.push(a);
        }
    }
    Ok(out)
}

fn sensor_info(ctx: &mut TxContext<'_>, device_id: &str) -> Result<SensorInfo> {
    let device: DeviceRecord =
        get_json(ctx, &device_key(device_id))?.ok_or_else(|| ContractError::NotFound(format!("device {device_id}")))?;
    ensure(ctx, device_id, Some(&device.owner_org), Right::Read)?;
    let mut latest = Vec::new();
    for sensor in SensorType::ALL {
        if let Some(id) = ctx.get_state(&latest_key(device_id, sensor)) {
            let id = String::from_utf8(id).map_err(|_| ContractError::BadArgs("corrupt latest index".into()))?;
            latest.push(load_asset(ctx, &id)?);
        }
    }
    Ok(SensorInfo { device, latest })
}

fn register_device(ctx: &mut TxContext<'_>, device_id: &str, public_key: Vec<u8>, topics: Vec<String>) -> Result<DeviceRecord> {
    require_admin(ctx)?;
    if device_id.is_empty() || device_id.contains('/') {
        return Err(ContractError::BadArgs(format!("invalid device id {device_id:?}")));
    }
    if identity::verify(&public_key, b"", &[]).is_err() {
        return Err(ContractError::BadArgs("public key is not an Ed25519 key".into()));
    }
    let key = device_key(device_id);
    if ctx.get_state(&key).is_some() {
        return Err(ContractError::DuplicateDevice(device_id.to_string()));
    }
    let record = DeviceRecord {
        device_id: device_id.to_string(),
        public_key,
        owner_org: ctx.creator().org.clone(),
        registered_tx: ctx.tx_id().to_string(),
        topics,
    };
    ctx.put_state(&key, to_json(&record));
    Ok(record)
}

fn grant(
    ctx: &mut TxContext<'_>,
    subject: &str,
    resource: &str,
    rights: BTreeSet<Right>,
    expires: Option<u64>,
) -> Result<AccessPolicy> {
    require_admin(ctx)?;
    if subject.is_empty() || subject.contains('/') || resource.is_empty() {
        return Err(ContractError::BadArgs("subject and resource must be non-empty".into()));
    }
    // a registered device may only be granted by its own org
    if let Some(device) = get_json::<DeviceRecord>(ctx, &device_key(resource))? {
        if device.owner_org != ctx.creator().org {
            return Err(ContractError::Unauthorized(format!(
                "{resource} belongs to {}",
                device.owner_org
            )));
        }
    }
    let policy = AccessPolicy {
        subject: subject.to_string(),
        resource: resource.to_string(),
        rights,
        granted_by: ctx.creator().subject.clone(),
        expires,
    };
    ctx.put_state(&policy_key(subject, resource), to_json(&policy));
    Ok(policy)
}

fn revoke_grant(ctx: &mut TxContext<'_>, subject: &str, resource: &str) -> Result<()> {
    require_admin(ctx)?;
    let key = policy_key(subject, resource);
    if ctx.get_state(&key).is_none() {
        return Err(ContractError::NotFound(format!("grant of {resource} to {subject}")));
    }
    ctx.del_state(&key);
    Ok(())
}

fn verify_challenge(ctx: &mut TxContext<'_>, challenge_id: &str, signature: &[u8], now: u64) -> Result<VerifiedChallenge> {
    let key = challenge_key(challenge_id);
    let mut record: ChallengeRecord =
        get_json(ctx, &key)?.ok_or_else(|| ContractError::NotFound(format!("challenge {challenge_id}")))?;
    if record.used {
        return Err(ContractError::AlreadyUsed(challenge_id.to_string()));
    }
    if record.expired_at(now) {
        return Err(ContractError::Expired(challenge_id.to_string()));
    }
    let cert = ctx
        .msp()
        .active_member(&record.subject, now)
        .ok_or_else(|| ContractError::UnknownSubject(record.subject.clone()))?;
    if !identity::verify(&cert.public_key, &record.nonce, signature).unwrap_or(false) {
        return Err(ContractError::BadSignature);
    }
    record.used = true;
    ctx.put_state(&key, to_json(&record));
    let grants: Vec<Grant> = grants_of(ctx, &record.subject)?
        .into_iter()
        .map(|p| Grant {
            resource: p.resource,
            rights: p.rights,
        })
        .collect();
    Ok(VerifiedChallenge {
        subject: record.subject,
        rights: grants.iter().flat_map(|g| g.rights.iter().copied()).collect(),
        grants,
    })
}

fn assets_from_batch(ctx: &mut TxContext<'_>, ids: &[&str]) -> Result<Vec<Option<Asset>>> {
    for id in ids {
        validate_uuid(id)?;
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let asset: Option<Asset> = get_json(ctx, &asset_key(id))?;
        if let Some(a) = &asset {
            ensure(ctx, &a.device_id, Some(&a.owner_org), Right::Read)?;
        }
        out.push(asset);
    }
    Ok(out)
}
