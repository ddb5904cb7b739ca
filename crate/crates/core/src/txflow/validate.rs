use std::collections::{BTreeMap, HashSet};

use crate::identity::{self, MspRegistry, Role, Validation};
use crate::ledger::{Block, Channel, LedgerView, Transaction, ValidationCode, Version};

use super::policy::EndorsementPolicy;

/// Validates every transaction of an ordered block against the channel's
/// committed state and returns the block with sealed validation flags.
///
/// Checks run per transaction, in order: signatures and certificates, then
/// the channel endorsement policy, then MVCC against committed state plus the
/// writes of earlier valid transactions of the same block.
pub fn validate_block(channel: &Channel, msp: &MspRegistry, mut block: Block) -> Block {
    let view = channel.view();
    let flags = compute_flags(&view, msp, &block);
    drop(view);
    block.seal(flags);
    block
}

pub(crate) fn compute_flags(view: &LedgerView<'_>, msp: &MspRegistry, block: &Block) -> Vec<ValidationCode> {
    let config = view.config();
    let policy: Option<EndorsementPolicy> = config.endorsement_policy.parse().ok();
    // key -> version written earlier in this block (deletes included)
    let mut pending: BTreeMap<&str, Version> = BTreeMap::new();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut flags = Vec::with_capacity(block.transactions.len());

    for (i, tx) in block.transactions.iter().enumerate() {
        let flag = if !signatures_ok(tx, &config.channel_id, msp, block.timestamp) {
            ValidationCode::BadSignature
        } else if !policy_ok(tx, policy.as_ref(), &config.members) {
            ValidationCode::PolicyFailure
        } else if !seen.insert(tx.tx_id.as_str()) || view.contains_tx(&tx.tx_id) || !mvcc_ok(tx, view, &pending) {
            ValidationCode::MvccConflict
        } else {
            ValidationCode::Valid
        };
        if flag.is_valid() {
            let version = Version::new(block.number, i as u64);
            for w in &tx.rw_set.writes {
                pending.insert(w.key.as_str(), version);
            }
        }
        flags.push(flag);
    }
    flags
}

fn signatures_ok(tx: &Transaction, channel_id: &str, msp: &MspRegistry, at: u64) -> bool {
    let fields = tx.proposal_fields();
    let signed = fields.canonical();
    if tx.channel_id != channel_id || tx.tx_id != crate::codec::Digest::of(&signed).to_hex() {
        return false;
    }
    let cert_ok = |c: &identity::Certificate| matches!(msp.validate(c, at), Ok(Validation::Valid));
    if !cert_ok(&tx.creator) || !identity::verify(&tx.creator.public_key, &signed, &tx.client_signature).unwrap_or(false) {
        return false;
    }
    if !tx.rw_set.has_unique_keys() {
        return false;
    }
    let rw_hash = tx.rw_set.digest();
    tx.endorsements.iter().all(|e| {
        let msg = crate::ledger::Endorsement::signed_bytes(&tx.tx_id, &e.rw_set_hash, &e.response_payload);
        e.rw_set_hash == rw_hash
            && e.endorser.role == Role::Peer
            && cert_ok(&e.endorser)
            && identity::verify(&e.endorser.public_key, &msg, &e.signature).unwrap_or(false)
    })
}

fn policy_ok(
    tx: &Transaction,
    policy: Option<&EndorsementPolicy>,
    members: &std::collections::BTreeSet<String>,
) -> bool {
    let Some(policy) = policy else {
        return false;
    };
    if !members.contains(&tx.creator.org) {
        return false;
    }
    let orgs: std::collections::BTreeSet<&str> = tx
        .endorsements
        .iter()
        .map(|e| e.endorser.org.as_str())
        .filter(|o| members.contains(*o))
        .collect();
    policy.is_satisfied_by(&orgs)
}

fn mvcc_ok(tx: &Transaction, view: &LedgerView<'_>, pending: &BTreeMap<&str, Version>) -> bool {
    for read in &tx.rw_set.reads {
        if pending.contains_key(read.key.as_str()) {
            return false;
        }
        if view.state_get(&read.key).map(|v| v.version) != read.version {
            return false;
        }
    }
    for rr in &tx.rw_set.range_reads {
        if rr.start > rr.end {
            return false;
        }
        if pending
            .range::<str, _>((std::ops::Bound::Included(rr.start.as_str()), std::ops::Bound::Excluded(rr.end.as_str())))
            .next()
            .is_some()
        {
            return false;
        }
        let Ok(now) = view.range_query(&rr.start, &rr.end) else {
            return false;
        };
        let same = now.len() == rr.observed.len()
            && now
                .iter()
                .zip(&rr.observed)
                .all(|((k, v), o)| *k == o.key && v.version == o.version);
        if !same {
            return false;
        }
    }
    true
}
