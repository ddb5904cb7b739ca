use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::Sender;
use parking_lot::Mutex;

use crate::identity::{MspRegistry, SigningIdentity, Validation};
use crate::ledger::{Block, Channel, Endorsement, Ledger, ReadWriteSet, ValidationCode};

use super::clock::Clock;
use super::proposal::Proposal;
use super::stub::{ChaincodeError, ChaincodeRegistry, TxContext, LIFECYCLE_PREFIX};
use super::validate::validate_block;
use super::TxFlowError;

/// Largest accepted distance between a proposal's timestamp and the
/// endorsing peer's clock. Chaincode relies on the timestamp for expiry.
pub const MAX_CLOCK_SKEW_MS: u64 = 300_000;

/// A peer's answer to a proposal.
#[derive(Debug, Clone)]
pub struct ProposalResponse {
    pub endorsement: Endorsement,
    pub rw_set: ReadWriteSet,
    pub payload: Vec<u8>,
}

/// Delivered once per transaction when its block commits.
#[derive(Debug, Clone)]
pub struct CommitEvent {
    pub tx_id: String,
    pub block_number: u64,
    pub flag: ValidationCode,
    pub committed_at: Instant,
}

#[derive(Default)]
struct EventHub {
    waiters: HashMap<String, Sender<CommitEvent>>,
    block_listeners: Vec<Sender<Block>>,
}

/// An endorsing and committing peer with its own copy of every joined
/// channel's ledger.
pub struct Peer {
    identity: SigningIdentity,
    msp: Arc<MspRegistry>,
    ledger: Ledger,
    chaincodes: ChaincodeRegistry,
    clock: Arc<dyn Clock>,
    events: Mutex<EventHub>,
}

impl std::fmt::Debug for Peer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Peer")
            .field("name", &self.name())
            .field("org", &self.org())
            .finish_non_exhaustive()
    }
}

impl Peer {
    pub fn new(
        identity: SigningIdentity,
        msp: Arc<MspRegistry>,
        chaincodes: ChaincodeRegistry,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Peer {
            identity,
            msp,
            ledger: Ledger::new(),
            chaincodes,
            clock,
            events: Mutex::new(EventHub::default()),
        }
    }

    pub fn name(&self) -> &str {
        self.identity.subject()
    }

    pub fn org(&self) -> &str {
        self.identity.org()
    }

    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn channel(&self, id: &str) -> Result<Arc<Channel>, TxFlowError> {
        Ok(self.ledger.channel(id)?)
    }

    /// Simulates the proposal against a snapshot of the channel state and
    /// signs the outcome. The world state is not modified.
    pub fn endorse(&self, proposal: &Proposal) -> Result<ProposalResponse, TxFlowError> {
        let channel = self.check_proposal(proposal)?;
        let tx_id = proposal.tx_id();
        let (rw_set, payload) = self.simulate(&channel, proposal, &tx_id)?;
        let rw_set_hash = rw_set.digest();
        let signature = self
            .identity
            .sign(&Endorsement::signed_bytes(&tx_id, &rw_set_hash, &payload));
        Ok(ProposalResponse {
            endorsement: Endorsement {
                endorser: self.identity.cert.clone(),
                rw_set_hash,
                response_payload: payload.clone(),
                signature,
            },
            rw_set,
            payload,
        })
    }

    fn check_proposal(&self, proposal: &Proposal) -> Result<Arc<Channel>, TxFlowError> {
        if !proposal.verify_signature() {
            return Err(TxFlowError::AuthFailure("proposal signature does not verify".into()));
        }
        let now = self.clock.now_ms();
        if proposal.timestamp.abs_diff(now) > MAX_CLOCK_SKEW_MS {
            return Err(TxFlowError::AuthFailure(format!(
                "proposal timestamp {} is too far from peer time {now}",
                proposal.timestamp
            )));
        }
        match self.msp.validate(&proposal.creator, now) {
            Ok(Validation::Valid) => {}
            Ok(other) => {
                return Err(TxFlowError::AuthFailure(format!(
                    "creator certificate of {:?}: {other:?}",
                    proposal.creator.subject
                )))
            }
            Err(e) => return Err(TxFlowError::AuthFailure(e.to_string())),
        }
        let channel = self.channel(&proposal.channel_id)?;
        channel.ensure_member(&proposal.creator.org)?;
        channel.ensure_member(self.org())?;
        Ok(channel)
    }

    fn simulate(
        &self,
        channel: &Channel,
        proposal: &Proposal,
        tx_id: &str,
    ) -> Result<(ReadWriteSet, Vec<u8>), TxFlowError> {
        let code = self.chaincodes.get(&proposal.chaincode_id).ok_or_else(|| {
            ChaincodeError::new("UNKNOWN_CHAINCODE", format!("{:?} is not installed", proposal.chaincode_id))
        })?;
        let view = channel.view();
        if view.contains_tx(tx_id) {
            return Err(TxFlowError::DuplicateTransaction(tx_id.to_string()));
        }
        if !proposal.chaincode_id.starts_with('_')
            && view
                .state_get(&format!("{LIFECYCLE_PREFIX}{}", proposal.chaincode_id))
                .is_none()
        {
            return Err(ChaincodeError::new(
                "NOT_DEPLOYED",
                format!("{:?} is not deployed on {:?}", proposal.chaincode_id, proposal.channel_id),
            )
            .into());
        }
        let mut ctx = TxContext::new(
            &view,
            &self.msp,
            &proposal.creator,
            tx_id,
            &proposal.channel_id,
            proposal.timestamp,
        );
        let payload = code.invoke(&mut ctx, &proposal.function, &proposal.args)?;
        Ok((ctx.into_rw_set(), payload))
    }

    /// Validates and commits one block from the orderer, then notifies
    /// waiters and block listeners.
    pub fn commit_block(&self, channel_id: &str, block: Block) -> Result<Block, TxFlowError> {
        let channel = self.channel(channel_id)?;
        let validated = validate_block(&channel, &self.msp, block);
        channel.append_block(validated.clone())?;
        let committed_at = Instant::now();
        let mut hub = self.events.lock();
        for (tx, flag) in validated.transactions.iter().zip(&validated.validation_flags) {
            if let Some(waiter) = hub.waiters.remove(&tx.tx_id) {
                let _ = waiter.send(CommitEvent {
                    tx_id: tx.tx_id.clone(),
                    block_number: validated.number,
                    flag: *flag,
                    committed_at,
                });
            }
        }
        hub.block_listeners.retain(|l| l.send(validated.clone()).is_ok());
        Ok(validated)
    }

    pub(crate) fn register_waiter(&self, tx_id: &str, sender: Sender<CommitEvent>) {
        self.events.lock().waiters.insert(tx_id.to_string(), sender);
    }

    pub(crate) fn cancel_waiter(&self, tx_id: &str) {
        self.events.lock().waiters.remove(tx_id);
    }

    /// Receives every block this peer commits from now on.
    pub fn subscribe_blocks(&self) -> crossbeam_channel::Receiver<Block> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.events.lock().block_listeners.push(tx);
        rx
    }
}
