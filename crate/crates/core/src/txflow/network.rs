use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};
use log::error;
use parking_lot::RwLock;

use crate::identity::{MspRegistry, SigningIdentity};
use crate::ledger::{Backend, Block, Channel, ChannelConfig, Transaction, ValidationCode};

use super::clock::Clock;
use super::orderer::{OrdererConfig, OrdererService};
use super::peer::{CommitEvent, Peer, ProposalResponse};
use super::policy::{check_policy, EndorsementPolicy};
use super::proposal::Proposal;
use super::stub::ChaincodeRegistry;
use super::TxFlowError;

#[derive(Debug, Clone)]
pub struct NetworkOptions {
    pub orderer: OrdererConfig,
    pub backend: Backend,
    /// How long a client waits for the commit notification.
    pub tx_timeout: Duration,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        NetworkOptions {
            orderer: OrdererConfig::default(),
            backend: Backend::EmbeddedKv,
            tx_timeout: Duration::from_secs(30),
        }
    }
}

struct Inner {
    msp: Arc<MspRegistry>,
    chaincodes: ChaincodeRegistry,
    clock: Arc<dyn Clock>,
    options: NetworkOptions,
    orderer: OrdererService,
    peers: RwLock<Vec<Arc<Peer>>>,
    channels: RwLock<HashMap<String, Vec<Arc<Peer>>>>,
}

/// An in-process network: peers with their own ledgers, one solo orderer,
/// and a committer thread per (peer, channel). Cheap to clone.
#[derive(Clone)]
pub struct Network {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("peers", &self.inner.peers.read().iter().map(|p| p.name().to_string()).collect::<Vec<_>>())
            .field("channels", &self.channel_ids())
            .finish()
    }
}

impl Network {
    pub fn new(
        msp: Arc<MspRegistry>,
        chaincodes: ChaincodeRegistry,
        clock: Arc<dyn Clock>,
        options: NetworkOptions,
    ) -> Result<Network, TxFlowError> {
        let orderer = OrdererService::start(options.orderer.clone(), clock.clone())?;
        Ok(Network {
            inner: Arc::new(Inner {
                msp,
                chaincodes,
                clock,
                options,
                orderer,
                peers: RwLock::new(Vec::new()),
                channels: RwLock::new(HashMap::new()),
            }),
        })
    }

    pub fn msp(&self) -> &Arc<MspRegistry> {
        &self.inner.msp
    }

    pub fn chaincodes(&self) -> &ChaincodeRegistry {
        &self.inner.chaincodes
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn options(&self) -> &NetworkOptions {
        &self.inner.options
    }

    pub fn add_peer(&self, identity: SigningIdentity) -> Arc<Peer> {
        let peer = Arc::new(Peer::new(
            identity,
            self.inner.msp.clone(),
            self.inner.chaincodes.clone(),
            self.inner.clock.clone(),
        ));
        self.inner.peers.write().push(peer.clone());
        peer
    }

    pub fn peers(&self) -> Vec<Arc<Peer>> {
        self.inner.peers.read().clone()
    }

    pub fn peer(&self, name: &str) -> Result<Arc<Peer>, TxFlowError> {
        self.inner
            .peers
            .read()
            .iter()
            .find(|p| p.name() == name)
            .cloned()
            .ok_or_else(|| TxFlowError::UnknownPeer(name.to_string()))
    }

    pub fn channel_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.inner.channels.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Peers that joined `channel_id`, in join order.
    pub fn channel_peers(&self, channel_id: &str) -> Result<Vec<Arc<Peer>>, TxFlowError> {
        self.inner
            .channels
            .read()
            .get(channel_id)
            .cloned()
            .ok_or_else(|| TxFlowError::UnknownChannel(channel_id.to_string()))
    }

    /// Creates a channel from a signed genesis block and joins the named
    /// peers (which must belong to member orgs).
    pub fn create_channel(&self, genesis: Block, peers: &[&str]) -> Result<(), TxFlowError> {
        self.join_from_blocks(vec![genesis], peers)
    }

    /// Rebuilds a channel on the named peers from an existing chain.
    pub fn join_from_blocks(&self, blocks: Vec<Block>, peers: &[&str]) -> Result<(), TxFlowError> {
        let first = blocks.first().ok_or_else(|| TxFlowError::Config("empty chain".into()))?;
        let config = ChannelConfig::from_genesis(first)
            .ok_or_else(|| TxFlowError::Config("block 0 is not a channel genesis block".into()))?;
        if self.inner.channels.read().contains_key(&config.channel_id) {
            return Err(TxFlowError::Config(format!("channel {:?} already exists", config.channel_id)));
        }
        config
            .endorsement_policy
            .parse::<EndorsementPolicy>()
            .map_err(|e| TxFlowError::Config(format!("channel policy: {e}")))?;
        let peers = peers.iter().map(|n| self.peer(n)).collect::<Result<Vec<_>, _>>()?;
        for peer in &peers {
            if !config.members.contains(peer.org()) {
                return Err(TxFlowError::NotMember {
                    org: peer.org().to_string(),
                    channel: config.channel_id.clone(),
                });
            }
        }

        let mut senders = Vec::new();
        let mut head = None;
        for peer in &peers {
            let channel = Arc::new(Channel::replay(blocks.iter().cloned(), self.inner.options.backend)?);
            head = Some((channel.height(), channel.head_hash()));
            peer.ledger().insert(channel)?;
            let (tx, rx) = crossbeam_channel::unbounded::<Block>();
            senders.push(tx);
            let peer = peer.clone();
            let channel_id = config.channel_id.clone();
            std::thread::Builder::new()
                .name(format!("commit-{}-{}", peer.name(), channel_id))
                .spawn(move || {
                    for block in rx {
                        if let Err(e) = peer.commit_block(&channel_id, block) {
                            error!("{} failed to commit on {channel_id}: {e}", peer.name());
                        }
                    }
                })
                .map_err(|e| TxFlowError::Config(e.to_string()))?;
        }
        let (height, head_hash) = match head {
            Some(h) => h,
            None => {
                let c = Channel::replay(blocks, self.inner.options.backend)?;
                (c.height(), c.head_hash())
            }
        };
        self.inner.orderer.join(&config.channel_id, height, head_hash, senders);
        self.inner.channels.write().insert(config.channel_id, peers);
        Ok(())
    }

    /// Waits until every peer of the channel has the same height; false on
    /// timeout.
    pub fn sync(&self, channel_id: &str, timeout: Duration) -> Result<bool, TxFlowError> {
        let peers = self.channel_peers(channel_id)?;
        let deadline = Instant::now() + timeout;
        loop {
            let heights = peers
                .iter()
                .map(|p| Ok(p.channel(channel_id)?.height()))
                .collect::<Result<BTreeSet<u64>, TxFlowError>>()?;
            if heights.len() <= 1 {
                return Ok(true);
            }
            if Instant::now() >= deadline {
                return Ok(false);
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn orderer_running(&self) -> bool {
        self.inner.orderer.is_running()
    }

    /// Takes the ordering service down; subsequent submissions fail with
    /// `OrdererUnavailable`.
    pub fn stop_orderer(&self) {
        self.inner.orderer.stop();
    }

    pub fn client(&self, identity: SigningIdentity) -> Client {
        Client {
            network: self.clone(),
            identity,
        }
    }
}

/// Result of a transaction that reached a commit notification.
#[derive(Debug, Clone)]
pub struct CommitResult {
    pub tx_id: String,
    pub block_number: u64,
    pub flag: ValidationCode,
    /// From proposal creation to the commit notification.
    pub latency: Duration,
    /// The chaincode response the endorsers agreed on.
    pub payload: Vec<u8>,
}

/// A submitted transaction awaiting its commit notification.
#[derive(Debug)]
pub struct PendingTx {
    tx_id: String,
    payload: Vec<u8>,
    created: Instant,
    deadline: Instant,
    events: Receiver<CommitEvent>,
    peer: Arc<Peer>,
}

impl PendingTx {
    pub fn tx_id(&self) -> &str {
        &self.tx_id
    }

    pub fn wait(self) -> Result<CommitResult, TxFlowError> {
        match self.events.recv_deadline(self.deadline) {
            Ok(ev) => Ok(CommitResult {
                tx_id: ev.tx_id,
                block_number: ev.block_number,
                flag: ev.flag,
                latency: ev.committed_at.saturating_duration_since(self.created),
                payload: self.payload,
            }),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                self.peer.cancel_waiter(&self.tx_id);
                Err(TxFlowError::Timeout(self.tx_id))
            }
        }
    }
}

/// A member identity talking to the network.
#[derive(Clone, Debug)]
pub struct Client {
    network: Network,
    identity: SigningIdentity,
}

impl Client {
    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// A fresh signed proposal stamped with the network clock.
    pub fn proposal(&self, channel_id: &str, chaincode_id: &str, function: &str, args: Vec<Vec<u8>>) -> Proposal {
        Proposal::new(
            &self.identity,
            channel_id,
            chaincode_id,
            function,
            args,
            self.network.clock().now_ms(),
            rand::random(),
        )
    }

    /// One peer per org named by the channel policy, in join order.
    fn endorsers(&self, channel_id: &str) -> Result<Vec<Arc<Peer>>, TxFlowError> {
        let peers = self.network.channel_peers(channel_id)?;
        let config = peers
            .first()
            .ok_or_else(|| TxFlowError::UnknownChannel(channel_id.to_string()))?
            .channel(channel_id)?
            .config();
        let policy: EndorsementPolicy = config
            .endorsement_policy
            .parse()
            .map_err(|e| TxFlowError::Config(format!("channel policy: {e}")))?;
        let wanted = policy.orgs();
        let mut seen = BTreeSet::new();
        Ok(peers
            .into_iter()
            .filter(|p| wanted.contains(p.org()) && seen.insert(p.org().to_string()))
            .collect())
    }

    /// Collects endorsements from the policy-relevant peers. Fails with the
    /// first peer error if the successful endorsements cannot satisfy the
    /// policy. A block committing between two peers' simulations yields
    /// mismatched read/write sets; that is retried a few times.
    pub fn endorse(&self, proposal: &Proposal) -> Result<Vec<ProposalResponse>, TxFlowError> {
        let mut attempt = 0;
        loop {
            match self.endorse_once(proposal) {
                Err(TxFlowError::MixedReadWriteSets) if attempt < 3 => attempt += 1,
                other => return other,
            }
        }
    }

    fn endorse_once(&self, proposal: &Proposal) -> Result<Vec<ProposalResponse>, TxFlowError> {
        let peers = self.endorsers(&proposal.channel_id)?;
        let mut responses = Vec::new();
        let mut first_err = None;
        for peer in &peers {
            match peer.endorse(proposal) {
                Ok(r) => responses.push(r),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        let policy: EndorsementPolicy = peers[0]
            .channel(&proposal.channel_id)?
            .config()
            .endorsement_policy
            .parse()
            .map_err(|e| TxFlowError::Config(format!("channel policy: {e}")))?;
        let endorsements: Vec<_> = responses.iter().map(|r| r.endorsement.clone()).collect();
        if !check_policy(&policy, &endorsements)? {
            return Err(first_err.unwrap_or_else(|| TxFlowError::PolicyUnsatisfied(policy.to_string())));
        }
        Ok(responses)
    }

    /// Endorses at exactly the named peers, without checking the policy.
    pub fn endorse_at(&self, proposal: &Proposal, peers: &[&str]) -> Result<Vec<ProposalResponse>, TxFlowError> {
        peers.iter().map(|n| self.network.peer(n)?.endorse(proposal)).collect()
    }

    pub fn assemble(&self, proposal: &Proposal, responses: &[ProposalResponse]) -> Result<Transaction, TxFlowError> {
        let first = responses
            .first()
            .ok_or_else(|| TxFlowError::PolicyUnsatisfied("no endorsements".into()))?;
        if responses.iter().any(|r| r.endorsement.rw_set_hash != first.endorsement.rw_set_hash) {
            return Err(TxFlowError::MixedReadWriteSets);
        }
        Ok(Transaction {
            tx_id: proposal.tx_id(),
            channel_id: proposal.channel_id.clone(),
            chaincode_id: proposal.chaincode_id.clone(),
            function: proposal.function.clone(),
            args: proposal.args.clone(),
            creator: proposal.creator.clone(),
            nonce: proposal.nonce,
            timestamp: proposal.timestamp,
            rw_set: first.rw_set.clone(),
            endorsements: responses.iter().map(|r| r.endorsement.clone()).collect(),
            client_signature: proposal.client_signature.clone(),
        })
    }

    /// Hands `tx` to the orderer and returns a handle for its commit event,
    /// observed at a peer of the client's org when one joined the channel.
    pub fn submit_transaction(&self, proposal: &Proposal, tx: Transaction) -> Result<PendingTx, TxFlowError> {
        let peers = self.network.channel_peers(&tx.channel_id)?;
        let peer = peers
            .iter()
            .find(|p| p.org() == self.identity.org())
            .or_else(|| peers.first())
            .cloned()
            .ok_or_else(|| TxFlowError::UnknownChannel(tx.channel_id.clone()))?;
        let (sender, events) = crossbeam_channel::bounded(1);
        peer.register_waiter(&tx.tx_id, sender);
        let tx_id = tx.tx_id.clone();
        let payload = tx.endorsements.first().map(|e| e.response_payload.clone()).unwrap_or_default();
        if let Err(e) = self.network.inner.orderer.submit(tx) {
            peer.cancel_waiter(&tx_id);
            return Err(e);
        }
        Ok(PendingTx {
            tx_id,
            payload,
            created: proposal.created(),
            deadline: Instant::now() + self.network.options().tx_timeout,
            events,
            peer,
        })
    }

    /// Endorse, assemble and submit without waiting for the commit.
    pub fn submit_async(&self, proposal: &Proposal) -> Result<PendingTx, TxFlowError> {
        let responses = self.endorse(proposal)?;
        let tx = self.assemble(proposal, &responses)?;
        self.submit_transaction(proposal, tx)
    }

    /// The full pipeline for one proposal.
    pub fn submit_and_await(&self, proposal: &Proposal) -> Result<CommitResult, TxFlowError> {
        self.submit_async(proposal)?.wait()
    }

    pub fn invoke(
        &self,
        channel_id: &str,
        chaincode_id: &str,
        function: &str,
        args: Vec<Vec<u8>>,
    ) -> Result<CommitResult, TxFlowError> {
        let proposal = self.proposal(channel_id, chaincode_id, function, args);
        self.submit_and_await(&proposal)
    }

    /// Simulates at a single peer (the client's org when possible) and
    /// returns the response without ordering anything.
    pub fn query(
        &self,
        channel_id: &str,
        chaincode_id: &str,
        function: &str,
        args: Vec<Vec<u8>>,
    ) -> Result<Vec<u8>, TxFlowError> {
        let proposal = self.proposal(channel_id, chaincode_id, function, args);
        let peers = self.network.channel_peers(channel_id)?;
        let peer = peers
            .iter()
            .find(|p| p.org() == self.identity.org())
            .or_else(|| peers.first())
            .ok_or_else(|| TxFlowError::UnknownChannel(channel_id.to_string()))?;
        Ok(peer.endorse(&proposal)?.payload)
    }
}
