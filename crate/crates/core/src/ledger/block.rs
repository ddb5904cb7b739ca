use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::codec::{self, Digest};
use crate::identity::{Certificate, SigningIdentity};

/// Position of a committed write: block number, then index within the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Version {
    #[serde(with = "codec::dec")]
    pub block_num: u64,
    #[serde(with = "codec::dec")]
    pub tx_num: u64,
}

impl Version {
    pub fn new(block_num: u64, tx_num: u64) -> Self {
        Version { block_num, tx_num }
    }
}

impl fmt::Display for Version {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.block_num, self.tx_num)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvRead {
    pub key: String,
    pub version: Option<Version>,
}

/// A write; `value: None` deletes the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KvWrite {
    pub key: String,
    #[serde(with = "codec::b64_opt")]
    pub value: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservedKey {
    pub key: String,
    pub version: Version,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeRead {
    pub start: String,
    pub end: String,
    pub observed: Vec<ObservedKey>,
}

/// What a simulated transaction read and wants to write.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadWriteSet {
    pub reads: Vec<KvRead>,
    pub writes: Vec<KvWrite>,
    pub range_reads: Vec<RangeRead>,
}

impl ReadWriteSet {
    pub fn digest(&self) -> Digest {
        codec::canonical_digest(self)
    }

    pub fn has_unique_keys(&self) -> bool {
        let mut seen = BTreeSet::new();
        if !self.reads.iter().all(|r| seen.insert(r.key.as_str())) {
            return false;
        }
        seen.clear();
        self.writes.iter().all(|w| seen.insert(w.key.as_str()))
    }
}

/// A peer's signed statement over the outcome of simulating a proposal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endorsement {
    pub endorser: Certificate,
    pub rw_set_hash: Digest,
    #[serde(with = "codec::b64")]
    pub response_payload: Vec<u8>,
    #[serde(with = "codec::b64")]
    pub signature: Vec<u8>,
}

impl Endorsement {
    pub fn signed_bytes(tx_id: &str, rw_set_hash: &Digest, payload: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(tx_id.len() + 32 + payload.len());
        out.extend_from_slice(tx_id.as_bytes());
        out.extend_from_slice(rw_set_hash.as_bytes());
        out.extend_from_slice(payload);
        out
    }
}

/// The client-signed part of a transaction, in the shape that is hashed to
/// obtain the transaction id.
#[derive(Serialize)]
pub struct ProposalFields<'a> {
    pub channel_id: &'a str,
    pub chaincode_id: &'a str,
    pub function: &'a str,
    #[serde(with = "codec::b64_list")]
    pub args: &'a [Vec<u8>],
    pub creator: &'a Certificate,
    #[serde(with = "codec::b64_16")]
    pub nonce: &'a [u8; 16],
    #[serde(with = "codec::dec")]
    pub timestamp: &'a u64,
}

impl ProposalFields<'_> {
    pub fn canonical(&self) -> Vec<u8> {
        codec::to_canonical(self)
    }

    pub fn tx_id(&self) -> String {
        Digest::of(&self.canonical()).to_hex()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transaction {
    pub tx_id: String,
    pub channel_id: String,
    pub chaincode_id: String,
    pub function: String,
    #[serde(with = "codec::b64_list")]
    pub args: Vec<Vec<u8>>,
    pub creator: Certificate,
    #[serde(with = "codec::b64_16")]
    pub nonce: [u8; 16],
    #[serde(with = "codec::dec")]
    pub timestamp: u64,
    pub rw_set: ReadWriteSet,
    pub endorsements: Vec<Endorsement>,
    #[serde(with = "codec::b64")]
    pub client_signature: Vec<u8>,
}

impl Transaction {
    pub fn proposal_fields(&self) -> ProposalFields<'_> {
        ProposalFields {
            channel_id: &self.channel_id,
            chaincode_id: &self.chaincode_id,
            function: &self.function,
            args: &self.args,
            creator: &self.creator,
            nonce: &self.nonce,
            timestamp: &self.timestamp,
        }
    }
}

/// Per-transaction outcome recorded at commit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationCode {
    Valid,
    MvccConflict,
    PolicyFailure,
    BadSignature,
}

impl ValidationCode {
    pub fn is_valid(&self) -> bool {
        matches!(self, ValidationCode::Valid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockHeader {
    #[serde(with = "codec::dec")]
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
    #[serde(with = "codec::dec")]
    pub timestamp: u64,
}

impl BlockHeader {
    pub fn hash(&self) -> Digest {
        codec::canonical_digest(self)
    }
}

/// A block as cut by the orderer and annotated by the committing peer.
///
/// `prev_hash` and `data_hash` chain the ordered content. `commit_hash` seals
/// the peer's validation outcome: SHA-256 over this block's header hash
/// followed by the canonical flag list, so that every stored byte of a block is
/// covered by a digest that can be recomputed from the block alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Block {
    #[serde(with = "codec::dec")]
    pub number: u64,
    pub prev_hash: Digest,
    pub data_hash: Digest,
    #[serde(with = "codec::dec")]
    pub timestamp: u64,
    pub transactions: Vec<Transaction>,
    pub validation_flags: Vec<ValidationCode>,
    pub commit_hash: Digest,
}

impl Block {
    /// An unvalidated block straight from the orderer.
    pub fn new(number: u64, prev_hash: Digest, timestamp: u64, transactions: Vec<Transaction>) -> Self {
        let data_hash = Self::compute_data_hash(&transactions);
        Block {
            number,
            prev_hash,
            data_hash,
            timestamp,
            transactions,
            validation_flags: Vec::new(),
            commit_hash: Digest::ZERO,
        }
    }

    pub fn compute_data_hash(transactions: &[Transaction]) -> Digest {
        codec::canonical_digest(transactions)
    }

    pub fn header(&self) -> BlockHeader {
        BlockHeader {
            number: self.number,
            prev_hash: self.prev_hash,
            data_hash: self.data_hash,
            timestamp: self.timestamp,
        }
    }

    pub fn header_hash(&self) -> Digest {
        self.header().hash()
    }

    pub fn compute_commit_hash(&self) -> Digest {
        let mut bytes = self.header_hash().as_bytes().to_vec();
        bytes.extend_from_slice(&codec::to_canonical(&self.validation_flags));
        Digest::of(&bytes)
    }

    /// Records validation results and seals them.
    pub fn seal(&mut self, flags: Vec<ValidationCode>) {
        self.validation_flags = flags;
        self.commit_hash = self.compute_commit_hash();
    }

    pub fn to_canonical(&self) -> Vec<u8> {
        codec::to_canonical(self)
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self, codec::CodecError> {
        codec::from_canonical(bytes)
    }

    /// Checks this block's own digests (content, flags, commit seal).
    pub fn is_self_consistent(&self) -> bool {
        self.validation_flags.len() == self.transactions.len()
            && Self::compute_data_hash(&self.transactions) == self.data_hash
            && self.compute_commit_hash() == self.commit_hash
    }
}

pub const CONFIG_CHAINCODE: &str = "_config";
pub const CONFIG_FUNCTION: &str = "channel_config";

/// Channel parameters carried by the genesis block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelConfig {
    pub channel_id: String,
    pub members: BTreeSet<String>,
    pub endorsement_policy: String,
}

impl ChannelConfig {
    fn to_args(&self) -> Vec<Vec<u8>> {
        let mut args = vec![
            self.channel_id.clone().into_bytes(),
            self.endorsement_policy.clone().into_bytes(),
        ];
        args.extend(self.members.iter().map(|m| m.clone().into_bytes()));
        args
    }

    pub fn from_genesis(block: &Block) -> Option<ChannelConfig> {
        if block.number != 0 || block.transactions.len() != 1 {
            return None;
        }
        let tx = &block.transactions[0];
        if tx.chaincode_id != CONFIG_CHAINCODE || tx.function != CONFIG_FUNCTION || tx.args.len() < 2 {
            return None;
        }
        let text = |b: &Vec<u8>| String::from_utf8(b.clone()).ok();
        Some(ChannelConfig {
            channel_id: text(&tx.args[0])?,
            endorsement_policy: text(&tx.args[1])?,
            members: tx.args[2..].iter().map(text).collect::<Option<_>>()?,
        })
    }

    /// Block 0: a single config transaction, signed by `creator`.
    pub fn genesis_block(&self, creator: &SigningIdentity, timestamp: u64) -> Block {
        let args = self.to_args();
        let nonce = [0u8; 16];
        let fields = ProposalFields {
            channel_id: &self.channel_id,
            chaincode_id: CONFIG_CHAINCODE,
            function: CONFIG_FUNCTION,
            args: &args,
            creator: &creator.cert,
            nonce: &nonce,
            timestamp: &timestamp,
        };
        let bytes = fields.canonical();
        let tx = Transaction {
            tx_id: Digest::of(&bytes).to_hex(),
            channel_id: self.channel_id.clone(),
            chaincode_id: CONFIG_CHAINCODE.into(),
            function: CONFIG_FUNCTION.into(),
            args,
            creator: creator.cert.clone(),
            nonce,
            timestamp,
            rw_set: ReadWriteSet::default(),
            endorsements: Vec::new(),
            client_signature: creator.sign(&bytes),
        };
        let mut block = Block::new(0, Digest::ZERO, timestamp, vec![tx]);
        block.seal(vec![ValidationCode::Valid]);
        block
    }
}

/// Where a chain first fails verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BrokenLink {
    pub block: u64,
}

impl fmt::Display for BrokenLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "hash chain broken at block {}", self.block)
    }
}

/// Recomputes every digest of `blocks`, which must start at genesis.
pub fn verify_chain(blocks: &[Block]) -> Result<(), BrokenLink> {
    let mut prev = Digest::ZERO;
    for (i, block) in blocks.iter().enumerate() {
        let broken = BrokenLink { block: i as u64 };
        if block.number != i as u64 || block.prev_hash != prev || !block.is_self_consistent() {
            return Err(broken);
        }
        prev = block.header_hash();
    }
    Ok(())
}

/// Verifies a chain given as canonical block encodings (e.g. exported files).
/// An entry that fails to decode, or decodes from a non-canonical spelling,
/// breaks the chain at its own position.
pub fn verify_encoded_chain(encoded: &[Vec<u8>]) -> Result<Vec<Block>, BrokenLink> {
    let mut blocks = Vec::with_capacity(encoded.len());
    for (i, bytes) in encoded.iter().enumerate() {
        let block = Block::from_canonical(bytes).map_err(|_| BrokenLink { block: i as u64 })?;
        blocks.push(block);
    }
    verify_chain(&blocks)?;
    Ok(blocks)
}
