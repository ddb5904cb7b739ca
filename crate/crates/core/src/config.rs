//! Network topology configuration and in-process bootstrap.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::chaincode::{PassionContract, CHAINCODE_ID};
use crate::identity::{CertificateAuthority, IdentityError, KeyPair, MspRegistry, Role, SigningIdentity};
use crate::ledger::{Block, ChannelConfig};
use crate::txflow::{
    str_args, ChaincodeRegistry, Clock, EndorsementPolicy, Lifecycle, Network, NetworkOptions, OrdererConfig,
    OrdererMode, TxFlowError, LIFECYCLE_CHAINCODE,
};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid network config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Identity(#[from] IdentityError),
    #[error(transparent)]
    Flow(#[from] TxFlowError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub name: String,
    #[serde(default)]
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrgConfig {
    pub name: String,
    /// Issuing CA; defaults to `<name>-CA`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ca: Option<NodeConfig>,
    /// Listed for completeness; shares the CA's signing key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls_ca: Option<NodeConfig>,
    #[serde(default)]
    pub peers: Vec<NodeConfig>,
}

impl OrgConfig {
    pub fn ca_node(&self) -> NodeConfig {
        self.ca.clone().unwrap_or_else(|| NodeConfig {
            name: format!("{}-CA", self.name),
            endpoint: String::new(),
        })
    }
}

fn default_orderer_name() -> String {
    "Solo@Orderer".into()
}

fn default_orderer_org() -> String {
    "Orderer".into()
}

fn default_max_block_txs() -> usize {
    OrdererConfig::default().max_block_txs
}

fn default_batch_timeout_ms() -> u64 {
    OrdererConfig::default().batch_timeout.as_millis() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrdererSection {
    #[serde(default)]
    pub mode: OrdererMode,
    #[serde(default = "default_orderer_name")]
    pub name: String,
    #[serde(default = "default_orderer_org")]
    pub org: String,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ca: Option<NodeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tls_ca: Option<NodeConfig>,
    #[serde(default = "default_max_block_txs")]
    pub max_block_txs: usize,
    #[serde(default = "default_batch_timeout_ms")]
    pub batch_timeout_ms: u64,
}

impl Default for OrdererSection {
    fn default() -> Self {
        OrdererSection {
            mode: OrdererMode::Solo,
            name: default_orderer_name(),
            org: default_orderer_org(),
            endpoint: String::new(),
            ca: None,
            tls_ca: None,
            max_block_txs: default_max_block_txs(),
            batch_timeout_ms: default_batch_timeout_ms(),
        }
    }
}

impl OrdererSection {
    pub fn orderer_config(&self) -> OrdererConfig {
        OrdererConfig {
            mode: self.mode,
            max_block_txs: self.max_block_txs,
            batch_timeout: Duration::from_millis(self.batch_timeout_ms),
        }
    }

    fn as_org(&self) -> OrgConfig {
        OrgConfig {
            name: self.org.clone(),
            ca: self.ca.clone(),
            tls_ca: self.tls_ca.clone(),
            peers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub id: String,
    pub members: Vec<String>,
    /// Defaults to `OUTOF(min(2, n), members…)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endorsement_policy: Option<String>,
}

impl ChannelSpec {
    pub fn policy(&self) -> String {
        match &self.endorsement_policy {
            Some(p) => p.clone(),
            None => EndorsementPolicy::default_for(&self.members).to_string(),
        }
    }

    pub fn channel_config(&self) -> ChannelConfig {
        ChannelConfig {
            channel_id: self.id.clone(),
            members: self.members.iter().cloned().collect(),
            endorsement_policy: self.policy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub orgs: Vec<OrgConfig>,
    #[serde(default)]
    pub orderer: OrdererSection,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
}

fn node(name: &str, endpoint: &str) -> NodeConfig {
    NodeConfig {
        name: name.into(),
        endpoint: endpoint.into(),
    }
}

impl NetworkConfig {
    /// Three organisations with one peer each, their CAs, and a solo
    /// orderer, sharing the channel `iotchannel`.
    pub fn table_one() -> NetworkConfig {
        let org = |name: &str, tls: &str, ca: &str, peer: &str, peer_ep: &str| OrgConfig {
            name: name.into(),
            tls_ca: Some(node(&format!("{name}-TLS-CA"), tls)),
            ca: Some(node(&format!("{name}-CA"), ca)),
            peers: vec![node(peer, peer_ep)],
        };
        NetworkConfig {
            orgs: vec![
                org("Org1", "10.0.1.10", "10.0.1.20", "peer@org1", "10.0.1.30"),
                org("Org2", "10.0.2.10", "10.0.2.20", "peer@org2", "10.0.2.30"),
                org("IoT", "10.0.4.10", "10.0.4.20", "peer@IoT", "192.168.10.30"),
            ],
            orderer: OrdererSection {
                endpoint: "10.0.5.30".into(),
                ca: Some(node("Orderer-CA", "10.0.5.20")),
                tls_ca: Some(node("Orderer-TLS-CA", "10.0.5.10")),
                ..Default::default()
            },
            channels: vec![ChannelSpec {
                id: "iotchannel".into(),
                members: vec!["Org1".into(), "Org2".into(), "IoT".into()],
                endorsement_policy: Some("OUTOF(2,Org1,Org2,IoT)".into()),
            }],
        }
    }

    pub fn from_json(s: &str) -> Result<NetworkConfig, ConfigError> {
        let c: NetworkConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Every org including the orderer's.
    pub fn all_orgs(&self) -> Vec<OrgConfig> {
        let mut v = self.orgs.clone();
        v.push(self.orderer.as_org());
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let mut orgs = BTreeSet::new();
        let mut names = BTreeSet::new();
        let mut endpoints = BTreeSet::new();
        for org in self.all_orgs() {
            if org.name.is_empty() || !orgs.insert(org.name.clone()) {
                return bad(format!("duplicate or empty org name {:?}", org.name));
            }
            let nodes = org.peers.iter().cloned().chain([org.ca_node()]).chain(org.tls_ca.clone());
            for n in nodes {
                if n.name.is_empty() || n.name.contains('/') || !names.insert(n.name.clone()) {
                    return bad(format!("duplicate or invalid node name {:?}", n.name));
                }
                if !n.endpoint.is_empty() && !endpoints.insert(n.endpoint.clone()) {
                    return bad(format!("duplicate endpoint {:?}", n.endpoint));
                }
            }
        }
        if !names.insert(self.orderer.name.clone()) {
            return bad(format!("duplicate node name {:?}", self.orderer.name));
        }
        if !self.orderer.endpoint.is_empty() && !endpoints.insert(self.orderer.endpoint.clone()) {
            return bad(format!("duplicate endpoint {:?}", self.orderer.endpoint));
        }
        if self.orderer.max_block_txs == 0 {
            return bad("orderer.max_block_txs must be at least 1".into());
        }
        let mut ids = BTreeSet::new();
        for ch in &self.channels {
            if ch.id.is_empty() || ch.id.contains('/') || !ids.insert(ch.id.clone()) {
                return bad(format!("duplicate or invalid channel id {:?}", ch.id));
            }
            if ch.members.is_empty() {
                return bad(format!("channel {:?} has no members", ch.id));
            }
            for m in &ch.members {
                if !self.orgs.iter().any(|o| &o.name == m) {
                    return bad(format!("channel {:?} member {m:?} is not a declared peer org", ch.id));
                }
            }
            let policy: EndorsementPolicy = ch
                .policy()
                .parse()
                .map_err(|e| ConfigError::Invalid(format!("channel {:?} policy: {e}", ch.id)))?;
            if let Some(o) = policy.orgs().iter().find(|o| !ch.members.contains(o)) {
                return bad(format!("channel {:?} policy names non-member {o:?}", ch.id));
            }
        }
        Ok(())
    }

    pub fn channel(&self, id: &str) -> Option<&ChannelSpec> {
        self.channels.iter().find(|c| c.id == id)
    }

    /// Peer names of the given orgs, in config order.
    pub fn peers_of<'a>(&'a self, orgs: &'a [String]) -> impl Iterator<Item = &'a str> + 'a {
        self.orgs
            .iter()
            .filter(|o| orgs.contains(&o.name))
            .flat_map(|o| o.peers.iter().map(|p| p.name.as_str()))
    }
}

/// Default certificate lifetime for generated identities: one year.
pub const DEFAULT_VALIDITY_MS: u64 = 365 * 24 * 3600 * 1000;

/// Key material and certificates for a configured network.
#[derive(Debug)]
pub struct Topology {
    pub config: NetworkConfig,
    pub msp: Arc<MspRegistry>,
    pub cas: BTreeMap<String, CertificateAuthority>,
    /// One certificate per configured node (CAs, TLS-CAs, peers, orderer).
    pub nodes: Vec<SigningIdentity>,
    /// `admin@<org>` and `user@<org>` for every peer org.
    pub users: Vec<SigningIdentity>,
}

impl Topology {
    /// Creates every CA, registers its root, and enrolls all nodes and the
    /// default users.
    pub fn generate<R: RngCore + CryptoRng>(
        config: NetworkConfig,
        rng: &mut R,
        now: u64,
        validity_ms: u64,
    ) -> Result<Topology, ConfigError> {
        config.validate()?;
        let msp = Arc::new(MspRegistry::new());
        let mut cas = BTreeMap::new();
        let mut nodes = Vec::new();
        let mut users = Vec::new();
        for org in config.all_orgs() {
            let ca_node = org.ca_node();
            let mut ca = CertificateAuthority::new(ca_node.name.clone(), org.name.clone(), KeyPair::generate(rng));
            msp.add_ca(&ca);
            // the CA's own certificate is self-issued; the TLS-CA is an
            // identity of the same issuer
            let ca_key = ca.key().clone();
            let ca_cert = ca.issue(&msp, &ca_node.name, Role::Admin, &ca_key.public_key(), validity_ms, now)?;
            if let Some(tls) = &org.tls_ca {
                nodes.push(ca.enroll(&msp, rng, &tls.name, Role::Admin, validity_ms, now)?);
            }
            nodes.push(SigningIdentity {
                cert: ca_cert,
                key: ca_key,
            });
            if org.name == config.orderer.org {
                nodes.push(ca.enroll(&msp, rng, &config.orderer.name, Role::Orderer, validity_ms, now)?);
            } else {
                for p in &org.peers {
                    nodes.push(ca.enroll(&msp, rng, &p.name, Role::Peer, validity_ms, now)?);
                }
                for (who, role) in [("admin", Role::Admin), ("user", Role::Client)] {
                    users.push(ca.enroll(&msp, rng, &format!("{who}@{}", org.name), role, validity_ms, now)?);
                }
            }
            cas.insert(org.name.clone(), ca);
        }
        Ok(Topology {
            config,
            msp,
            cas,
            nodes,
            users,
        })
    }

    pub fn identity(&self, subject: &str) -> Option<&SigningIdentity> {
        self.nodes.iter().chain(&self.users).find(|i| i.subject() == subject)
    }

    pub fn orderer(&self) -> &SigningIdentity {
        self.identity(&self.config.orderer.name).expect("orderer identity is always generated")
    }

    pub fn admin(&self, org: &str) -> Option<&SigningIdentity> {
        self.identity(&format!("admin@{org}"))
    }

    pub fn user(&self, org: &str) -> Option<&SigningIdentity> {
        self.identity(&format!("user@{org}"))
    }

    pub fn ca_mut(&mut self, org: &str) -> Option<&mut CertificateAuthority> {
        self.cas.get_mut(org)
    }

    /// Enrolls an additional identity (e.g. a device) with `org`'s CA.
    pub fn enroll<R: RngCore + CryptoRng>(
        &mut self,
        rng: &mut R,
        org: &str,
        subject: &str,
        role: Role,
        validity_ms: u64,
        now: u64,
    ) -> Result<SigningIdentity, ConfigError> {
        let ca = self
            .cas
            .get_mut(org)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown org {org:?}")))?;
        Ok(ca.enroll(&self.msp, rng, subject, role, validity_ms, now)?)
    }

    /// A network with every configured peer added but no channels.
    pub fn network(&self, clock: Arc<dyn Clock>, options: NetworkOptions) -> Result<Network, ConfigError> {
        let net = Network::new(self.msp.clone(), standard_chaincodes(), clock, options)?;
        for org in &self.config.orgs {
            for p in &org.peers {
                let id = self
                    .identity(&p.name)
                    .ok_or_else(|| ConfigError::Invalid(format!("no identity for {}", p.name)))?;
                net.add_peer(id.clone());
            }
        }
        Ok(net)
    }

    /// The genesis block of a configured channel, signed by the orderer.
    pub fn genesis(&self, channel: &ChannelSpec, now: u64) -> Block {
        channel.channel_config().genesis_block(self.orderer(), now)
    }

    /// Creates the channel on all member peers and deploys the
    /// access-control contract through the first member's admin.
    pub fn create_channel(&self, net: &Network, channel: &ChannelSpec) -> Result<(), ConfigError> {
        let genesis = self.genesis(channel, net.clock().now_ms());
        let peers: Vec<&str> = self.config.peers_of(&channel.members).collect();
        net.create_channel(genesis, &peers)?;
        let admin = self
            .admin(&channel.members[0])
            .ok_or_else(|| ConfigError::Invalid(format!("no admin for {}", channel.members[0])))?;
        let r = net
            .client(admin.clone())
            .invoke(&channel.id, LIFECYCLE_CHAINCODE, "deploy", str_args([CHAINCODE_ID, "1.0"]))?;
        if !r.flag.is_valid() {
            return Err(ConfigError::Invalid(format!("deploy on {} committed as {:?}", channel.id, r.flag)));
        }
        Ok(())
    }

    /// `network` plus every configured channel.
    pub fn launch(&self, clock: Arc<dyn Clock>, options: NetworkOptions) -> Result<Network, ConfigError> {
        let net = self.network(clock, options)?;
        for ch in &self.config.channels {
            self.create_channel(&net, ch)?;
        }
        Ok(net)
    }
}

/// The lifecycle system chaincode plus the access-control contract.
pub fn standard_chaincodes() -> ChaincodeRegistry {
    let r = ChaincodeRegistry::new();
    r.install(LIFECYCLE_CHAINCODE, Arc::new(Lifecycle));
    r.install(CHAINCODE_ID, Arc::new(PassionContract::default()));
    r
}
