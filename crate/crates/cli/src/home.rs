//! On-disk network state.
//!
//! ```text
//! <home>/network.json               topology config
//! <home>/cas.json                   CA keys and last issued serials
//! <home>/certs/nodes/<subject>.cert.json
//! <home>/certs/users/<subject>.cert.json
//! <home>/keys/<subject>.key.json
//! <home>/revoked.json               [[issuer, serial], ...]
//! <home>/ledger/<channel>/block_<n>.json
//! ```
//!
//! Every command rebuilds the in-process network by replaying the stored
//! chains, then appends whatever it committed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use passion_core::codec::{b64_decode, b64_encode};
use passion_core::config::{NetworkConfig, Topology};
use passion_core::identity::{Certificate, CertificateAuthority, KeyPair, MspRegistry, SigningIdentity};
use passion_core::ledger::{block_file_name, export_block, read_exported, verify_encoded_chain, Backend};
use passion_core::txflow::{Network, NetworkOptions, SystemClock};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
struct StoredCa {
    org: String,
    name: String,
    secret_b64: String,
    last_serial: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredKey {
    subject: String,
    secret_b64: String,
}

#[derive(Debug, Clone)]
pub struct Home {
    root: PathBuf,
}

/// A network rebuilt from disk.
pub struct Loaded {
    pub topology: Topology,
    pub network: Network,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("state serializes");
    fs::write(path, body).map_err(io(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let body = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&body).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))
}

impl Home {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Home { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("network.json")
    }

    pub fn node_certs(&self) -> PathBuf {
        self.root.join("certs").join("nodes")
    }

    pub fn user_certs(&self) -> PathBuf {
        self.root.join("certs").join("users")
    }

    pub fn ledger_dir(&self) -> PathBuf {
        self.root.join("ledger")
    }

    fn keys_dir(&self) -> PathBuf {
        self.root.join("keys")
    }

    fn cas_path(&self) -> PathBuf {
        self.root.join("cas.json")
    }

    fn revoked_path(&self) -> PathBuf {
        self.root.join("revoked.json")
    }

    pub fn is_initialized(&self) -> bool {
        self.config_path().is_file()
    }

    pub fn require_initialized(&self) -> Result<(), CliError> {
        if self.is_initialized() {
            Ok(())
        } else {
            Err(CliError::NotInitialized(self.root.display().to_string()))
        }
    }

    /// Removes everything `init` writes.
    pub fn wipe(&self) -> Result<(), CliError> {
        for dir in [self.root.join("certs"), self.keys_dir(), self.ledger_dir()] {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(io(&dir))?;
            }
        }
        for f in [self.config_path(), self.cas_path(), self.revoked_path()] {
            if f.exists() {
                fs::remove_file(&f).map_err(io(&f))?;
            }
        }
        Ok(())
    }

    /// Writes a freshly generated topology. Returns (node certs, user certs).
    pub fn init(&self, topology: &Topology) -> Result<(usize, usize), CliError> {
        for dir in [self.node_certs(), self.user_certs(), self.keys_dir(), self.ledger_dir()] {
            fs::create_dir_all(&dir).map_err(io(&dir))?;
        }
        fs::write(self.config_path(), topology.config.to_json_pretty()).map_err(io(&self.config_path()))?;
        for n in &topology.nodes {
            self.save_identity(n, true)?;
        }
        for u in &topology.users {
            self.save_identity(u, false)?;
        }
        self.save_cas(topology)?;
        write_json(&self.revoked_path(), &Vec::<(String, u64)>::new())?;
        Ok((topology.nodes.len(), topology.users.len()))
    }

    pub fn save_identity(&self, id: &SigningIdentity, node: bool) -> Result<(), CliError> {
        let dir = if node { self.node_certs() } else { self.user_certs() };
        let cert = dir.join(format!("{}.cert.json", id.subject()));
        fs::write(&cert, id.cert.to_json()).map_err(io(&cert))?;
        write_json(
            &self.keys_dir().join(format!("{}.key.json", id.subject())),
            &StoredKey {
                subject: id.subject().to_string(),
                secret_b64: b64_encode(&id.key.secret_bytes()),
            },
        )
    }

    pub fn save_cas(&self, topology: &Topology) -> Result<(), CliError> {
        let cas: Vec<StoredCa> = topology
            .cas
            .values()
            .map(|ca| StoredCa {
                org: ca.org().to_string(),
                name: ca.name().to_string(),
                secret_b64: b64_encode(&ca.key().secret_bytes()),
                last_serial: ca.last_serial(),
            })
            .collect();
        write_json(&self.cas_path(), &cas)
    }

    pub fn save_revoked(&self, msp: &MspRegistry) -> Result<(), CliError> {
        write_json(&self.revoked_path(), &msp.revoked())
    }

    fn load_key(&self, subject: &str) -> Result<KeyPair, CliError> {
        let stored: StoredKey = read_json(&self.keys_dir().join(format!("{subject}.key.json")))?;
        let secret = b64_decode(&stored.secret_b64).map_err(|e| CliError::Corrupt(format!("key of {subject}: {e}")))?;
        KeyPair::from_secret(&secret).map_err(|e| CliError::Corrupt(format!("key of {subject}: {e}")))
    }

    fn load_identities(&self, dir: &Path, msp: &MspRegistry) -> Result<Vec<SigningIdentity>, CliError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".cert.json"))
            .collect();
        paths.sort();
        let mut out = Vec::new();
        for p in paths {
            let body = fs::read_to_string(&p).map_err(io(&p))?;
            let cert = Certificate::from_json(&body).map_err(|e| CliError::Corrupt(format!("{}: {e}", p.display())))?;
            msp.register(cert.clone())
                .map_err(|e| CliError::Corrupt(format!("{}: {e}", p.display())))?;
            let key = self.load_key(&cert.subject)?;
            out.push(SigningIdentity { cert, key });
        }
        Ok(out)
    }

    pub fn load_config(&self) -> Result<NetworkConfig, CliError> {
        self.require_initialized()?;
        let path = self.config_path();
        let body = fs::read_to_string(&path).map_err(io(&path))?;
        NetworkConfig::from_json(&body).map_err(|e| CliError::Corrupt(format!("{}: {e}", path.display())))
    }

    pub fn load_topology(&self) -> Result<Topology, CliError> {
        let config = self.load_config()?;
        let msp = Arc::new(MspRegistry::new());
        let mut cas = BTreeMap::new();
        let stored: Vec<StoredCa> = read_json(&self.cas_path())?;
        for ca in stored {
            let secret = b64_decode(&ca.secret_b64).map_err(|e| CliError::Corrupt(format!("CA {}: {e}", ca.name)))?;
            let key = KeyPair::from_secret(&secret).map_err(|e| CliError::Corrupt(format!("CA {}: {e}", ca.name)))?;
            let ca = CertificateAuthority::resume(ca.name, ca.org.clone(), key, ca.last_serial);
            msp.add_ca(&ca);
            cas.insert(ca.org().to_string(), ca);
        }
        let nodes = self.load_identities(&self.node_certs(), &msp)?;
        let users = self.load_identities(&self.user_certs(), &msp)?;
        let revoked: Vec<(String, u64)> = read_json(&self.revoked_path())?;
        for (issuer, serial) in revoked {
            msp.revoke(&issuer, serial)
                .map_err(|e| CliError::Corrupt(format!("revoked.json: {e}")))?;
        }
        Ok(Topology {
            config,
            msp,
            cas,
            nodes,
            users,
        })
    }

    /// Channels with a stored chain, sorted.
    pub fn stored_channels(&self) -> Result<Vec<String>, CliError> {
        let dir = self.ledger_dir();
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// The raw block files of a stored channel.
    pub fn read_chain(&self, channel: &str) -> Result<Vec<Vec<u8>>, CliError> {
        if !self.ledger_dir().join(channel).is_dir() {
            return Err(CliError::UnknownChannel(channel.to_string()));
        }
        read_exported(&self.ledger_dir(), channel).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn stored_height(&self, channel: &str) -> u64 {
        let dir = self.ledger_dir().join(channel);
        (0..).take_while(|n| dir.join(block_file_name(*n)).is_file()).count() as u64
    }

    pub fn options(config: &NetworkConfig, backend: Backend) -> NetworkOptions {
        NetworkOptions {
            orderer: config.orderer.orderer_config(),
            backend,
            tx_timeout: Duration::from_secs(30),
        }
    }

    /// Rebuilds the network and replays every stored chain.
    pub fn launch(&self, backend: Backend) -> Result<Loaded, CliError> {
        let topology = self.load_topology()?;
        let options = Self::options(&topology.config, backend);
        let network = topology
            .network(Arc::new(SystemClock), options)
            .map_err(|e| CliError::Network(e.to_string()))?;
        for id in self.stored_channels()? {
            let encoded = self.read_chain(&id)?;
            let blocks = verify_encoded_chain(&encoded)
                .map_err(|b| CliError::Corrupt(format!("channel {id}: hash chain broken at block {}", b.block)))?;
            let spec = topology
                .config
                .channel(&id)
                .ok_or_else(|| CliError::Corrupt(format!("stored channel {id} is not in network.json")))?;
            let peers: Vec<&str> = topology.config.peers_of(&spec.members).collect();
            network
                .join_from_blocks(blocks, &peers)
                .map_err(|e| CliError::Corrupt(format!("channel {id}: {e}")))?;
        }
        Ok(Loaded { topology, network })
    }

    /// Writes blocks committed since the chain was loaded.
    pub fn persist(&self, network: &Network) -> Result<u64, CliError> {
        let mut written = 0;
        for id in network.channel_ids() {
            if !network.sync(&id, Duration::from_secs(10)).map_err(|e| CliError::Network(e.to_string()))? {
                return Err(CliError::Network(format!("peers of {id} did not converge")));
            }
            let peer = network.channel_peers(&id).map_err(|e| CliError::Network(e.to_string()))?[0].clone();
            let channel = peer.channel(&id).map_err(|e| CliError::Network(e.to_string()))?;
            for block in channel.blocks_from(self.stored_height(&id)) {
                export_block(&self.ledger_dir(), &id, &block).map_err(|e| CliError::Io(e.to_string()))?;
                written += 1;
            }
        }
        Ok(written)
    }
}
