//! `passion` command-line operator tool.
//!
//! State lives under `--home` (see [`home`]); each invocation rebuilds the
//! in-process network from it, runs one command, and writes back the blocks
//! it committed.

pub mod error;
pub mod home;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use passion_bench::{render_report, Bench, BenchmarkConfig, ReportFormat};
use passion_broker::{BrokerConfig, BrokerServer, LedgerAuthenticator, LedgerBridge};
use passion_core::chaincode::{parse_rights, AccessControl, AccessError, CHAINCODE_ID};
use passion_core::codec::{b64_decode, b64_encode};
use passion_core::config::{NetworkConfig, Topology, DEFAULT_VALIDITY_MS};
use passion_core::identity::{KeyPair, Role, SigningIdentity};
use passion_core::ledger::{export_block, read_exported, verify_encoded_chain, Backend, ValidationCode};
use passion_core::txflow::{str_args, Clock, Network, SystemClock, TxFlowError, LIFECYCLE_CHAINCODE};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

pub use error::{codes_help, CliError, ERROR_CODES};
pub use home::Home;

#[derive(Debug, Parser)]
#[command(name = "passion", version, about = "Operate a PASSION network: ledger, access-control contract, broker and benchmarks")]
#[command(after_help = codes_help())]
pub struct Cli {
    /// Directory holding certificates, keys and the stored ledger.
    #[arg(long, global = true, env = "PASSION_HOME", default_value = "passion-home")]
    pub home: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or remove the network's identities.
    #[command(subcommand)]
    Network(NetworkCmd),
    /// Create channels.
    #[command(subcommand)]
    Channel(ChannelCmd),
    /// Deploy, invoke and query the access-control contract.
    #[command(subcommand)]
    Chaincode(ChaincodeCmd),
    /// Enroll, revoke and sign with identities.
    #[command(subcommand)]
    Identity(IdentityCmd),
    /// Run the publish/subscribe broker.
    #[command(subcommand)]
    Broker(BrokerCmd),
    /// Run benchmarks.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Verify, export and import stored chains.
    #[command(subcommand)]
    Ledger(LedgerCmd),
}

#[derive(Debug, Subcommand)]
pub enum NetworkCmd {
    /// Instantiate the CAs and issue every node and default user certificate.
    Up {
        /// Topology JSON; the built-in three-org topology when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed key generation (for reproducible test networks).
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing network under --home.
        #[arg(long)]
        force: bool,
    },
    /// Delete everything `network up` wrote.
    Down,
    /// Print channels and their heights.
    Status,
    /// Print the built-in three-org topology.
    DefaultConfig,
}

#[derive(Debug, Subcommand)]
pub enum ChannelCmd {
    /// Write the genesis block and join every member peer.
    Create { id: String },
}

#[derive(Debug, Args)]
pub struct CallArgs {
    pub channel: String,
    pub function: String,
    pub args: Vec<String>,
    /// Calling identity; defaults to the admin of the channel's first member.
    #[arg(long = "as")]
    pub as_subject: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ChaincodeCmd {
    /// Deploy the contract through the lifecycle chaincode.
    Deploy {
        channel: String,
        #[arg(long = "as")]
        as_subject: Option<String>,
    },
    /// Submit a transaction and wait for its commit.
    Invoke(CallArgs),
    /// Evaluate a read-only call on one peer.
    Query(CallArgs),
}

#[derive(Debug, Subcommand)]
pub enum IdentityCmd {
    /// Issue a new certificate from an org's CA.
    Enroll {
        org: String,
        subject: String,
        #[arg(long, default_value = "device")]
        role: String,
    },
    /// Revoke a subject's certificate.
    Revoke { subject: String },
    /// Print a subject's public key (base64).
    PublicKey { subject: String },
    /// Sign a base64 message, e.g. a challenge nonce; prints base64.
    Sign { subject: String, message_b64: String },
    /// Issue a contract grant (`rights` is comma-separated: read,write,subscribe,publish).
    Grant {
        channel: String,
        subject: String,
        resource: String,
        rights: String,
        #[arg(long = "as")]
        as_subject: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BrokerCmd {
    /// Serve the broker over TCP until interrupted (or for --duration-ms).
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        duration_ms: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Prepare the asset pool and run every round.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Channel to benchmark; defaults to the first configured channel.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long = "as")]
        as_subject: Option<String>,
        /// Report printed to stdout: `text` (table) or `json`.
        #[arg(long, default_value = "text")]
        format: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum LedgerCmd {
    /// Recompute every digest of a stored chain.
    Verify { channel: String },
    /// Copy a stored chain to `<dir>/<channel>/block_<n>.json`.
    Export {
        channel: String,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Replace a stored chain with `<dir>/<channel>/block_<n>.json`, unchecked.
    Import {
        channel: String,
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Settings for `broker serve`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrokerServeConfig {
    pub channel: String,
    /// Identity the broker verifies challenges and bridges readings as.
    pub identity: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub bridge_topics: Vec<String>,
    pub inflight_window: Option<usize>,
    pub retry_interval_ms: Option<u64>,
    pub max_offline_queue: Option<usize>,
    pub session_expiry_ms: Option<u64>,
}

fn default_listen() -> String {
    "127.0.0.1:1883".into()
}

impl BrokerServeConfig {
    pub fn broker_config(&self) -> BrokerConfig {
        let d = BrokerConfig::default();
        BrokerConfig {
            inflight_window: self.inflight_window.unwrap_or(d.inflight_window),
            retry_interval_ms: self.retry_interval_ms.unwrap_or(d.retry_interval_ms),
            max_offline_queue: self.max_offline_queue.unwrap_or(d.max_offline_queue),
            session_expiry_ms: self.session_expiry_ms,
            bridge_topics: self.bridge_topics.clone(),
        }
    }
}

fn flow_error(e: TxFlowError) -> CliError {
    match e {
        TxFlowError::Chaincode(c) => CliError::Chaincode {
            code: c.code,
            message: c.message,
        },
        TxFlowError::UnknownChannel(c) => CliError::UnknownChannel(c),
        other => CliError::Network(other.to_string()),
    }
}

fn access_error(e: AccessError) -> CliError {
    match e {
        AccessError::Flow(f) => flow_error(f),
        AccessError::Rejected { tx_id, flag } => CliError::TxInvalid {
            tx_id,
            flag: format!("{flag:?}"),
        },
        AccessError::Decode(m) => CliError::Network(m),
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn display_payload(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => format!("base64:{}", b64_encode(bytes)),
    }
}

fn identity<'a>(topology: &'a Topology, subject: &str) -> Result<&'a SigningIdentity, CliError> {
    topology
        .identity(subject)
        .ok_or_else(|| CliError::UnknownIdentity(subject.to_string()))
}

/// `--as` or the admin of the channel's first member org.
fn caller<'a>(topology: &'a Topology, channel: &str, as_subject: &Option<String>) -> Result<&'a SigningIdentity, CliError> {
    match as_subject {
        Some(s) => identity(topology, s),
        None => {
            let spec = topology
                .config
                .channel(channel)
                .ok_or_else(|| CliError::UnknownChannel(channel.to_string()))?;
            identity(topology, &format!("admin@{}", spec.members[0]))
        }
    }
}

fn require_channel(net: &Network, channel: &str) -> Result<(), CliError> {
    if net.channel_ids().iter().any(|c| c == channel) {
        Ok(())
    } else {
        Err(CliError::UnknownChannel(channel.to_string()))
    }
}

/// Runs one command; normal output goes to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let home = Home::new(&cli.home);
    let w = |out: &mut dyn Write, s: String| -> Result<(), CliError> {
        writeln!(out, "{s}").map_err(|e| CliError::Io(e.to_string()))?;
        out.flush().map_err(|e| CliError::Io(e.to_string()))
    };
    match cli.command {
        Command::Network(cmd) => match cmd {
            NetworkCmd::Up { config, seed, force } => {
                let config = match config {
                    Some(p) => NetworkConfig::from_json(&read_file(&p)?).map_err(|e| CliError::Config(e.to_string()))?,
                    None => NetworkConfig::table_one(),
                };
                config.validate().map_err(|e| CliError::Config(e.to_string()))?;
                if home.is_initialized() {
                    if !force {
                        return Err(CliError::AlreadyInitialized(home.root().display().to_string()));
                    }
                    home.wipe()?;
                }
                let mut rng = match seed {
                    Some(s) => ChaCha20Rng::seed_from_u64(s),
                    None => ChaCha20Rng::from_entropy(),
                };
                let topology = Topology::generate(config, &mut rng, SystemClock.now_ms(), DEFAULT_VALIDITY_MS)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let (nodes, users) = home.init(&topology)?;
                w(out, format!("wrote {nodes} node certificates and {users} user certificates to {}", home.root().display()))
            }
            NetworkCmd::Down => {
                home.require_initialized()?;
                home.wipe()?;
                w(out, format!("removed network under {}", home.root().display()))
            }
            NetworkCmd::Status => {
                home.require_initialized()?;
                for id in home.stored_channels()? {
                    w(out, format!("{id} height={}", home.stored_height(&id)))?;
                }
                Ok(())
            }
            NetworkCmd::DefaultConfig => w(out, NetworkConfig::table_one().to_json_pretty()),
        },

        Command::Channel(ChannelCmd::Create { id }) => {
            let loaded = home.launch(Backend::default())?;
            let spec = loaded
                .topology
                .config
                .channel(&id)
                .ok_or_else(|| CliError::UnknownChannel(id.clone()))?;
            if loaded.network.channel_ids().contains(&id) {
                return Err(CliError::ChannelExists(id));
            }
            let genesis = loaded.topology.genesis(spec, SystemClock.now_ms());
            let peers: Vec<&str> = loaded.topology.config.peers_of(&spec.members).collect();
            loaded.network.create_channel(genesis, &peers).map_err(flow_error)?;
            home.persist(&loaded.network)?;
            w(out, format!("created channel {id} on {}", peers.join(", ")))
        }

        Command::Chaincode(cmd) => {
            let loaded = home.launch(Backend::default())?;
            let net = &loaded.network;
            let result = match &cmd {
                ChaincodeCmd::Deploy { channel, as_subject } => {
                    require_channel(net, channel)?;
                    let who = caller(&loaded.topology, channel, as_subject)?;
                    let r = net
                        .client(who.clone())
                        .invoke(channel, LIFECYCLE_CHAINCODE, "deploy", str_args([CHAINCODE_ID, "1.0"]))
                        .map_err(flow_error)?;
                    if !r.flag.is_valid() {
                        return Err(CliError::TxInvalid {
                            tx_id: r.tx_id,
                            flag: format!("{:?}", r.flag),
                        });
                    }
                    format!("deployed {CHAINCODE_ID} on {channel} in block {} (tx {})", r.block_number, r.tx_id)
                }
                ChaincodeCmd::Invoke(call) => {
                    require_channel(net, &call.channel)?;
                    let who = caller(&loaded.topology, &call.channel, &call.as_subject)?;
                    let r = net
                        .client(who.clone())
                        .invoke(&call.channel, CHAINCODE_ID, &call.function, str_args(call.args.iter()))
                        .map_err(flow_error)?;
                    if r.flag != ValidationCode::Valid {
                        home.persist(net)?;
                        return Err(CliError::TxInvalid {
                            tx_id: r.tx_id,
                            flag: format!("{:?}", r.flag),
                        });
                    }
                    serde_json::json!({
                        "tx_id": r.tx_id,
                        "block": r.block_number,
                        "flag": format!("{:?}", r.flag),
                        "payload": display_payload(&r.payload),
                    })
                    .to_string()
                }
                ChaincodeCmd::Query(call) => {
                    require_channel(net, &call.channel)?;
                    let who = caller(&loaded.topology, &call.channel, &call.as_subject)?;
                    let payload = net
                        .client(who.clone())
                        .query(&call.channel, CHAINCODE_ID, &call.function, str_args(call.args.iter()))
                        .map_err(flow_error)?;
                    display_payload(&payload)
                }
            };
            home.persist(net)?;
            w(out, result)
        }

        Command::Identity(cmd) => match cmd {
            IdentityCmd::Enroll { org, subject, role } => {
                let role: Role = role.parse().map_err(|e: passion_core::identity::IdentityError| CliError::Config(e.to_string()))?;
                let mut topology = home.load_topology()?;
                let mut rng = ChaCha20Rng::from_entropy();
                let id = topology
                    .enroll(&mut rng, &org, &subject, role, DEFAULT_VALIDITY_MS, SystemClock.now_ms())
                    .map_err(|e| CliError::Identity(e.to_string()))?;
                home.save_identity(&id, false)?;
                home.save_cas(&topology)?;
                w(out, format!("enrolled {subject} ({role}) with {org}; public key {}", b64_encode(&id.cert.public_key)))
            }
            IdentityCmd::Revoke { subject } => {
                let topology = home.load_topology()?;
                let cert = identity(&topology, &subject)?.cert.clone();
                topology
                    .msp
                    .revoke(&cert.issuer, cert.serial)
                    .map_err(|e| CliError::Identity(e.to_string()))?;
                home.save_revoked(&topology.msp)?;
                w(out, format!("revoked {subject} ({} serial {})", cert.issuer, cert.serial))
            }
            IdentityCmd::PublicKey { subject } => {
                let topology = home.load_topology()?;
                w(out, b64_encode(&identity(&topology, &subject)?.cert.public_key))
            }
            IdentityCmd::Sign { subject, message_b64 } => {
                let topology = home.load_topology()?;
                let message = b64_decode(&message_b64).map_err(|e| CliError::Config(format!("message: {e}")))?;
                w(out, b64_encode(&identity(&topology, &subject)?.sign(&message)))
            }
            IdentityCmd::Grant {
                channel,
                subject,
                resource,
                rights,
                as_subject,
            } => {
                let loaded = home.launch(Backend::default())?;
                require_channel(&loaded.network, &channel)?;
                let rights = parse_rights(&rights).map_err(CliError::Config)?;
                let who = caller(&loaded.topology, &channel, &as_subject)?;
                let access = AccessControl::new(loaded.network.client(who.clone()), &channel);
                access.grant(&subject, &resource, &rights, None).map_err(access_error)?;
                home.persist(&loaded.network)?;
                w(out, format!("granted {subject} on {resource}"))
            }
        },

        Command::Broker(BrokerCmd::Serve { config, duration_ms }) => {
            let cfg: BrokerServeConfig =
                serde_json::from_str(&read_file(&config)?).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
            let loaded = home.launch(Backend::default())?;
            require_channel(&loaded.network, &cfg.channel)?;
            let who = identity(&loaded.topology, &cfg.identity)?;
            let access = AccessControl::new(loaded.network.client(who.clone()), &cfg.channel);
            let bridge = LedgerBridge::start(access.clone());
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let mut server = BrokerServer::bind(
                cfg.listen.as_str(),
                cfg.broker_config(),
                Arc::new(LedgerAuthenticator::new(access)),
                Some(bridge.sender()),
                clock,
            )
            .map_err(|e| CliError::Broker(format!("bind {}: {e}", cfg.listen)))?;
            w(out, format!("listening on {}", server.local_addr()))?;
            let deadline = duration_ms.map(|ms| Instant::now() + Duration::from_millis(ms));
            let mut last_persist = Instant::now();
            while deadline.is_none_or(|d| Instant::now() < d) {
                std::thread::sleep(Duration::from_millis(50));
                if last_persist.elapsed() >= Duration::from_secs(1) {
                    home.persist(&loaded.network)?;
                    last_persist = Instant::now();
                }
            }
            server.shutdown();
            // the server holds a bridge sender; the bridge drains once it is gone
            drop(server);
            let stats = bridge.shutdown();
            home.persist(&loaded.network)?;
            w(
                out,
                format!(
                    "broker stopped; bridged {} readings ({} committed, {} failed)",
                    stats.forwarded, stats.committed, stats.failed
                ),
            )
        }

        Command::Bench(BenchCmd::Run {
            config,
            channel,
            as_subject,
            format,
        }) => {
            let format: ReportFormat = format.parse().map_err(CliError::Config)?;
            let bench_cfg = BenchmarkConfig::from_json(&read_file(&config)?).map_err(|e| CliError::Config(e.to_string()))?;
            let loaded = home.launch(bench_cfg.state_db)?;
            let channel = match channel {
                Some(c) => c,
                None => loaded
                    .topology
                    .config
                    .channels
                    .first()
                    .map(|c| c.id.clone())
                    .ok_or_else(|| CliError::Config("no channels configured".into()))?,
            };
            require_channel(&loaded.network, &channel)?;
            let who = caller(&loaded.topology, &channel, &as_subject)?;
            let access = AccessControl::new(loaded.network.client(who.clone()), &channel);
            let device = "bench-device";
            match access.get_sensor_info(device) {
                Ok(_) => {}
                Err(e) if e.code() == Some("NOT_FOUND") => {
                    let key = KeyPair::generate(&mut ChaCha20Rng::from_entropy());
                    access
                        .register_device(device, &key.public_key(), &[])
                        .map_err(access_error)?;
                    let write = parse_rights("write").expect("known right");
                    access.grant(who.subject(), device, &write, None).map_err(access_error)?;
                }
                Err(e) => return Err(access_error(e)),
            }
            let report = Bench::new(access, device)
                .run(&bench_cfg)
                .map_err(|e| CliError::Bench(e.to_string()))?;
            home.persist(&loaded.network)?;
            if let Some(path) = &bench_cfg.report_path {
                fs::write(path, render_report(&report, ReportFormat::Json))
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            let rendered = render_report(&report, format);
            w(out, String::from_utf8_lossy(&rendered).trim_end().to_string())
        }

        Command::Ledger(cmd) => match cmd {
            LedgerCmd::Verify { channel } => {
                home.require_initialized()?;
                let encoded = home.read_chain(&channel)?;
                let blocks = verify_encoded_chain(&encoded).map_err(|b| CliError::Tampered {
                    channel: channel.clone(),
                    block: b.block,
                })?;
                w(out, format!("channel {channel}: {} blocks verified", blocks.len()))
            }
            LedgerCmd::Export { channel, dir } => {
                home.require_initialized()?;
                let encoded = home.read_chain(&channel)?;
                let blocks = verify_encoded_chain(&encoded).map_err(|b| CliError::Tampered {
                    channel: channel.clone(),
                    block: b.block,
                })?;
                for b in &blocks {
                    export_block(&dir, &channel, b).map_err(|e| CliError::Io(e.to_string()))?;
                }
                w(out, format!("exported {} blocks to {}", blocks.len(), dir.join(&channel).display()))
            }
            LedgerCmd::Import { channel, dir } => {
                home.require_initialized()?;
                if home.load_config()?.channel(&channel).is_none() {
                    return Err(CliError::UnknownChannel(channel));
                }
                let files = read_exported(&dir, &channel).map_err(|e| CliError::Io(e.to_string()))?;
                if files.is_empty() {
                    return Err(CliError::Io(format!("no blocks under {}", dir.join(&channel).display())));
                }
                let target = home.ledger_dir().join(&channel);
                if target.exists() {
                    fs::remove_dir_all(&target).map_err(|e| CliError::Io(e.to_string()))?;
                }
                fs::create_dir_all(&target).map_err(|e| CliError::Io(e.to_string()))?;
                for (n, bytes) in files.iter().enumerate() {
                    let path = target.join(passion_core::ledger::block_file_name(n as u64));
                    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                }
                w(out, format!("imported {} blocks into {channel}", files.len()))
            }
        },
    }
}
