/// Every failure the CLI reports. Each variant has its own code and exit
/// status; `ERROR <code>: <message>` is printed on a single line.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("no network under {0}; run `network up` first")]
    NotInitialized(String),
    #[error("a network already exists under {0}; pass --force to replace it")]
    AlreadyInitialized(String),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("channel {0:?} already exists")]
    ChannelExists(String),
    #[error("unknown identity {0:?}")]
    UnknownIdentity(String),
    #[error("{0}")]
    Identity(String),
    #[error("stored state is unreadable: {0}")]
    Corrupt(String),
    #[error("channel {channel}: hash chain broken at block {block}")]
    Tampered { channel: String, block: u64 },
    #[error("{code} {message}")]
    Chaincode { code: String, message: String },
    #[error("transaction {tx_id} committed as {flag}")]
    TxInvalid { tx_id: String, flag: String },
    #[error("{0}")]
    Network(String),
    #[error("{0}")]
    Broker(String),
    #[error("{0}")]
    Bench(String),
}

/// (code, exit status, meaning) for every error, in `--help` order.
pub const ERROR_CODES: &[(&str, i32, &str)] = &[
    ("CONFIG", 10, "a config file or argument is invalid"),
    ("IO", 11, "a file could not be read or written"),
    ("NOT_INITIALIZED", 12, "no network under --home"),
    ("ALREADY_INITIALIZED", 13, "network up on an existing home without --force"),
    ("UNKNOWN_CHANNEL", 14, "the channel is not configured or has no stored chain"),
    ("CHANNEL_EXISTS", 15, "channel create on a channel that already has a chain"),
    ("UNKNOWN_IDENTITY", 16, "no certificate and key for the subject"),
    ("IDENTITY", 17, "enrollment or revocation rejected by the CA/MSP"),
    ("CORRUPT", 18, "stored certificates, keys or blocks cannot be loaded"),
    ("TAMPERED", 19, "ledger verify found a broken block"),
    ("CHAINCODE", 20, "the contract rejected the call; the message starts with its code"),
    ("TX_INVALID", 21, "the transaction was ordered but committed with a non-valid flag"),
    ("NETWORK", 22, "endorsement, ordering or commit failed"),
    ("BROKER", 23, "the broker could not start"),
    ("BENCH", 24, "the benchmark could not run"),
];

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "CONFIG",
            CliError::Io(_) => "IO",
            CliError::NotInitialized(_) => "NOT_INITIALIZED",
            CliError::AlreadyInitialized(_) => "ALREADY_INITIALIZED",
            CliError::UnknownChannel(_) => "UNKNOWN_CHANNEL",
            CliError::ChannelExists(_) => "CHANNEL_EXISTS",
            CliError::UnknownIdentity(_) => "UNKNOWN_IDENTITY",
            CliError::Identity(_) => "IDENTITY",
            CliError::Corrupt(_) => "CORRUPT",
            CliError::Tampered { .. } => "TAMPERED",
            CliError::Chaincode { .. } => "CHAINCODE",
            CliError::TxInvalid { .. } => "TX_INVALID",
            CliError::Network(_) => "NETWORK",
            CliError::Broker(_) => "BROKER",
            CliError::Bench(_) => "BENCH",
        }
    }

    pub fn exit_code(&self) -> i32 {
        let code = self.code();
        ERROR_CODES
            .iter()
            .find(|(c, _, _)| *c == code)
            .map(|(_, status, _)| *status)
            .expect("every code is listed")
    }

    /// The single line printed on failure.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("ERROR {}: {msg}", self.code())
    }
}

pub fn codes_help() -> String {
    let mut s = String::from("Errors are printed as `ERROR <code>: <message>` with these codes and exit statuses:\n");
    for (code, status, meaning) in ERROR_CODES {
        s.push_str(&format!("  {code:<20} {status:>3}  {meaning}\n"));
    }
    s.push_str(&format!("  {:<20} {:>3}  {}\n", "USAGE", 2, "malformed command line"));
    s
}
