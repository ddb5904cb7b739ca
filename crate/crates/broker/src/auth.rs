//! Connection authentication.

use std::collections::HashMap;

use passion_core::chaincode::{AccessControl, AccessError, Grant, Right};
use passion_core::txflow::TxFlowError;
use parking_lot::RwLock;

use crate::frame::connack;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AuthError {
    /// The challenge was expired, already used, unknown, or badly signed.
    #[error("authentication failed ({code}): {message}")]
    AuthFailure { code: String, message: String },
    #[error("not authorized: {0}")]
    NotAuthorized(String),
    #[error("authentication service unavailable: {0}")]
    Unavailable(String),
}

impl AuthError {
    pub fn connack_code(&self) -> u8 {
        match self {
            AuthError::AuthFailure { .. } => connack::BAD_CREDENTIALS,
            AuthError::NotAuthorized(_) => connack::NOT_AUTHORIZED,
            AuthError::Unavailable(_) => connack::SERVER_UNAVAILABLE,
        }
    }

    fn failure(code: &str, message: impl Into<String>) -> Self {
        AuthError::AuthFailure {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Checks a CONNECT's challenge and returns the client's grants.
pub trait Authenticator: Send + Sync {
    fn authenticate(&self, client_id: &str, challenge_id: &str, signature: &[u8]) -> Result<Vec<Grant>, AuthError>;
}

fn require_pubsub(client_id: &str, grants: Vec<Grant>) -> Result<Vec<Grant>, AuthError> {
    if grants
        .iter()
        .any(|g| g.rights.contains(&Right::Publish) || g.rights.contains(&Right::Subscribe))
    {
        Ok(grants)
    } else {
        Err(AuthError::NotAuthorized(format!("{client_id} holds no publish or subscribe right")))
    }
}

/// Verifies challenges through the ledger: each CONNECT commits one
/// `verify_challenge` transaction, so a challenge authenticates exactly once.
pub struct LedgerAuthenticator {
    access: AccessControl,
}

impl LedgerAuthenticator {
    pub fn new(access: AccessControl) -> Self {
        LedgerAuthenticator { access }
    }
}

impl Authenticator for LedgerAuthenticator {
    fn authenticate(&self, client_id: &str, challenge_id: &str, signature: &[u8]) -> Result<Vec<Grant>, AuthError> {
        match self.access.verify_challenge(challenge_id, signature) {
            Ok(v) if v.subject == client_id => require_pubsub(client_id, v.grants),
            Ok(v) => Err(AuthError::failure(
                "SUBJECT_MISMATCH",
                format!("challenge was issued to {}", v.subject),
            )),
            Err(AccessError::Flow(TxFlowError::Chaincode(e))) => Err(AuthError::failure(&e.code, e.message)),
            // two connects racing on one challenge: the loser is invalidated at commit
            Err(AccessError::Rejected { tx_id, flag }) => Err(AuthError::failure(
                "ALREADY_USED",
                format!("verification {tx_id} committed as {flag:?}"),
            )),
            Err(e) => Err(AuthError::Unavailable(e.to_string())),
        }
    }
}

/// Accepts any signature from listed client ids. For simulations and tests
/// that exercise delivery semantics rather than authentication.
#[derive(Default)]
pub struct AllowList {
    grants: RwLock<HashMap<String, Vec<Grant>>>,
}

impl AllowList {
    pub fn new() -> Self {
        AllowList::default()
    }

    pub fn allow(&self, client_id: &str, grants: Vec<Grant>) {
        self.grants.write().insert(client_id.to_string(), grants);
    }

    /// Grants publish and subscribe on `#`.
    pub fn allow_all(&self, client_id: &str) {
        self.allow(
            client_id,
            vec![Grant {
                resource: "#".into(),
                rights: [Right::Publish, Right::Subscribe].into(),
            }],
        );
    }
}

impl Authenticator for AllowList {
    fn authenticate(&self, client_id: &str, _challenge_id: &str, _signature: &[u8]) -> Result<Vec<Grant>, AuthError> {
        match self.grants.read().get(client_id) {
            Some(g) => require_pubsub(client_id, g.clone()),
            None => Err(AuthError::failure("UNKNOWN_SUBJECT", client_id)),
        }
    }
}
