use std::time::Instant;

use crate::identity::{self, Certificate, SigningIdentity};
use crate::ledger::ProposalFields;

/// A client's signed request to run a chaincode function.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub channel_id: String,
    pub chaincode_id: String,
    pub function: String,
    pub args: Vec<Vec<u8>>,
    pub creator: Certificate,
    pub nonce: [u8; 16],
    /// Client-supplied wall-clock time in ms, covered by the signature.
    pub timestamp: u64,
    pub client_signature: Vec<u8>,
    created: Instant,
}

impl Proposal {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        creator: &SigningIdentity,
        channel_id: &str,
        chaincode_id: &str,
        function: &str,
        args: Vec<Vec<u8>>,
        timestamp: u64,
        nonce: [u8; 16],
    ) -> Self {
        let mut p = Proposal {
            channel_id: channel_id.to_string(),
            chaincode_id: chaincode_id.to_string(),
            function: function.to_string(),
            args,
            creator: creator.cert.clone(),
            nonce,
            timestamp,
            client_signature: Vec::new(),
            created: Instant::now(),
        };
        p.client_signature = creator.sign(&p.fields().canonical());
        p
    }

    pub fn fields(&self) -> ProposalFields<'_> {
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

    /// Lowercase hex SHA-256 of the canonical proposal fields.
    pub fn tx_id(&self) -> String {
        self.fields().tx_id()
    }

    pub fn verify_signature(&self) -> bool {
        identity::verify(&self.creator.public_key, &self.fields().canonical(), &self.client_signature)
            .unwrap_or(false)
    }

    /// When the proposal was built; latency is measured from here.
    pub fn created(&self) -> Instant {
        self.created
    }
}

/// Convenience for building string arguments.
pub fn str_args<I, S>(args: I) -> Vec<Vec<u8>>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    args.into_iter().map(|a| a.as_ref().as_bytes().to_vec()).collect()
}
