//! Membership services: Ed25519 key material, per-organization certificate
//! authorities and the registry every peer consults when deciding whether a
//! signer is a current member of the network.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use parking_lot::{Mutex, RwLock};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::codec::{self, Digest};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdentityError {
    #[error("subject {0:?} already holds an active certificate")]
    DuplicateSubject(String),
    #[error("unknown role {0:?}")]
    InvalidRole(String),
    #[error("certificate subject must be non-empty and free of '/'")]
    InvalidSubject,
    #[error("no trusted root for issuer {issuer:?} of org {org:?}")]
    UnknownIssuer { org: String, issuer: String },
    #[error("no certificate with serial {serial} was issued by {issuer:?}")]
    UnknownCertificate { issuer: String, serial: u64 },
    #[error("malformed key material")]
    MalformedKey,
}

/// An Ed25519 signing key together with its public half.
///
/// Never serialized as part of ledger or wire records; the CLI keystore is the
/// only place the secret is written.
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(seed)
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn from_secret(secret: &[u8]) -> Result<Self, IdentityError> {
        let seed: [u8; 32] = secret.try_into().map_err(|_| IdentityError::MalformedKey)?;
        Ok(Self::from_seed(seed))
    }

    pub fn public_key(&self) -> Vec<u8> {
        self.signing.verifying_key().to_bytes().to_vec()
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.signing.sign(message).to_bytes().to_vec()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public_key", &hex::encode(self.public_key()))
            .finish_non_exhaustive()
    }
}

pub fn sign(private_key: &[u8], message: &[u8]) -> Result<Vec<u8>, IdentityError> {
    Ok(KeyPair::from_secret(private_key)?.sign(message))
}

/// Returns `Ok(false)` for any signature that does not verify, including
/// signatures of the wrong length; only an unusable public key is an error.
pub fn verify(public_key: &[u8], message: &[u8], signature: &[u8]) -> Result<bool, IdentityError> {
    let pk: [u8; PUBLIC_KEY_LEN] = public_key.try_into().map_err(|_| IdentityError::MalformedKey)?;
    let key = VerifyingKey::from_bytes(&pk).map_err(|_| IdentityError::MalformedKey)?;
    let Ok(sig) = ed25519_dalek::Signature::from_slice(signature) else {
        return Ok(false);
    };
    Ok(key.verify(message, &sig).is_ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Peer,
    Orderer,
    Device,
    Admin,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Client => "client",
            Role::Peer => "peer",
            Role::Orderer => "orderer",
            Role::Device => "device",
            Role::Admin => "admin",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "client" => Ok(Role::Client),
            "peer" => Ok(Role::Peer),
            "orderer" => Ok(Role::Orderer),
            "device" => Ok(Role::Device),
            "admin" => Ok(Role::Admin),
            _ => Err(IdentityError::InvalidRole(s.to_string())),
        }
    }
}

/// A CA-signed binding of a subject name to an organization, role and key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub subject: String,
    pub org: String,
    pub role: Role,
    #[serde(with = "codec::b64")]
    pub public_key: Vec<u8>,
    pub issuer: String,
    #[serde(with = "codec::dec")]
    pub serial: u64,
    #[serde(with = "codec::dec")]
    pub not_after: u64,
    #[serde(with = "codec::b64")]
    pub signature: Vec<u8>,
}

impl Certificate {
    /// The bytes the CA signs: every field before `signature`, in declaration
    /// order, strings and byte fields prefixed with a big-endian u32 length,
    /// integers as big-endian u64.
    pub fn to_be_signed(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        for field in [
            self.subject.as_bytes(),
            self.org.as_bytes(),
            self.role.as_str().as_bytes(),
            &self.public_key,
            self.issuer.as_bytes(),
        ] {
            out.extend_from_slice(&(field.len() as u32).to_be_bytes());
            out.extend_from_slice(field);
        }
        out.extend_from_slice(&self.serial.to_be_bytes());
        out.extend_from_slice(&self.not_after.to_be_bytes());
        out
    }

    pub fn fingerprint(&self) -> Digest {
        codec::canonical_digest(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validation {
    Valid,
    InvalidSignature,
    Expired,
    Revoked,
}

impl Validation {
    pub fn is_valid(&self) -> bool {
        matches!(self, Validation::Valid)
    }
}

/// A member's certificate paired with its private key.
#[derive(Debug, Clone)]
pub struct SigningIdentity {
    pub cert: Certificate,
    pub key: KeyPair,
}

impl SigningIdentity {
    pub fn subject(&self) -> &str {
        &self.cert.subject
    }

    pub fn org(&self) -> &str {
        &self.cert.org
    }

    pub fn sign(&self, message: &[u8]) -> Vec<u8> {
        self.key.sign(message)
    }
}

/// The single issuing authority of one organization.
#[derive(Debug)]
pub struct CertificateAuthority {
    name: String,
    org: String,
    key: KeyPair,
    last_serial: u64,
}

impl CertificateAuthority {
    pub fn new(name: impl Into<String>, org: impl Into<String>, key: KeyPair) -> Self {
        Self::resume(name, org, key, 0)
    }

    /// Re-creates a CA whose last issued serial is already known.
    pub fn resume(name: impl Into<String>, org: impl Into<String>, key: KeyPair, last_serial: u64) -> Self {
        CertificateAuthority {
            name: name.into(),
            org: org.into(),
            key,
            last_serial,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn org(&self) -> &str {
        &self.org
    }

    pub fn public_key(&self) -> Vec<u8> {
        self.key.public_key()
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn last_serial(&self) -> u64 {
        self.last_serial
    }

    /// Issues and registers a certificate valid until `now + validity_ms`.
    pub fn issue(
        &mut self,
        msp: &MspRegistry,
        subject: &str,
        role: Role,
        public_key: &[u8],
        validity_ms: u64,
        now: u64,
    ) -> Result<Certificate, IdentityError> {
        if subject.is_empty() || subject.contains('/') {
            return Err(IdentityError::InvalidSubject);
        }
        verify(public_key, b"", &[])?;
        let mut state = msp.state.write();
        if state.is_active(subject, now) {
            return Err(IdentityError::DuplicateSubject(subject.to_string()));
        }
        let mut cert = Certificate {
            subject: subject.to_string(),
            org: self.org.clone(),
            role,
            public_key: public_key.to_vec(),
            issuer: self.name.clone(),
            serial: self.last_serial + 1,
            not_after: now.saturating_add(validity_ms),
            signature: Vec::new(),
        };
        cert.signature = self.key.sign(&cert.to_be_signed());
        self.last_serial = cert.serial;
        state.issued.insert((cert.issuer.clone(), cert.serial));
        state.members.insert(cert.subject.clone(), cert.clone());
        Ok(cert)
    }

    /// Generates a fresh key pair and issues a certificate for it.
    pub fn enroll<R: RngCore + CryptoRng>(
        &mut self,
        msp: &MspRegistry,
        rng: &mut R,
        subject: &str,
        role: Role,
        validity_ms: u64,
        now: u64,
    ) -> Result<SigningIdentity, IdentityError> {
        let key = KeyPair::generate(rng);
        let cert = self.issue(msp, subject, role, &key.public_key(), validity_ms, now)?;
        Ok(SigningIdentity { cert, key })
    }
}

#[derive(Debug, Clone)]
struct CaRoot {
    name: String,
    public_key: Vec<u8>,
}

#[derive(Debug, Default)]
struct MspState {
    ca_roots: HashMap<String, CaRoot>,
    revoked: HashSet<(String, u64)>,
    issued: HashSet<(String, u64)>,
    members: HashMap<String, Certificate>,
}

impl MspState {
    fn is_revoked(&self, cert: &Certificate) -> bool {
        self.revoked.contains(&(cert.issuer.clone(), cert.serial))
    }

    fn is_active(&self, subject: &str, now: u64) -> bool {
        self.members
            .get(subject)
            .is_some_and(|c| !self.is_revoked(c) && now <= c.not_after)
    }
}

/// Trusted roots, revocations and enrolled members.
///
/// Reads (validation, lookups) proceed concurrently; issuance and revocation
/// take the single writer lock.
#[derive(Debug, Default)]
pub struct MspRegistry {
    state: RwLock<MspState>,
    // Fingerprints of certificates whose CA signature has been checked.
    signature_cache: Mutex<HashSet<Digest>>,
}

impl MspRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_root(&self, org: &str, ca_name: &str, public_key: &[u8]) {
        self.state.write().ca_roots.insert(
            org.to_string(),
            CaRoot {
                name: ca_name.to_string(),
                public_key: public_key.to_vec(),
            },
        );
    }

    pub fn add_ca(&self, ca: &CertificateAuthority) {
        self.add_root(ca.org(), ca.name(), &ca.public_key());
    }

    pub fn root_key(&self, org: &str) -> Option<Vec<u8>> {
        self.state.read().ca_roots.get(org).map(|r| r.public_key.clone())
    }

    pub fn orgs(&self) -> Vec<String> {
        let mut orgs: Vec<String> = self.state.read().ca_roots.keys().cloned().collect();
        orgs.sort();
        orgs
    }

    /// Registers a certificate issued elsewhere, e.g. when reloading a
    /// persisted network. The certificate must validate against its root.
    pub fn register(&self, cert: Certificate) -> Result<(), IdentityError> {
        if !self.check_signature(&cert)? {
            return Err(IdentityError::MalformedKey);
        }
        let mut state = self.state.write();
        state.issued.insert((cert.issuer.clone(), cert.serial));
        state.members.insert(cert.subject.clone(), cert);
        Ok(())
    }

    pub fn validate(&self, cert: &Certificate, now: u64) -> Result<Validation, IdentityError> {
        if !self.check_signature(cert)? {
            return Ok(Validation::InvalidSignature);
        }
        let state = self.state.read();
        if state.is_revoked(cert) {
            return Ok(Validation::Revoked);
        }
        if now > cert.not_after {
            return Ok(Validation::Expired);
        }
        Ok(Validation::Valid)
    }

    fn check_signature(&self, cert: &Certificate) -> Result<bool, IdentityError> {
        let root = {
            let state = self.state.read();
            match state.ca_roots.get(&cert.org) {
                Some(root) if root.name == cert.issuer => root.public_key.clone(),
                _ => {
                    return Err(IdentityError::UnknownIssuer {
                        org: cert.org.clone(),
                        issuer: cert.issuer.clone(),
                    })
                }
            }
        };
        let fp = cert.fingerprint();
        if self.signature_cache.lock().contains(&fp) {
            return Ok(true);
        }
        let ok = verify(&root, &cert.to_be_signed(), &cert.signature)?;
        if ok {
            self.signature_cache.lock().insert(fp);
        }
        Ok(ok)
    }

    /// Idempotent.
    pub fn revoke(&self, issuer: &str, serial: u64) -> Result<(), IdentityError> {
        let mut state = self.state.write();
        let key = (issuer.to_string(), serial);
        if !state.issued.contains(&key) {
            return Err(IdentityError::UnknownCertificate {
                issuer: issuer.to_string(),
                serial,
            });
        }
        state.revoked.insert(key);
        Ok(())
    }

    pub fn is_revoked(&self, issuer: &str, serial: u64) -> bool {
        self.state.read().revoked.contains(&(issuer.to_string(), serial))
    }

    pub fn revoked(&self) -> Vec<(String, u64)> {
        let mut out: Vec<_> = self.state.read().revoked.iter().cloned().collect();
        out.sort();
        out
    }

    pub fn member(&self, subject: &str) -> Option<Certificate> {
        self.state.read().members.get(subject).cloned()
    }

    /// The member's certificate if it is currently valid.
    pub fn active_member(&self, subject: &str, now: u64) -> Option<Certificate> {
        let cert = self.member(subject)?;
        match self.validate(&cert, now) {
            Ok(Validation::Valid) => Some(cert),
            _ => None,
        }
    }

    pub fn members(&self) -> Vec<Certificate> {
        let mut out: Vec<_> = self.state.read().members.values().cloned().collect();
        out.sort_by(|a, b| a.subject.cmp(&b.subject));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const HOUR: u64 = 3_600_000;
    const YEAR: u64 = 365 * 24 * HOUR;

    fn setup() -> (MspRegistry, CertificateAuthority, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let msp = MspRegistry::new();
        let ca = CertificateAuthority::new("Org1-CA", "Org1", KeyPair::generate(&mut rng));
        msp.add_ca(&ca);
        (msp, ca, rng)
    }

    #[test]
    fn first_issue_gets_serial_one() {
        let (msp, mut ca, mut rng) = setup();
        let id = ca.enroll(&msp, &mut rng, "peer@org1", Role::Peer, YEAR, 1_000).unwrap();
        assert_eq!(id.cert.serial, 1);
        assert_eq!(id.cert.org, "Org1");
        assert_eq!(id.cert.issuer, "Org1-CA");
        assert_eq!(msp.validate(&id.cert, 1_000).unwrap(), Validation::Valid);
        let second = ca.enroll(&msp, &mut rng, "admin@org1", Role::Admin, YEAR, 1_000).unwrap();
        assert_eq!(second.cert.serial, 2);
    }

    #[test]
    fn duplicate_subject_rejected_until_revoked() {
        let (msp, mut ca, mut rng) = setup();
        let first = ca.enroll(&msp, &mut rng, "peer@org1", Role::Peer, YEAR, 0).unwrap();
        assert_eq!(
            ca.enroll(&msp, &mut rng, "peer@org1", Role::Peer, YEAR, 0).unwrap_err(),
            IdentityError::DuplicateSubject("peer@org1".into())
        );
        msp.revoke("Org1-CA", first.cert.serial).unwrap();
        let again = ca.enroll(&msp, &mut rng, "peer@org1", Role::Peer, YEAR, 0).unwrap();
        assert_eq!(again.cert.serial, 2);
    }

    #[test]
    fn expiry_uses_explicit_clock() {
        let (msp, mut ca, mut rng) = setup();
        let t0 = 1_700_000_000_000;
        let id = ca.enroll(&msp, &mut rng, "dev-17", Role::Device, HOUR, t0).unwrap();
        assert_eq!(id.cert.not_after, t0 + HOUR);
        assert_eq!(msp.validate(&id.cert, t0 + HOUR).unwrap(), Validation::Valid);
        assert_eq!(msp.validate(&id.cert, t0 + 2 * HOUR).unwrap(), Validation::Expired);
    }

    #[test]
    fn tampered_and_revoked_certificates() {
        let (msp, mut ca, mut rng) = setup();
        let id = ca.enroll(&msp, &mut rng, "user@org1", Role::Client, YEAR, 0).unwrap();
        let mut bad = id.cert.clone();
        bad.signature[0] ^= 0x01;
        assert_eq!(msp.validate(&bad, 0).unwrap(), Validation::InvalidSignature);
        let mut promoted = id.cert.clone();
        promoted.role = Role::Admin;
        assert_eq!(msp.validate(&promoted, 0).unwrap(), Validation::InvalidSignature);

        msp.revoke("Org1-CA", id.cert.serial).unwrap();
        msp.revoke("Org1-CA", id.cert.serial).unwrap();
        assert_eq!(msp.validate(&id.cert, 0).unwrap(), Validation::Revoked);
        assert_eq!(
            msp.revoke("Org1-CA", 99).unwrap_err(),
            IdentityError::UnknownCertificate {
                issuer: "Org1-CA".into(),
                serial: 99
            }
        );
    }

    #[test]
    fn unknown_issuer() {
        let (msp, _, mut rng) = setup();
        let msp2 = MspRegistry::new();
        let mut other = CertificateAuthority::new("Org9-CA", "Org9", KeyPair::generate(&mut rng));
        msp2.add_ca(&other);
        let id = other.enroll(&msp2, &mut rng, "x", Role::Client, YEAR, 0).unwrap();
        assert!(matches!(
            msp.validate(&id.cert, 0),
            Err(IdentityError::UnknownIssuer { .. })
        ));
    }

    #[test]
    fn role_parsing() {
        assert_eq!("Peer".parse::<Role>().unwrap(), Role::Peer);
        assert_eq!(
            "miner".parse::<Role>().unwrap_err(),
            IdentityError::InvalidRole("miner".into())
        );
    }

    #[test]
    fn certificate_json_shape() {
        let (msp, mut ca, mut rng) = setup();
        let id = ca.enroll(&msp, &mut rng, "peer@org1", Role::Peer, YEAR, 5).unwrap();
        let v: serde_json::Value = serde_json::from_str(&id.cert.to_json()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        for k in ["subject", "org", "role", "public_key", "issuer", "serial", "not_after", "signature"] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(v["role"], "peer");
        assert_eq!(v["serial"], "1");
        assert_eq!(Certificate::from_json(&id.cert.to_json()).unwrap(), id.cert);
        assert!(!id.cert.to_json().contains(&codec::b64_encode(&id.key.secret_bytes())));
    }

    #[test]
    fn malformed_keys() {
        assert_eq!(verify(&[1, 2, 3], b"m", &[0; 64]), Err(IdentityError::MalformedKey));
        assert_eq!(sign(&[0; 5], b"m"), Err(IdentityError::MalformedKey));
        let kp = KeyPair::from_seed([3; 32]);
        assert_eq!(verify(&kp.public_key(), b"m", &[0; 10]), Ok(false));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sign_verify_round_trip(
            seed in any::<[u8; 32]>(),
            msg in proptest::collection::vec(any::<u8>(), 0..4096),
            bit in any::<prop::sample::Index>(),
        ) {
            let kp = KeyPair::from_seed(seed);
            let sig = sign(&kp.secret_bytes(), &msg).unwrap();
            prop_assert_eq!(sig.len(), SIGNATURE_LEN);
            prop_assert!(verify(&kp.public_key(), &msg, &sig).unwrap());
            let other = KeyPair::from_seed({ let mut s = seed; s[0] ^= 1; s });
            prop_assert!(!verify(&other.public_key(), &msg, &sig).unwrap());
            if !msg.is_empty() {
                let i = bit.index(msg.len() * 8);
                let mut m2 = msg.clone();
                m2[i / 8] ^= 1 << (i % 8);
                prop_assert!(!verify(&kp.public_key(), &m2, &sig).unwrap());
            }
            let j = bit.index(SIGNATURE_LEN * 8);
            let mut s2 = sig.clone();
            s2[j / 8] ^= 1 << (j % 8);
            prop_assert!(!verify(&kp.public_key(), &msg, &s2).unwrap());
        }

        #[test]
        fn valid_implies_chain_of_trust(n in 1usize..6, revoke_mask in any::<u8>()) {
            let (msp, mut ca, mut rng) = setup();
            let root = msp.root_key("Org1").unwrap();
            let mut certs = Vec::new();
            for i in 0..n {
                certs.push(ca.enroll(&msp, &mut rng, &format!("m{i}"), Role::Client, YEAR, 0).unwrap().cert);
            }
            for (i, c) in certs.iter().enumerate() {
                if revoke_mask & (1 << i) != 0 {
                    msp.revoke(&c.issuer, c.serial).unwrap();
                }
            }
            let mut last = 0;
            for (i, c) in certs.iter().enumerate() {
                prop_assert!(c.serial > last);
                last = c.serial;
                let v = msp.validate(c, 0).unwrap();
                if v == Validation::Valid {
                    prop_assert!(verify(&root, &c.to_be_signed(), &c.signature).unwrap());
                }
                if revoke_mask & (1 << i) != 0 {
                    // monotone: later times and repeated checks stay revoked
                    prop_assert_eq!(v, Validation::Revoked);
                    prop_assert_eq!(msp.validate(c, 10).unwrap(), Validation::Revoked);
                }
            }
        }
    }
}
