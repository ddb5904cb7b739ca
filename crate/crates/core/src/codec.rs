//! Canonical encodings shared by every hashed or signed structure.
//!
//! Ledger records are hashed over a deterministic JSON form: object keys in
//! ascending byte order, no insignificant whitespace, byte strings as
//! standard base64 and integers as decimal strings. The serde helpers in this
//! module produce exactly that shape, and [`to_canonical`] takes care of key
//! ordering regardless of how `serde_json` was compiled.

use std::fmt;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::{DeserializeOwned, Error as _};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest as _, Sha256};

/// A SHA-256 digest, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, CodecError> {
        if s.len() != 64 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(CodecError::Digest(s.to_string()));
        }
        let raw = hex::decode(s).map_err(|_| CodecError::Digest(s.to_string()))?;
        let mut out = [0u8; 32];
        out.copy_from_slice(&raw);
        Ok(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(D::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed digest {0:?}")]
    Digest(String),
    #[error("encoding is not canonical")]
    NotCanonical,
}

/// SHA-256 helper returning a [`Digest`].
pub fn sha256(bytes: &[u8]) -> Digest {
    Digest::of(bytes)
}

/// Serializes `value` into its canonical JSON bytes.
pub fn to_canonical<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let tree = serde_json::to_value(value).expect("ledger types always serialize");
    let mut out = Vec::with_capacity(256);
    write_canonical(&tree, &mut out);
    out
}

/// Decodes canonical bytes, rejecting any input that would not re-encode to
/// exactly the same bytes.
pub fn from_canonical<T: Serialize + DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    let value: T = serde_json::from_slice(bytes)?;
    if to_canonical(&value) != bytes {
        return Err(CodecError::NotCanonical);
    }
    Ok(value)
}

/// Digest of the canonical encoding of `value`.
pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> Digest {
    Digest::of(&to_canonical(value))
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_scalar(&Value::String(k.clone()), out);
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(v, out);
            }
            out.push(b']');
        }
        scalar => write_scalar(scalar, out),
    }
}

fn write_scalar(value: &Value, out: &mut Vec<u8>) {
    out.extend_from_slice(serde_json::to_string(value).expect("scalar").as_bytes());
}

pub fn b64_encode(bytes: &[u8]) -> String {
    STANDARD.encode(bytes)
}

pub fn b64_decode(s: &str) -> Result<Vec<u8>, base64::DecodeError> {
    STANDARD.decode(s)
}

/// `Vec<u8>` as a base64 string.
pub mod b64 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        b64_decode(&s).map_err(D::Error::custom)
    }
}

/// `Option<Vec<u8>>` as a base64 string or `null`.
pub mod b64_opt {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => s.serialize_some(&b64_encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| b64_decode(&s).map_err(D::Error::custom))
            .transpose()
    }
}

/// `Vec<Vec<u8>>` as a list of base64 strings.
pub mod b64_list {
    use super::*;
    use serde::ser::SerializeSeq;

    pub fn serialize<S: Serializer>(items: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(items.len()))?;
        for item in items {
            seq.serialize_element(&b64_encode(item))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| b64_decode(s).map_err(D::Error::custom))
            .collect()
    }
}

/// Unsigned integers as decimal strings. Only the canonical spelling (no
/// sign, no leading zeros) is accepted.
pub mod dec {
    use super::*;

    pub fn serialize<S: Serializer>(n: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&n.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        parse_decimal(&s).ok_or_else(|| D::Error::custom(format!("bad decimal {s:?}")))
    }

    pub(crate) fn parse_decimal(s: &str) -> Option<u64> {
        let canonical = !s.is_empty()
            && s.bytes().all(|b| b.is_ascii_digit())
            && (s == "0" || !s.starts_with('0'));
        if canonical {
            s.parse().ok()
        } else {
            None
        }
    }
}

/// A 16-byte array as base64.
pub mod b64_16 {
    use super::*;

    pub fn serialize<S: Serializer>(bytes: &[u8; 16], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64_encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 16], D::Error> {
        let raw = b64::deserialize(d)?;
        raw.try_into()
            .map_err(|_| D::Error::custom("expected 16 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    struct Sample {
        zeta: String,
        #[serde(with = "dec")]
        alpha: u64,
        #[serde(with = "b64")]
        mid: Vec<u8>,
    }

    #[test]
    fn keys_sorted_and_integers_quoted() {
        let s = Sample {
            zeta: "z".into(),
            alpha: 42,
            mid: vec![1, 2, 3],
        };
        let bytes = to_canonical(&s);
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            r#"{"alpha":"42","mid":"AQID","zeta":"z"}"#
        );
        let back: Sample = from_canonical(&bytes).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn non_canonical_spellings_rejected() {
        assert!(from_canonical::<Sample>(br#"{"alpha":"042","mid":"AQID","zeta":"z"}"#).is_err());
        assert!(from_canonical::<Sample>(br#"{"alpha":"+42","mid":"AQID","zeta":"z"}"#).is_err());
        assert!(matches!(
            from_canonical::<Sample>(br#"{ "alpha":"42","mid":"AQID","zeta":"z"}"#),
            Err(CodecError::NotCanonical)
        ));
    }

    #[test]
    fn digest_matches_known_vector() {
        assert_eq!(
            sha256(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(Digest::from_hex(&"AB".repeat(32)).is_err());
    }
}
