//! World-state backends.
//!
//! `EmbeddedKv` keeps one ordered map, the way an embedded LSM store would.
//! `DocumentStore` keeps documents in a hash table with a separate sorted key
//! index and parses JSON values so they can be selected by field. Both expose
//! the same [`StateStore`] contract and must answer identically.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::Bound;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::block::Version;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    EmbeddedKv,
    DocumentStore,
}

impl Backend {
    pub fn open(self) -> Box<dyn StateStore> {
        match self {
            Backend::EmbeddedKv => Box::<EmbeddedKv>::default(),
            Backend::DocumentStore => Box::<DocumentStore>::default(),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::EmbeddedKv => "embedded-kv",
            Backend::DocumentStore => "document-store",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedded-kv" | "leveldb" => Ok(Backend::EmbeddedKv),
            "document-store" | "couchdb" => Ok(Backend::DocumentStore),
            other => Err(format!("unknown state backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VersionedValue {
    pub value: Vec<u8>,
    pub version: Version,
}

pub trait StateStore: Send + Sync + fmt::Debug {
    fn backend(&self) -> Backend;
    fn get(&self, key: &str) -> Option<VersionedValue>;
    /// Keys in `[start, end)`, ascending. Callers guarantee `start <= end`.
    fn range(&self, start: &str, end: &str) -> Vec<(String, VersionedValue)>;
    /// `None` deletes.
    fn apply(&mut self, key: &str, value: Option<&[u8]>, version: Version);
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Every entry in key order.
    fn dump(&self) -> Vec<(String, VersionedValue)>;
}

#[derive(Debug, Default)]
pub struct EmbeddedKv {
    entries: BTreeMap<String, VersionedValue>,
}

impl StateStore for EmbeddedKv {
    fn backend(&self) -> Backend {
        Backend::EmbeddedKv
    }

    fn get(&self, key: &str) -> Option<VersionedValue> {
        self.entries.get(key).cloned()
    }

    fn range(&self, start: &str, end: &str) -> Vec<(String, VersionedValue)> {
        if start >= end {
            return Vec::new();
        }
        self.entries
            .range::<str, _>((Bound::Included(start), Bound::Excluded(end)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    fn apply(&mut self, key: &str, value: Option<&[u8]>, version: Version) {
        match value {
            Some(v) => {
                self.entries.insert(
                    key.to_string(),
                    VersionedValue {
                        value: v.to_vec(),
                        version,
                    },
                );
            }
            None => {
                self.entries.remove(key);
            }
        }
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn dump(&self) -> Vec<(String, VersionedValue)> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[derive(Debug)]
struct Document {
    raw: Vec<u8>,
    // Present only when `raw` parses as a JSON object.
    body: Option<serde_json::Map<String, Value>>,
    rev: Version,
}

#[derive(Debug, Default)]
pub struct DocumentStore {
    docs: HashMap<String, Document>,
    ids: BTreeSet<String>,
}

impl DocumentStore {
    /// Keys of JSON documents whose top-level `field` equals `expected`.
    /// Non-JSON values never match.
    pub fn select(&self, field: &str, expected: &Value) -> Vec<String> {
        self.ids
            .iter()
            .filter(|id| {
                self.docs[*id]
                    .body
                    .as_ref()
                    .and_then(|b| b.get(field))
                    .is_some_and(|v| v == expected)
            })
            .cloned()
            .collect()
    }

    fn to_versioned(doc: &Document) -> VersionedValue {
        VersionedValue {
            value: doc.raw.clone(),
            version: doc.rev,
        }
    }
}

impl StateStore for DocumentStore {
    fn backend(&self) -> Backend {
        Backend::DocumentStore
    }

    fn get(&self, key: &str) -> Option<VersionedValue> {
        self.docs.get(key).map(Self::to_versioned)
    }

    fn range(&self, start: &str, end: &str) -> Vec<(String, VersionedValue)> {
        if start >= end {
            return Vec::new();
        }
        self.ids
            .range::<str, _>((Bound::Included(start), Bound::Excluded(end)))
            .map(|id| (id.clone(), Self::to_versioned(&self.docs[id])))
            .collect()
    }

    fn apply(&mut self, key: &str, value: Option<&[u8]>, version: Version) {
        match value {
            Some(raw) => {
                let body = match serde_json::from_slice::<Value>(raw) {
                    Ok(Value::Object(map)) => Some(map),
                    _ => None,
                };
                self.docs.insert(
                    key.to_string(),
                    Document {
                        raw: raw.to_vec(),
                        body,
                        rev: version,
                    },
                );
                self.ids.insert(key.to_string());
            }
            None => {
                self.docs.remove(key);
                self.ids.remove(key);
            }
        }
    }

    fn len(&self) -> usize {
        self.docs.len()
    }

    fn dump(&self) -> Vec<(String, VersionedValue)> {
        self.ids
            .iter()
            .map(|id| (id.clone(), Self::to_versioned(&self.docs[id])))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn document_selector_ignores_non_json() {
        let mut store = DocumentStore::default();
        store.apply("a", Some(br#"{"kind":"temp","v":1}"#), Version::new(1, 0));
        store.apply("b", Some(b"not json"), Version::new(1, 1));
        store.apply("c", Some(br#"{"kind":"gas"}"#), Version::new(1, 2));
        store.apply("d", Some(br#"{"kind":"temp"}"#), Version::new(2, 0));
        assert_eq!(store.select("kind", &json!("temp")), vec!["a", "d"]);
        store.apply("a", None, Version::new(3, 0));
        assert_eq!(store.select("kind", &json!("temp")), vec!["d"]);
        assert_eq!(store.get("b").unwrap().value, b"not json");
    }

    #[test]
    fn backend_names() {
        assert_eq!("embedded-kv".parse::<Backend>().unwrap(), Backend::EmbeddedKv);
        assert_eq!("document-store".parse::<Backend>().unwrap(), Backend::DocumentStore);
        assert!("redis".parse::<Backend>().is_err());
        assert_eq!(serde_json::to_string(&Backend::DocumentStore).unwrap(), "\"document-store\"");
    }
}
