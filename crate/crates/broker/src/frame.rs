//! Newline-delimited JSON frames.

use std::fmt;

use passion_core::codec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Delivery guarantee of a publish or subscription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QoS {
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl TryFrom<u8> for QoS {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(QoS::AtMostOnce),
            1 => Ok(QoS::AtLeastOnce),
            2 => Ok(QoS::ExactlyOnce),
            _ => Err(format!("qos {v} out of range")),
        }
    }
}

impl From<QoS> for u8 {
    fn from(q: QoS) -> u8 {
        q as u8
    }
}

impl fmt::Display for QoS {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Per-filter subscription outcome: a granted QoS or `"refused"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granted {
    Qos(QoS),
    Refused,
}

impl Serialize for Granted {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Granted::Qos(q) => s.serialize_u8(*q as u8),
            Granted::Refused => s.serialize_str("refused"),
        }
    }
}

impl<'de> Deserialize<'de> for Granted {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => QoS::try_from(n).map(Granted::Qos).map_err(serde::de::Error::custom),
            Raw::Str(s) if s == "refused" => Ok(Granted::Refused),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad grant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRequest {
    pub filter: String,
    pub max_qos: QoS,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Publish {
    pub topic: String,
    #[serde(rename = "payload_b64", with = "codec::b64")]
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packet_id: Option<u16>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub dup: bool,
}

/// CONNACK return codes.
pub mod connack {
    pub const ACCEPTED: u8 = 0;
    pub const SERVER_UNAVAILABLE: u8 = 3;
    pub const BAD_CREDENTIALS: u8 = 4;
    pub const NOT_AUTHORIZED: u8 = 5;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Frame {
    Connect {
        client_id: String,
        clean: bool,
        challenge_id: String,
        #[serde(rename = "signature_b64", with = "codec::b64")]
        signature: Vec<u8>,
    },
    Connack {
        session_present: bool,
        code: u8,
    },
    Publish(Publish),
    Puback {
        packet_id: u16,
    },
    Pubrec {
        packet_id: u16,
    },
    Pubrel {
        packet_id: u16,
    },
    Pubcomp {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        filters: Vec<SubscriptionRequest>,
    },
    Suback {
        packet_id: u16,
        granted: Vec<Granted>,
    },
    Disconnect,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("malformed frame: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid frame: {0}")]
    Invalid(String),
}

impl Frame {
    pub fn kind(&self) -> &'static str {
        match self {
            Frame::Connect { .. } => "connect",
            Frame::Connack { .. } => "connack",
            Frame::Publish(_) => "publish",
            Frame::Puback { .. } => "puback",
            Frame::Pubrec { .. } => "pubrec",
            Frame::Pubrel { .. } => "pubrel",
            Frame::Pubcomp { .. } => "pubcomp",
            Frame::Subscribe { .. } => "subscribe",
            Frame::Suback { .. } => "suback",
            Frame::Disconnect => "disconnect",
        }
    }

    /// One JSON object terminated by `\n`.
    pub fn encode(&self) -> String {
        let mut s = serde_json::to_string(self).expect("frames always serialize");
        s.push('\n');
        s
    }

    /// Parses one line (trailing newline optional) and checks packet-id rules.
    pub fn decode(line: &str) -> Result<Frame, FrameError> {
        let frame: Frame = serde_json::from_str(line.trim_end_matches(['\r', '\n']))?;
        frame.check()?;
        Ok(frame)
    }

    fn check(&self) -> Result<(), FrameError> {
        let bad = |m: &str| Err(FrameError::Invalid(m.to_string()));
        match self {
            Frame::Publish(p) => match (p.qos, p.packet_id) {
                (QoS::AtMostOnce, Some(_)) => bad("qos 0 publish carries a packet_id"),
                (QoS::AtMostOnce, None) => Ok(()),
                (_, None) | (_, Some(0)) => bad("qos > 0 publish needs a non-zero packet_id"),
                _ => Ok(()),
            },
            Frame::Puback { packet_id }
            | Frame::Pubrec { packet_id }
            | Frame::Pubrel { packet_id }
            | Frame::Pubcomp { packet_id }
            | Frame::Suback { packet_id, .. } => {
                if *packet_id == 0 {
                    bad("packet_id 0")
                } else {
                    Ok(())
                }
            }
            Frame::Subscribe { packet_id, filters } => {
                if *packet_id == 0 {
                    bad("packet_id 0")
                } else if filters.is_empty() {
                    bad("subscribe without filters")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_field_names() {
        let f = Frame::Connect {
            client_id: "dev-1".into(),
            clean: true,
            challenge_id: "c".into(),
            signature: vec![1, 2],
        };
        assert_eq!(
            f.encode(),
            "{\"type\":\"connect\",\"client_id\":\"dev-1\",\"clean\":true,\"challenge_id\":\"c\",\"signature_b64\":\"AQI=\"}\n"
        );
        let p = Frame::Publish(Publish {
            topic: "t".into(),
            payload: b"hi".to_vec(),
            qos: QoS::AtMostOnce,
            retain: false,
            packet_id: None,
            dup: false,
        });
        assert_eq!(
            p.encode(),
            "{\"type\":\"publish\",\"topic\":\"t\",\"payload_b64\":\"aGk=\",\"qos\":0,\"retain\":false}\n"
        );
        let s = Frame::Suback {
            packet_id: 3,
            granted: vec![Granted::Qos(QoS::ExactlyOnce), Granted::Refused],
        };
        assert_eq!(s.encode(), "{\"type\":\"suback\",\"packet_id\":3,\"granted\":[2,\"refused\"]}\n");
        assert_eq!(Frame::Disconnect.encode(), "{\"type\":\"disconnect\"}\n");
    }

    #[test]
    fn rejects_bad_frames() {
        assert!(Frame::decode("{\"type\":\"publish\",\"topic\":\"t\",\"payload_b64\":\"\",\"qos\":1,\"retain\":false}").is_err());
        assert!(Frame::decode("{\"type\":\"publish\",\"topic\":\"t\",\"payload_b64\":\"\",\"qos\":3,\"retain\":false}").is_err());
        assert!(Frame::decode("{\"type\":\"puback\",\"packet_id\":0}").is_err());
        assert!(Frame::decode("{\"type\":\"nonsense\"}").is_err());
        assert!(Frame::decode("not json").is_err());
    }

    fn qos() -> impl Strategy<Value = QoS> {
        prop_oneof![Just(QoS::AtMostOnce), Just(QoS::AtLeastOnce), Just(QoS::ExactlyOnce)]
    }

    fn frame() -> impl Strategy<Value = Frame> {
        let publish = (
            "[a-z/]{1,12}",
            prop::collection::vec(any::<u8>(), 0..32),
            qos(),
            any::<bool>(),
            1u16..,
            any::<bool>(),
        )
            .prop_map(|(topic, payload, qos, retain, pid, dup)| {
                Frame::Publish(Publish {
                    topic,
                    payload,
                    qos,
                    retain,
                    packet_id: (qos != QoS::AtMostOnce).then_some(pid),
                    dup: dup && qos != QoS::AtMostOnce,
                })
            });
        prop_oneof![
            publish,
            (1u16..).prop_map(|packet_id| Frame::Pubrel { packet_id }),
            (1u16.., prop::collection::vec(("[a-z+#/]{1,8}", qos()), 1..4)).prop_map(|(packet_id, fs)| {
                Frame::Subscribe {
                    packet_id,
                    filters: fs
                        .into_iter()
                        .map(|(filter, max_qos)| SubscriptionRequest { filter, max_qos })
                        .collect(),
                }
            }),
            (any::<bool>(), 0u8..6).prop_map(|(session_present, code)| Frame::Connack { session_present, code }),
        ]
    }

    proptest! {
        #[test]
        fn roundtrip(f in frame()) {
            let line = f.encode();
            prop_assert!(line.ends_with('\n'));
            prop_assert_eq!(line.matches('\n').count(), 1);
            prop_assert_eq!(Frame::decode(&line).unwrap(), f);
        }
    }
}
