//! Publish/subscribe broker for PASSION.
//!
//! Frames are newline-delimited JSON. QoS 0/1/2 follow MQTT semantics;
//! clients authenticate with a one-time challenge verified on the ledger.
//! [`Broker`] and [`ClientSession`] are pure state machines; [`sim`] drives
//! them over a seeded lossy network, [`tcp`] over sockets.

pub mod auth;
pub mod bridge;
pub mod broker;
pub mod client;
pub mod frame;
mod inflight;
pub mod sim;
pub mod tcp;
pub mod topic;

pub use auth::{AllowList, AuthError, Authenticator, LedgerAuthenticator};
pub use bridge::{BridgeStats, LedgerBridge};
pub use broker::{Action, BridgeMessage, Broker, BrokerConfig, ConnId, SessionInfo};
pub use client::{ClientEvent, ClientSession, Delivery};
pub use frame::{connack, Frame, Granted, Publish, QoS, SubscriptionRequest};
pub use inflight::OutState;
pub use sim::{FaultConfig, SimConfig, Simulation};
pub use tcp::{BrokerServer, TcpClient};

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("invalid topic name {0:?}")]
    InvalidTopic(String),
    #[error("invalid topic filter {0:?}")]
    InvalidFilter(String),
    #[error("not authorized: {0}")]
    NotAuthorized(String),
    #[error("inflight window full")]
    QuotaExceeded,
    #[error("connection refused with code {0}")]
    Refused(u8),
    #[error("not connected")]
    NotConnected,
    #[error("timed out")]
    Timeout,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Frame(#[from] frame::FrameError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
