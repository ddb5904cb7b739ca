//! The broker state machine. It performs no I/O: callers feed it frames and
//! the current time and carry out the returned actions.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use passion_core::chaincode::{Grant, Right};
use serde::{Deserialize, Serialize};

use crate::auth::AuthError;
use crate::frame::{connack, Frame, Granted, Publish, QoS, SubscriptionRequest};
use crate::inflight::{Inbox, Outbox};
use crate::topic;

pub type ConnId = u64;

/// A reading forwarded to the ledger.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeMessage {
    pub client_id: String,
    pub topic: String,
    pub payload: Vec<u8>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Send(ConnId, Frame),
    Close(ConnId),
    Bridge(BridgeMessage),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrokerConfig {
    /// Unacknowledged QoS 1/2 messages per direction and session.
    pub inflight_window: usize,
    pub retry_interval_ms: u64,
    /// Messages kept per offline persistent session; the oldest are dropped.
    pub max_offline_queue: usize,
    /// `None` keeps persistent sessions forever.
    pub session_expiry_ms: Option<u64>,
    /// Publishes on topics matching these filters are forwarded to the ledger.
    pub bridge_topics: Vec<String>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            inflight_window: 32,
            retry_interval_ms: 1000,
            max_offline_queue: 10_000,
            session_expiry_ms: None,
            bridge_topics: Vec::new(),
        }
    }
}

#[derive(Debug)]
struct Session {
    clean: bool,
    conn: Option<ConnId>,
    grants: Vec<Grant>,
    subscriptions: BTreeMap<String, QoS>,
    outbox: Outbox,
    inbox: Inbox,
    offline_queue: VecDeque<Publish>,
    disconnected_at: Option<u64>,
}

impl Session {
    fn new(clean: bool, conn: ConnId, grants: Vec<Grant>, window: usize) -> Self {
        Session {
            clean,
            conn: Some(conn),
            grants,
            subscriptions: BTreeMap::new(),
            outbox: Outbox::new(window),
            inbox: Inbox::new(),
            offline_queue: VecDeque::new(),
            disconnected_at: None,
        }
    }

    fn can(&self, right: Right, allowed: impl Fn(&str) -> bool) -> bool {
        self.grants
            .iter()
            .any(|g| g.rights.contains(&right) && allowed(&g.resource))
    }

    fn can_publish(&self, topic_name: &str) -> bool {
        self.can(Right::Publish, |r| {
            topic::validate_filter(r).is_ok() && topic::matches(r, topic_name)
        })
    }

    fn can_subscribe(&self, filter: &str) -> bool {
        self.can(Right::Subscribe, |r| topic::covers(r, filter))
    }

    fn can_receive(&self, topic_name: &str) -> bool {
        self.can(Right::Subscribe, |r| {
            topic::validate_filter(r).is_ok() && topic::matches(r, topic_name)
        })
    }
}

/// Read-only view of a session, for operators and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionInfo {
    pub client_id: String,
    pub connected: bool,
    pub clean: bool,
    pub subscriptions: BTreeMap<String, QoS>,
    pub inflight_out: usize,
    pub inflight_in: usize,
    pub queued: usize,
    pub offline_queue: usize,
}

#[derive(Debug)]
pub struct Broker {
    config: BrokerConfig,
    sessions: BTreeMap<String, Session>,
    conns: BTreeMap<ConnId, String>,
    retained: BTreeMap<String, Publish>,
}

const NO_IDS: &BTreeSet<u16> = &BTreeSet::new();

impl Broker {
    pub fn new(config: BrokerConfig) -> Self {
        Broker {
            config,
            sessions: BTreeMap::new(),
            conns: BTreeMap::new(),
            retained: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.config
    }

    /// Establishes a session for `conn` once the credentials were checked.
    pub fn connect(
        &mut self,
        conn: ConnId,
        client_id: &str,
        clean: bool,
        auth: Result<Vec<Grant>, AuthError>,
        now: u64,
    ) -> Vec<Action> {
        let grants = match auth {
            Ok(g) => g,
            Err(e) => {
                log::info!("connect refused for {client_id}: {e}");
                return vec![
                    Action::Send(
                        conn,
                        Frame::Connack {
                            session_present: false,
                            code: e.connack_code(),
                        },
                    ),
                    Action::Close(conn),
                ];
            }
        };
        if self.conns.contains_key(&conn) {
            log::warn!("second connect on connection {conn}");
            return self.close(conn, now);
        }
        let mut actions = Vec::new();
        let window = self.config.inflight_window;
        let prior = self.sessions.remove(client_id);
        if let Some(old) = prior.as_ref().and_then(|s| s.conn) {
            log::info!("session takeover for {client_id}");
            self.conns.remove(&old);
            actions.push(Action::Close(old));
        }
        let resumable = prior.filter(|s| !clean && !s.clean);
        let session_present = resumable.is_some();
        let mut session = match resumable {
            Some(mut s) => {
                s.conn = Some(conn);
                s.grants = grants;
                s.disconnected_at = None;
                let offline = std::mem::take(&mut s.offline_queue);
                s.outbox.queue.extend(offline);
                s
            }
            None => Session::new(clean, conn, grants, window),
        };
        self.conns.insert(conn, client_id.to_string());
        actions.push(Action::Send(
            conn,
            Frame::Connack {
                session_present,
                code: connack::ACCEPTED,
            },
        ));
        for f in session.outbox.resend_all(now) {
            actions.push(Action::Send(conn, f));
        }
        for f in session.outbox.pump(now, NO_IDS) {
            actions.push(Action::Send(conn, f));
        }
        self.sessions.insert(client_id.to_string(), session);
        actions
    }

    /// Processes one frame received on `conn`.
    pub fn handle(&mut self, conn: ConnId, frame: Frame, now: u64) -> Vec<Action> {
        let Some(client_id) = self.conns.get(&conn).cloned() else {
            log::warn!("{} frame on unauthenticated connection {conn}", frame.kind());
            return vec![Action::Close(conn)];
        };
        match frame {
            Frame::Publish(p) => self.on_publish(conn, &client_id, p, now),
            Frame::Pubrel { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client_id) {
                    s.inbox.release(packet_id);
                }
                vec![Action::Send(conn, Frame::Pubcomp { packet_id })]
            }
            f @ (Frame::Puback { .. } | Frame::Pubrec { .. } | Frame::Pubcomp { .. }) => {
                let Some(s) = self.sessions.get_mut(&client_id) else {
                    return vec![];
                };
                let (mut frames, _) = s.outbox.ack(&f, now);
                frames.extend(s.outbox.pump(now, NO_IDS));
                frames.into_iter().map(|f| Action::Send(conn, f)).collect()
            }
            Frame::Subscribe { packet_id, filters } => self.on_subscribe(conn, &client_id, packet_id, filters, now),
            Frame::Disconnect => self.close(conn, now),
            other => {
                log::warn!("unexpected {} from {client_id}", other.kind());
                self.close(conn, now)
            }
        }
    }

    fn on_publish(&mut self, conn: ConnId, client_id: &str, p: Publish, now: u64) -> Vec<Action> {
        if topic::validate_topic(&p.topic).is_err() {
            log::warn!("{client_id} published to invalid topic {:?}", p.topic);
            return self.close(conn, now);
        }
        let window = self.config.inflight_window;
        let session = self.sessions.get_mut(client_id).expect("connected session exists");
        let mut actions = Vec::new();
        let fresh = match (p.qos, p.packet_id) {
            (QoS::AtMostOnce, _) => true,
            (QoS::AtLeastOnce, Some(id)) => {
                actions.push(Action::Send(conn, Frame::Puback { packet_id: id }));
                true
            }
            (QoS::ExactlyOnce, Some(id)) => {
                if session.inbox.is_duplicate(id) {
                    false
                } else if session.inbox.pending.len() >= window {
                    log::warn!("{client_id} exceeded the inflight window of {window}");
                    return self.close(conn, now);
                } else {
                    session.inbox.receive(id);
                    true
                }
            }
            _ => unreachable!("decoder enforces packet ids"),
        };
        if let (QoS::ExactlyOnce, Some(id)) = (p.qos, p.packet_id) {
            actions.push(Action::Send(conn, Frame::Pubrec { packet_id: id }));
        }
        if !fresh {
            return actions;
        }
        if !session.can_publish(&p.topic) {
            // acknowledged but discarded, as MQTT 3.1.1 brokers do
            log::warn!("{client_id} is not authorized to publish on {}", p.topic);
            return actions;
        }
        if p.retain {
            if p.payload.is_empty() {
                self.retained.remove(&p.topic);
            } else {
                let mut kept = p.clone();
                kept.packet_id = None;
                kept.dup = false;
                self.retained.insert(p.topic.clone(), kept);
            }
        }
        if self.config.bridge_topics.iter().any(|f| topic::matches(f, &p.topic)) {
            actions.push(Action::Bridge(BridgeMessage {
                client_id: client_id.to_string(),
                topic: p.topic.clone(),
                payload: p.payload.clone(),
                timestamp: now,
            }));
        }
        actions.extend(self.route(&p, now));
        actions
    }

    fn route(&mut self, p: &Publish, now: u64) -> Vec<Action> {
        let mut actions = Vec::new();
        let max_offline = self.config.max_offline_queue;
        for (client_id, s) in self.sessions.iter_mut() {
            let Some(sub_qos) = s
                .subscriptions
                .iter()
                .filter(|(f, _)| topic::matches(f, &p.topic))
                .map(|(_, q)| *q)
                .max()
            else {
                continue;
            };
            if !s.can_receive(&p.topic) {
                continue;
            }
            let message = Publish {
                topic: p.topic.clone(),
                payload: p.payload.clone(),
                qos: p.qos.min(sub_qos),
                retain: false,
                packet_id: None,
                dup: false,
            };
            actions.extend(deliver(client_id, s, message, now, max_offline));
        }
        actions
    }

    fn on_subscribe(
        &mut self,
        conn: ConnId,
        client_id: &str,
        packet_id: u16,
        filters: Vec<SubscriptionRequest>,
        now: u64,
    ) -> Vec<Action> {
        let max_offline = self.config.max_offline_queue;
        let session = self.sessions.get_mut(client_id).expect("connected session exists");
        let mut granted = Vec::with_capacity(filters.len());
        let mut accepted = Vec::new();
        for req in filters {
            if topic::validate_filter(&req.filter).is_ok() && session.can_subscribe(&req.filter) {
                session.subscriptions.insert(req.filter.clone(), req.max_qos);
                granted.push(Granted::Qos(req.max_qos));
                accepted.push(req);
            } else {
                log::warn!("{client_id} refused subscription to {:?}", req.filter);
                granted.push(Granted::Refused);
            }
        }
        let mut actions = vec![Action::Send(conn, Frame::Suback { packet_id, granted })];
        for req in accepted {
            for (name, kept) in self.retained.iter() {
                if topic::matches(&req.filter, name) && session.can_receive(name) {
                    let message = Publish {
                        qos: kept.qos.min(req.max_qos),
                        retain: true,
                        ..kept.clone()
                    };
                    actions.extend(deliver(client_id, session, message, now, max_offline));
                }
            }
        }
        actions
    }

    /// Closes `conn`. Clean sessions are destroyed; persistent ones are kept
    /// with their subscriptions, inflight state and queue.
    pub fn close(&mut self, conn: ConnId, now: u64) -> Vec<Action> {
        if let Some(client_id) = self.conns.remove(&conn) {
            let destroy = match self.sessions.get_mut(&client_id) {
                Some(s) if s.clean => true,
                Some(s) => {
                    s.conn = None;
                    s.disconnected_at = Some(now);
                    s.offline_queue = std::mem::take(&mut s.outbox.queue);
                    false
                }
                None => false,
            };
            if destroy {
                self.sessions.remove(&client_id);
            }
        }
        vec![Action::Close(conn)]
    }

    /// The transport under `conn` went away without a DISCONNECT.
    pub fn connection_lost(&mut self, conn: ConnId, now: u64) {
        self.close(conn, now);
    }

    /// Retransmits overdue QoS 1/2 frames.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        let interval = self.config.retry_interval_ms;
        let mut actions = Vec::new();
        for s in self.sessions.values_mut() {
            if let Some(conn) = s.conn {
                for f in s.outbox.retransmit(now, interval) {
                    actions.push(Action::Send(conn, f));
                }
            }
        }
        actions
    }

    /// Drops persistent sessions disconnected for longer than the expiry.
    /// Returns the expired client ids.
    pub fn expire_sessions(&mut self, now: u64) -> Vec<String> {
        let Some(ttl) = self.config.session_expiry_ms else {
            return Vec::new();
        };
        let expired: Vec<String> = self
            .sessions
            .iter()
            .filter(|(_, s)| s.disconnected_at.is_some_and(|t| now.saturating_sub(t) >= ttl))
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            self.sessions.remove(id);
        }
        expired
    }

    pub fn session(&self, client_id: &str) -> Option<SessionInfo> {
        self.sessions.get(client_id).map(|s| SessionInfo {
            client_id: client_id.to_string(),
            connected: s.conn.is_some(),
            clean: s.clean,
            subscriptions: s.subscriptions.clone(),
            inflight_out: s.outbox.inflight.len(),
            inflight_in: s.inbox.pending.len(),
            queued: s.outbox.queue.len(),
            offline_queue: s.offline_queue.len(),
        })
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }

    pub fn client_of(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).map(String::as_str)
    }

    pub fn retained(&self, topic_name: &str) -> Option<&Publish> {
        self.retained.get(topic_name)
    }

    pub fn retained_count(&self) -> usize {
        self.retained.len()
    }

    /// No connected session has undelivered or unacknowledged messages.
    pub fn is_quiescent(&self) -> bool {
        self.sessions
            .values()
            .filter(|s| s.conn.is_some())
            .all(|s| s.outbox.is_empty() && s.inbox.pending.is_empty())
    }
}

fn deliver(client_id: &str, s: &mut Session, message: Publish, now: u64, max_offline: usize) -> Vec<Action> {
    match s.conn {
        Some(conn) if message.qos == QoS::AtMostOnce => vec![Action::Send(conn, Frame::Publish(message))],
        Some(conn) => {
            s.outbox.queue.push_back(message);
            s.outbox
                .pump(now, NO_IDS)
                .into_iter()
                .map(|f| Action::Send(conn, f))
                .collect()
        }
        None if message.qos == QoS::AtMostOnce => vec![],
        None => {
            if s.offline_queue.len() >= max_offline {
                log::warn!("offline queue of {client_id} full, dropping the oldest message");
                s.offline_queue.pop_front();
            }
            s.offline_queue.push_back(message);
            vec![]
        }
    }
}
