//! Client-side protocol state machine (no I/O).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::frame::{connack, Frame, Granted, Publish, QoS, SubscriptionRequest};
use crate::inflight::{Inbox, Outbox};
use crate::{topic, BrokerError};

/// An application message received from the broker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: QoS,
    pub retain: bool,
    pub dup: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientEvent {
    Connected { session_present: bool },
    Refused { code: u8 },
    Subscribed { packet_id: u16, granted: Vec<Granted> },
    /// A QoS 1/2 publish of ours completed its handshake.
    Published { packet_id: u16 },
    Message(Delivery),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    Disconnected,
    Connecting,
    Connected,
}

#[derive(Debug)]
pub struct ClientSession {
    client_id: String,
    state: ClientState,
    retry_ms: u64,
    outbox: Outbox,
    inbox: Inbox,
    subscribes: BTreeMap<u16, (Vec<SubscriptionRequest>, u64)>,
    events: VecDeque<ClientEvent>,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>, window: usize, retry_ms: u64) -> Self {
        ClientSession {
            client_id: client_id.into(),
            state: ClientState::Disconnected,
            retry_ms,
            outbox: Outbox::new(window),
            inbox: Inbox::new(),
            subscribes: BTreeMap::new(),
            events: VecDeque::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn state(&self) -> ClientState {
        self.state
    }

    pub fn is_connected(&self) -> bool {
        self.state == ClientState::Connected
    }

    /// Nothing queued, inflight, or awaiting a SUBACK.
    pub fn is_idle(&self) -> bool {
        self.outbox.is_empty() && self.subscribes.is_empty()
    }

    /// Unfinished QoS 1/2 publishes (queued plus inflight).
    pub fn pending_publishes(&self) -> usize {
        self.outbox.queue.len() + self.outbox.inflight.len()
    }

    pub fn connect(&mut self, clean: bool, challenge_id: &str, signature: &[u8]) -> Frame {
        if clean {
            self.outbox.clear();
            self.inbox.clear();
            self.subscribes.clear();
        }
        self.state = ClientState::Connecting;
        Frame::Connect {
            client_id: self.client_id.clone(),
            clean,
            challenge_id: challenge_id.to_string(),
            signature: signature.to_vec(),
        }
    }

    pub fn disconnect(&mut self) -> Frame {
        self.state = ClientState::Disconnected;
        Frame::Disconnect
    }

    pub fn connection_lost(&mut self) {
        self.state = ClientState::Disconnected;
    }

    fn taken(&self) -> BTreeSet<u16> {
        self.subscribes.keys().copied().collect()
    }

    /// Queues a publish. QoS 0 goes out immediately; QoS 1/2 enter the
    /// inflight window and fail with `QuotaExceeded` once the window and
    /// queue together hold `window` messages.
    pub fn publish(
        &mut self,
        topic_name: &str,
        payload: Vec<u8>,
        qos: QoS,
        retain: bool,
        now: u64,
    ) -> Result<Vec<Frame>, BrokerError> {
        topic::validate_topic(topic_name)?;
        if self.state != ClientState::Connected {
            return Err(BrokerError::NotConnected);
        }
        let message = Publish {
            topic: topic_name.to_string(),
            payload,
            qos,
            retain,
            packet_id: None,
            dup: false,
        };
        if qos == QoS::AtMostOnce {
            return Ok(vec![Frame::Publish(message)]);
        }
        if self.pending_publishes() >= self.outbox.window() {
            return Err(BrokerError::QuotaExceeded);
        }
        self.outbox.queue.push_back(message);
        let taken = self.taken();
        Ok(self.outbox.pump(now, &taken))
    }

    /// Returns the packet id and the SUBSCRIBE frame.
    pub fn subscribe(&mut self, filters: Vec<SubscriptionRequest>, now: u64) -> Result<(u16, Frame), BrokerError> {
        if filters.is_empty() {
            return Err(BrokerError::Protocol("subscribe without filters".into()));
        }
        for f in &filters {
            topic::validate_filter(&f.filter)?;
        }
        let taken = self.taken();
        let id = self.outbox.alloc_id(&taken);
        self.subscribes.insert(id, (filters.clone(), now));
        Ok((
            id,
            Frame::Subscribe {
                packet_id: id,
                filters,
            },
        ))
    }

    pub fn poll_event(&mut self) -> Option<ClientEvent> {
        self.events.pop_front()
    }

    pub fn drain_events(&mut self) -> Vec<ClientEvent> {
        self.events.drain(..).collect()
    }

    /// Processes a frame from the broker; returns the frames to send back.
    pub fn handle(&mut self, frame: Frame, now: u64) -> Vec<Frame> {
        match frame {
            Frame::Connack { session_present, code } => {
                if self.state != ClientState::Connecting {
                    return vec![];
                }
                if code != connack::ACCEPTED {
                    self.state = ClientState::Disconnected;
                    self.events.push_back(ClientEvent::Refused { code });
                    return vec![];
                }
                self.state = ClientState::Connected;
                if !session_present {
                    // the broker starts numbering afresh
                    self.inbox.clear();
                }
                self.events.push_back(ClientEvent::Connected { session_present });
                let mut out = self.outbox.resend_all(now);
                for (id, (filters, sent)) in self.subscribes.iter_mut() {
                    *sent = now;
                    out.push(Frame::Subscribe {
                        packet_id: *id,
                        filters: filters.clone(),
                    });
                }
                let taken = self.taken();
                out.extend(self.outbox.pump(now, &taken));
                out
            }
            Frame::Publish(p) => self.on_publish(p),
            Frame::Pubrel { packet_id } => {
                self.inbox.release(packet_id);
                vec![Frame::Pubcomp { packet_id }]
            }
            f @ (Frame::Puback { .. } | Frame::Pubrec { .. } | Frame::Pubcomp { .. }) => {
                let id = match f {
                    Frame::Puback { packet_id } | Frame::Pubrec { packet_id } | Frame::Pubcomp { packet_id } => packet_id,
                    _ => unreachable!(),
                };
                let (mut out, done) = self.outbox.ack(&f, now);
                if done {
                    self.events.push_back(ClientEvent::Published { packet_id: id });
                }
                let taken = self.taken();
                out.extend(self.outbox.pump(now, &taken));
                out
            }
            Frame::Suback { packet_id, granted } => {
                if self.subscribes.remove(&packet_id).is_some() {
                    self.events.push_back(ClientEvent::Subscribed { packet_id, granted });
                }
                vec![]
            }
            other => {
                log::warn!("{}: unexpected {} from broker", self.client_id, other.kind());
                vec![]
            }
        }
    }

    fn on_publish(&mut self, p: Publish) -> Vec<Frame> {
        let mut out = Vec::new();
        let deliver = match (p.qos, p.packet_id) {
            (QoS::AtMostOnce, _) => true,
            (QoS::AtLeastOnce, Some(id)) => {
                out.push(Frame::Puback { packet_id: id });
                true
            }
            (QoS::ExactlyOnce, Some(id)) => {
                out.push(Frame::Pubrec { packet_id: id });
                if self.inbox.is_duplicate(id) {
                    false
                } else {
                    self.inbox.receive(id);
                    true
                }
            }
            _ => false,
        };
        if deliver {
            self.events.push_back(ClientEvent::Message(Delivery {
                topic: p.topic,
                payload: p.payload,
                qos: p.qos,
                retain: p.retain,
                dup: p.dup,
            }));
        }
        out
    }

    /// Retransmits overdue publishes, releases and subscribes.
    pub fn tick(&mut self, now: u64) -> Vec<Frame> {
        if self.state != ClientState::Connected {
            return vec![];
        }
        let mut out = self.outbox.retransmit(now, self.retry_ms);
        for (id, (filters, sent)) in self.subscribes.iter_mut() {
            if now.saturating_sub(*sent) >= self.retry_ms {
                *sent = now;
                out.push(Frame::Subscribe {
                    packet_id: *id,
                    filters: filters.clone(),
                });
            }
        }
        out
    }
}
