//! Deterministic in-memory transport with seeded fault injection.
//!
//! Virtual time advances only when the simulation steps, so runs are fast
//! and a given seed always yields the same frame schedule.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auth::Authenticator;
use crate::broker::{Action, BridgeMessage, Broker, BrokerConfig, ConnId};
use crate::client::{ClientEvent, ClientSession, Delivery};
use crate::frame::{Frame, Granted, QoS, SubscriptionRequest};
use crate::BrokerError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    pub drop: f64,
    pub duplicate: f64,
    pub reorder: f64,
}

impl FaultConfig {
    pub fn none() -> Self {
        FaultConfig {
            drop: 0.0,
            duplicate: 0.0,
            reorder: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub faults: FaultConfig,
    pub latency_ms: u64,
    /// Upper bound of the extra delay given to reordered or duplicated frames.
    pub max_extra_delay_ms: u64,
    pub tick_ms: u64,
    pub broker: BrokerConfig,
    pub client_window: usize,
    pub client_retry_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            faults: FaultConfig::none(),
            latency_ms: 1,
            max_extra_delay_ms: 20,
            tick_ms: 10,
            broker: BrokerConfig {
                retry_interval_ms: 100,
                ..BrokerConfig::default()
            },
            client_window: 32,
            client_retry_ms: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimStats {
    pub sent: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub reordered: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dest {
    Broker,
    Client(usize),
}

#[derive(Debug)]
struct Wire {
    at: u64,
    seq: u64,
    conn: ConnId,
    dest: Dest,
    frame: Frame,
}

impl PartialEq for Wire {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Wire {}
impl PartialOrd for Wire {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Wire {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct SimClient {
    session: ClientSession,
    conn: Option<ConnId>,
    faulty: bool,
    deliveries: Vec<Delivery>,
    events: Vec<ClientEvent>,
}

pub struct Simulation {
    config: SimConfig,
    rng: ChaCha8Rng,
    now: u64,
    next_tick: u64,
    broker: Broker,
    auth: Arc<dyn Authenticator>,
    clients: Vec<SimClient>,
    wire: BinaryHeap<Reverse<Wire>>,
    seq: u64,
    next_conn: ConnId,
    open: BTreeSet<ConnId>,
    bridged: Vec<BridgeMessage>,
    stats: SimStats,
}

/// Horizon for the blocking helpers, in virtual milliseconds.
const HANDSHAKE_MS: u64 = 60_000;

impl Simulation {
    pub fn new(config: SimConfig, auth: Arc<dyn Authenticator>) -> Self {
        Simulation {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            broker: Broker::new(config.broker.clone()),
            config,
            now: 0,
            next_tick: 0,
            auth,
            clients: Vec::new(),
            wire: BinaryHeap::new(),
            seq: 0,
            next_conn: 1,
            open: BTreeSet::new(),
            bridged: Vec::new(),
            stats: SimStats::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn broker_mut(&mut self) -> &mut Broker {
        &mut self.broker
    }

    pub fn stats(&self) -> SimStats {
        self.stats
    }

    pub fn bridged(&self) -> &[BridgeMessage] {
        &self.bridged
    }

    pub fn add_client(&mut self, client_id: &str) -> usize {
        self.clients.push(SimClient {
            session: ClientSession::new(client_id, self.config.client_window, self.config.client_retry_ms),
            conn: None,
            faulty: false,
            deliveries: Vec::new(),
            events: Vec::new(),
        });
        self.clients.len() - 1
    }

    /// Enables or disables fault injection on both directions of a client's
    /// link. CONNECT, CONNACK and DISCONNECT are never faulted: the handshake
    /// has no retransmission of its own.
    pub fn set_faults(&mut self, client: usize, on: bool) {
        self.clients[client].faulty = on;
    }

    pub fn client(&self, client: usize) -> &ClientSession {
        &self.clients[client].session
    }

    pub fn deliveries(&self, client: usize) -> &[Delivery] {
        &self.clients[client].deliveries
    }

    pub fn take_deliveries(&mut self, client: usize) -> Vec<Delivery> {
        std::mem::take(&mut self.clients[client].deliveries)
    }

    pub fn events(&self, client: usize) -> &[ClientEvent] {
        &self.clients[client].events
    }

    fn send(&mut self, conn: ConnId, dest: Dest, frame: Frame) {
        self.stats.sent += 1;
        let idx = match dest {
            Dest::Client(i) => i,
            Dest::Broker => self.owner(conn).expect("frames to the broker come from a client"),
        };
        let faulty = self.clients[idx].faulty
            && !matches!(frame, Frame::Connect { .. } | Frame::Connack { .. } | Frame::Disconnect);
        let f = self.config.faults;
        let mut delay = self.config.latency_ms;
        if faulty {
            if self.rng.gen_bool(f.drop) {
                self.stats.dropped += 1;
                return;
            }
            if self.rng.gen_bool(f.reorder) {
                self.stats.reordered += 1;
                delay += self.rng.gen_range(1..=self.config.max_extra_delay_ms.max(1));
            }
            if self.rng.gen_bool(f.duplicate) {
                self.stats.duplicated += 1;
                let extra = self.rng.gen_range(0..=self.config.max_extra_delay_ms);
                self.push(self.now + delay + extra, conn, dest, frame.clone());
            }
        }
        self.push(self.now + delay, conn, dest, frame);
    }

    fn push(&mut self, at: u64, conn: ConnId, dest: Dest, frame: Frame) {
        self.seq += 1;
        self.wire.push(Reverse(Wire {
            at,
            seq: self.seq,
            conn,
            dest,
            frame,
        }));
    }

    fn owner(&self, conn: ConnId) -> Option<usize> {
        self.clients.iter().position(|c| c.conn == Some(conn))
    }

    fn apply(&mut self, actions: Vec<Action>) {
        for a in actions {
            match a {
                Action::Send(conn, frame) => {
                    if !self.open.contains(&conn) {
                        continue;
                    }
                    if let Some(idx) = self.owner(conn) {
                        self.send(conn, Dest::Client(idx), frame);
                    }
                }
                Action::Close(conn) => {
                    self.open.remove(&conn);
                    if let Some(idx) = self.owner(conn) {
                        // let an in-flight CONNACK with a refusal code arrive first
                        let c = &mut self.clients[idx];
                        c.conn = None;
                        if c.session.is_connected() {
                            c.session.connection_lost();
                        }
                    }
                }
                Action::Bridge(m) => self.bridged.push(m),
            }
        }
    }

    fn client_send(&mut self, idx: usize, frames: Vec<Frame>) {
        if let Some(conn) = self.clients[idx].conn {
            for f in frames {
                self.send(conn, Dest::Broker, f);
            }
        }
    }

    fn absorb_events(&mut self, idx: usize) {
        let c = &mut self.clients[idx];
        while let Some(e) = c.session.poll_event() {
            match e {
                ClientEvent::Message(d) => c.deliveries.push(d),
                other => c.events.push(other),
            }
        }
    }

    /// Advances to the next frame arrival or timer and processes it.
    pub fn step(&mut self) {
        let next_frame = self.wire.peek().map(|Reverse(w)| w.at);
        match next_frame {
            Some(at) if at < self.next_tick => {
                let Reverse(w) = self.wire.pop().expect("peeked");
                self.now = self.now.max(w.at);
                self.deliver(w);
            }
            _ => {
                self.now = self.now.max(self.next_tick);
                self.next_tick = self.now + self.config.tick_ms;
                let actions = self.broker.tick(self.now);
                self.apply(actions);
                for idx in 0..self.clients.len() {
                    let frames = self.clients[idx].session.tick(self.now);
                    self.client_send(idx, frames);
                }
            }
        }
    }

    fn deliver(&mut self, w: Wire) {
        match w.dest {
            Dest::Broker => {
                if !self.open.contains(&w.conn) {
                    return;
                }
                let actions = match w.frame {
                    Frame::Connect {
                        client_id,
                        clean,
                        challenge_id,
                        signature,
                    } => {
                        let auth = self.auth.authenticate(&client_id, &challenge_id, &signature);
                        self.broker.connect(w.conn, &client_id, clean, auth, self.now)
                    }
                    frame => self.broker.handle(w.conn, frame, self.now),
                };
                self.apply(actions);
            }
            Dest::Client(idx) => {
                // a refused CONNACK can still be read after the broker hung up
                let refusal = matches!(w.frame, Frame::Connack { code, .. } if code != 0);
                let c = &mut self.clients[idx];
                if c.conn != Some(w.conn) && !refusal {
                    return;
                }
                let out = c.session.handle(w.frame, self.now);
                self.absorb_events(idx);
                self.client_send(idx, out);
            }
        }
    }

    pub fn run_for(&mut self, ms: u64) {
        let end = self.now + ms;
        while self.now < end {
            self.step();
        }
    }

    /// Steps until `done` holds or `max_ms` of virtual time pass.
    pub fn run_until(&mut self, max_ms: u64, mut done: impl FnMut(&Simulation) -> bool) -> bool {
        let end = self.now + max_ms;
        loop {
            if done(self) {
                return true;
            }
            if self.now >= end {
                return false;
            }
            self.step();
        }
    }

    /// Nothing on the wire, every client idle and no connected session with
    /// pending messages.
    pub fn is_idle(&self) -> bool {
        self.wire.is_empty()
            && self.clients.iter().all(|c| c.conn.is_none() || c.session.is_idle()) && self.broker.is_quiescent()
    }

    pub fn run_until_idle(&mut self, max_ms: u64) -> bool {
        self.run_until(max_ms, |s| s.is_idle())
    }

    /// Opens a connection and sends CONNECT.
    pub fn connect(&mut self, client: usize, clean: bool, challenge_id: &str, signature: &[u8]) {
        if let Some(old) = self.clients[client].conn.take() {
            self.open.remove(&old);
            self.broker.connection_lost(old, self.now);
        }
        let conn = self.next_conn;
        self.next_conn += 1;
        self.open.insert(conn);
        let c = &mut self.clients[client];
        c.conn = Some(conn);
        c.events.clear();
        let frame = c.session.connect(clean, challenge_id, signature);
        self.send(conn, Dest::Broker, frame);
    }

    /// Connects and runs until the CONNACK; returns session-present.
    pub fn connect_and_wait(
        &mut self,
        client: usize,
        clean: bool,
        challenge_id: &str,
        signature: &[u8],
    ) -> Result<bool, BrokerError> {
        self.connect(client, clean, challenge_id, signature);
        self.run_until(HANDSHAKE_MS, |s| {
            s.clients[client]
                .events
                .iter()
                .any(|e| matches!(e, ClientEvent::Connected { .. } | ClientEvent::Refused { .. }))
        });
        for e in &self.clients[client].events {
            match e {
                ClientEvent::Connected { session_present } => return Ok(*session_present),
                ClientEvent::Refused { code } => return Err(BrokerError::Refused(*code)),
                _ => {}
            }
        }
        Err(BrokerError::Timeout)
    }

    pub fn subscribe(&mut self, client: usize, filters: &[(&str, QoS)]) -> Result<u16, BrokerError> {
        let reqs = filters
            .iter()
            .map(|(f, q)| SubscriptionRequest {
                filter: f.to_string(),
                max_qos: *q,
            })
            .collect();
        let (id, frame) = self.clients[client].session.subscribe(reqs, self.now)?;
        self.client_send(client, vec![frame]);
        Ok(id)
    }

    pub fn subscribe_and_wait(&mut self, client: usize, filters: &[(&str, QoS)]) -> Result<Vec<Granted>, BrokerError> {
        let id = self.subscribe(client, filters)?;
        let suback = |s: &Simulation| {
            s.clients[client].events.iter().find_map(|e| match e {
                ClientEvent::Subscribed { packet_id, granted } if *packet_id == id => Some(granted.clone()),
                _ => None,
            })
        };
        self.run_until(HANDSHAKE_MS, |s| suback(s).is_some());
        suback(self).ok_or(BrokerError::Timeout)
    }

    pub fn publish(&mut self, client: usize, topic: &str, payload: &[u8], qos: QoS, retain: bool) -> Result<(), BrokerError> {
        let frames = self.clients[client]
            .session
            .publish(topic, payload.to_vec(), qos, retain, self.now)?;
        self.client_send(client, frames);
        Ok(())
    }

    /// Publishes, first running the simulation until the window has room.
    pub fn publish_when_ready(
        &mut self,
        client: usize,
        topic: &str,
        payload: &[u8],
        qos: QoS,
        retain: bool,
    ) -> Result<(), BrokerError> {
        let window = self.config.client_window;
        if !self.run_until(HANDSHAKE_MS, |s| s.clients[client].session.pending_publishes() < window) {
            return Err(BrokerError::Timeout);
        }
        self.publish(client, topic, payload, qos, retain)
    }

    /// Sends DISCONNECT and closes the client side.
    pub fn disconnect(&mut self, client: usize) {
        if let Some(conn) = self.clients[client].conn {
            let frame = self.clients[client].session.disconnect();
            self.send(conn, Dest::Broker, frame);
            self.clients[client].conn = None;
        }
    }

    /// Severs the connection without a DISCONNECT; frames in flight are lost.
    pub fn drop_connection(&mut self, client: usize) {
        if let Some(conn) = self.clients[client].conn.take() {
            self.open.remove(&conn);
            self.broker.connection_lost(conn, self.now);
            self.clients[client].session.connection_lost();
        }
    }
}
