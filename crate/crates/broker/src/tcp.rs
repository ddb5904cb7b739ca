//! TCP transport: a threaded server around [`Broker`] and a blocking client.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use passion_core::txflow::Clock;

use crate::auth::Authenticator;
use crate::broker::{Action, BridgeMessage, Broker, BrokerConfig, ConnId};
use crate::client::{ClientEvent, ClientSession, Delivery};
use crate::frame::{Frame, Granted, QoS, SubscriptionRequest};
use crate::BrokerError;

const TICK: Duration = Duration::from_millis(50);

enum Out {
    Frame(Frame),
    Close,
}

struct Shared {
    broker: Mutex<Broker>,
    auth: Arc<dyn Authenticator>,
    writers: Mutex<HashMap<ConnId, Sender<Out>>>,
    bridge: Option<Sender<BridgeMessage>>,
    clock: Arc<dyn Clock>,
    next_conn: AtomicU64,
    running: AtomicBool,
}

impl Shared {
    fn apply(&self, actions: Vec<Action>) {
        let mut writers = self.writers.lock();
        for a in actions {
            match a {
                Action::Send(conn, f) => {
                    if let Some(w) = writers.get(&conn) {
                        let _ = w.send(Out::Frame(f));
                    }
                }
                Action::Close(conn) => {
                    if let Some(w) = writers.remove(&conn) {
                        let _ = w.send(Out::Close);
                    }
                }
                Action::Bridge(m) => {
                    if let Some(b) = &self.bridge {
                        if b.send(m).is_err() {
                            log::warn!("ledger bridge is gone; reading not captured");
                        }
                    }
                }
            }
        }
    }

    fn serve(self: Arc<Self>, stream: TcpStream) -> io::Result<()> {
        let conn = self.next_conn.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = unbounded::<Out>();
        self.writers.lock().insert(conn, tx);
        let mut out = stream.try_clone()?;
        thread::spawn(move || {
            for msg in rx {
                match msg {
                    Out::Frame(f) => {
                        if out.write_all(f.encode().as_bytes()).is_err() {
                            break;
                        }
                    }
                    Out::Close => break,
                }
            }
            let _ = out.shutdown(Shutdown::Both);
        });
        let shared = self.clone();
        thread::spawn(move || {
            let reader = BufReader::new(stream);
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                let frame = match Frame::decode(&line) {
                    Ok(f) => f,
                    Err(e) => {
                        log::warn!("connection {conn}: {e}");
                        break;
                    }
                };
                let actions = match frame {
                    Frame::Connect {
                        client_id,
                        clean,
                        challenge_id,
                        signature,
                    } => {
                        // the ledger round trip happens outside the broker lock
                        let auth = shared.auth.authenticate(&client_id, &challenge_id, &signature);
                        let now = shared.clock.now_ms();
                        shared.broker.lock().connect(conn, &client_id, clean, auth, now)
                    }
                    f => {
                        let now = shared.clock.now_ms();
                        shared.broker.lock().handle(conn, f, now)
                    }
                };
                let closing = actions.iter().any(|a| matches!(a, Action::Close(c) if *c == conn));
                shared.apply(actions);
                if closing {
                    break;
                }
            }
            let now = shared.clock.now_ms();
            let actions = shared.broker.lock().close(conn, now);
            shared.apply(actions);
        });
        Ok(())
    }
}

/// A broker listening on a TCP socket. Frames are newline-delimited JSON.
pub struct BrokerServer {
    shared: Arc<Shared>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl BrokerServer {
    pub fn bind(
        addr: impl ToSocketAddrs,
        config: BrokerConfig,
        auth: Arc<dyn Authenticator>,
        bridge: Option<Sender<BridgeMessage>>,
        clock: Arc<dyn Clock>,
    ) -> io::Result<BrokerServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            broker: Mutex::new(Broker::new(config)),
            auth,
            writers: Mutex::new(HashMap::new()),
            bridge,
            clock,
            next_conn: AtomicU64::new(1),
            running: AtomicBool::new(true),
        });

        let s = shared.clone();
        let acceptor = thread::spawn(move || {
            while s.running.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::debug!("connection from {peer}");
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        if let Err(e) = s.clone().serve(stream) {
                            log::warn!("connection from {peer}: {e}");
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(e) => {
                        log::warn!("accept: {e}");
                        thread::sleep(Duration::from_millis(50));
                    }
                }
            }
        });

        let s = shared.clone();
        let ticker = thread::spawn(move || {
            while s.running.load(Ordering::SeqCst) {
                thread::sleep(TICK);
                let now = s.clock.now_ms();
                let actions = {
                    let mut b = s.broker.lock();
                    for id in b.expire_sessions(now) {
                        log::info!("session {id} expired");
                    }
                    b.tick(now)
                };
                s.apply(actions);
            }
        });

        Ok(BrokerServer {
            shared,
            addr,
            threads: vec![acceptor, ticker],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Runs `f` against the broker state, under its lock.
    pub fn inspect<T>(&self, f: impl FnOnce(&Broker) -> T) -> T {
        f(&self.shared.broker.lock())
    }

    /// Stops accepting, closes every connection and joins the server threads.
    pub fn shutdown(&mut self) {
        if !self.shared.running.swap(false, Ordering::SeqCst) {
            return;
        }
        let conns: Vec<ConnId> = self.shared.writers.lock().keys().copied().collect();
        self.shared.apply(conns.into_iter().map(Action::Close).collect());
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct ClientShared {
    session: Mutex<ClientSession>,
    stream: Mutex<TcpStream>,
    epoch: Instant,
    alive: AtomicBool,
}

impl ClientShared {
    fn now(&self) -> u64 {
        self.epoch.elapsed().as_millis() as u64
    }

    fn send(&self, frames: &[Frame]) -> Result<(), BrokerError> {
        let mut s = self.stream.lock();
        for f in frames {
            s.write_all(f.encode().as_bytes())?;
        }
        Ok(())
    }
}

/// Blocking client over TCP. A reader thread acknowledges incoming frames
/// and a timer thread retransmits unacknowledged ones.
pub struct TcpClient {
    shared: Arc<ClientShared>,
    messages: Receiver<Delivery>,
    events: Receiver<ClientEvent>,
    threads: Vec<JoinHandle<()>>,
}

impl TcpClient {
    /// Connects and authenticates. Returns the client and session-present.
    pub fn connect(
        addr: impl ToSocketAddrs,
        client_id: &str,
        clean: bool,
        challenge_id: &str,
        signature: &[u8],
        timeout: Duration,
    ) -> Result<(TcpClient, bool), BrokerError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let read_half = stream.try_clone()?;
        let shared = Arc::new(ClientShared {
            session: Mutex::new(ClientSession::new(client_id, 32, 1000)),
            stream: Mutex::new(stream),
            epoch: Instant::now(),
            alive: AtomicBool::new(true),
        });
        let (msg_tx, messages) = unbounded();
        let (evt_tx, events) = unbounded();

        let s = shared.clone();
        let reader = thread::spawn(move || {
            for line in BufReader::new(read_half).lines() {
                let Ok(line) = line else { break };
                let Ok(frame) = Frame::decode(&line) else {
                    log::warn!("undecodable frame from broker");
                    break;
                };
                let (out, evts) = {
                    let mut session = s.session.lock();
                    let out = session.handle(frame, s.now());
                    (out, session.drain_events())
                };
                if s.send(&out).is_err() {
                    break;
                }
                for e in evts {
                    match e {
                        ClientEvent::Message(d) => {
                            let _ = msg_tx.send(d);
                        }
                        ClientEvent::Published { .. } => {}
                        other => {
                            let _ = evt_tx.send(other);
                        }
                    }
                }
            }
            s.alive.store(false, Ordering::SeqCst);
            s.session.lock().connection_lost();
        });

        let s = shared.clone();
        let ticker = thread::spawn(move || {
            while s.alive.load(Ordering::SeqCst) {
                thread::sleep(TICK);
                let frames = s.session.lock().tick(s.now());
                if s.send(&frames).is_err() {
                    break;
                }
            }
        });

        let client = TcpClient {
            shared,
            messages,
            events,
            threads: vec![reader, ticker],
        };
        let frame = client.shared.session.lock().connect(clean, challenge_id, signature);
        client.shared.send(&[frame])?;
        let present = loop {
            match client.events.recv_timeout(timeout) {
                Ok(ClientEvent::Connected { session_present }) => break session_present,
                Ok(ClientEvent::Refused { code }) => return Err(BrokerError::Refused(code)),
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Err(BrokerError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Err(BrokerError::NotConnected),
            }
        };
        Ok((client, present))
    }

    pub fn subscribe(&self, filters: &[(&str, QoS)], timeout: Duration) -> Result<Vec<Granted>, BrokerError> {
        let reqs = filters
            .iter()
            .map(|(f, q)| SubscriptionRequest {
                filter: f.to_string(),
                max_qos: *q,
            })
            .collect();
        let (id, frame) = self.shared.session.lock().subscribe(reqs, self.shared.now())?;
        self.shared.send(&[frame])?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.events.recv_timeout(left) {
                Ok(ClientEvent::Subscribed { packet_id, granted }) if packet_id == id => return Ok(granted),
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => return Err(BrokerError::Timeout),
                Err(RecvTimeoutError::Disconnected) => return Err(BrokerError::NotConnected),
            }
        }
    }

    /// Publishes, waiting up to `timeout` for room in the inflight window.
    pub fn publish(&self, topic: &str, payload: &[u8], qos: QoS, retain: bool, timeout: Duration) -> Result<(), BrokerError> {
        let deadline = Instant::now() + timeout;
        loop {
            let r = self
                .shared
                .session
                .lock()
                .publish(topic, payload.to_vec(), qos, retain, self.shared.now());
            match r {
                Ok(frames) => return self.shared.send(&frames),
                Err(BrokerError::QuotaExceeded) if Instant::now() < deadline => thread::sleep(Duration::from_millis(2)),
                Err(e) => return Err(e),
            }
        }
    }

    /// Waits until every QoS 1/2 publish completed its handshake.
    pub fn flush(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if self.shared.session.lock().is_idle() {
                return true;
            }
            thread::sleep(Duration::from_millis(5));
        }
        false
    }

    pub fn recv(&self, timeout: Duration) -> Option<Delivery> {
        self.messages.recv_timeout(timeout).ok()
    }

    pub fn is_connected(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst) && self.shared.session.lock().is_connected()
    }

    /// Sends DISCONNECT and closes the socket.
    pub fn disconnect(mut self) {
        let frame = self.shared.session.lock().disconnect();
        let _ = self.shared.send(&[frame]);
        self.close();
    }

    fn close(&mut self) {
        self.shared.alive.store(false, Ordering::SeqCst);
        let _ = self.shared.stream.lock().shutdown(Shutdown::Both);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for TcpClient {
    fn drop(&mut self) {
        self.close();
    }
}
