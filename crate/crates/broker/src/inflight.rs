//! Delivery state shared by the broker and client state machines.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use crate::frame::{Frame, Publish, QoS};

/// Where an outbound QoS 1/2 message stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutState {
    AwaitPuback,
    AwaitPubrec,
    AwaitPubcomp,
}

#[derive(Debug, Clone)]
pub(crate) struct Inflight {
    pub publish: Publish,
    pub state: OutState,
    pub last_sent: u64,
}

impl Inflight {
    /// The frame to (re)send for the current state.
    pub fn frame(&self, dup: bool) -> Frame {
        match self.state {
            OutState::AwaitPubcomp => Frame::Pubrel {
                packet_id: self.publish.packet_id.unwrap_or_default(),
            },
            _ => Frame::Publish(Publish {
                dup,
                ..self.publish.clone()
            }),
        }
    }
}

/// Bounded memory of completed inbound QoS 2 packet ids, so a duplicate
/// PUBLISH that arrives after its PUBREL is not delivered again.
#[derive(Debug, Clone)]
pub(crate) struct RecentIds {
    order: VecDeque<u16>,
    set: HashSet<u16>,
    cap: usize,
}

impl RecentIds {
    pub fn new(cap: usize) -> Self {
        RecentIds {
            order: VecDeque::new(),
            set: HashSet::new(),
            cap,
        }
    }

    pub fn contains(&self, id: u16) -> bool {
        self.set.contains(&id)
    }

    pub fn insert(&mut self, id: u16) {
        if !self.set.insert(id) {
            return;
        }
        self.order.push_back(id);
        if self.order.len() > self.cap {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
    }

    pub fn clear(&mut self) {
        self.order.clear();
        self.set.clear();
    }
}

/// Outbound side of one endpoint: a FIFO of queued messages feeding an
/// inflight window. At most one QoS 2 PUBLISH awaits PUBREC at a time, which
/// keeps exactly-once deliveries in order even when frames are reordered.
#[derive(Debug, Clone)]
pub(crate) struct Outbox {
    pub inflight: BTreeMap<u16, Inflight>,
    pub queue: VecDeque<Publish>,
    next_id: u16,
    window: usize,
}

impl Outbox {
    pub fn new(window: usize) -> Self {
        Outbox {
            inflight: BTreeMap::new(),
            queue: VecDeque::new(),
            next_id: 1,
            window: window.max(1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_empty(&self) -> bool {
        self.inflight.is_empty() && self.queue.is_empty()
    }

    /// Next free packet id in 1..=65535, skipping ids in use.
    pub fn alloc_id(&mut self, also_taken: &BTreeSet<u16>) -> u16 {
        loop {
            let id = self.next_id;
            self.next_id = if self.next_id == u16::MAX { 1 } else { self.next_id + 1 };
            if !self.inflight.contains_key(&id) && !also_taken.contains(&id) {
                return id;
            }
        }
    }

    fn awaiting_rec(&self) -> bool {
        self.inflight.values().any(|i| i.state == OutState::AwaitPubrec)
    }

    /// Moves queued messages into the window; returns the frames to send.
    pub fn pump(&mut self, now: u64, taken: &BTreeSet<u16>) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(front) = self.queue.front() {
            if self.inflight.len() >= self.window {
                break;
            }
            if front.qos == QoS::ExactlyOnce && self.awaiting_rec() {
                break;
            }
            let mut publish = self.queue.pop_front().expect("front exists");
            let id = self.alloc_id(taken);
            publish.packet_id = Some(id);
            publish.dup = false;
            let state = if publish.qos == QoS::ExactlyOnce {
                OutState::AwaitPubrec
            } else {
                OutState::AwaitPuback
            };
            let entry = Inflight {
                publish,
                state,
                last_sent: now,
            };
            out.push(entry.frame(false));
            self.inflight.insert(id, entry);
        }
        out
    }

    /// Handles PUBACK/PUBREC/PUBCOMP. Returns the frames to send and whether
    /// the message identified by `id` completed.
    pub fn ack(&mut self, frame: &Frame, now: u64) -> (Vec<Frame>, bool) {
        match *frame {
            Frame::Puback { packet_id } => {
                if self.inflight.get(&packet_id).map(|i| i.state) == Some(OutState::AwaitPuback) {
                    self.inflight.remove(&packet_id);
                    return (vec![], true);
                }
            }
            Frame::Pubrec { packet_id } => match self.inflight.get_mut(&packet_id) {
                Some(i) if i.state == OutState::AwaitPubrec || i.state == OutState::AwaitPubcomp => {
                    i.state = OutState::AwaitPubcomp;
                    i.last_sent = now;
                    return (vec![Frame::Pubrel { packet_id }], false);
                }
                _ => {}
            },
            Frame::Pubcomp { packet_id } => {
                if self.inflight.get(&packet_id).map(|i| i.state) == Some(OutState::AwaitPubcomp) {
                    self.inflight.remove(&packet_id);
                    return (vec![], true);
                }
            }
            _ => {}
        }
        (vec![], false)
    }

    /// Frames whose retry timer expired, marked as duplicates.
    pub fn retransmit(&mut self, now: u64, interval: u64) -> Vec<Frame> {
        let mut out = Vec::new();
        for i in self.inflight.values_mut() {
            if now.saturating_sub(i.last_sent) >= interval {
                i.last_sent = now;
                out.push(i.frame(true));
            }
        }
        out
    }

    /// Everything inflight, as duplicates; used when a session resumes.
    pub fn resend_all(&mut self, now: u64) -> Vec<Frame> {
        self.inflight
            .values_mut()
            .map(|i| {
                i.last_sent = now;
                i.frame(true)
            })
            .collect()
    }

    pub fn clear(&mut self) {
        self.inflight.clear();
        self.queue.clear();
        self.next_id = 1;
    }
}

/// Inbound QoS 2 bookkeeping: ids received but not yet released, plus
/// recently released ids.
#[derive(Debug, Clone)]
pub(crate) struct Inbox {
    pub pending: BTreeSet<u16>,
    recent: RecentIds,
}

pub(crate) const RECENT_IDS: usize = 1024;

impl Inbox {
    pub fn new() -> Self {
        Inbox {
            pending: BTreeSet::new(),
            recent: RecentIds::new(RECENT_IDS),
        }
    }

    /// True when `id` has been seen before (the copy must not be delivered).
    pub fn is_duplicate(&self, id: u16) -> bool {
        self.pending.contains(&id) || self.recent.contains(id)
    }

    pub fn receive(&mut self, id: u16) {
        self.pending.insert(id);
    }

    pub fn release(&mut self, id: u16) {
        if self.pending.remove(&id) {
            self.recent.insert(id);
        }
    }

    pub fn clear(&mut self) {
        self.pending.clear();
        self.recent.clear();
    }
}
