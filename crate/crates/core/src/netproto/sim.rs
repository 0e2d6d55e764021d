//! Deterministic in-process transport.
//!
//! Frames are byte strings moved between named endpoints by a discrete-event
//! queue. Ordering is total: events fire by `(time, sequence)`, and every link
//! is FIFO because a frame is never scheduled before the previous frame on the
//! same link. Faults are scripted per link.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

/// Default one-hop latency in ticks.
pub const DEFAULT_LATENCY: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropRule {
    /// Drop every frame on the link while the fault is installed.
    All,
    /// Drop the next `n` frames, then pass traffic.
    Next(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkFault {
    pub from: String,
    pub to: String,
    pub drop: Option<DropRule>,
    /// Ticks added to the latency of frames that are not dropped.
    pub extra_delay: u64,
}

impl LinkFault {
    pub fn drop_all(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self { from: from.into(), to: to.into(), drop: Some(DropRule::All), extra_delay: 0 }
    }

    pub fn drop_next(from: impl Into<String>, to: impl Into<String>, n: u32) -> Self {
        Self { from: from.into(), to: to.into(), drop: Some(DropRule::Next(n)), extra_delay: 0 }
    }

    pub fn delay(from: impl Into<String>, to: impl Into<String>, ticks: u64) -> Self {
        Self { from: from.into(), to: to.into(), drop: None, extra_delay: ticks }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimEvent {
    Frame { from: String, to: String, bytes: Vec<u8> },
    Timer { owner: String, token: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Queued { deliver_at: u64 },
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub bytes_sent: u64,
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Key {
    at: u64,
    seq: u64,
}

#[derive(Debug)]
pub struct SimNetwork {
    now: u64,
    seq: u64,
    latency: u64,
    queue: BinaryHeap<Reverse<(Key, usize)>>,
    slots: Vec<Option<SimEvent>>,
    link_tail: BTreeMap<(String, String), u64>,
    faults: Vec<LinkFault>,
    stats: NetStats,
}

impl Default for SimNetwork {
    fn default() -> Self {
        Self::new(DEFAULT_LATENCY)
    }
}

impl SimNetwork {
    pub fn new(latency: u64) -> Self {
        Self {
            now: 0,
            seq: 0,
            latency,
            queue: BinaryHeap::new(),
            slots: Vec::new(),
            link_tail: BTreeMap::new(),
            faults: Vec::new(),
            stats: NetStats::default(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn install_fault(&mut self, fault: LinkFault) {
        self.faults.push(fault);
    }

    pub fn clear_faults(&mut self) {
        self.faults.clear();
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Discards everything still in flight.
    pub fn flush(&mut self) -> usize {
        let n = self.queue.len();
        self.queue.clear();
        self.slots.clear();
        n
    }

    fn push(&mut self, at: u64, event: SimEvent) {
        let key = Key { at, seq: self.seq };
        self.seq += 1;
        self.slots.push(Some(event));
        self.queue.push(Reverse((key, self.slots.len() - 1)));
    }

    pub fn send(&mut self, from: &str, to: &str, bytes: Vec<u8>) -> SendOutcome {
        self.stats.frames_sent += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        let mut extra = 0;
        let mut dropped = false;
        for fault in self.faults.iter_mut().filter(|f| f.from == from && f.to == to) {
            match fault.drop {
                Some(DropRule::All) => dropped = true,
                Some(DropRule::Next(n)) if n > 0 => {
                    fault.drop = Some(DropRule::Next(n - 1));
                    dropped = true;
                }
                _ => {}
            }
            extra += fault.extra_delay;
        }
        if dropped {
            self.stats.frames_dropped += 1;
            return SendOutcome::Dropped;
        }
        let link = (from.to_string(), to.to_string());
        let earliest = self.now + self.latency + extra;
        let deliver_at = earliest.max(self.link_tail.get(&link).copied().unwrap_or(0));
        self.link_tail.insert(link, deliver_at);
        self.push(deliver_at, SimEvent::Frame { from: from.to_string(), to: to.to_string(), bytes });
        SendOutcome::Queued { deliver_at }
    }

    pub fn set_timer(&mut self, owner: &str, after: u64, token: u64) {
        self.push(self.now + after, SimEvent::Timer { owner: owner.to_string(), token });
    }

    /// Pops the next event and advances the clock to its time.
    pub fn next_event(&mut self) -> Option<(u64, SimEvent)> {
        let Reverse((key, slot)) = self.queue.pop()?;
        self.now = key.at;
        let event = self.slots[slot].take().expect("event slot used once");
        if self.queue.is_empty() {
            self.slots.clear();
        }
        Some((key.at, event))
    }

    /// Time of the next pending event.
    pub fn peek_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((key, _))| key.at)
    }

    /// Moves the clock forward without delivering anything.
    pub fn advance_to(&mut self, t: u64) {
        self.now = self.now.max(t);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn drain(net: &mut SimNetwork) -> Vec<(u64, SimEvent)> {
        std::iter::from_fn(|| net.next_event()).collect()
    }

    #[test]
    fn fifo_per_link_even_with_delay_changes() {
        let mut net = SimNetwork::new(1);
        net.install_fault(LinkFault::delay("a", "b", 10));
        net.send("a", "b", vec![1]);
        net.clear_faults();
        net.send("a", "b", vec![2]);
        net.send("c", "b", vec![3]);
        let order: Vec<u8> = drain(&mut net)
            .into_iter()
            .map(|(_, e)| match e {
                SimEvent::Frame { bytes, .. } => bytes[0],
                SimEvent::Timer { .. } => unreachable!(),
            })
            .collect();
        assert_eq!(order, vec![3, 1, 2]);
    }

    #[test]
    fn same_time_events_fire_in_send_order() {
        let mut net = SimNetwork::new(2);
        for i in 0..5u8 {
            net.send(&format!("n{i}"), "hub", vec![i]);
        }
        net.set_timer("hub", 2, 99);
        let events = drain(&mut net);
        assert!(events.iter().all(|(t, _)| *t == 2));
        assert!(matches!(events[5].1, SimEvent::Timer { token: 99, .. }));
        assert_eq!(net.now(), 2);
    }

    #[test]
    fn scripted_drops() {
        let mut net = SimNetwork::default();
        net.install_fault(LinkFault::drop_next("a", "b", 2));
        assert_eq!(net.send("a", "b", vec![0]), SendOutcome::Dropped);
        assert_eq!(net.send("b", "a", vec![0]), SendOutcome::Queued { deliver_at: 1 });
        assert_eq!(net.send("a", "b", vec![0]), SendOutcome::Dropped);
        assert!(matches!(net.send("a", "b", vec![0]), SendOutcome::Queued { .. }));
        net.install_fault(LinkFault::drop_all("a", "b"));
        for _ in 0..10 {
            assert_eq!(net.send("a", "b", vec![0]), SendOutcome::Dropped);
        }
        assert_eq!(net.stats().frames_dropped, 12);
        assert_eq!(net.stats().frames_sent, 14);
    }

    #[test]
    fn replay_is_identical() {
        let run = || {
            let mut net = SimNetwork::new(3);
            net.install_fault(LinkFault::delay("x", "y", 4));
            for i in 0..20u8 {
                let (from, to) = if i % 3 == 0 { ("x", "y") } else { ("y", "x") };
                net.send(from, to, vec![i]);
                if i % 4 == 0 {
                    net.set_timer("x", u64::from(i), u64::from(i));
                }
            }
            drain(&mut net)
        };
        assert_eq!(run(), run());
    }
}
