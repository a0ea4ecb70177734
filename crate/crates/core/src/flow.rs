//! Per-processor flow state and software reordering for the hash
//! scheduler.
//!
//! The low 18 bits of the 32-bit flow hash form the flow index and the top
//! 14 bits its tag. The table keeps 2^15 entries of 16 bytes each, so the
//! index is folded by XOR of its top three bits into the low fifteen and
//! those three bits are kept with the tag.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::SimTime;
use crate::packet::parse_tcp;
use crate::processor::handler::{flip, Descriptor, HandlerCtx, HandlerProgram};

pub const INDEX_BITS: u32 = 18;
pub const INDEX_MASK: u32 = (1 << INDEX_BITS) - 1;
pub const ENTRY_BYTES: u64 = 16;
pub const CARRY_BYTES: usize = 7;

/// Splits a hash into its 18-bit index and 14-bit tag.
pub fn flow_index(hash: u32) -> (u32, u32) {
    (hash & INDEX_MASK, hash >> INDEX_BITS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Escalation {
    /// Release the flow with the oldest held packet, gap and all.
    ReleaseOldest,
    /// Drop the packet that found the buffer full.
    Drop,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    /// Must be a power of two no larger than 2^18.
    pub table_entries: u32,
    pub timeout_ns: u64,
    pub reorder_capacity: usize,
    pub escalation: Escalation,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            table_entries: 1 << 15,
            timeout_ns: 1_000_000,
            reorder_capacity: 8,
            escalation: Escalation::ReleaseOldest,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), String> {
        let n = self.table_entries;
        if !n.is_power_of_two() || n > 1 << INDEX_BITS {
            return Err(format!("table_entries {n} must be a power of two up to 2^18"));
        }
        if self.reorder_capacity == 0 {
            return Err("reorder_capacity must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlowEntry {
    pub valid: bool,
    /// Hash bits not implied by the table slot.
    pub tag: u32,
    /// Sequence number expected next.
    pub next_seq: u32,
    pub last_time: SimTime,
    pub carry: [u8; CARRY_BYTES],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    NewFlow,
    CollisionEvict,
    InOrder,
    OutOfOrder { expected: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentInfo<'a> {
    pub hash: u32,
    pub seq: u32,
    pub payload_len: u32,
    pub now: SimTime,
    /// Final payload bytes, at most seven kept.
    pub tail: &'a [u8],
}

pub struct FlowTable {
    entries: Vec<FlowEntry>,
    slot_bits: u32,
    timeout: SimTime,
}

impl FlowTable {
    pub fn new(cfg: &FlowConfig) -> Self {
        cfg.validate().expect("invalid flow table config");
        FlowTable {
            entries: vec![FlowEntry::default(); cfg.table_entries as usize],
            slot_bits: cfg.table_entries.trailing_zeros(),
            timeout: SimTime::from_ns(cfg.timeout_ns),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn state_bytes(&self) -> u64 {
        self.entries.len() as u64 * ENTRY_BYTES
    }

    /// Table slot and stored tag for a hash.
    pub fn locate(&self, hash: u32) -> (usize, u32) {
        let (idx, _) = flow_index(hash);
        let mask = (1u32 << self.slot_bits) - 1;
        let slot = (idx ^ idx >> self.slot_bits) & mask;
        (slot as usize, hash >> self.slot_bits)
    }

    pub fn entry(&self, hash: u32) -> Option<&FlowEntry> {
        let (slot, tag) = self.locate(hash);
        let e = &self.entries[slot];
        (e.valid && e.tag == tag).then_some(e)
    }

    fn expired(&self, e: &FlowEntry, now: SimTime) -> bool {
        !e.valid || now.saturating_sub(e.last_time) > self.timeout
    }

    pub fn update(&mut self, seg: SegmentInfo<'_>) -> Verdict {
        let (slot, tag) = self.locate(seg.hash);
        let expired = self.expired(&self.entries[slot], seg.now);
        let e = &mut self.entries[slot];
        let verdict = if expired {
            Verdict::NewFlow
        } else if e.tag != tag {
            Verdict::CollisionEvict
        } else if seg.seq == e.next_seq {
            Verdict::InOrder
        } else {
            e.last_time = seg.now;
            return Verdict::OutOfOrder {
                expected: e.next_seq,
            };
        };
        if verdict != Verdict::InOrder {
            e.next_seq = seg.seq;
        }
        e.valid = true;
        e.tag = tag;
        e.last_time = seg.now;
        advance(e, seg.seq, seg.payload_len, seg.tail);
        verdict
    }

    /// Moves the expected sequence past a released segment.
    pub fn advance_to(&mut self, hash: u32, seq: u32, len: u32, tail: &[u8], now: SimTime) {
        let (slot, tag) = self.locate(hash);
        let e = &mut self.entries[slot];
        if e.valid && e.tag == tag {
            e.last_time = now;
            advance(e, seq, len, tail);
        }
    }

    /// Marks entries idle for longer than the timeout as free.
    pub fn expire(&mut self, now: SimTime) -> usize {
        let timeout = self.timeout;
        let mut n = 0;
        for e in &mut self.entries {
            if e.valid && now.saturating_sub(e.last_time) > timeout {
                e.valid = false;
                n += 1;
            }
        }
        n
    }
}

fn advance(e: &mut FlowEntry, seq: u32, len: u32, tail: &[u8]) {
    let end = seq.wrapping_add(len);
    // a retransmitted or overlapping segment never moves the window back
    if (end.wrapping_sub(e.next_seq) as i32) > 0 || e.next_seq == seq {
        e.next_seq = end;
    }
    let t = &tail[tail.len().saturating_sub(CARRY_BYTES)..];
    if !t.is_empty() {
        e.carry = [0; CARRY_BYTES];
        e.carry[CARRY_BYTES - t.len()..].copy_from_slice(t);
    }
}

/// `a` comes strictly before `b` in sequence space.
pub fn seq_before(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) < 0
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Held {
    pub desc: Descriptor,
    pub hash: u32,
    pub seq: u32,
    pub payload_len: u32,
    pub tail: Vec<u8>,
    pub order: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReorderStats {
    pub holds: u64,
    pub released: u64,
    pub escalations: u64,
    pub escalation_drops: u64,
    pub late: u64,
    pub max_occupancy: usize,
}

/// Packets parked until the gap in front of them closes. Each keeps its
/// slot while held.
pub struct ReorderBuffer {
    capacity: usize,
    policy: Escalation,
    held: BTreeMap<(u32, u64), Held>,
    counter: u64,
    stats: ReorderStats,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HoldResult {
    Held,
    /// The buffer was full; these packets go out now, in this order.
    Escalated(Vec<Held>),
    /// The buffer was full and the new packet is dropped.
    Dropped,
}

impl ReorderBuffer {
    pub fn new(capacity: usize, policy: Escalation) -> Self {
        ReorderBuffer {
            capacity,
            policy,
            held: BTreeMap::new(),
            counter: 0,
            stats: ReorderStats::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.held.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }

    pub fn stats(&self) -> ReorderStats {
        self.stats
    }

    pub fn count_late(&mut self) {
        self.stats.late += 1;
    }

    pub fn hold(&mut self, mut h: Held) -> HoldResult {
        let mut escalated = Vec::new();
        if self.held.len() >= self.capacity {
            self.stats.escalations += 1;
            match self.policy {
                Escalation::Drop => {
                    self.stats.escalation_drops += 1;
                    return HoldResult::Dropped;
                }
                Escalation::ReleaseOldest => {
                    let oldest = self.held.values().min_by_key(|x| x.order).unwrap().hash;
                    escalated = self.take_flow(oldest);
                }
            }
        }
        h.order = self.counter;
        self.counter += 1;
        self.held.insert((h.hash, h.order), h);
        self.stats.holds += 1;
        self.stats.max_occupancy = self.stats.max_occupancy.max(self.held.len());
        if escalated.is_empty() {
            HoldResult::Held
        } else {
            HoldResult::Escalated(escalated)
        }
    }

    /// Hashes with held packets, ascending, one per held packet.
    pub fn held_hashes(&self) -> Vec<u32> {
        self.held.keys().map(|k| k.0).collect()
    }

    /// Every held packet of `hash`, in sequence order.
    pub fn take_flow(&mut self, hash: u32) -> Vec<Held> {
        let keys: Vec<_> = self
            .held
            .range((hash, 0)..=(hash, u64::MAX))
            .map(|(k, _)| *k)
            .collect();
        let mut out: Vec<Held> = keys.iter().map(|k| self.held.remove(k).unwrap()).collect();
        out.sort_by(|a, b| {
            if a.seq == b.seq {
                a.order.cmp(&b.order)
            } else if seq_before(a.seq, b.seq) {
                std::cmp::Ordering::Less
            } else {
                std::cmp::Ordering::Greater
            }
        });
        self.stats.released += out.len() as u64;
        out
    }

    /// Pops held packets of `hash` that continue at `next`, advancing past
    /// each one released.
    pub fn release_ready(&mut self, hash: u32, mut next: u32) -> Vec<Held> {
        let mut out = Vec::new();
        loop {
            let key = self
                .held
                .range((hash, 0)..=(hash, u64::MAX))
                .find(|(_, h)| h.seq == next || seq_before(h.seq, next))
                .map(|(k, _)| *k);
            match key {
                Some(k) => {
                    let h = self.held.remove(&k).unwrap();
                    let end = h.seq.wrapping_add(h.payload_len);
                    if seq_before(next, end) {
                        next = end;
                    }
                    out.push(h);
                }
                None => break,
            }
        }
        self.stats.released += out.len() as u64;
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlowStats {
    pub new_flows: u64,
    pub collisions: u64,
    pub in_order: u64,
    pub out_of_order: u64,
    pub not_tcp: u64,
}

/// Tracks TCP flows and hands packets on in per-flow sequence order.
pub struct ReorderHandler {
    pub table: FlowTable,
    pub buffer: ReorderBuffer,
    pub stats: FlowStats,
    /// Sequence numbers forwarded, per hash, for order checking.
    pub observer: Option<Box<dyn FnMut(usize, u32, u32) + Send>>,
}

impl ReorderHandler {
    pub fn new(cfg: &FlowConfig) -> Self {
        ReorderHandler {
            table: FlowTable::new(cfg),
            buffer: ReorderBuffer::new(cfg.reorder_capacity, cfg.escalation),
            stats: FlowStats::default(),
            observer: None,
        }
    }

    fn emit(&mut self, ctx: &mut HandlerCtx<'_>, mut desc: Descriptor, hash: u32, seq: u32) {
        if let Some(f) = self.observer.as_mut() {
            f(ctx.pe(), hash, seq);
        }
        desc.port = flip(desc.port);
        ctx.send(desc);
    }

    fn emit_held(&mut self, ctx: &mut HandlerCtx<'_>, held: Vec<Held>) {
        for h in held {
            self.table
                .advance_to(h.hash, h.seq, h.payload_len, &h.tail, ctx.now());
            self.emit(ctx, h.desc, h.hash, h.seq);
        }
    }
}

impl HandlerProgram for ReorderHandler {
    fn name(&self) -> &'static str {
        "flow_reorder"
    }

    fn state_bytes(&self) -> u64 {
        self.table.state_bytes()
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        let r = self.buffer.stats();
        vec![
            ("new_flows", self.stats.new_flows),
            ("collisions", self.stats.collisions),
            ("in_order", self.stats.in_order),
            ("out_of_order", self.stats.out_of_order),
            ("not_tcp", self.stats.not_tcp),
            ("holds", r.holds),
            ("released", r.released),
            ("escalations", r.escalations),
            ("escalation_drops", r.escalation_drops),
            ("late", r.late),
        ]
    }

    fn on_evict(&mut self, ctx: &mut HandlerCtx<'_>) {
        // nothing else will close the gaps; hand everything on as is
        let mut hashes: Vec<u32> = self.buffer.held_hashes();
        hashes.dedup();
        for h in hashes {
            let out = self.buffer.take_flow(h);
            self.emit_held(ctx, out);
        }
    }

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, desc: Descriptor) {
        let (hash, meta) = match (ctx.metadata(), parse_tcp(ctx.header())) {
            (Some(h), Some(m)) => (h, m),
            _ => {
                self.stats.not_tcp += 1;
                let mut d = desc;
                d.port = flip(d.port);
                ctx.send(d);
                return;
            }
        };
        let end = meta.payload_offset + meta.payload_len as usize;
        let tail_len = (meta.payload_len as usize).min(CARRY_BYTES);
        let tail = ctx.read_packet(end - tail_len, tail_len).to_vec();
        let seg = SegmentInfo {
            hash,
            seq: meta.seq,
            payload_len: meta.payload_len,
            now: ctx.now(),
            tail: &tail,
        };
        match self.table.update(seg) {
            v @ (Verdict::NewFlow | Verdict::CollisionEvict | Verdict::InOrder) => {
                match v {
                    Verdict::NewFlow => self.stats.new_flows += 1,
                    Verdict::CollisionEvict => self.stats.collisions += 1,
                    _ => self.stats.in_order += 1,
                }
                self.emit(ctx, desc, hash, meta.seq);
                let next = self.table.entry(hash).map(|e| e.next_seq).unwrap();
                let ready = self.buffer.release_ready(hash, next);
                self.emit_held(ctx, ready);
            }
            Verdict::OutOfOrder { expected } => {
                self.stats.out_of_order += 1;
                if seq_before(meta.seq, expected) {
                    // already behind the window: nothing to wait for
                    self.buffer.count_late();
                    self.emit(ctx, desc, hash, meta.seq);
                    return;
                }
                let held = Held {
                    desc,
                    hash,
                    seq: meta.seq,
                    payload_len: meta.payload_len,
                    tail,
                    order: 0,
                };
                match self.buffer.hold(held) {
                    HoldResult::Held => ctx.hold(desc),
                    HoldResult::Dropped => ctx.drop_packet(desc),
                    HoldResult::Escalated(out) => {
                        ctx.hold(desc);
                        self.emit_held(ctx, out);
                        // the skipped gap is given up; resume after the release
                        if let Some(e) = self.table.entry(hash) {
                            let ready = self.buffer.release_ready(hash, e.next_seq);
                            self.emit_held(ctx, ready);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(hash: u32, seq: u32, len: u32, ns: u64) -> SegmentInfo<'static> {
        SegmentInfo {
            hash,
            seq,
            payload_len: len,
            now: SimTime::from_ns(ns),
            tail: &[],
        }
    }

    fn held(hash: u32, seq: u32, len: u32) -> Held {
        Held {
            desc: Descriptor {
                slot: (seq % 16) as u16,
                data: 0,
                len: 64,
                port: crate::packet::Iface::Eth0,
            },
            hash,
            seq,
            payload_len: len,
            tail: Vec::new(),
            order: 0,
        }
    }

    #[test]
    fn index_and_tag() {
        assert_eq!(flow_index(0xDEAD_BEEF), (0x1_BEEF, 0x37AB));
        assert_eq!(flow_index(0), (0, 0));
        assert_eq!(flow_index(u32::MAX), (0x3FFFF, 0x3FFF));
    }

    #[test]
    fn default_table_is_half_a_megabyte() {
        let t = FlowTable::new(&FlowConfig::default());
        assert_eq!(t.state_bytes(), 512 * 1024);
        // the three folded index bits travel with the tag
        let (slot, tag) = t.locate(0xDEAD_BEEF);
        assert_eq!(slot, (0x1_BEEF ^ 0x3) & 0x7FFF);
        assert_eq!(tag, 0xDEAD_BEEF >> 15);
    }

    #[test]
    fn verdicts() {
        let mut t = FlowTable::new(&FlowConfig::default());
        assert_eq!(t.update(seg(7, 1000, 100, 0)), Verdict::NewFlow);
        assert_eq!(t.update(seg(7, 1100, 100, 10)), Verdict::InOrder);
        assert_eq!(
            t.update(seg(7, 1300, 100, 20)),
            Verdict::OutOfOrder { expected: 1200 }
        );
        // same slot, different tag
        let other = 7 | 1 << 20;
        assert_eq!(t.update(seg(other, 5, 1, 30)), Verdict::CollisionEvict);
        assert!(t.entry(7).is_none());
    }

    #[test]
    fn new_flow_with_high_isn() {
        let mut t = FlowTable::new(&FlowConfig::default());
        let isn = 0x9000_0000;
        assert_eq!(t.update(seg(9, isn, 458, 0)), Verdict::NewFlow);
        assert_eq!(t.update(seg(9, isn + 458, 458, 1)), Verdict::InOrder);
    }

    #[test]
    fn timeout_makes_entries_reusable() {
        let mut t = FlowTable::new(&FlowConfig::default());
        t.update(seg(9, 0, 10, 0));
        assert_eq!(t.update(seg(9, 999, 10, 2_000_000)), Verdict::NewFlow);
        // a colliding flow after the timeout starts clean
        t.update(seg(3, 0, 10, 0));
        assert_eq!(t.update(seg(3 | 1 << 20, 50, 10, 1_500_000)), Verdict::NewFlow);
        assert_eq!(t.update(seg(3 | 1 << 20, 60, 10, 1_500_010)), Verdict::InOrder);
        // an active flow never times out
        assert_eq!(t.update(seg(11, 0, 10, 0)), Verdict::NewFlow);
        for i in 1..10 {
            assert_eq!(t.update(seg(11, i as u32 * 10, 10, i * 900_000)), Verdict::InOrder);
        }
        assert!(t.entry(11).is_some());
        assert_eq!(t.expire(SimTime::from_ms(100)), 3);
    }

    #[test]
    fn carry_keeps_last_seven_bytes() {
        let mut t = FlowTable::new(&FlowConfig::default());
        let tail = [1, 2, 3, 4, 5, 6, 7];
        t.update(SegmentInfo {
            tail: &tail,
            ..seg(1, 0, 20, 0)
        });
        assert_eq!(t.entry(1).unwrap().carry, tail);
        t.update(SegmentInfo {
            tail: &[9, 9],
            ..seg(1, 20, 2, 1)
        });
        assert_eq!(t.entry(1).unwrap().carry, [0, 0, 0, 0, 0, 9, 9]);
    }

    #[test]
    fn swap_releases_in_order() {
        let mut b = ReorderBuffer::new(8, Escalation::ReleaseOldest);
        assert_eq!(b.hold(held(1, 200, 100)), HoldResult::Held);
        let out = b.release_ready(1, 100);
        assert!(out.is_empty());
        let out = b.release_ready(1, 200);
        assert_eq!(out.iter().map(|h| h.seq).collect::<Vec<_>>(), vec![200]);
        assert_eq!(b.stats().holds, 1);
        assert!(b.is_empty());
    }

    #[test]
    fn ninth_hold_escalates() {
        let mut b = ReorderBuffer::new(8, Escalation::ReleaseOldest);
        for i in 0..8 {
            assert_eq!(b.hold(held(1 + i % 2, 1000 + i * 10, 10)), HoldResult::Held);
        }
        match b.hold(held(5, 0, 10)) {
            HoldResult::Escalated(out) => {
                assert_eq!(out.len(), 4);
                assert!(out.iter().all(|h| h.hash == 1));
                assert!(out.windows(2).all(|w| seq_before(w[0].seq, w[1].seq)));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(b.stats().escalations, 1);
        assert_eq!(b.len(), 5);
        let mut d = ReorderBuffer::new(1, Escalation::Drop);
        d.hold(held(1, 10, 1));
        assert_eq!(d.hold(held(1, 20, 1)), HoldResult::Dropped);
        assert_eq!(d.stats().escalation_drops, 1);
    }

    #[test]
    fn sequence_wraps() {
        assert!(seq_before(u32::MAX - 5, 3));
        assert!(!seq_before(3, u32::MAX - 5));
        let mut t = FlowTable::new(&FlowConfig::default());
        t.update(seg(4, u32::MAX - 9, 10, 0));
        assert_eq!(t.update(seg(4, 0, 10, 1)), Verdict::InOrder);
    }
}
