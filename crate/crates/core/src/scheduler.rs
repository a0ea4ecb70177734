//! Central packet scheduler: slot credits, assignment policies and the host
//! register channel.
//!
//! Each processor registers its slot count and maximum slot size at boot.
//! The scheduler hands out slot indices from a per-processor free list, so
//! the credit count is always the length of that list, and takes them back
//! on slot-freed notices.
//!
//! Register map (30-bit addresses, 32-bit data):
//!
//! | addr          | dir | meaning                                   |
//! |---------------|-----|-------------------------------------------|
//! | `0x001`       | r/w | enable mask, bit per processor            |
//! | `0x002`       | r/w | ingress mask, processors fed from ports   |
//! | `0x010 + pe`  | w   | disable processor                         |
//! | `0x020 + pe`  | w   | enable processor                          |
//! | `0x030 + pe`  | w   | flush credits                             |
//! | `0x040`       | r/w | policy (0 round-robin, 1 hash)            |
//! | `0x100 + pe`  | r   | credits                                   |
//! | `0x200 + pe`  | r   | registered slot count                     |
//! | `0x300 + pe`  | r   | maximum slot size                         |
//! | `0x400`       | r   | packets assigned                          |
//! | `0x401`       | r   | backpressure decisions                    |
//! | `0x402`       | r   | hash fallbacks to round-robin             |
//! | `0x403`       | r   | loopback slot grants                      |

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::fabric::arbiter::{Arbitrate, RoundRobin};
use crate::packet::{parse_five_tuple, FiveTuple};

pub const MAX_PES: usize = 16;

pub const REG_ENABLE_MASK: u32 = 0x001;
pub const REG_INGRESS_MASK: u32 = 0x002;
pub const REG_DISABLE: u32 = 0x010;
pub const REG_ENABLE: u32 = 0x020;
pub const REG_FLUSH: u32 = 0x030;
pub const REG_POLICY: u32 = 0x040;
pub const REG_CREDITS: u32 = 0x100;
pub const REG_SLOT_COUNT: u32 = 0x200;
pub const REG_MAX_SLOT_SIZE: u32 = 0x300;
pub const REG_STAT_ASSIGNED: u32 = 0x400;
pub const REG_STAT_BACKPRESSURE: u32 = 0x401;
pub const REG_STAT_HASH_FALLBACK: u32 = 0x402;
pub const REG_STAT_LOOPBACK: u32 = 0x403;

/// Host register map: symbolic name, address, access, meaning. Per-processor
/// registers take the processor index as `NAME:pe` and add it to the base.
pub const REGISTER_MAP: [(&str, u32, &str, &str); 13] = [
    ("ENABLE_MASK", REG_ENABLE_MASK, "rw", "bit per processor eligible for assignment"),
    ("INGRESS_MASK", REG_INGRESS_MASK, "rw", "bit per processor fed from external ports"),
    ("DISABLE:pe", REG_DISABLE, "w", "stop assigning to one processor"),
    ("ENABLE:pe", REG_ENABLE, "w", "resume assigning to one processor"),
    ("FLUSH:pe", REG_FLUSH, "w", "forget one processor's credits until it registers again"),
    ("POLICY", REG_POLICY, "rw", "0 round-robin, 1 flow hash"),
    ("CREDITS:pe", REG_CREDITS, "r", "free slots the scheduler may grant"),
    ("SLOT_COUNT:pe", REG_SLOT_COUNT, "r", "slots registered at boot"),
    ("MAX_SLOT_SIZE:pe", REG_MAX_SLOT_SIZE, "r", "largest frame a slot holds"),
    ("ASSIGNED", REG_STAT_ASSIGNED, "r", "external frames assigned, low 32 bits"),
    ("BACKPRESSURE", REG_STAT_BACKPRESSURE, "r", "decisions with no eligible processor"),
    ("HASH_FALLBACK", REG_STAT_HASH_FALLBACK, "r", "non-IP frames placed round-robin under hash policy"),
    ("LOOPBACK_GRANTS", REG_STAT_LOOPBACK, "r", "loopback slot grants"),
];

const ADDR_MASK: u32 = (1 << 30) - 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    RoundRobin,
    Hash,
}

impl Policy {
    pub fn code(self) -> u32 {
        match self {
            Policy::RoundRobin => 0,
            Policy::Hash => 1,
        }
    }

    pub fn from_code(v: u32) -> Option<Policy> {
        match v {
            0 => Some(Policy::RoundRobin),
            1 => Some(Policy::Hash),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub policy: Policy,
    /// Cycles per assignment decision, per source interface.
    pub decision_cycles: u64,
    /// Processors fed from external ports; `None` means all.
    pub ingress_pes: Option<Vec<usize>>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::RoundRobin,
            decision_cycles: 1,
            ingress_pes: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum SchedError {
    #[error("processor {0} out of range")]
    BadPe(usize),
    #[error("slot {slot} of processor {pe} freed while already free")]
    DoubleFree { pe: usize, slot: u16 },
    #[error("slot {slot} of processor {pe} was never registered")]
    UnknownSlot { pe: usize, slot: u16 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CtrlError {
    #[error("address {0:#x} is not mapped")]
    Unmapped(u32),
    #[error("address {0:#x} wider than 30 bits")]
    AddrRange(u32),
    #[error("value {value:#x} invalid for {addr:#x}")]
    BadValue { addr: u32, value: u32 },
}

/// 32-bit avalanche mix of a 5-tuple. Starts from the FNV offset basis and
/// folds in four words, each followed by the murmur3 finalizer.
pub fn flow_hash(t: &FiveTuple) -> u32 {
    let words = [
        t.src_ip,
        t.dst_ip,
        ((t.src_port as u32) << 16) | t.dst_port as u32,
        t.proto as u32,
    ];
    let mut h: u32 = 0x811C_9DC5;
    for w in words {
        h ^= w;
        h = fmix32(h);
    }
    h
}

pub fn fmix32(mut h: u32) -> u32 {
    h ^= h >> 16;
    h = h.wrapping_mul(0x85EB_CA6B);
    h ^= h >> 13;
    h = h.wrapping_mul(0xC2B2_AE35);
    h ^= h >> 16;
    h
}

#[derive(Clone, Debug, Default)]
struct PeCredits {
    registered: u16,
    max_size: u32,
    free: VecDeque<u16>,
    is_free: Vec<bool>,
}

impl PeCredits {
    fn register(&mut self, count: u16, max_size: u32) {
        self.registered = count;
        self.max_size = max_size;
        self.free = (0..count).collect();
        self.is_free = vec![true; count as usize];
    }

    fn take(&mut self) -> u16 {
        let s = self.free.pop_front().expect("take without credits");
        self.is_free[s as usize] = false;
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SchedStats {
    pub assigned: u64,
    pub backpressure: u64,
    pub hash_fallbacks: u64,
    pub loopback_grants: u64,
    pub freed: u64,
}

/// Outcome of one ingress decision.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Granted {
        pe: usize,
        slot: u16,
        hash: Option<u32>,
    },
    Backpressure,
}

/// Loopback transfer waiting for a destination slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotRequest {
    pub src: usize,
    pub src_slot: u16,
    pub dst: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotGrant {
    pub src: usize,
    pub src_slot: u16,
    pub dst: usize,
    pub dst_slot: u16,
}

pub struct Scheduler {
    pes: Vec<PeCredits>,
    enable: u32,
    ingress: u32,
    policy: Policy,
    rr: RoundRobin,
    requests: VecDeque<SlotRequest>,
    stats: SchedStats,
}

impl Scheduler {
    pub fn new(pes: usize, cfg: &SchedulerConfig) -> Self {
        assert!((1..=MAX_PES).contains(&pes), "{pes} processors unsupported");
        let all = all_bits(pes);
        let ingress = match &cfg.ingress_pes {
            Some(list) => list.iter().fold(0, |m, &p| {
                assert!(p < pes, "ingress processor {p} out of range");
                m | 1 << p
            }),
            None => all,
        };
        Scheduler {
            pes: vec![PeCredits::default(); pes],
            enable: all,
            ingress,
            policy: cfg.policy,
            rr: RoundRobin::new(pes),
            requests: VecDeque::new(),
            stats: SchedStats::default(),
        }
    }

    pub fn pes(&self) -> usize {
        self.pes.len()
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn stats(&self) -> SchedStats {
        self.stats
    }

    pub fn enable_mask(&self) -> u32 {
        self.enable
    }

    pub fn ingress_mask(&self) -> u32 {
        self.ingress
    }

    pub fn is_enabled(&self, pe: usize) -> bool {
        self.enable >> pe & 1 == 1
    }

    pub fn credits(&self, pe: usize) -> u16 {
        self.pes[pe].free.len() as u16
    }

    pub fn registered(&self, pe: usize) -> u16 {
        self.pes[pe].registered
    }

    pub fn max_size(&self, pe: usize) -> u32 {
        self.pes[pe].max_size
    }

    pub fn pending_requests(&self) -> usize {
        self.requests.len()
    }

    /// Boot-time slot registration. A repeated registration models a
    /// reboot and resets the credits.
    pub fn register_slots(&mut self, pe: usize, count: u16, max_size: u32) -> Result<(), SchedError> {
        self.pes
            .get_mut(pe)
            .ok_or(SchedError::BadPe(pe))?
            .register(count, max_size);
        Ok(())
    }

    pub fn set_enabled(&mut self, pe: usize, on: bool) {
        if on {
            self.enable |= 1 << pe;
        } else {
            self.enable &= !(1 << pe);
        }
    }

    /// Forgets every credit of `pe` until it registers again.
    pub fn flush(&mut self, pe: usize) {
        self.pes[pe] = PeCredits::default();
    }

    fn eligible(&self, pe: usize, len: u64) -> bool {
        let c = &self.pes[pe];
        (self.enable & self.ingress) >> pe & 1 == 1 && !c.free.is_empty() && c.max_size as u64 >= len
    }

    /// Enabled ingress processors in ascending order.
    pub fn hash_targets(&self) -> Vec<usize> {
        (0..self.pes.len())
            .filter(|&p| (self.enable & self.ingress) >> p & 1 == 1)
            .collect()
    }

    pub fn assign_rr(&mut self, len: u64) -> Option<(usize, u16)> {
        let pe = {
            let me = &*self;
            let mut rr = me.rr.clone();
            let pe = rr.grant(&mut |p| me.eligible(p, len))?;
            self.rr = rr;
            pe
        };
        Some((pe, self.pes[pe].take()))
    }

    /// Flow-affine choice: the target depends only on the hash and the
    /// enabled set. A full target backpressures rather than spilling.
    pub fn assign_hash(&mut self, hash: u32, len: u64) -> Option<usize> {
        let targets = self.hash_targets();
        if targets.is_empty() {
            return None;
        }
        let pe = targets[hash as usize % targets.len()];
        self.eligible(pe, len).then_some(pe)
    }

    /// One ingress decision for a frame of `len` bytes.
    pub fn assign(&mut self, frame: &[u8], len: u64) -> Assignment {
        let out = match self.policy {
            Policy::RoundRobin => self.assign_rr(len).map(|(pe, slot)| Assignment::Granted {
                pe,
                slot,
                hash: None,
            }),
            Policy::Hash => match parse_five_tuple(frame) {
                Some(t) => {
                    let h = flow_hash(&t);
                    // the stored frame grows by the 4-byte hash
                    self.assign_hash(h, len + 4).map(|pe| Assignment::Granted {
                        pe,
                        slot: self.pes[pe].take(),
                        hash: Some(h),
                    })
                }
                None => {
                    self.stats.hash_fallbacks += 1;
                    self.assign_rr(len).map(|(pe, slot)| Assignment::Granted {
                        pe,
                        slot,
                        hash: None,
                    })
                }
            },
        };
        match out {
            Some(a) => {
                self.stats.assigned += 1;
                a
            }
            None => {
                self.stats.backpressure += 1;
                Assignment::Backpressure
            }
        }
    }

    /// Undo a fallback count for a decision that is retried later.
    pub fn retract_fallback(&mut self) {
        self.stats.hash_fallbacks = self.stats.hash_fallbacks.saturating_sub(1);
    }

    pub fn request_slot(&mut self, req: SlotRequest) {
        self.requests.push_back(req);
    }

    /// Grants the oldest pending loopback request whose destination has a
    /// credit. Served ahead of ingress so loopback traffic cannot starve.
    pub fn serve_request(&mut self) -> Option<SlotGrant> {
        let i = self
            .requests
            .iter()
            .position(|r| self.is_enabled(r.dst) && !self.pes[r.dst].free.is_empty())?;
        let r = self.requests.remove(i).unwrap();
        self.stats.loopback_grants += 1;
        Some(SlotGrant {
            src: r.src,
            src_slot: r.src_slot,
            dst: r.dst,
            dst_slot: self.pes[r.dst].take(),
        })
    }

    pub fn slot_freed(&mut self, pe: usize, slot: u16) -> Result<(), SchedError> {
        let c = self.pes.get_mut(pe).ok_or(SchedError::BadPe(pe))?;
        match c.is_free.get(slot as usize) {
            None => Err(SchedError::UnknownSlot { pe, slot }),
            Some(true) => Err(SchedError::DoubleFree { pe, slot }),
            Some(false) => {
                c.is_free[slot as usize] = true;
                c.free.push_back(slot);
                self.stats.freed += 1;
                Ok(())
            }
        }
    }

    fn pe_index(&self, addr: u32, base: u32) -> Result<usize, CtrlError> {
        let pe = (addr - base) as usize;
        if pe < self.pes.len() {
            Ok(pe)
        } else {
            Err(CtrlError::Unmapped(addr))
        }
    }

    pub fn host_write(&mut self, addr: u32, value: u32) -> Result<(), CtrlError> {
        if addr & !ADDR_MASK != 0 {
            return Err(CtrlError::AddrRange(addr));
        }
        let all = all_bits(self.pes.len());
        match addr {
            REG_ENABLE_MASK | REG_INGRESS_MASK if value & !all != 0 => {
                Err(CtrlError::BadValue { addr, value })
            }
            REG_ENABLE_MASK => {
                self.enable = value;
                Ok(())
            }
            REG_INGRESS_MASK => {
                self.ingress = value;
                Ok(())
            }
            REG_POLICY => {
                self.policy = Policy::from_code(value).ok_or(CtrlError::BadValue { addr, value })?;
                Ok(())
            }
            0x010..=0x01F => {
                let pe = self.pe_index(addr, REG_DISABLE)?;
                self.set_enabled(pe, false);
                Ok(())
            }
            0x020..=0x02F => {
                let pe = self.pe_index(addr, REG_ENABLE)?;
                self.set_enabled(pe, true);
                Ok(())
            }
            0x030..=0x03F => {
                let pe = self.pe_index(addr, REG_FLUSH)?;
                self.flush(pe);
                Ok(())
            }
            _ => Err(CtrlError::Unmapped(addr)),
        }
    }

    pub fn host_read(&self, addr: u32) -> Result<u32, CtrlError> {
        if addr & !ADDR_MASK != 0 {
            return Err(CtrlError::AddrRange(addr));
        }
        let lo32 = |v: u64| v as u32;
        match addr {
            REG_ENABLE_MASK => Ok(self.enable),
            REG_INGRESS_MASK => Ok(self.ingress),
            REG_POLICY => Ok(self.policy.code()),
            REG_STAT_ASSIGNED => Ok(lo32(self.stats.assigned)),
            REG_STAT_BACKPRESSURE => Ok(lo32(self.stats.backpressure)),
            REG_STAT_HASH_FALLBACK => Ok(lo32(self.stats.hash_fallbacks)),
            REG_STAT_LOOPBACK => Ok(lo32(self.stats.loopback_grants)),
            0x100..=0x1FF => Ok(self.credits(self.pe_index(addr, REG_CREDITS)?) as u32),
            0x200..=0x2FF => Ok(self.registered(self.pe_index(addr, REG_SLOT_COUNT)?) as u32),
            0x300..=0x3FF => Ok(self.max_size(self.pe_index(addr, REG_MAX_SLOT_SIZE)?)),
            _ => Err(CtrlError::Unmapped(addr)),
        }
    }
}

fn all_bits(pes: usize) -> u32 {
    if pes >= 32 {
        u32::MAX
    } else {
        (1u32 << pes) - 1
    }
}

/// Symbolic register names accepted by the `ctl` command line.
pub fn register_by_name(name: &str) -> Option<u32> {
    let (base, pe) = match name.split_once(':') {
        Some((b, p)) => (b, Some(p.parse::<u32>().ok()?)),
        None => (name, None),
    };
    let with_pe = |b: u32| pe.filter(|&p| p < 16).map(|p| b + p);
    match base.to_ascii_uppercase().as_str() {
        "ENABLE_MASK" if pe.is_none() => Some(REG_ENABLE_MASK),
        "INGRESS_MASK" if pe.is_none() => Some(REG_INGRESS_MASK),
        "POLICY" if pe.is_none() => Some(REG_POLICY),
        "ASSIGNED" if pe.is_none() => Some(REG_STAT_ASSIGNED),
        "BACKPRESSURE" if pe.is_none() => Some(REG_STAT_BACKPRESSURE),
        "HASH_FALLBACK" if pe.is_none() => Some(REG_STAT_HASH_FALLBACK),
        "LOOPBACK_GRANTS" if pe.is_none() => Some(REG_STAT_LOOPBACK),
        "DISABLE" => with_pe(REG_DISABLE),
        "ENABLE" => with_pe(REG_ENABLE),
        "FLUSH" => with_pe(REG_FLUSH),
        "CREDITS" => with_pe(REG_CREDITS),
        "SLOT_COUNT" => with_pe(REG_SLOT_COUNT),
        "MAX_SLOT_SIZE" => with_pe(REG_MAX_SLOT_SIZE),
        _ => None,
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "policy={:?} enable={:#06x} ingress={:#06x}",
            self.policy, self.enable, self.ingress
        )?;
        for (pe, c) in self.pes.iter().enumerate() {
            writeln!(
                f,
                "p{pe}: credits {}/{} max {}",
                c.free.len(),
                c.registered,
                c.max_size
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(pes: usize) -> Scheduler {
        let mut s = Scheduler::new(pes, &SchedulerConfig::default());
        for p in 0..pes {
            s.register_slots(p, 16, 16_384).unwrap();
        }
        s
    }

    fn tuple(src: u32, dst: u32, sport: u16, dport: u16, proto: u8) -> FiveTuple {
        FiveTuple {
            src_ip: src,
            dst_ip: dst,
            src_port: sport,
            dst_port: dport,
            proto,
        }
    }

    #[test]
    fn hash_vectors() {
        // frozen from an independent implementation
        let cases = [
            (tuple(0x0A00_0001, 0x0A00_0002, 1234, 80, 6), 0xA53A_25EE),
            (tuple(0, 0, 0, 0, 0), 0x32C6_9846),
            (tuple(u32::MAX, u32::MAX, 65535, 65535, 17), 0x867B_7753),
            (tuple(0xC0A8_0101, 0x0808_0808, 53, 53, 17), 0xA756_8A67),
            (tuple(0x0A00_0002, 0x0A00_0001, 80, 1234, 6), 0x8C84_0F38),
        ];
        for (t, h) in cases {
            assert_eq!(flow_hash(&t), h, "{t:?}");
        }
    }

    #[test]
    fn hash_maps_over_sorted_enabled_set() {
        let mut s = sched(16);
        // 0xA53A25EE % 16 == 14
        assert_eq!(s.assign_hash(0xA53A_25EE, 64), Some(14));
        s.set_enabled(3, false);
        // 15 targets, index 0xA53A25EE % 15 == 3 -> p4
        assert_eq!(s.assign_hash(0xA53A_25EE, 64), Some(4));
        s.host_write(REG_ENABLE_MASK, 1).unwrap();
        assert_eq!(s.assign_hash(0x1234_5678, 64), Some(0));
    }

    #[test]
    fn rr_follows_last_grant_and_skips_empty() {
        let mut s = sched(16);
        for expect in 0..5 {
            assert_eq!(s.assign_rr(64).unwrap().0, expect);
        }
        assert_eq!(s.assign_rr(64).unwrap().0, 5);
        s.flush(6);
        assert_eq!(s.assign_rr(64).unwrap().0, 7);
    }

    #[test]
    fn all_empty_backpressures() {
        let mut s = Scheduler::new(2, &SchedulerConfig::default());
        s.register_slots(0, 1, 16_384).unwrap();
        s.register_slots(1, 0, 16_384).unwrap();
        assert!(matches!(s.assign(&[], 64), Assignment::Granted { pe: 0, .. }));
        assert_eq!(s.assign(&[], 64), Assignment::Backpressure);
        assert_eq!(s.stats().backpressure, 1);
    }

    #[test]
    fn max_size_respected() {
        let mut s = Scheduler::new(2, &SchedulerConfig::default());
        s.register_slots(0, 4, 2048).unwrap();
        s.register_slots(1, 4, 16_384).unwrap();
        assert_eq!(s.assign_rr(9000).unwrap().0, 1);
        assert_eq!(s.assign_rr(9000).unwrap().0, 1);
    }

    #[test]
    fn credits_return_on_free_and_double_free_is_caught() {
        let mut s = sched(1);
        let (pe, slot) = s.assign_rr(64).unwrap();
        assert_eq!(s.credits(0), 15);
        s.slot_freed(pe, slot).unwrap();
        assert_eq!(s.credits(0), 16);
        assert_eq!(s.slot_freed(pe, slot), Err(SchedError::DoubleFree { pe, slot }));
        assert_eq!(s.slot_freed(0, 99), Err(SchedError::UnknownSlot { pe: 0, slot: 99 }));
    }

    #[test]
    fn disabled_processor_gets_nothing() {
        let mut s = sched(4);
        s.host_write(REG_DISABLE + 2, 0).unwrap();
        for _ in 0..30 {
            assert_ne!(s.assign_rr(64).map(|g| g.0), Some(2));
        }
        s.request_slot(SlotRequest {
            src: 0,
            src_slot: 0,
            dst: 2,
        });
        assert_eq!(s.serve_request(), None);
        s.host_write(REG_ENABLE + 2, 0).unwrap();
        assert_eq!(s.serve_request().unwrap().dst, 2);
    }

    #[test]
    fn loopback_requests_wait_for_credit() {
        let mut s = Scheduler::new(2, &SchedulerConfig::default());
        s.register_slots(0, 1, 16_384).unwrap();
        s.register_slots(1, 1, 16_384).unwrap();
        let (_, taken) = s.assign_rr(64).unwrap();
        assert_eq!(taken, 0);
        s.request_slot(SlotRequest {
            src: 1,
            src_slot: 0,
            dst: 0,
        });
        assert_eq!(s.serve_request(), None);
        s.slot_freed(0, 0).unwrap();
        let g = s.serve_request().unwrap();
        assert_eq!((g.dst, g.dst_slot), (0, 0));
        assert_eq!(s.host_read(REG_STAT_LOOPBACK), Ok(1));
    }

    #[test]
    fn register_map() {
        let mut s = sched(4);
        assert_eq!(s.host_read(REG_CREDITS + 2), Ok(16));
        assert_eq!(s.host_read(REG_MAX_SLOT_SIZE + 1), Ok(16_384));
        assert_eq!(s.host_read(REG_ENABLE_MASK), Ok(0xF));
        s.host_write(REG_FLUSH + 1, 0).unwrap();
        assert_eq!(s.host_read(REG_CREDITS + 1), Ok(0));
        s.register_slots(1, 8, 4096).unwrap();
        assert_eq!(s.host_read(REG_SLOT_COUNT + 1), Ok(8));
        s.host_write(REG_POLICY, 1).unwrap();
        assert_eq!(s.policy(), Policy::Hash);
        assert_eq!(s.host_read(0x999), Err(CtrlError::Unmapped(0x999)));
        assert_eq!(s.host_read(REG_CREDITS + 9), Err(CtrlError::Unmapped(0x109)));
        assert_eq!(s.host_write(1 << 30, 0), Err(CtrlError::AddrRange(1 << 30)));
        assert!(s.host_write(REG_POLICY, 7).is_err());
        assert!(s.host_write(REG_ENABLE_MASK, 0x10).is_err());
    }

    #[test]
    fn ingress_mask_limits_external_assignment() {
        let cfg = SchedulerConfig {
            ingress_pes: Some(vec![0, 1]),
            ..SchedulerConfig::default()
        };
        let mut s = Scheduler::new(4, &cfg);
        for p in 0..4 {
            s.register_slots(p, 16, 16_384).unwrap();
        }
        for _ in 0..20 {
            assert!(s.assign_rr(64).unwrap().0 < 2);
        }
        assert_eq!(s.hash_targets(), vec![0, 1]);
    }

    #[test]
    fn symbolic_names() {
        assert_eq!(register_by_name("credits:3"), Some(0x103));
        assert_eq!(register_by_name("ENABLE_MASK"), Some(0x1));
        assert_eq!(register_by_name("enable_mask:1"), None);
        assert_eq!(register_by_name("bogus"), None);
        for (name, addr, _, _) in REGISTER_MAP {
            let key = name.replace(":pe", ":0");
            assert_eq!(register_by_name(&key), Some(addr), "{name}");
        }
    }
}
