//! Blacklist accelerator behind MMIO and the firewall handler that uses it.

use std::sync::Arc;

use super::blacklist::BlacklistMatcher;
use super::{Access, Accelerator, MmioFault, Register, RegisterMap, ACC_FW_MATCH, ACC_SRC_IP};
use crate::packet::{ethertype, read_u32_be, ETHERTYPE_IPV4, SRC_IP_OFFSET};
use crate::processor::handler::{flip, Descriptor, HandlerCtx, HandlerProgram};

/// Cycles from the address write to a valid match flag.
pub const MATCH_CYCLES: u64 = 2;

pub fn firewall_register_map() -> RegisterMap {
    RegisterMap::new(vec![
        Register {
            name: "ACC_SRC_IP",
            offset: ACC_SRC_IP,
            width_bits: 32,
            access: Access::Write,
        },
        Register {
            name: "ACC_FW_MATCH",
            offset: ACC_FW_MATCH,
            width_bits: 8,
            access: Access::Read,
        },
    ])
}

pub struct FirewallAccel {
    matcher: Arc<BlacklistMatcher>,
    regs: RegisterMap,
    written_at: Option<u64>,
    flag: bool,
    lookups: u64,
    hits: u64,
}

impl FirewallAccel {
    pub fn new(matcher: Arc<BlacklistMatcher>) -> Self {
        FirewallAccel {
            matcher,
            regs: firewall_register_map(),
            written_at: None,
            flag: false,
            lookups: 0,
            hits: 0,
        }
    }

    pub fn lookups(&self) -> u64 {
        self.lookups
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    /// Cycle at which the current flag becomes valid.
    pub fn ready_cycle(&self) -> Option<u64> {
        self.written_at.map(|w| w + MATCH_CYCLES)
    }
}

impl Accelerator for FirewallAccel {
    fn name(&self) -> &'static str {
        "firewall"
    }

    fn registers(&self) -> &RegisterMap {
        &self.regs
    }

    fn write(&mut self, cycle: u64, offset: u32, value: u32) -> Result<(), MmioFault> {
        self.regs.check_write(offset)?;
        self.written_at = Some(cycle);
        self.flag = self.matcher.match_ip(value);
        self.lookups += 1;
        self.hits += self.flag as u64;
        Ok(())
    }

    fn read(&mut self, cycle: u64, offset: u32) -> Result<(u32, u64), MmioFault> {
        self.regs.check_read(offset)?;
        match self.written_at {
            Some(w) => Ok((self.flag as u32, (w + MATCH_CYCLES).max(cycle))),
            None => Ok((0, cycle)),
        }
    }

    fn is_active(&self, cycle: u64) -> bool {
        self.ready_cycle().is_some_and(|r| cycle < r)
    }

    fn state_bytes(&self) -> u64 {
        self.matcher.table_bytes()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FirewallStats {
    pub forwarded: u64,
    pub blocked: u64,
    pub non_ipv4: u64,
    pub truncated: u64,
}

/// Drops non-IPv4 frames and blacklisted sources; forwards the rest out
/// the other Ethernet port.
#[derive(Clone, Debug, Default)]
pub struct FirewallHandler {
    pub stats: FirewallStats,
}

impl HandlerProgram for FirewallHandler {
    fn name(&self) -> &'static str {
        "firewall"
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("fw_forwarded", self.stats.forwarded),
            ("fw_blocked", self.stats.blocked),
            ("fw_non_ipv4", self.stats.non_ipv4),
            ("fw_truncated", self.stats.truncated),
        ]
    }

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, mut desc: Descriptor) {
        let hdr = ctx.header();
        if hdr.len() < SRC_IP_OFFSET + 4 || (desc.len as usize) < SRC_IP_OFFSET + 4 {
            self.stats.truncated += 1;
            ctx.drop_packet(desc);
            return;
        }
        if ethertype(hdr) != Some(ETHERTYPE_IPV4) {
            self.stats.non_ipv4 += 1;
            ctx.drop_packet(desc);
            return;
        }
        let src = read_u32_be(hdr, SRC_IP_OFFSET).unwrap();
        let hit = ctx
            .mmio_write(ACC_SRC_IP, src)
            .and_then(|_| ctx.mmio_read(ACC_FW_MATCH));
        match hit {
            Ok(0) => {
                self.stats.forwarded += 1;
                desc.port = flip(desc.port);
                ctx.send(desc);
            }
            // a faulting lookup fails closed
            _ => {
                self.stats.blocked += 1;
                ctx.drop_packet(desc);
            }
        }
    }
}
