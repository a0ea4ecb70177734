//! Cycle-budgeted packet handlers.
//!
//! A handler sees one descriptor at a time through a [`HandlerCtx`], which
//! charges cycles for every operation and collects the resulting actions.
//! The wrapper applies the actions once the whole budget has elapsed.

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::accelerators::{Accelerator, MmioFault};
use crate::model::SimTime;
use crate::packet::Iface;

/// Slot-indexed handle to a resident packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Descriptor {
    pub slot: u16,
    /// Offset of the frame in packet memory.
    pub data: u32,
    /// Bytes to send; zero drops the packet.
    pub len: u32,
    pub port: Iface,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Transmit straight from the wrapper (`len == 0` drops).
    Send(Descriptor),
    /// Ask the scheduler for a transmit command first.
    TxViaScheduler(Descriptor),
    /// Keep the slot; a later action releases it.
    Hold(Descriptor),
    /// Forward the whole packet to another processor.
    Loopback { desc: Descriptor, dst: usize },
}

impl Action {
    pub fn desc(&self) -> &Descriptor {
        match self {
            Action::Send(d) | Action::TxViaScheduler(d) | Action::Hold(d) => d,
            Action::Loopback { desc, .. } => desc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    /// Read a descriptor and send it back.
    pub base_cycles: u64,
    pub mmio_write_cycles: u64,
    pub mmio_read_cycles: u64,
    /// Each action beyond the first.
    pub extra_action_cycles: u64,
    pub bcast_write_cycles: u64,
    /// Core reads of packet memory, per 4-byte word.
    pub packet_read_cycles_per_word: u64,
    /// Budget after which the core is considered hung.
    pub watchdog_cycles: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            base_cycles: 16,
            mmio_write_cycles: 2,
            mmio_read_cycles: 2,
            extra_action_cycles: 4,
            bcast_write_cycles: 1,
            packet_read_cycles_per_word: 1,
            watchdog_cycles: 1_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum Fault {
    #[error("mmio: {0}")]
    Mmio(MmioFault),
    #[error("no accelerator attached")]
    NoAccelerator,
    #[error("handler ran {0} cycles, past the watchdog")]
    Watchdog(u64),
}

impl Fault {
    /// Value reported through the processor-to-host debug register.
    pub fn code(&self) -> u64 {
        match self {
            Fault::Mmio(m) => 0xF000_0000_0000_0000 | m.code(),
            Fault::NoAccelerator => 0xF100_0000_0000_0000,
            Fault::Watchdog(c) => 0xF200_0000_0000_0000 | (c & 0xFFFF_FFFF),
        }
    }
}

/// A store into the broadcast region, `at` cycles into the handler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BcastWrite {
    pub at: u64,
    pub addr: u32,
    pub data: u32,
}

/// What one handler invocation produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandlerOutcome {
    pub cycles: u64,
    pub actions: Vec<Action>,
    pub bcast_writes: Vec<BcastWrite>,
    pub fault: Option<Fault>,
    /// Cycles spent waiting on accelerator results.
    pub stall_cycles: u64,
}

pub struct HandlerCtx<'a> {
    pe: usize,
    now: SimTime,
    start_cycle: u64,
    elapsed: u64,
    stall: u64,
    cost: &'a CostModel,
    header: &'a [u8],
    packet: &'a Bytes,
    metadata_len: usize,
    accel: Option<&'a mut (dyn Accelerator + 'static)>,
    debug_in: u64,
    debug_out: Option<u64>,
    actions: Vec<Action>,
    bcast: Vec<BcastWrite>,
    fault: Option<Fault>,
}

impl<'a> HandlerCtx<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pe: usize,
        now: SimTime,
        start_cycle: u64,
        cost: &'a CostModel,
        header: &'a [u8],
        packet: &'a Bytes,
        metadata_len: usize,
        accel: Option<&'a mut (dyn Accelerator + 'static)>,
        debug_in: u64,
    ) -> Self {
        HandlerCtx {
            pe,
            now,
            start_cycle,
            elapsed: 0,
            stall: 0,
            cost,
            header,
            packet,
            metadata_len,
            accel,
            debug_in,
            debug_out: None,
            actions: Vec::with_capacity(1),
            bcast: Vec::new(),
            fault: None,
        }
    }

    pub fn pe(&self) -> usize {
        self.pe
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Frame bytes mirrored into the header slot, metadata stripped.
    pub fn header(&self) -> &[u8] {
        &self.header[self.metadata_len.min(self.header.len())..]
    }

    /// Hash prepended by the scheduler, if any.
    pub fn metadata(&self) -> Option<u32> {
        (self.metadata_len == 4 && self.header.len() >= 4)
            .then(|| u32::from_be_bytes(self.header[..4].try_into().unwrap()))
    }

    /// Reads `len` frame bytes at `offset` from packet memory.
    pub fn read_packet(&mut self, offset: usize, len: usize) -> &'a [u8] {
        let words = len.div_ceil(4) as u64;
        self.elapsed += words * self.cost.packet_read_cycles_per_word;
        let start = (self.metadata_len + offset).min(self.packet.len());
        let end = (start + len).min(self.packet.len());
        let pkt: &'a Bytes = self.packet;
        &pkt[start..end]
    }

    pub fn charge(&mut self, cycles: u64) {
        self.elapsed += cycles;
    }

    fn cycle(&self) -> u64 {
        self.start_cycle + self.elapsed
    }

    pub fn mmio_write(&mut self, offset: u32, value: u32) -> Result<(), Fault> {
        self.elapsed += self.cost.mmio_write_cycles;
        let at = self.cycle();
        let res = match self.accel.as_deref_mut() {
            Some(a) => a.write(at, offset, value).map_err(Fault::Mmio),
            None => Err(Fault::NoAccelerator),
        };
        res.map_err(|f| self.raise(f))
    }

    /// Blocks until the register value is valid, then pays the read cost.
    pub fn mmio_read(&mut self, offset: u32) -> Result<u32, Fault> {
        let at = self.cycle();
        let res = match self.accel.as_deref_mut() {
            Some(a) => a.read(at, offset).map_err(Fault::Mmio),
            None => Err(Fault::NoAccelerator),
        };
        let (v, ready) = res.map_err(|f| self.raise(f))?;
        if ready > at {
            self.stall += ready - at;
            self.elapsed += ready - at;
        }
        self.elapsed += self.cost.mmio_read_cycles;
        Ok(v)
    }

    fn raise(&mut self, f: Fault) -> Fault {
        self.fault.get_or_insert(f);
        f
    }

    pub fn debug_read(&self) -> u64 {
        self.debug_in
    }

    pub fn debug_write(&mut self, v: u64) {
        self.debug_out = Some(v);
    }

    pub fn send(&mut self, desc: Descriptor) {
        self.actions.push(Action::Send(desc));
    }

    pub fn drop_packet(&mut self, mut desc: Descriptor) {
        desc.len = 0;
        self.actions.push(Action::Send(desc));
    }

    pub fn send_via_scheduler(&mut self, desc: Descriptor) {
        self.actions.push(Action::TxViaScheduler(desc));
    }

    pub fn hold(&mut self, desc: Descriptor) {
        self.actions.push(Action::Hold(desc));
    }

    pub fn loopback(&mut self, desc: Descriptor, dst: usize) {
        self.actions.push(Action::Loopback { desc, dst });
    }

    pub fn bcast_write(&mut self, addr: u32, data: u32) {
        self.elapsed += self.cost.bcast_write_cycles;
        self.bcast.push(BcastWrite {
            at: self.elapsed,
            addr,
            data,
        });
    }

    /// Total cost and effects. The debug value, if written, is returned
    /// alongside.
    pub fn finish(self) -> (HandlerOutcome, Option<u64>) {
        let extra = self.actions.len().saturating_sub(1) as u64 * self.cost.extra_action_cycles;
        let cycles = self.cost.base_cycles + self.elapsed + extra;
        let mut fault = self.fault;
        if fault.is_none() && cycles > self.cost.watchdog_cycles {
            fault = Some(Fault::Watchdog(cycles));
        }
        (
            HandlerOutcome {
                cycles,
                actions: self.actions,
                bcast_writes: self.bcast,
                fault,
                stall_cycles: self.stall,
            },
            self.debug_out,
        )
    }
}

/// Software running on one core.
pub trait HandlerProgram: Send {
    fn name(&self) -> &'static str;

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, desc: Descriptor);

    /// Evict interrupt: the processor is about to be reloaded. Runs as a
    /// handler invocation with no packet attached.
    fn on_evict(&mut self, _ctx: &mut HandlerCtx<'_>) {}

    /// Bytes of software state saved across a reload.
    fn state_bytes(&self) -> u64 {
        0
    }

    /// Program-specific counters, reported with the processor metrics.
    fn counters(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// Out the other Ethernet port.
    PortFlip,
    /// Always out one interface.
    Fixed(Iface),
}

/// The minimal forwarder: read a descriptor, pick the port, send it back.
#[derive(Clone, Debug)]
pub struct Forwarder {
    pub mode: ForwardMode,
}

impl Forwarder {
    pub fn port_flip() -> Self {
        Forwarder {
            mode: ForwardMode::PortFlip,
        }
    }
}

impl HandlerProgram for Forwarder {
    fn name(&self) -> &'static str {
        "forwarder"
    }

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, mut desc: Descriptor) {
        desc.port = match self.mode {
            ForwardMode::PortFlip => flip(desc.port),
            ForwardMode::Fixed(p) => p,
        };
        ctx.send(desc);
    }
}

/// Drops everything.
#[derive(Clone, Debug, Default)]
pub struct Sink;

impl HandlerProgram for Sink {
    fn name(&self) -> &'static str {
        "sink"
    }

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, desc: Descriptor) {
        ctx.drop_packet(desc);
    }
}

/// `port ^= 1`: Ethernet ports swap; non-Ethernet arrivals leave on eth0.
pub fn flip(port: Iface) -> Iface {
    match port {
        Iface::Eth0 => Iface::Eth1,
        Iface::Eth1 => Iface::Eth0,
        Iface::Host | Iface::Loopback => Iface::Eth0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(program: &mut dyn HandlerProgram, port: Iface) -> HandlerOutcome {
        let cost = CostModel::default();
        let pkt = Bytes::from(vec![0u8; 64]);
        let mut ctx = HandlerCtx::new(0, SimTime::ZERO, 0, &cost, &pkt, &pkt, 0, None, 0);
        program.on_packet(
            &mut ctx,
            Descriptor {
                slot: 2,
                data: 0x8000,
                len: 64,
                port,
            },
        );
        ctx.finish().0
    }

    #[test]
    fn minimal_forwarder_costs_16_cycles() {
        let out = run(&mut Forwarder::port_flip(), Iface::Eth0);
        assert_eq!(out.cycles, 16);
        assert_eq!(
            out.actions,
            vec![Action::Send(Descriptor {
                slot: 2,
                data: 0x8000,
                len: 64,
                port: Iface::Eth1
            })]
        );
    }

    #[test]
    fn sink_sends_zero_length() {
        let out = run(&mut Sink, Iface::Eth1);
        assert_eq!(out.actions[0].desc().len, 0);
    }

    #[test]
    fn mmio_without_accelerator_faults() {
        let cost = CostModel::default();
        let pkt = Bytes::from_static(&[0; 64]);
        let mut ctx = HandlerCtx::new(0, SimTime::ZERO, 0, &cost, &pkt, &pkt, 0, None, 0);
        assert_eq!(ctx.mmio_read(0xFFFF), Err(Fault::NoAccelerator));
    }

    #[test]
    fn watchdog_trips() {
        let cost = CostModel {
            watchdog_cycles: 20,
            ..CostModel::default()
        };
        let pkt = Bytes::from_static(&[0; 64]);
        let mut ctx = HandlerCtx::new(0, SimTime::ZERO, 0, &cost, &pkt, &pkt, 0, None, 0);
        ctx.charge(10);
        assert_eq!(ctx.finish().0.fault, Some(Fault::Watchdog(26)));
    }
}
