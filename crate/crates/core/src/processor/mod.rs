//! Packet processor: wrapper, hybrid memory and a cycle-budgeted core.

pub mod handler;
pub mod memory;
pub mod slots;

use std::collections::VecDeque;

use bytes::{BufMut, BytesMut};
use serde::{Deserialize, Serialize};

use crate::accelerators::Accelerator;
use crate::model::{ClockConfig, SimTime};
use crate::packet::Packet;
use handler::{CostModel, Descriptor, Fault, HandlerCtx, HandlerOutcome, HandlerProgram};
use memory::{HybridMemory, MemError, MemPorts, MemoryLayout, Region};
use slots::{SlotError, SlotState, SlotTable};

pub use handler::{Action, ForwardMode, Forwarder, Sink};

pub const IRQ_EVICT: u32 = 0x10;
pub const IRQ_POKE: u32 = 0x20;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessorConfig {
    pub layout: MemoryLayout,
    pub cost: CostModel,
    /// Cycles between the last byte landing and the core seeing the
    /// descriptor.
    pub dma_setup_cycles: u64,
    /// Cycles between a send and the start of the readout.
    pub tx_setup_cycles: u64,
    /// Interrupts enabled at boot.
    pub irq_mask: u32,
}

impl Default for ProcessorConfig {
    fn default() -> Self {
        ProcessorConfig {
            layout: MemoryLayout::default(),
            cost: CostModel::default(),
            dma_setup_cycles: 2,
            tx_setup_cycles: 1,
            irq_mask: IRQ_EVICT | IRQ_POKE,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PeCounters {
    pub rx_frames: u64,
    pub rx_bytes: u64,
    pub tx_frames: u64,
    pub tx_bytes: u64,
    pub drops: u64,
    pub oversize_drops: u64,
    pub stalled_cycles: u64,
    pub busy_cycles: u64,
    pub faults: u64,
    pub loopback_frames: u64,
}

/// Two 64-bit registers, one per direction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DebugRegs {
    pub host_to_pe: u64,
    pub pe_to_host: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoreState {
    Idle { since: SimTime },
    Busy { until: SimTime },
    Hung,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HostCommand {
    Pause,
    Resume,
    Interrupt(u32),
    SetIrqMask(u32),
    DumpMemory(Region),
    ReadDebug,
    WriteDebug(u64),
    ReadCounters,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum HostResponse {
    Ack,
    /// Retry once the core reaches a packet boundary.
    Deferred,
    /// Interrupt not enabled in the mask.
    Masked,
    Dump(Vec<u8>),
    Debug(u64),
    Counters(PeCounters),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProcessorError {
    #[error(transparent)]
    Slot(#[from] SlotError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

pub struct Processor {
    pub id: usize,
    cfg: ProcessorConfig,
    memory: HybridMemory,
    ports: MemPorts,
    slots: SlotTable,
    slot_pkts: Vec<Option<Packet>>,
    rx: VecDeque<Descriptor>,
    program: Box<dyn HandlerProgram>,
    accel: Option<Box<dyn Accelerator>>,
    debug: DebugRegs,
    irq_mask: u32,
    irq_pending: u32,
    core: CoreState,
    paused: bool,
    counters: PeCounters,
}

impl Processor {
    pub fn new(
        id: usize,
        cfg: ProcessorConfig,
        program: Box<dyn HandlerProgram>,
        accel: Option<Box<dyn Accelerator>>,
    ) -> Self {
        let n = cfg.layout.slot_count;
        Processor {
            id,
            memory: HybridMemory::new(cfg.layout.clone()),
            ports: MemPorts::new(),
            slots: SlotTable::new(n),
            slot_pkts: vec![None; n as usize],
            rx: VecDeque::with_capacity(n as usize),
            program,
            accel,
            debug: DebugRegs::default(),
            irq_mask: cfg.irq_mask,
            irq_pending: 0,
            core: CoreState::Idle {
                since: SimTime::ZERO,
            },
            paused: false,
            counters: PeCounters::default(),
            cfg,
        }
    }

    pub fn config(&self) -> &ProcessorConfig {
        &self.cfg
    }

    pub fn slots(&self) -> &SlotTable {
        &self.slots
    }

    pub fn memory(&self) -> &HybridMemory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut HybridMemory {
        &mut self.memory
    }

    pub fn mem_ports(&mut self) -> &mut MemPorts {
        &mut self.ports
    }

    pub fn program(&self) -> &dyn HandlerProgram {
        self.program.as_ref()
    }

    pub fn accelerator(&self) -> Option<&dyn Accelerator> {
        self.accel.as_deref()
    }

    pub fn core(&self) -> CoreState {
        self.core
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn debug(&self) -> DebugRegs {
        self.debug
    }

    pub fn irq_pending(&self) -> u32 {
        self.irq_pending
    }

    pub fn rx_queue_len(&self) -> usize {
        self.rx.len()
    }

    pub fn packet(&self, slot: u16) -> Option<&Packet> {
        self.slot_pkts[slot as usize].as_ref()
    }

    /// Counters with the current idle stretch folded in.
    pub fn counters(&self, now: SimTime, clock: &ClockConfig) -> PeCounters {
        let mut c = self.counters;
        if let CoreState::Idle { since } = self.core {
            c.stalled_cycles += clock.cycle_at(now.saturating_sub(since));
        }
        c
    }

    /// Scheduler granted `slot` to an incoming packet.
    pub fn assign(&mut self, slot: u16) -> Result<(), ProcessorError> {
        Ok(self.slots.transition(slot, SlotState::Assigned)?)
    }

    /// The DMA finished writing a packet into `slot`. Oversize packets are
    /// discarded by the wrapper, which frees the slot on the spot.
    pub fn ingest_packet(&mut self, slot: u16, pkt: Packet) -> Result<Descriptor, ProcessorError> {
        let stored = match pkt.metadata {
            Some(m) => {
                let mut b = BytesMut::with_capacity(pkt.data.len() + 4);
                b.put_slice(&m);
                b.put_slice(&pkt.data);
                b.freeze()
            }
            None => pkt.data.clone(),
        };
        if let Err(e) = self.memory.load_slot(slot, stored) {
            self.counters.oversize_drops += 1;
            self.counters.drops += 1;
            for s in [
                SlotState::Loaded,
                SlotState::CoreOwned,
                SlotState::Transmitting,
                SlotState::Free,
            ] {
                self.slots.transition(slot, s)?;
            }
            return Err(e.into());
        }
        self.slots.transition(slot, SlotState::Loaded)?;
        self.counters.rx_frames += 1;
        self.counters.rx_bytes += pkt.size();
        let desc = Descriptor {
            slot,
            data: self.cfg.layout.slot_addr(slot),
            len: pkt.size() as u32,
            port: pkt.arrival_port,
        };
        self.slot_pkts[slot as usize] = Some(pkt);
        self.rx.push_back(desc);
        Ok(desc)
    }

    pub fn can_start(&self) -> bool {
        matches!(self.core, CoreState::Idle { .. }) && !self.paused && !self.rx.is_empty()
    }

    /// Runs the handler on the next descriptor. The core is busy until the
    /// returned outcome's cycle count has elapsed.
    pub fn start_handler(
        &mut self,
        now: SimTime,
        clock: &ClockConfig,
    ) -> Option<(Descriptor, HandlerOutcome)> {
        if !self.can_start() {
            return None;
        }
        let desc = self.rx.pop_front().unwrap();
        if let CoreState::Idle { since } = self.core {
            self.counters.stalled_cycles += clock.cycle_at(now - since);
        }
        self.slots
            .transition(desc.slot, SlotState::CoreOwned)
            .expect("descriptor for a slot that is not loaded");
        let pkt = self.memory.slot(desc.slot).clone();
        let header = self.memory.header(desc.slot).clone();
        let meta = self.slot_pkts[desc.slot as usize]
            .as_ref()
            .map_or(0, |p| p.metadata_len() as usize);
        if let Some(a) = self.accel.as_deref_mut() {
            a.attach_packet(&pkt);
        }
        let mut ctx = HandlerCtx::new(
            self.id,
            now,
            clock.cycle_at(now),
            &self.cfg.cost,
            &header,
            &pkt,
            meta,
            self.accel.as_deref_mut(),
            self.debug.host_to_pe,
        );
        self.program.on_packet(&mut ctx, desc);
        let (outcome, dbg) = ctx.finish();
        if let Some(v) = dbg {
            self.debug.pe_to_host = v;
        }
        self.counters.busy_cycles += outcome.cycles;
        self.counters.stalled_cycles += outcome.stall_cycles;
        match outcome.fault {
            Some(f @ Fault::Watchdog(_)) => {
                self.counters.faults += 1;
                self.debug.pe_to_host = f.code();
                self.core = CoreState::Hung;
            }
            Some(f) => {
                self.counters.faults += 1;
                self.debug.pe_to_host = f.code();
                self.core = CoreState::Busy {
                    until: now + clock.cycles(outcome.cycles),
                };
            }
            None => {
                self.core = CoreState::Busy {
                    until: now + clock.cycles(outcome.cycles),
                };
            }
        }
        Some((desc, outcome))
    }

    /// The handler's cycle budget elapsed.
    pub fn core_done(&mut self, now: SimTime) {
        if let CoreState::Busy { .. } = self.core {
            self.core = CoreState::Idle { since: now };
        }
    }

    pub fn hold(&mut self, slot: u16) -> Result<(), ProcessorError> {
        Ok(self.slots.transition(slot, SlotState::Held)?)
    }

    /// The wrapper starts reading `slot` out (or discarding it).
    pub fn begin_tx(&mut self, slot: u16) -> Result<(), ProcessorError> {
        Ok(self.slots.transition(slot, SlotState::Transmitting)?)
    }

    /// Readout finished or the packet was dropped; the slot is free again.
    pub fn finish_tx(&mut self, slot: u16, sent_bytes: Option<u64>) -> Result<Packet, ProcessorError> {
        self.slots.transition(slot, SlotState::Free)?;
        match sent_bytes {
            Some(b) => {
                self.counters.tx_frames += 1;
                self.counters.tx_bytes += b;
            }
            None => self.counters.drops += 1,
        }
        Ok(self.slot_pkts[slot as usize]
            .take()
            .expect("slot without a packet"))
    }

    pub fn count_loopback(&mut self) {
        self.counters.loopback_frames += 1;
    }

    /// True when no slot is in use and the core is not mid-packet.
    pub fn is_drained(&self) -> bool {
        self.slots.count(SlotState::Free) as usize == self.slots.len()
            && !matches!(self.core, CoreState::Busy { .. })
    }

    /// Core at a packet boundary: not in the middle of a handler.
    pub fn at_boundary(&self) -> bool {
        !matches!(self.core, CoreState::Busy { .. })
    }

    pub fn raise_irq(&mut self, bits: u32) -> bool {
        let enabled = bits & self.irq_mask;
        self.irq_pending |= enabled;
        enabled != 0
    }

    /// Services a pending Evict interrupt on an idle core. The core is busy
    /// for the returned cycle count.
    pub fn run_evict(&mut self, now: SimTime, clock: &ClockConfig) -> Option<HandlerOutcome> {
        if self.irq_pending & IRQ_EVICT == 0 || !matches!(self.core, CoreState::Idle { .. }) {
            return None;
        }
        self.irq_pending &= !IRQ_EVICT;
        if let CoreState::Idle { since } = self.core {
            self.counters.stalled_cycles += clock.cycle_at(now - since);
        }
        let empty = bytes::Bytes::new();
        let mut ctx = HandlerCtx::new(
            self.id,
            now,
            clock.cycle_at(now),
            &self.cfg.cost,
            &[],
            &empty,
            0,
            self.accel.as_deref_mut(),
            self.debug.host_to_pe,
        );
        self.program.on_evict(&mut ctx);
        let (outcome, dbg) = ctx.finish();
        if let Some(v) = dbg {
            self.debug.pe_to_host = v;
        }
        self.counters.busy_cycles += outcome.cycles;
        self.core = CoreState::Busy {
            until: now + clock.cycles(outcome.cycles),
        };
        Some(outcome)
    }

    pub fn clear_irq(&mut self, bits: u32) {
        self.irq_pending &= !bits;
    }

    pub fn host_control(&mut self, cmd: HostCommand, now: SimTime, clock: &ClockConfig) -> HostResponse {
        match cmd {
            HostCommand::Pause => {
                self.paused = true;
                HostResponse::Ack
            }
            HostCommand::Resume => {
                self.paused = false;
                HostResponse::Ack
            }
            HostCommand::Interrupt(bits) => {
                if self.raise_irq(bits) {
                    HostResponse::Ack
                } else {
                    HostResponse::Masked
                }
            }
            HostCommand::SetIrqMask(m) => {
                self.irq_mask = m;
                HostResponse::Ack
            }
            HostCommand::DumpMemory(region) => {
                if self.at_boundary() {
                    HostResponse::Dump(self.memory.dump(region))
                } else {
                    HostResponse::Deferred
                }
            }
            HostCommand::ReadDebug => HostResponse::Debug(self.debug.pe_to_host),
            HostCommand::WriteDebug(v) => {
                self.debug.host_to_pe = v;
                HostResponse::Ack
            }
            HostCommand::ReadCounters => HostResponse::Counters(self.counters(now, clock)),
        }
    }

    /// Swaps in new software and accelerator after a reload; memory and
    /// slots start clean.
    pub fn reload(
        &mut self,
        now: SimTime,
        program: Option<Box<dyn HandlerProgram>>,
        accel: Option<Option<Box<dyn Accelerator>>>,
    ) {
        assert!(self.is_drained(), "reload of a processor with live slots");
        if let Some(p) = program {
            self.program = p;
        }
        if let Some(a) = accel {
            self.accel = a;
        }
        self.memory.reset();
        self.slots.reset();
        self.rx.clear();
        self.irq_pending = 0;
        self.core = CoreState::Idle { since: now };
    }

    /// Bytes saved to the host before a reload.
    pub fn image_bytes(&self) -> u64 {
        self.cfg.layout.image_bytes()
            + self.program.state_bytes()
            + self.accel.as_ref().map_or(0, |a| a.state_bytes())
    }

    /// Full recount of slot bookkeeping.
    pub fn verify(&self) -> bool {
        self.slots.verify_counts()
            && self
                .slot_pkts
                .iter()
                .enumerate()
                .all(|(i, p)| match self.slots.state(i as u16) {
                    SlotState::Free | SlotState::Assigned => p.is_none(),
                    _ => p.is_some(),
                })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::Iface;
    use bytes::Bytes;

    fn pe() -> Processor {
        Processor::new(
            0,
            ProcessorConfig::default(),
            Box::new(Forwarder::port_flip()),
            None,
        )
    }

    fn pkt(size: usize) -> Packet {
        Packet::new(Bytes::from(vec![1u8; size]), Iface::Eth0, SimTime::ZERO)
    }

    #[test]
    fn slot_walks_the_state_machine() {
        let clk = ClockConfig::default();
        let mut p = pe();
        p.assign(4).unwrap();
        let d = p.ingest_packet(4, pkt(64)).unwrap();
        assert_eq!(d.data, 4 * 16_384);
        assert_eq!(p.memory().header(4).len(), 64);
        let (_, out) = p.start_handler(SimTime::from_ns(100), &clk).unwrap();
        assert_eq!(out.cycles, 16);
        assert_eq!(out.actions[0].desc().port, Iface::Eth1);
        p.begin_tx(4).unwrap();
        p.core_done(SimTime::from_ns(164));
        p.finish_tx(4, Some(64)).unwrap();
        assert!(p.is_drained());
        assert!(p.verify());
        let c = p.counters(SimTime::from_ns(200), &clk);
        assert_eq!(c.tx_frames, 1);
        // 25 idle cycles before the packet, 9 after
        assert_eq!(c.stalled_cycles, 25 + 9);
    }

    #[test]
    fn oversize_packet_dropped_and_freed() {
        let mut p = pe();
        p.assign(0).unwrap();
        assert!(p.ingest_packet(0, pkt(17_000)).is_err());
        let c = p.counters(SimTime::ZERO, &ClockConfig::default());
        assert_eq!(c.drops, 1);
        assert_eq!(c.oversize_drops, 1);
        assert_eq!(p.slots().state(0), SlotState::Free);
    }

    #[test]
    fn idle_processor_accrues_stall() {
        let p = pe();
        let c = p.counters(SimTime::from_us(1), &ClockConfig::default());
        assert_eq!(c.rx_frames, 0);
        assert_eq!(c.stalled_cycles, 250);
    }

    #[test]
    fn debug_register_round_trip() {
        struct Echo;
        impl HandlerProgram for Echo {
            fn name(&self) -> &'static str {
                "echo"
            }
            fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, d: Descriptor) {
                let v = ctx.debug_read();
                ctx.debug_write(v + 1);
                ctx.drop_packet(d);
            }
        }
        let clk = ClockConfig::default();
        let mut p = Processor::new(0, ProcessorConfig::default(), Box::new(Echo), None);
        p.host_control(HostCommand::WriteDebug(41), SimTime::ZERO, &clk);
        p.assign(0).unwrap();
        p.ingest_packet(0, pkt(64)).unwrap();
        p.start_handler(SimTime::ZERO, &clk).unwrap();
        assert_eq!(
            p.host_control(HostCommand::ReadDebug, SimTime::ZERO, &clk),
            HostResponse::Debug(42)
        );
    }

    #[test]
    fn pause_stops_delivery_and_dump_waits_for_boundary() {
        let clk = ClockConfig::default();
        let mut p = pe();
        p.assign(0).unwrap();
        p.ingest_packet(0, pkt(64)).unwrap();
        p.assign(1).unwrap();
        p.ingest_packet(1, pkt(64)).unwrap();
        p.start_handler(SimTime::ZERO, &clk).unwrap();
        assert_eq!(
            p.host_control(HostCommand::DumpMemory(Region::PacketMem), SimTime::ZERO, &clk),
            HostResponse::Deferred
        );
        p.host_control(HostCommand::Pause, SimTime::ZERO, &clk);
        p.core_done(SimTime::from_ns(64));
        assert!(!p.can_start());
        match p.host_control(HostCommand::DumpMemory(Region::PacketMem), SimTime::ZERO, &clk) {
            HostResponse::Dump(d) => assert_eq!(&d[16_384..16_448], &[1u8; 64][..]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn masked_interrupts_are_ignored() {
        let clk = ClockConfig::default();
        let mut p = pe();
        assert_eq!(
            p.host_control(HostCommand::Interrupt(0x1), SimTime::ZERO, &clk),
            HostResponse::Masked
        );
        assert_eq!(
            p.host_control(HostCommand::Interrupt(IRQ_POKE), SimTime::ZERO, &clk),
            HostResponse::Ack
        );
        assert_eq!(p.irq_pending(), IRQ_POKE);
    }
}
