//! Control-message switches between the scheduler and the processors.
//!
//! Control traffic is small and never width-converted; it is modeled as a
//! fixed latency per message with no throughput limit. A fixed latency plus
//! the event queue's FIFO tie-break keeps every (src, dst) pair in order.

use crate::model::SimTime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CtrlMsg {
    /// Scheduler tells a processor that a packet is headed to `slot`.
    SlotNotice { pe: usize, slot: u16 },
    /// Scheduler instructs a wrapper to transmit a core-owned slot.
    TxCommand { pe: usize, slot: u16 },
    /// Wrapper returns a slot to the scheduler.
    SlotFreed { pe: usize, slot: u16 },
    /// A processor asks for a slot on `dst` for a loopback transfer.
    SlotRequest { src: usize, src_slot: u16, dst: usize },
    /// Scheduler grants `dst_slot` on `dst` to a loopback transfer.
    SlotGrant {
        src: usize,
        src_slot: u16,
        dst: usize,
        dst_slot: u16,
    },
    /// Host-memory request from a processor.
    DramRequest { pe: usize, bytes: u32 },
}

impl CtrlMsg {
    pub fn kind(&self) -> CtrlKind {
        match self {
            CtrlMsg::SlotNotice { .. } => CtrlKind::SlotNotice,
            CtrlMsg::TxCommand { .. } => CtrlKind::TxCommand,
            CtrlMsg::SlotFreed { .. } => CtrlKind::SlotFreed,
            CtrlMsg::SlotRequest { .. } => CtrlKind::SlotRequest,
            CtrlMsg::SlotGrant { .. } => CtrlKind::SlotGrant,
            CtrlMsg::DramRequest { .. } => CtrlKind::DramRequest,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CtrlKind {
    SlotNotice,
    TxCommand,
    SlotFreed,
    SlotRequest,
    SlotGrant,
    DramRequest,
}

impl CtrlKind {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct ControlChannel {
    latency: SimTime,
    in_flight: [u64; CtrlKind::COUNT],
    sent: [u64; CtrlKind::COUNT],
    /// Freed-slot notices in flight, per processor.
    freed_in_flight: Vec<u32>,
}

impl ControlChannel {
    pub fn new(latency: SimTime, pes: usize) -> Self {
        ControlChannel {
            latency,
            in_flight: [0; CtrlKind::COUNT],
            sent: [0; CtrlKind::COUNT],
            freed_in_flight: vec![0; pes],
        }
    }

    pub fn latency(&self) -> SimTime {
        self.latency
    }

    /// Accepts a message at `now` and returns its delivery time.
    pub fn send(&mut self, now: SimTime, msg: &CtrlMsg) -> SimTime {
        let k = msg.kind().index();
        self.in_flight[k] += 1;
        self.sent[k] += 1;
        if let CtrlMsg::SlotFreed { pe, .. } = msg {
            self.freed_in_flight[*pe] += 1;
        }
        now + self.latency
    }

    /// Must be called once for every message when it is delivered.
    pub fn delivered(&mut self, msg: &CtrlMsg) {
        let k = msg.kind().index();
        assert!(self.in_flight[k] > 0, "control message delivered twice");
        self.in_flight[k] -= 1;
        if let CtrlMsg::SlotFreed { pe, .. } = msg {
            self.freed_in_flight[*pe] -= 1;
        }
    }

    pub fn in_flight(&self, kind: CtrlKind) -> u64 {
        self.in_flight[kind.index()]
    }

    pub fn sent(&self, kind: CtrlKind) -> u64 {
        self.sent[kind.index()]
    }

    pub fn freed_in_flight(&self, pe: usize) -> u32 {
        self.freed_in_flight[pe]
    }
}
