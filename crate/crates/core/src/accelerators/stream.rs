//! Generic streaming pattern-matcher stub.
//!
//! The accelerator walks a byte range of the packet through its exclusive
//! packet-memory port, one word per `cycles_per_word`, and emits 32-bit
//! result chunks into an output FIFO. Results are pseudo-matches derived
//! from the packet bytes so runs are reproducible without real rule tables.

use std::collections::VecDeque;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use super::{
    Access, Accelerator, MmioFault, Register, RegisterMap, ACC_STREAM_CTRL, ACC_STREAM_LEN,
    ACC_STREAM_OFFSET, ACC_STREAM_RESULT,
};
use crate::processor::handler::{flip, Descriptor, HandlerCtx, HandlerProgram};

pub const CTRL_START: u32 = 1;
pub const STATUS_BUSY: u32 = 1;
pub const STATUS_ERROR: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub word_bytes: u32,
    pub cycles_per_word: u64,
    /// A chunk emits a result when its hash has these low bits clear.
    pub match_mask: u32,
    /// Bytes hashed per chunk.
    pub chunk_bytes: u32,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            word_bytes: 8,
            cycles_per_word: 1,
            match_mask: 0x3F,
            chunk_bytes: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum StreamError {
    #[error("scan started while busy")]
    Busy,
    #[error("range {offset}+{len} outside a {packet} B packet")]
    OutOfRange { offset: u32, len: u32, packet: u32 },
}

pub struct StreamAccelerator {
    cfg: StreamConfig,
    regs: RegisterMap,
    packet: Bytes,
    offset: u32,
    len: u32,
    busy_until: u64,
    error: bool,
    results: VecDeque<u32>,
    scans: u64,
}

impl StreamAccelerator {
    pub fn new(cfg: StreamConfig) -> Self {
        let reg = |name, offset, access| Register {
            name,
            offset,
            width_bits: 32,
            access,
        };
        StreamAccelerator {
            cfg,
            regs: RegisterMap::new(vec![
                reg("ACC_STREAM_OFFSET", ACC_STREAM_OFFSET, Access::Write),
                reg("ACC_STREAM_LEN", ACC_STREAM_LEN, Access::Write),
                reg("ACC_STREAM_CTRL", ACC_STREAM_CTRL, Access::ReadWrite),
                reg("ACC_STREAM_RESULT", ACC_STREAM_RESULT, Access::Read),
            ]),
            packet: Bytes::new(),
            offset: 0,
            len: 0,
            busy_until: 0,
            error: false,
            results: VecDeque::new(),
            scans: 0,
        }
    }

    pub fn scans(&self) -> u64 {
        self.scans
    }

    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    /// Starts a scan of `packet[offset..offset + len]` at `cycle` and returns
    /// the cycle at which it completes.
    pub fn stream_scan(
        &mut self,
        cycle: u64,
        packet: &[u8],
        offset: u32,
        len: u32,
    ) -> Result<u64, StreamError> {
        if cycle < self.busy_until {
            self.error = true;
            return Err(StreamError::Busy);
        }
        let end = offset as u64 + len as u64;
        if end > packet.len() as u64 {
            self.error = true;
            return Err(StreamError::OutOfRange {
                offset,
                len,
                packet: packet.len() as u32,
            });
        }
        self.error = false;
        self.scans += 1;
        let words = (len as u64).div_ceil(self.cfg.word_bytes as u64);
        self.busy_until = cycle + words * self.cfg.cycles_per_word;
        let data = &packet[offset as usize..end as usize];
        for chunk in data.chunks(self.cfg.chunk_bytes.max(1) as usize) {
            let h = fnv1a(chunk);
            if h & self.cfg.match_mask == 0 {
                self.results.push_back(h);
            }
        }
        Ok(self.busy_until)
    }

    pub fn pop_result(&mut self) -> Option<u32> {
        self.results.pop_front()
    }
}

fn fnv1a(data: &[u8]) -> u32 {
    let mut h: u32 = 0x811C_9DC5;
    for b in data {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

impl Accelerator for StreamAccelerator {
    fn name(&self) -> &'static str {
        "stream"
    }

    fn registers(&self) -> &RegisterMap {
        &self.regs
    }

    fn attach_packet(&mut self, packet: &Bytes) {
        self.packet = packet.clone();
    }

    fn write(&mut self, cycle: u64, offset: u32, value: u32) -> Result<(), MmioFault> {
        self.regs.check_write(offset)?;
        match offset {
            ACC_STREAM_OFFSET => self.offset = value,
            ACC_STREAM_LEN => self.len = value,
            ACC_STREAM_CTRL if value & CTRL_START != 0 => {
                let pkt = self.packet.clone();
                // failures surface through the status register
                let _ = self.stream_scan(cycle, &pkt, self.offset, self.len);
            }
            _ => {}
        }
        Ok(())
    }

    fn read(&mut self, cycle: u64, offset: u32) -> Result<(u32, u64), MmioFault> {
        self.regs.check_read(offset)?;
        match offset {
            ACC_STREAM_CTRL => {
                let mut status = (self.results.len() as u32) << 16;
                if cycle < self.busy_until {
                    status |= STATUS_BUSY;
                }
                if self.error {
                    status |= STATUS_ERROR;
                }
                Ok((status, cycle))
            }
            _ => {
                let ready = cycle.max(self.busy_until);
                Ok((self.pop_result().unwrap_or(0), ready))
            }
        }
    }

    fn is_active(&self, cycle: u64) -> bool {
        cycle < self.busy_until
    }
}

/// Scans the frame payload, drains the result FIFO and forwards the packet
/// out the other Ethernet port.
#[derive(Clone, Debug, Default)]
pub struct StreamScanHandler {
    pub payload_offset: u32,
    pub results: u64,
}

impl HandlerProgram for StreamScanHandler {
    fn name(&self) -> &'static str {
        "stream_scan"
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![("stream_results", self.results)]
    }

    fn on_packet(&mut self, ctx: &mut HandlerCtx<'_>, mut desc: Descriptor) {
        let off = self.payload_offset.min(desc.len);
        let started = ctx
            .mmio_write(ACC_STREAM_OFFSET, off)
            .and_then(|_| ctx.mmio_write(ACC_STREAM_LEN, desc.len - off))
            .and_then(|_| ctx.mmio_write(ACC_STREAM_CTRL, CTRL_START));
        if started.is_ok() {
            // the first result read waits out the scan
            if let Ok(first) = ctx.mmio_read(ACC_STREAM_RESULT) {
                self.results += (first != 0) as u64;
                if let Ok(status) = ctx.mmio_read(ACC_STREAM_CTRL) {
                    for _ in 0..status >> 16 {
                        if ctx.mmio_read(ACC_STREAM_RESULT).is_ok() {
                            self.results += 1;
                        }
                    }
                }
            }
        }
        desc.port = flip(desc.port);
        ctx.send(desc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_cost_is_per_word() {
        let mut a = StreamAccelerator::new(StreamConfig::default());
        let pkt = vec![0xAB; 512];
        assert_eq!(a.stream_scan(10, &pkt, 0, 512), Ok(10 + 64));
        assert!(a.is_active(73));
        assert!(!a.is_active(74));
    }

    #[test]
    fn empty_range_finishes_immediately() {
        let mut a = StreamAccelerator::new(StreamConfig::default());
        assert_eq!(a.stream_scan(5, &[1, 2, 3], 1, 0), Ok(5));
        assert_eq!(a.pop_result(), None);
    }

    #[test]
    fn start_while_busy_sets_error() {
        let mut a = StreamAccelerator::new(StreamConfig::default());
        let pkt = vec![0; 64];
        a.stream_scan(0, &pkt, 0, 64).unwrap();
        assert_eq!(a.stream_scan(3, &pkt, 0, 64), Err(StreamError::Busy));
        let (status, _) = a.read(3, ACC_STREAM_CTRL).unwrap();
        assert_eq!(status & (STATUS_BUSY | STATUS_ERROR), STATUS_BUSY | STATUS_ERROR);
    }

    #[test]
    fn results_are_deterministic() {
        let cfg = StreamConfig {
            match_mask: 0,
            ..StreamConfig::default()
        };
        let pkt: Vec<u8> = (0..128u8).collect();
        let mut a = StreamAccelerator::new(cfg);
        let mut b = StreamAccelerator::new(cfg);
        a.stream_scan(0, &pkt, 0, 128).unwrap();
        b.stream_scan(0, &pkt, 0, 128).unwrap();
        let ra: Vec<u32> = std::iter::from_fn(|| a.pop_result()).collect();
        let rb: Vec<u32> = std::iter::from_fn(|| b.pop_result()).collect();
        assert_eq!(ra.len(), 4);
        assert_eq!(ra, rb);
    }
}
