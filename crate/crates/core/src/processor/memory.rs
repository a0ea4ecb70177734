//! Hybrid memory subsystem of one processor: core-local memory with header
//! slots, shared packet memory, accelerator memory and the port rules that
//! govern who may touch which region when.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use bytes::Bytes;
use serde::{Deserialize, Serialize};

pub const PACKET_MEM_BASE: u32 = 0x0000_0000;
pub const DMEM_BASE: u32 = 0x0080_0000;
pub const HEADER_SLOT_BASE: u32 = 0x0080_4000;
pub const BCAST_REGION_BASE: u32 = 0x0080_8000;
pub const IMEM_BASE: u32 = 0x0100_0000;
pub const ACCEL_MEM_BASE: u32 = 0x0200_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Imem,
    Dmem,
    PacketMem,
    AccelMem,
}

impl Region {
    pub const ALL: [Region; 4] = [
        Region::Imem,
        Region::Dmem,
        Region::PacketMem,
        Region::AccelMem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Region::Imem => "imem",
            Region::Dmem => "dmem",
            Region::PacketMem => "packet_mem",
            Region::AccelMem => "accel_mem",
        }
    }

    pub fn parse(s: &str) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.name() == s)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sizes and slot geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryLayout {
    pub slot_count: u16,
    pub slot_size: u32,
    pub header_slot_size: u32,
    pub packet_mem_bytes: u32,
    pub dmem_bytes: u32,
    pub imem_bytes: u32,
    pub accel_mem_bytes: u32,
    pub bcast_region_bytes: u32,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout {
            slot_count: 16,
            slot_size: 16_384,
            header_slot_size: 128,
            packet_mem_bytes: 1 << 20,
            dmem_bytes: 64 << 10,
            imem_bytes: 64 << 10,
            accel_mem_bytes: 256 << 10,
            bcast_region_bytes: 4 << 10,
        }
    }
}

impl MemoryLayout {
    pub fn validate(&self) -> Result<(), String> {
        if self.slot_count == 0 {
            return Err("slot_count must be positive".into());
        }
        if self.slot_count as u64 * self.slot_size as u64 > self.packet_mem_bytes as u64 {
            return Err(format!(
                "{} slots of {} B exceed packet memory of {} B",
                self.slot_count, self.slot_size, self.packet_mem_bytes
            ));
        }
        let hdr_end = (HEADER_SLOT_BASE - DMEM_BASE) as u64
            + self.slot_count as u64 * self.header_slot_size as u64;
        if hdr_end > (BCAST_REGION_BASE - DMEM_BASE) as u64 {
            return Err("header slots overlap the broadcast region".into());
        }
        let bcast_end = (BCAST_REGION_BASE - DMEM_BASE) as u64 + self.bcast_region_bytes as u64;
        if bcast_end > self.dmem_bytes as u64 {
            return Err("broadcast region does not fit in dmem".into());
        }
        for (region, size) in [
            (Region::PacketMem, self.packet_mem_bytes),
            (Region::Dmem, self.dmem_bytes),
            (Region::Imem, self.imem_bytes),
            (Region::AccelMem, self.accel_mem_bytes),
        ] {
            if size > self.next_base(region) - self.base(region) {
                return Err(format!("{region} overlaps the next region"));
            }
        }
        Ok(())
    }

    pub fn base(&self, region: Region) -> u32 {
        match region {
            Region::PacketMem => PACKET_MEM_BASE,
            Region::Dmem => DMEM_BASE,
            Region::Imem => IMEM_BASE,
            Region::AccelMem => ACCEL_MEM_BASE,
        }
    }

    fn next_base(&self, region: Region) -> u32 {
        match region {
            Region::PacketMem => DMEM_BASE,
            Region::Dmem => IMEM_BASE,
            Region::Imem => ACCEL_MEM_BASE,
            Region::AccelMem => u32::MAX,
        }
    }

    pub fn size(&self, region: Region) -> u32 {
        match region {
            Region::PacketMem => self.packet_mem_bytes,
            Region::Dmem => self.dmem_bytes,
            Region::Imem => self.imem_bytes,
            Region::AccelMem => self.accel_mem_bytes,
        }
    }

    pub fn slot_addr(&self, slot: u16) -> u32 {
        PACKET_MEM_BASE + slot as u32 * self.slot_size
    }

    pub fn header_addr(&self, slot: u16) -> u32 {
        HEADER_SLOT_BASE + slot as u32 * self.header_slot_size
    }

    /// Total bytes a reconfiguration has to save and restore.
    pub fn image_bytes(&self) -> u64 {
        self.dmem_bytes as u64 + self.packet_mem_bytes as u64 + self.accel_mem_bytes as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MemError {
    #[error("slot {0} out of range")]
    BadSlot(u16),
    #[error("{len} B does not fit a {slot_size} B slot")]
    TooLarge { len: u64, slot_size: u32 },
    #[error("address {addr:#x}+{len} outside the broadcast region")]
    OutsideBroadcast { addr: u32, len: usize },
}

/// Memory contents. Packet slots hold shared handles to the frame bytes;
/// regions are materialized only when dumped.
#[derive(Clone, Debug)]
pub struct HybridMemory {
    layout: MemoryLayout,
    slots: Vec<Bytes>,
    headers: Vec<Bytes>,
    dmem: Vec<u8>,
    accel_mem: Vec<u8>,
}

impl HybridMemory {
    pub fn new(layout: MemoryLayout) -> Self {
        let n = layout.slot_count as usize;
        HybridMemory {
            dmem: vec![0; layout.dmem_bytes as usize],
            accel_mem: Vec::new(),
            slots: vec![Bytes::new(); n],
            headers: vec![Bytes::new(); n],
            layout,
        }
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    /// Commits a DMA'd frame into `slot` and mirrors its header.
    pub fn load_slot(&mut self, slot: u16, data: Bytes) -> Result<(), MemError> {
        let i = slot as usize;
        if i >= self.slots.len() {
            return Err(MemError::BadSlot(slot));
        }
        if data.len() as u64 > self.layout.slot_size as u64 {
            return Err(MemError::TooLarge {
                len: data.len() as u64,
                slot_size: self.layout.slot_size,
            });
        }
        let h = data.len().min(self.layout.header_slot_size as usize);
        self.headers[i] = data.slice(..h);
        self.slots[i] = data;
        Ok(())
    }

    pub fn slot(&self, slot: u16) -> &Bytes {
        &self.slots[slot as usize]
    }

    pub fn header(&self, slot: u16) -> &Bytes {
        &self.headers[slot as usize]
    }

    fn bcast_offset(&self, addr: u32, len: usize) -> Result<usize, MemError> {
        if addr as u64 + len as u64 > self.layout.bcast_region_bytes as u64 {
            return Err(MemError::OutsideBroadcast { addr, len });
        }
        Ok((BCAST_REGION_BASE - DMEM_BASE + addr) as usize)
    }

    /// Word-atomic store into the broadcast region (`addr` is an offset).
    pub fn bcast_store(&mut self, addr: u32, word: u32) -> Result<(), MemError> {
        let off = self.bcast_offset(addr, 4)?;
        self.dmem[off..off + 4].copy_from_slice(&word.to_le_bytes());
        Ok(())
    }

    pub fn bcast_load(&self, addr: u32) -> Result<u32, MemError> {
        let off = self.bcast_offset(addr, 4)?;
        Ok(u32::from_le_bytes(self.dmem[off..off + 4].try_into().unwrap()))
    }

    pub fn write_accel_mem(&mut self, offset: usize, data: &[u8]) {
        let end = offset + data.len();
        assert!(end <= self.layout.accel_mem_bytes as usize, "accel_mem overflow");
        if self.accel_mem.len() < end {
            self.accel_mem.resize(end, 0);
        }
        self.accel_mem[offset..end].copy_from_slice(data);
    }

    /// Byte-exact image of a region.
    pub fn dump(&self, region: Region) -> Vec<u8> {
        let size = self.layout.size(region) as usize;
        let mut buf = vec![0u8; size];
        match region {
            Region::PacketMem => {
                for (i, s) in self.slots.iter().enumerate() {
                    let a = self.layout.slot_addr(i as u16) as usize;
                    buf[a..a + s.len()].copy_from_slice(s);
                }
            }
            Region::Dmem => {
                buf.copy_from_slice(&self.dmem);
                for (i, h) in self.headers.iter().enumerate() {
                    let a = (self.layout.header_addr(i as u16) - DMEM_BASE) as usize;
                    buf[a..a + h.len()].copy_from_slice(h);
                }
            }
            Region::AccelMem => buf[..self.accel_mem.len()].copy_from_slice(&self.accel_mem),
            Region::Imem => {}
        }
        buf
    }

    /// Clears all contents, as after a reload.
    pub fn reset(&mut self) {
        *self = HybridMemory::new(self.layout.clone());
    }
}

/// One entry of a dump manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DumpEntry {
    pub region: Region,
    pub base: u32,
    pub length: u32,
    pub file: PathBuf,
}

/// Writes `<stem>.<region>.bin` per region plus `<stem>.manifest`, whose
/// lines read `region base length file`.
pub fn write_dump(
    dir: &Path,
    stem: &str,
    mem: &HybridMemory,
    regions: &[Region],
) -> io::Result<Vec<DumpEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut manifest = std::fs::File::create(dir.join(format!("{stem}.manifest")))?;
    for &region in regions {
        let name = format!("{stem}.{}.bin", region.name());
        let bytes = mem.dump(region);
        std::fs::write(dir.join(&name), &bytes)?;
        let base = mem.layout().base(region);
        writeln!(manifest, "{} {:#010x} {} {}", region, base, bytes.len(), name)?;
        entries.push(DumpEntry {
            region,
            base,
            length: bytes.len() as u32,
            file: PathBuf::from(name),
        });
    }
    Ok(entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Actor {
    Core,
    Dma,
    Accel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PortError {
    #[error("DMA access to accel_mem while the accelerator is active")]
    AccelBusy,
    #[error("{0:?} has no port into {1}")]
    NoPort(Actor, Region),
}

/// Port arbitration for one processor's memories.
///
/// dmem: the core has a dedicated port; DMA header writes use the other.
/// packet_mem: one port belongs to the accelerators, the other is shared by
/// core and DMA with the core winning a same-cycle conflict.
/// accel_mem: accelerator-owned; DMA only while the accelerator is idle.
#[derive(Clone, Debug, Default)]
pub struct MemPorts {
    core_cycles: BTreeSet<u64>,
    dma_cycles: BTreeSet<u64>,
    accel_active: bool,
    dma_bumps: u64,
}

impl MemPorts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_accel_active(&mut self, active: bool) {
        self.accel_active = active;
    }

    /// Cycles the DMA lost to core priority.
    pub fn dma_bumps(&self) -> u64 {
        self.dma_bumps
    }

    /// Returns the cycle at which the access is served.
    pub fn access(&mut self, region: Region, actor: Actor, cycle: u64) -> Result<u64, PortError> {
        self.prune(cycle);
        match (region, actor) {
            (Region::Dmem, Actor::Core | Actor::Dma) => Ok(cycle),
            (Region::PacketMem, Actor::Accel) => Ok(cycle),
            (Region::PacketMem, Actor::Core) => {
                self.core_cycles.insert(cycle);
                Ok(cycle)
            }
            (Region::PacketMem, Actor::Dma) => {
                let mut c = cycle;
                while self.core_cycles.contains(&c) || self.dma_cycles.contains(&c) {
                    if self.core_cycles.contains(&c) {
                        self.dma_bumps += 1;
                    }
                    c += 1;
                }
                self.dma_cycles.insert(c);
                Ok(c)
            }
            (Region::AccelMem, Actor::Accel) => Ok(cycle),
            (Region::AccelMem, Actor::Dma) if !self.accel_active => Ok(cycle),
            (Region::AccelMem, Actor::Dma) => Err(PortError::AccelBusy),
            (r, a) => Err(PortError::NoPort(a, r)),
        }
    }

    fn prune(&mut self, cycle: u64) {
        // accesses never arrive more than a few cycles out of order
        let keep = cycle.saturating_sub(64);
        self.core_cycles = self.core_cycles.split_off(&keep);
        self.dma_cycles = self.dma_cycles.split_off(&keep);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout_matches_slot_init() {
        let l = MemoryLayout::default();
        l.validate().unwrap();
        assert_eq!(l.slot_addr(0), 0);
        assert_eq!(l.slot_addr(1), 16_384);
        assert_eq!(l.header_addr(0), 0x804000);
        assert_eq!(l.header_addr(15), 0x804000 + 15 * 128);
    }

    #[test]
    fn small_packet_mirrors_fully() {
        let mut m = HybridMemory::new(MemoryLayout::default());
        let frame = Bytes::from((0..64u8).collect::<Vec<_>>());
        m.load_slot(3, frame.clone()).unwrap();
        assert_eq!(m.header(3), &frame);
        assert_eq!(m.slot(3), &frame);
    }

    #[test]
    fn large_packet_mirrors_128_bytes() {
        let mut m = HybridMemory::new(MemoryLayout::default());
        let frame = Bytes::from(vec![7u8; 1500]);
        m.load_slot(0, frame.clone()).unwrap();
        assert_eq!(m.header(0).len(), 128);
        assert_eq!(&m.header(0)[..], &frame[..128]);
        let dmem = m.dump(Region::Dmem);
        let off = (HEADER_SLOT_BASE - DMEM_BASE) as usize;
        assert_eq!(&dmem[off..off + 128], &frame[..128]);
        let pm = m.dump(Region::PacketMem);
        assert_eq!(&pm[..1500], &frame[..]);
        assert_eq!(pm[1500], 0);
    }

    #[test]
    fn oversize_packet_rejected() {
        let mut m = HybridMemory::new(MemoryLayout::default());
        let err = m.load_slot(0, Bytes::from(vec![0u8; 17_000])).unwrap_err();
        assert!(matches!(err, MemError::TooLarge { len: 17_000, .. }));
    }

    #[test]
    fn core_wins_shared_packet_port() {
        let mut p = MemPorts::new();
        assert_eq!(p.access(Region::PacketMem, Actor::Core, 10), Ok(10));
        assert_eq!(p.access(Region::PacketMem, Actor::Dma, 10), Ok(11));
        assert_eq!(p.dma_bumps(), 1);
    }

    #[test]
    fn disjoint_ports_do_not_stall() {
        let mut p = MemPorts::new();
        assert_eq!(p.access(Region::PacketMem, Actor::Accel, 5), Ok(5));
        assert_eq!(p.access(Region::Dmem, Actor::Core, 5), Ok(5));
    }

    #[test]
    fn accel_mem_readback_only_when_idle() {
        let mut p = MemPorts::new();
        assert_eq!(p.access(Region::AccelMem, Actor::Dma, 0), Ok(0));
        p.set_accel_active(true);
        assert_eq!(
            p.access(Region::AccelMem, Actor::Dma, 1),
            Err(PortError::AccelBusy)
        );
        assert!(p.access(Region::AccelMem, Actor::Core, 1).is_err());
    }

    #[test]
    fn dump_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = HybridMemory::new(MemoryLayout::default());
        m.load_slot(1, Bytes::from_static(b"hello")).unwrap();
        let entries = write_dump(dir.path(), "pe3", &m, &[Region::PacketMem]).unwrap();
        assert_eq!(entries.len(), 1);
        let manifest = std::fs::read_to_string(dir.path().join("pe3.manifest")).unwrap();
        assert_eq!(
            manifest.trim(),
            "packet_mem 0x00000000 1048576 pe3.packet_mem.bin"
        );
        let bin = std::fs::read(dir.path().join("pe3.packet_mem.bin")).unwrap();
        assert_eq!(&bin[16_384..16_389], b"hello");
    }

    #[test]
    fn broadcast_region_is_bounded() {
        let mut m = HybridMemory::new(MemoryLayout::default());
        m.bcast_store(8, 0xAABBCCDD).unwrap();
        assert_eq!(m.bcast_load(8).unwrap(), 0xAABBCCDD);
        assert!(m.bcast_store(4094, 1).is_err());
    }
}
