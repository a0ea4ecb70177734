//! Accelerator contract and the concrete accelerators.
//!
//! A core talks to its accelerator over MMIO at fixed offsets from
//! [`IO_EXT_BASE`]. Writes land at the end of the MMIO transfer; every read
//! reports the cycle from which its value is valid so the core can stall.

pub mod blacklist;
pub mod firewall;
pub mod stream;

use std::fmt;

use bytes::Bytes;

pub use blacklist::{BlacklistMatcher, FlatOracle, Rule, RuleError};
pub use firewall::{FirewallAccel, FirewallHandler};
pub use stream::{StreamAccelerator, StreamConfig, StreamError, StreamScanHandler};

/// Base address of the accelerator register window.
pub const IO_EXT_BASE: u32 = 0x0300_0000;

pub const ACC_SRC_IP: u32 = 0x00;
pub const ACC_FW_MATCH: u32 = 0x04;
pub const ACC_STREAM_OFFSET: u32 = 0x10;
pub const ACC_STREAM_LEN: u32 = 0x14;
pub const ACC_STREAM_CTRL: u32 = 0x18;
pub const ACC_STREAM_RESULT: u32 = 0x1C;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    Read,
    Write,
    ReadWrite,
}

impl Access {
    pub fn readable(self) -> bool {
        matches!(self, Access::Read | Access::ReadWrite)
    }

    pub fn writable(self) -> bool {
        matches!(self, Access::Write | Access::ReadWrite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Register {
    pub name: &'static str,
    pub offset: u32,
    pub width_bits: u8,
    pub access: Access,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum MmioFault {
    #[error("no register at offset {0:#x}")]
    Unmapped(u32),
    #[error("register {0} is not readable")]
    NotReadable(&'static str),
    #[error("register {0} is not writable")]
    NotWritable(&'static str),
    #[error("accelerator busy")]
    Busy,
}

impl MmioFault {
    /// Code the wrapper writes into the debug register.
    pub fn code(&self) -> u64 {
        match self {
            MmioFault::Unmapped(o) => 0x1_0000_0000 | *o as u64,
            MmioFault::NotReadable(_) => 0x2_0000_0000,
            MmioFault::NotWritable(_) => 0x3_0000_0000,
            MmioFault::Busy => 0x4_0000_0000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegisterMap {
    regs: Vec<Register>,
}

impl RegisterMap {
    /// Panics on duplicate offsets: a map is a static table.
    pub fn new(regs: Vec<Register>) -> Self {
        for (i, a) in regs.iter().enumerate() {
            assert!(
                regs[i + 1..].iter().all(|b| b.offset != a.offset),
                "duplicate register offset {:#x}",
                a.offset
            );
        }
        RegisterMap { regs }
    }

    pub fn lookup(&self, offset: u32) -> Option<&Register> {
        self.regs.iter().find(|r| r.offset == offset)
    }

    pub fn by_name(&self, name: &str) -> Option<&Register> {
        self.regs.iter().find(|r| r.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Register> {
        self.regs.iter()
    }

    pub fn check_read(&self, offset: u32) -> Result<&Register, MmioFault> {
        let r = self.lookup(offset).ok_or(MmioFault::Unmapped(offset))?;
        if !r.access.readable() {
            return Err(MmioFault::NotReadable(r.name));
        }
        Ok(r)
    }

    pub fn check_write(&self, offset: u32) -> Result<&Register, MmioFault> {
        let r = self.lookup(offset).ok_or(MmioFault::Unmapped(offset))?;
        if !r.access.writable() {
            return Err(MmioFault::NotWritable(r.name));
        }
        Ok(r)
    }
}

impl fmt::Display for RegisterMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.regs {
            let dir = match r.access {
                Access::Read => "r",
                Access::Write => "w",
                Access::ReadWrite => "rw",
            };
            writeln!(
                f,
                "+{:#04x}  {:<20} {:>2}-bit {}",
                r.offset, r.name, r.width_bits, dir
            )?;
        }
        Ok(())
    }
}

/// A processor-local accelerator reachable over MMIO.
pub trait Accelerator: Send {
    fn name(&self) -> &'static str;

    fn registers(&self) -> &RegisterMap;

    /// A new descriptor's packet became visible on the accelerator port.
    fn attach_packet(&mut self, _packet: &Bytes) {}

    /// Register write landing at `cycle`.
    fn write(&mut self, cycle: u64, offset: u32, value: u32) -> Result<(), MmioFault>;

    /// Register read issued at `cycle`; returns the value and the first
    /// cycle at which it is valid.
    fn read(&mut self, cycle: u64, offset: u32) -> Result<(u32, u64), MmioFault>;

    /// True while the accelerator owns its memories.
    fn is_active(&self, cycle: u64) -> bool;

    /// Bytes of lookup state, saved and restored on reconfiguration.
    fn state_bytes(&self) -> u64 {
        0
    }
}
