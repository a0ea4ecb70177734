//! Frames, interface ids and the few header fields the handlers look at.

use std::fmt;
use std::net::Ipv4Addr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::model::SimTime;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_IPV6: u16 = 0x86DD;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

pub const ETH_HDR_LEN: usize = 14;
pub const IPV4_HDR_LEN: usize = 20;
pub const TCP_HDR_LEN: usize = 20;
pub const UDP_HDR_LEN: usize = 8;

/// Offset of the IPv4 source address in an untagged Ethernet frame.
pub const SRC_IP_OFFSET: usize = ETH_HDR_LEN + 12;

/// Packet sources and sinks outside the processors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Iface {
    Eth0,
    Eth1,
    Host,
    Loopback,
}

impl Iface {
    pub const ALL: [Iface; 4] = [Iface::Eth0, Iface::Eth1, Iface::Host, Iface::Loopback];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    /// Descriptor port number for this interface.
    pub fn port(self) -> u8 {
        self as u8
    }

    pub fn from_port(port: u8) -> Option<Iface> {
        Iface::ALL.get(port as usize).copied()
    }

    pub fn eth(n: u8) -> Iface {
        match n {
            0 => Iface::Eth0,
            1 => Iface::Eth1,
            _ => panic!("no ethernet port {n}"),
        }
    }

    pub fn is_eth(self) -> bool {
        matches!(self, Iface::Eth0 | Iface::Eth1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Iface::Eth0 => "eth0",
            Iface::Eth1 => "eth1",
            Iface::Host => "host",
            Iface::Loopback => "loopback",
        }
    }
}

impl fmt::Display for Iface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A frame as seen on the wire (no FCS).
#[derive(Clone, Debug)]
pub struct Packet {
    pub data: Bytes,
    pub arrival_port: Iface,
    /// Flow hash prepended by the hash scheduler.
    pub metadata: Option<[u8; 4]>,
    /// Time the first bit left the traffic source.
    pub timestamp: SimTime,
}

impl Packet {
    pub fn new(data: Bytes, arrival_port: Iface, timestamp: SimTime) -> Self {
        Packet {
            data,
            arrival_port,
            metadata: None,
            timestamp,
        }
    }

    /// Frame size without metadata.
    pub fn size(&self) -> u64 {
        self.data.len() as u64
    }

    pub fn metadata_len(&self) -> u64 {
        if self.metadata.is_some() {
            4
        } else {
            0
        }
    }

    /// Size as stored in processor memory, metadata included.
    pub fn stored_size(&self) -> u64 {
        self.size() + self.metadata_len()
    }
}

/// Size bounds enforced on ingress.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacketLimits {
    pub min_size: u64,
    pub max_size: u64,
}

impl Default for PacketLimits {
    fn default() -> Self {
        PacketLimits {
            min_size: 60,
            max_size: 16_384,
        }
    }
}

impl PacketLimits {
    pub fn admits(&self, size: u64) -> bool {
        (self.min_size..=self.max_size).contains(&size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub src_ip: u32,
    pub dst_ip: u32,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

/// L4 transport selection for [`FrameBuilder`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transport {
    Udp,
    Tcp { seq: u32 },
}

/// Builds untagged Ethernet/IPv4 frames padded to an exact size.
#[derive(Clone, Debug)]
pub struct FrameBuilder {
    pub src_mac: [u8; 6],
    pub dst_mac: [u8; 6],
    pub ethertype: u16,
    pub tuple: FiveTuple,
    pub transport: Transport,
}

impl Default for FrameBuilder {
    fn default() -> Self {
        FrameBuilder {
            src_mac: [0x02, 0, 0, 0, 0, 1],
            dst_mac: [0x02, 0, 0, 0, 0, 2],
            ethertype: ETHERTYPE_IPV4,
            tuple: FiveTuple {
                src_ip: u32::from(Ipv4Addr::new(10, 0, 0, 1)),
                dst_ip: u32::from(Ipv4Addr::new(10, 0, 0, 2)),
                src_port: 1024,
                dst_port: 80,
                proto: IPPROTO_UDP,
            },
            transport: Transport::Udp,
        }
    }
}

impl FrameBuilder {
    pub fn tcp(tuple: FiveTuple, seq: u32) -> Self {
        FrameBuilder {
            tuple: FiveTuple {
                proto: IPPROTO_TCP,
                ..tuple
            },
            transport: Transport::Tcp { seq },
            ..Default::default()
        }
    }

    pub fn l4_header_len(&self) -> usize {
        match self.transport {
            Transport::Udp => UDP_HDR_LEN,
            Transport::Tcp { .. } => TCP_HDR_LEN,
        }
    }

    /// Header bytes before the L4 payload.
    pub fn header_len(&self) -> usize {
        ETH_HDR_LEN + IPV4_HDR_LEN + self.l4_header_len()
    }

    /// Emit a frame of exactly `size` bytes. Frames shorter than the full
    /// header stack are truncated copies of it. `fill` seeds the payload.
    pub fn build(&self, size: usize, fill: u8) -> Vec<u8> {
        let hdr = self.header_len();
        let mut buf = Vec::with_capacity(size.max(hdr));
        buf.extend_from_slice(&self.dst_mac);
        buf.extend_from_slice(&self.src_mac);
        buf.extend_from_slice(&self.ethertype.to_be_bytes());

        let ip_total = (size.max(hdr) - ETH_HDR_LEN).min(u16::MAX as usize) as u16;
        let mut ip = [0u8; IPV4_HDR_LEN];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&ip_total.to_be_bytes());
        ip[8] = 64;
        ip[9] = self.tuple.proto;
        ip[12..16].copy_from_slice(&self.tuple.src_ip.to_be_bytes());
        ip[16..20].copy_from_slice(&self.tuple.dst_ip.to_be_bytes());
        let csum = ipv4_checksum(&ip);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        buf.extend_from_slice(&ip);

        match self.transport {
            Transport::Udp => {
                let mut udp = [0u8; UDP_HDR_LEN];
                udp[0..2].copy_from_slice(&self.tuple.src_port.to_be_bytes());
                udp[2..4].copy_from_slice(&self.tuple.dst_port.to_be_bytes());
                let udp_len = ip_total.saturating_sub(IPV4_HDR_LEN as u16);
                udp[4..6].copy_from_slice(&udp_len.to_be_bytes());
                buf.extend_from_slice(&udp);
            }
            Transport::Tcp { seq } => {
                let mut tcp = [0u8; TCP_HDR_LEN];
                tcp[0..2].copy_from_slice(&self.tuple.src_port.to_be_bytes());
                tcp[2..4].copy_from_slice(&self.tuple.dst_port.to_be_bytes());
                tcp[4..8].copy_from_slice(&seq.to_be_bytes());
                tcp[12] = 5 << 4;
                tcp[13] = 0x18; // PSH|ACK
                tcp[14..16].copy_from_slice(&0xFFFFu16.to_be_bytes());
                buf.extend_from_slice(&tcp);
            }
        }

        let mut x = fill;
        while buf.len() < size {
            buf.push(x);
            x = x.wrapping_mul(31).wrapping_add(7);
        }
        buf.truncate(size);
        buf
    }
}

fn ipv4_checksum(hdr: &[u8]) -> u16 {
    let mut sum: u32 = hdr
        .chunks(2)
        .map(|w| u32::from(u16::from_be_bytes([w[0], w[1]])))
        .sum();
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

pub fn read_u16_be(buf: &[u8], off: usize) -> Option<u16> {
    buf.get(off..off + 2).map(|b| u16::from_be_bytes([b[0], b[1]]))
}

pub fn read_u32_be(buf: &[u8], off: usize) -> Option<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn ethertype(frame: &[u8]) -> Option<u16> {
    read_u16_be(frame, 12)
}

/// Parses the 5-tuple of an untagged IPv4 TCP/UDP frame.
pub fn parse_five_tuple(frame: &[u8]) -> Option<FiveTuple> {
    if ethertype(frame)? != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = ETH_HDR_LEN;
    let ihl = (*frame.get(ip)? & 0x0F) as usize * 4;
    if ihl < IPV4_HDR_LEN {
        return None;
    }
    let proto = *frame.get(ip + 9)?;
    if proto != IPPROTO_TCP && proto != IPPROTO_UDP {
        return None;
    }
    let l4 = ip + ihl;
    Some(FiveTuple {
        src_ip: read_u32_be(frame, ip + 12)?,
        dst_ip: read_u32_be(frame, ip + 16)?,
        src_port: read_u16_be(frame, l4)?,
        dst_port: read_u16_be(frame, l4 + 2)?,
        proto,
    })
}

/// TCP fields the reorder engine tracks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcpMeta {
    pub tuple: FiveTuple,
    pub seq: u32,
    pub payload_len: u32,
    pub payload_offset: usize,
}

pub fn parse_tcp(frame: &[u8]) -> Option<TcpMeta> {
    let tuple = parse_five_tuple(frame)?;
    if tuple.proto != IPPROTO_TCP {
        return None;
    }
    let ip = ETH_HDR_LEN;
    let ihl = (frame[ip] & 0x0F) as usize * 4;
    let total = read_u16_be(frame, ip + 2)? as usize;
    let l4 = ip + ihl;
    let seq = read_u32_be(frame, l4 + 4)?;
    let doff = (*frame.get(l4 + 12)? >> 4) as usize * 4;
    let payload_offset = l4 + doff;
    let payload_len = total.checked_sub(ihl + doff)? as u32;
    Some(TcpMeta {
        tuple,
        seq,
        payload_len,
        payload_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_hits_exact_size() {
        for size in [0usize, 20, 60, 64, 65, 1500, 9000] {
            assert_eq!(FrameBuilder::default().build(size, 1).len(), size);
        }
    }

    #[test]
    fn tuple_roundtrip() {
        let t = FiveTuple {
            src_ip: 0x0A01_0203,
            dst_ip: 0xC0A8_0001,
            src_port: 5555,
            dst_port: 443,
            proto: IPPROTO_TCP,
        };
        let frame = FrameBuilder::tcp(t, 1000).build(200, 0);
        assert_eq!(parse_five_tuple(&frame), Some(t));
        let meta = parse_tcp(&frame).unwrap();
        assert_eq!(meta.seq, 1000);
        assert_eq!(meta.payload_len, 200 - 54);
        assert_eq!(meta.payload_offset, 54);
        assert_eq!(read_u32_be(&frame, SRC_IP_OFFSET), Some(0x0A01_0203));
    }

    #[test]
    fn ipv4_header_checksum_verifies() {
        let frame = FrameBuilder::default().build(64, 0);
        let hdr = &frame[ETH_HDR_LEN..ETH_HDR_LEN + IPV4_HDR_LEN];
        assert_eq!(ipv4_checksum(hdr), 0);
    }

    #[test]
    fn non_ipv4_has_no_tuple() {
        let mut b = FrameBuilder::default();
        b.ethertype = ETHERTYPE_IPV6;
        assert_eq!(parse_five_tuple(&b.build(80, 0)), None);
    }
}
