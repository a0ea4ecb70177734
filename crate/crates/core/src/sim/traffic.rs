//! Tester-side traffic: synthetic generators and capture replay.

use std::borrow::Cow;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use pcap_file::pcap::{PcapHeader, PcapPacket, PcapParser, PcapWriter};
use pcap_file::TsResolution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accelerators::blacklist::{FlatOracle, Rule};
use crate::model::{LinkRate, SimTime};
use crate::packet::{
    FiveTuple, FrameBuilder, Iface, ETHERTYPE_IPV6, ETH_HDR_LEN, IPPROTO_TCP, IPV4_HDR_LEN,
    TCP_HDR_LEN,
};

use super::config::TrafficSpec;

/// A frame and the earliest time its first byte may leave the tester.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub at: SimTime,
    pub data: Bytes,
}

pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<Frame>;
}

#[derive(Debug, thiserror::Error)]
pub enum TrafficError {
    #[error("{path}: offset {offset}: {msg}")]
    Pcap {
        path: String,
        offset: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

/// What the generators need to know about the testbed.
#[derive(Clone, Debug)]
pub struct TrafficEnv {
    pub link: LinkRate,
    pub framing_bytes: u64,
    /// Blacklist entries and their oracle, for the firewall mix.
    pub rules: Option<(Arc<Vec<Rule>>, Arc<FlatOracle>)>,
}

/// Flow templates cycled by the fixed-size generators.
const TEMPLATE_FLOWS: usize = 64;

fn fixed_templates(size: u64, port: Iface, seed: u64) -> Vec<Bytes> {
    (0..TEMPLATE_FLOWS)
        .map(|i| {
            let mut b = FrameBuilder::default();
            b.tuple.src_ip = 0x0A00_0001 | (port.index() as u32) << 8;
            b.tuple.src_port = 1024 + i as u16;
            Bytes::from(b.build(size as usize, (seed as u8) ^ i as u8))
        })
        .collect()
}

/// Start times from a closed-form schedule and frames from a closure.
struct Scheduled<F> {
    k: u64,
    count: u64,
    at: Box<dyn Fn(u64) -> SimTime + Send>,
    frame: F,
}

impl<F: FnMut(u64) -> Bytes + Send> FrameSource for Scheduled<F> {
    fn next_frame(&mut self) -> Option<Frame> {
        if self.k >= self.count {
            return None;
        }
        let k = self.k;
        self.k += 1;
        Some(Frame {
            at: (self.at)(k),
            data: (self.frame)(k),
        })
    }
}

fn load_schedule(link: LinkRate, wire: u64, load: f64) -> Box<dyn Fn(u64) -> SimTime + Send> {
    Box::new(move |k| {
        let base = link.nth_start(wire, k).as_ps();
        if load >= 1.0 {
            SimTime(base)
        } else {
            SimTime((base as f64 / load).floor() as u64)
        }
    })
}

fn fixed_source(
    size: u64,
    port: Iface,
    count: u64,
    seed: u64,
    at: Box<dyn Fn(u64) -> SimTime + Send>,
) -> Box<dyn FrameSource> {
    let t = fixed_templates(size, port, seed);
    Box::new(Scheduled {
        k: 0,
        count,
        at,
        frame: move |k| t[k as usize % TEMPLATE_FLOWS].clone(),
    })
}

/// One source per port, in port order.
pub fn build_sources(
    spec: &TrafficSpec,
    seed: u64,
    env: &TrafficEnv,
) -> Result<Vec<(Iface, Box<dyn FrameSource>)>, TrafficError> {
    let mut out: Vec<(Iface, Box<dyn FrameSource>)> = Vec::new();
    let port_seed = |p: Iface| port_seed(seed, p);
    match spec {
        TrafficSpec::FullThrottle {
            size,
            ports,
            packets,
        } => {
            for &p in ports {
                let wire = size + env.framing_bytes;
                let at = load_schedule(env.link, wire, 1.0);
                out.push((p, fixed_source(*size, p, *packets, port_seed(p), at)));
            }
        }
        TrafficSpec::Paced {
            size,
            ports,
            interval_ns,
            packets,
        } => {
            for &p in ports {
                let iv = *interval_ns;
                let at = Box::new(move |k: u64| SimTime::from_ns(k * iv));
                out.push((p, fixed_source(*size, p, *packets, port_seed(p), at)));
            }
        }
        TrafficSpec::Load {
            size,
            ports,
            load,
            packets,
        } => {
            for &p in ports {
                let at = load_schedule(env.link, size + env.framing_bytes, *load);
                out.push((p, fixed_source(*size, p, *packets, port_seed(p), at)));
            }
        }
        TrafficSpec::Pcap {
            path,
            port,
            speedup,
        } => {
            let recs = read_pcap(path)?;
            out.push((*port, Box::new(Replay::new(recs, speedup.unwrap_or(1.0)))));
        }
        TrafficSpec::FlowSynth {
            port,
            flows,
            packets,
            size,
            load,
            reorder,
            max_displacement,
            burst,
        } => {
            let synth = FlowSynth::new(
                &FlowSynthParams {
                    flows: *flows,
                    packets: *packets,
                    size: *size,
                    reorder: *reorder,
                    max_displacement: *max_displacement,
                    burst: *burst,
                },
                port_seed(*port),
            );
            let at = load_schedule(env.link, size + env.framing_bytes, *load);
            let count = synth.order.len() as u64;
            out.push((
                *port,
                Box::new(Scheduled {
                    k: 0,
                    count,
                    at,
                    frame: move |k| synth.frame(k as usize),
                }),
            ));
        }
        TrafficSpec::FirewallMix {
            ports,
            packets,
            size,
            load,
            ..
        } => {
            let (rules, oracle) = env
                .rules
                .clone()
                .expect("firewall mix needs a rule set");
            for &p in ports {
                let mut mix = FirewallMix::new(spec, seed, p, rules.clone(), oracle.clone());
                let at = load_schedule(env.link, size + env.framing_bytes, *load);
                out.push((
                    p,
                    Box::new(Scheduled {
                        k: 0,
                        count: *packets,
                        at,
                        frame: move |_| mix.next().0,
                    }),
                ));
            }
        }
    }
    Ok(out)
}

/// Generator seed of one port's stream.
pub fn port_seed(seed: u64, port: Iface) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ port.index() as u64
}

/// Which category a firewall-mix frame was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    Blacklisted,
    Clean,
    Ipv6,
}

pub struct FirewallMix {
    rng: ChaCha8Rng,
    rules: Arc<Vec<Rule>>,
    oracle: Arc<FlatOracle>,
    size: u64,
    blacklisted: f64,
    ipv6: f64,
    port: Iface,
}

impl FirewallMix {
    /// The stream of `port`; `spec` must be a firewall mix.
    pub fn new(
        spec: &TrafficSpec,
        seed: u64,
        port: Iface,
        rules: Arc<Vec<Rule>>,
        oracle: Arc<FlatOracle>,
    ) -> Self {
        let TrafficSpec::FirewallMix {
            size,
            blacklisted,
            ipv6,
            ..
        } = *spec
        else {
            panic!("not a firewall mix");
        };
        FirewallMix {
            rng: ChaCha8Rng::seed_from_u64(port_seed(seed, port)),
            rules,
            oracle,
            size,
            blacklisted,
            ipv6,
            port,
        }
    }

    pub fn next(&mut self) -> (Bytes, MixKind) {
        let r: f64 = self.rng.gen();
        let mut b = FrameBuilder::default();
        b.tuple.src_port = self.rng.gen_range(1024..u16::MAX);
        b.tuple.dst_ip = 0x0A01_0000 | self.port.index() as u32;
        let kind = if r < self.blacklisted {
            let rule = self.rules[self.rng.gen_range(0..self.rules.len())];
            b.tuple.src_ip = rule.net | (self.rng.gen::<u32>() & !rule.mask());
            MixKind::Blacklisted
        } else if r < self.blacklisted + self.ipv6 {
            b.ethertype = ETHERTYPE_IPV6;
            MixKind::Ipv6
        } else {
            b.tuple.src_ip = loop {
                let ip = self.rng.gen::<u32>();
                if !self.oracle.contains(ip) {
                    break ip;
                }
            };
            MixKind::Clean
        };
        (Bytes::from(b.build(self.size as usize, r.to_bits() as u8)), kind)
    }
}

/// Builds the firewall-mix stream of one port exactly as the engine sees
/// it, labelled by category.
pub fn firewall_mix_trace(
    spec: &TrafficSpec,
    seed: u64,
    rules: Arc<Vec<Rule>>,
    oracle: Arc<FlatOracle>,
) -> Vec<(Iface, Vec<(Bytes, MixKind)>)> {
    let TrafficSpec::FirewallMix { ports, packets, .. } = spec else {
        return Vec::new();
    };
    ports
        .iter()
        .map(|&p| {
            let mut mix = FirewallMix::new(spec, seed, p, rules.clone(), oracle.clone());
            (p, (0..*packets).map(|_| mix.next()).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSynthParams {
    pub flows: u32,
    pub packets: u64,
    pub size: u64,
    pub reorder: f64,
    pub max_displacement: u32,
    pub burst: u32,
}

/// TCP flows sent in bursts, with a fraction of segments moved later in
/// the stream. Displacement events never overlap and never move the first
/// segment of a flow, so each gap is closed by a single late segment.
pub struct FlowSynth {
    tuples: Vec<FiveTuple>,
    isn: Vec<u32>,
    /// (flow, segment index) in send order.
    pub order: Vec<(u32, u32)>,
    size: u64,
    /// Segments moved later.
    pub displaced: u64,
}

/// Bytes of TCP payload per segment of `size` bytes.
pub fn synth_payload_len(size: u64) -> u32 {
    size.saturating_sub((ETH_HDR_LEN + IPV4_HDR_LEN + TCP_HDR_LEN) as u64) as u32
}

impl FlowSynth {
    pub fn new(p: &FlowSynthParams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tuples: Vec<FiveTuple> = (0..p.flows)
            .map(|f| FiveTuple {
                src_ip: 0x0A10_0000 | f,
                dst_ip: 0xC0A8_0000 | rng.gen_range(1..255u32),
                src_port: rng.gen_range(1024..u16::MAX),
                dst_port: [80, 443, 8080][f as usize % 3],
                proto: IPPROTO_TCP,
            })
            .collect();
        let isn = (0..p.flows).map(|_| rng.gen()).collect();
        let n = p.packets as usize;
        let mut next = vec![0u32; p.flows as usize];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let f = rng.gen_range(0..p.flows);
            for _ in 0..p.burst.min((n - order.len()) as u32) {
                order.push((f, next[f as usize]));
                next[f as usize] += 1;
            }
        }
        let mut displaced = 0;
        if p.reorder > 0.0 {
            // each event consumes d + 1 positions; correct for them so the
            // displaced fraction comes out at `reorder`
            let mean_d = (1 + p.max_displacement) as f64 / 2.0;
            let room = 1.0 - p.reorder * mean_d;
            let rate = if room > 0.0 { (p.reorder / room).min(1.0) } else { 1.0 };
            let mut i = 0;
            while i < n {
                if order[i].1 > 0 && rng.gen_bool(rate) {
                    let d = rng.gen_range(1..=p.max_displacement) as usize;
                    if i + d < n {
                        order[i..=i + d].rotate_left(1);
                        displaced += 1;
                        i += d + 1;
                        continue;
                    }
                }
                i += 1;
            }
        }
        order.shrink_to_fit();
        FlowSynth {
            tuples,
            isn,
            order,
            size: p.size,
            displaced,
        }
    }

    pub fn tuple(&self, flow: u32) -> FiveTuple {
        self.tuples[flow as usize]
    }

    /// Frame `k` of the stream. The first four payload bytes carry the
    /// segment's position in the unperturbed stream order.
    pub fn frame(&self, k: usize) -> Bytes {
        let (f, idx) = self.order[k];
        let seq = self.isn[f as usize].wrapping_add(idx.wrapping_mul(synth_payload_len(self.size)));
        let b = FrameBuilder::tcp(self.tuples[f as usize], seq);
        let mut v = b.build(self.size as usize, f as u8);
        let hdr = b.header_len();
        if v.len() >= hdr + 8 {
            v[hdr..hdr + 4].copy_from_slice(&f.to_be_bytes());
            v[hdr + 4..hdr + 8].copy_from_slice(&idx.to_be_bytes());
        }
        Bytes::from(v)
    }
}

/// One record of a capture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcapRecord {
    pub ts: SimTime,
    pub data: Bytes,
}

/// Reads a classic capture (either byte order, micro- or nanosecond
/// timestamps).
pub fn read_pcap(path: &Path) -> Result<Vec<PcapRecord>, TrafficError> {
    let buf = std::fs::read(path).map_err(|e| TrafficError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_pcap(&buf).map_err(|(offset, msg)| TrafficError::Pcap {
        path: path.display().to_string(),
        offset,
        msg,
    })
}

/// Parses an in-memory capture; errors carry the byte offset of the
/// failing header or record.
pub fn parse_pcap(buf: &[u8]) -> Result<Vec<PcapRecord>, (usize, String)> {
    let (mut rest, parser) = PcapParser::new(buf).map_err(|e| (0, format!("bad file header: {e}")))?;
    let mut out = Vec::new();
    while !rest.is_empty() {
        let offset = buf.len() - rest.len();
        match parser.next_packet(rest) {
            Ok((r, pkt)) => {
                out.push(PcapRecord {
                    ts: SimTime(pkt.timestamp.as_nanos() as u64 * 1_000),
                    data: Bytes::copy_from_slice(&pkt.data),
                });
                rest = r;
            }
            Err(e) => return Err((offset, format!("bad record: {e}"))),
        }
    }
    Ok(out)
}

pub fn write_pcap(path: &Path, records: &[PcapRecord], nanos: bool) -> Result<(), TrafficError> {
    let io = |e: String| TrafficError::Io {
        path: path.display().to_string(),
        msg: e,
    };
    let file = std::fs::File::create(path).map_err(|e| io(e.to_string()))?;
    let header = PcapHeader {
        ts_resolution: if nanos {
            TsResolution::NanoSecond
        } else {
            TsResolution::MicroSecond
        },
        snaplen: 65_535,
        ..Default::default()
    };
    let mut w = PcapWriter::with_header(std::io::BufWriter::new(file), header)
        .map_err(|e| io(e.to_string()))?;
    for r in records {
        let pkt = PcapPacket {
            timestamp: Duration::from_nanos(r.ts.as_ps() / 1_000),
            orig_len: r.data.len() as u32,
            data: Cow::Borrowed(&r.data),
        };
        w.write_packet(&pkt).map_err(|e| io(e.to_string()))?;
    }
    Ok(())
}

/// Replays records relative to the first timestamp.
pub struct Replay {
    recs: std::vec::IntoIter<PcapRecord>,
    t0: Option<SimTime>,
    speedup: f64,
}

impl Replay {
    pub fn new(recs: Vec<PcapRecord>, speedup: f64) -> Self {
        Replay {
            recs: recs.into_iter(),
            t0: None,
            speedup,
        }
    }
}

impl FrameSource for Replay {
    fn next_frame(&mut self) -> Option<Frame> {
        let r = self.recs.next()?;
        let t0 = *self.t0.get_or_insert(r.ts);
        let gap = r.ts.saturating_sub(t0).as_ps();
        let at = if self.speedup == 1.0 {
            gap
        } else {
            (gap as f64 / self.speedup).round() as u64
        };
        Some(Frame {
            at: SimTime(at),
            data: r.data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> TrafficEnv {
        TrafficEnv {
            link: LinkRate::from_gbps(100),
            framing_bytes: 24,
            rules: None,
        }
    }

    fn drain(mut s: Box<dyn FrameSource>) -> Vec<Frame> {
        std::iter::from_fn(|| s.next_frame()).collect()
    }

    #[test]
    fn full_throttle_spacing_is_wire_time() {
        let spec = TrafficSpec::FullThrottle {
            size: 64,
            ports: vec![Iface::Eth0],
            packets: 1001,
        };
        let (_, src) = build_sources(&spec, 1, &env()).unwrap().pop().unwrap();
        let f = drain(src);
        assert_eq!(f[1].at, SimTime(7_040));
        assert_eq!(f[1000].at, SimTime(7_040_000));
        assert!(f.iter().all(|x| x.data.len() == 64));
    }

    #[test]
    fn load_halves_rate() {
        let spec = TrafficSpec::Load {
            size: 1500,
            ports: vec![Iface::Eth1],
            load: 0.5,
            packets: 3,
        };
        let (p, src) = build_sources(&spec, 1, &env()).unwrap().pop().unwrap();
        assert_eq!(p, Iface::Eth1);
        let f = drain(src);
        assert_eq!(f[1].at, SimTime(2 * 1524 * 80));
    }

    #[test]
    fn pcap_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pcap");
        let recs: Vec<PcapRecord> = (0..3)
            .map(|i| PcapRecord {
                ts: SimTime::from_us(10 + i * 5),
                data: Bytes::from(vec![i as u8; 60 + i as usize]),
            })
            .collect();
        write_pcap(&path, &recs, false).unwrap();
        assert_eq!(read_pcap(&path).unwrap(), recs);
        let mut raw = std::fs::read(&path).unwrap();
        raw.truncate(raw.len() - 10);
        let (off, _) = parse_pcap(&raw).unwrap_err();
        assert_eq!(off, 24 + 2 * 16 + 60 + 61);
    }

    #[test]
    fn synth_keeps_flow_starts_in_place() {
        let s = FlowSynth::new(
            &FlowSynthParams {
                flows: 16,
                packets: 20_000,
                size: 128,
                reorder: 0.05,
                max_displacement: 4,
                burst: 8,
            },
            3,
        );
        let mut seen = [false; 16];
        for &(f, i) in &s.order {
            if !seen[f as usize] {
                assert_eq!(i, 0);
                seen[f as usize] = true;
            }
        }
        assert!(s.displaced > 0);
    }
}
