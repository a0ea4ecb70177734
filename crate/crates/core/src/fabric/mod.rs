//! Two-stage data switching between the external interfaces and the
//! processors.
//!
//! Ingress: every source interface owns a wide link into a virtual output
//! queue per processor; the narrow link into a processor is the only
//! arbitration point. Egress: a processor's readout lands in a queue per
//! destination, the cluster's wide link toward that destination arbitrates
//! among the cluster's processors, and the interface link arbitrates among
//! clusters. Transfers inside the fabric are cut-through: a hop forwards its
//! first flit after one cycle and its last flit no earlier than the upstream
//! tail. Full queues hold traffic back; nothing is dropped here.
//!
//! The fabric is a sub-actor. [`Fabric::handle`] consumes its own timer
//! events and reports results through an [`Outbox`].

pub mod arbiter;
pub mod control;
pub mod fifo;

use serde::{Deserialize, Serialize};

use crate::event::EventQueue;
use crate::model::{ClockConfig, LinkRate, RateModel, SimTime};
use crate::packet::Iface;
use arbiter::{Arbitrate, RoundRobin};
use fifo::{FifoChannel, FifoEntry};

pub use arbiter::{rr_arbitrate, FixedPriority};
pub use control::{ControlChannel, CtrlKind, CtrlMsg};

/// Fabric geometry and buffering.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FabricConfig {
    pub pes_per_cluster: usize,
    /// Entries per switch input FIFO.
    pub fifo_depth: usize,
    /// Extra entries held in boundary registers in front of each FIFO.
    pub boundary_regs: usize,
    /// Cycles for one flit to cross a switch hop.
    pub hop_cycles: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            pes_per_cluster: 4,
            fifo_depth: 16,
            boundary_regs: 2,
            hop_cycles: 1,
        }
    }
}

impl FabricConfig {
    pub fn queue_depth(&self) -> usize {
        self.fifo_depth + self.boundary_regs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub pes: usize,
    pub pes_per_cluster: usize,
}

impl Topology {
    pub fn new(pes: usize, pes_per_cluster: usize) -> Result<Self, String> {
        if !matches!(pes_per_cluster, 2 | 4) {
            return Err(format!(
                "processors per cluster must be 2 or 4, got {pes_per_cluster}"
            ));
        }
        if pes == 0 || pes % pes_per_cluster != 0 {
            return Err(format!(
                "{pes} processors do not divide into clusters of {pes_per_cluster}"
            ));
        }
        Ok(Topology {
            pes,
            pes_per_cluster,
        })
    }

    pub fn clusters(&self) -> usize {
        self.pes / self.pes_per_cluster
    }

    pub fn cluster_of(&self, pe: usize) -> usize {
        pe / self.pes_per_cluster
    }

    pub fn local_index(&self, pe: usize) -> usize {
        pe % self.pes_per_cluster
    }

    pub fn pe_at(&self, cluster: usize, local: usize) -> usize {
        cluster * self.pes_per_cluster + local
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HopTiming {
    pub hop: SimTime,
    pub wide: LinkRate,
    pub narrow: LinkRate,
}

impl HopTiming {
    pub fn new(clock: &ClockConfig, rates: &RateModel, hop_cycles: u64) -> Self {
        HopTiming {
            hop: clock.cycles(hop_cycles),
            wide: rates.wide(clock),
            narrow: rates.narrow(clock),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FabricEvent {
    ArbNarrow { pe: usize },
    ArbCluster { cluster: usize, dest: Iface },
    ArbIface { dest: Iface },
}

#[derive(Debug)]
pub enum FabricOutput<T> {
    /// A packet finished crossing into processor `pe`. `tail_at` is when its
    /// last byte is resident.
    Delivered {
        pe: usize,
        src: Iface,
        item: T,
        bytes: u64,
        head_at: SimTime,
        tail_at: SimTime,
    },
    /// An ingress queue entry left; the source may inject again.
    VoqSpace { src: Iface, pe: usize },
    /// An egress queue entry left; the processor may read out again.
    EgressSpace { pe: usize, dest: Iface },
    /// A packet reached the interface MAC.
    ToSink {
        dest: Iface,
        item: T,
        bytes: u64,
        head_at: SimTime,
        tail_at: SimTime,
    },
}

/// Timer requests and results produced while handling one call.
#[derive(Debug)]
pub struct Outbox<T> {
    pub events: Vec<(SimTime, FabricEvent)>,
    pub outputs: Vec<FabricOutput<T>>,
}

impl<T> Default for Outbox<T> {
    fn default() -> Self {
        Outbox {
            events: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

impl<T> Outbox<T> {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty() && self.outputs.is_empty()
    }
}

/// One arbitrated link: busy horizon plus a deduplicated wake-up timer.
#[derive(Clone, Debug)]
struct Link {
    free_at: SimTime,
    wake_at: Option<SimTime>,
    rr: RoundRobin,
    busy: SimTime,
    grants: u64,
}

impl Link {
    fn new(inputs: usize) -> Self {
        Link {
            free_at: SimTime::ZERO,
            wake_at: None,
            rr: RoundRobin::new(inputs),
            busy: SimTime::ZERO,
            grants: 0,
        }
    }

    fn wake<T>(&mut self, at: SimTime, ev: FabricEvent, out: &mut Outbox<T>) {
        if self.wake_at.is_none_or(|w| at < w) {
            self.wake_at = Some(at);
            out.events.push((at, ev));
        }
    }

    fn fired(&mut self, now: SimTime) {
        if self.wake_at == Some(now) {
            self.wake_at = None;
        }
    }

    /// Occupies the link from `now` and returns (head, tail) at the far end.
    fn transfer(
        &mut self,
        now: SimTime,
        rate: LinkRate,
        bytes: u64,
        upstream_tail: SimTime,
        hop: SimTime,
    ) -> (SimTime, SimTime) {
        let end = (now + rate.ser_time(bytes)).max(upstream_tail);
        self.busy += end - now;
        self.grants += 1;
        self.free_at = end;
        (now + hop, end + hop)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub grants: u64,
    pub busy: SimTime,
}

pub struct Fabric<T> {
    topo: Topology,
    timing: HopTiming,
    depth: usize,
    src_free: [SimTime; Iface::COUNT],
    in_voq: Vec<FifoChannel<T>>,
    narrow: Vec<Link>,
    out_voq: Vec<FifoChannel<T>>,
    out_reserved: Vec<usize>,
    cluster: Vec<Link>,
    iface_fifo: Vec<FifoChannel<T>>,
    iface: Vec<Link>,
    sink_credit: [u64; Iface::COUNT],
}

impl<T> Fabric<T> {
    /// `sink_bytes[d]` is the buffer space of interface `d`'s MAC.
    pub fn new(
        topo: Topology,
        timing: HopTiming,
        depth: usize,
        sink_bytes: [u64; Iface::COUNT],
    ) -> Self {
        assert!(depth > 0);
        let pes = topo.pes;
        let clusters = topo.clusters();
        let width = 128;
        Fabric {
            topo,
            timing,
            depth,
            src_free: [SimTime::ZERO; Iface::COUNT],
            in_voq: (0..Iface::COUNT * pes)
                .map(|_| FifoChannel::new(depth, width))
                .collect(),
            narrow: (0..pes).map(|_| Link::new(Iface::COUNT)).collect(),
            out_voq: (0..pes * Iface::COUNT)
                .map(|_| FifoChannel::new(depth, width * 4))
                .collect(),
            out_reserved: vec![0; pes * Iface::COUNT],
            cluster: (0..clusters * Iface::COUNT)
                .map(|_| Link::new(topo.pes_per_cluster))
                .collect(),
            iface_fifo: (0..clusters * Iface::COUNT)
                .map(|_| FifoChannel::new(depth, width * 4))
                .collect(),
            iface: (0..Iface::COUNT).map(|_| Link::new(clusters)).collect(),
            sink_credit: sink_bytes,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn timing(&self) -> &HopTiming {
        &self.timing
    }

    fn in_idx(&self, src: Iface, pe: usize) -> usize {
        src.index() * self.topo.pes + pe
    }

    fn out_idx(&self, pe: usize, dest: Iface) -> usize {
        pe * Iface::COUNT + dest.index()
    }

    fn cl_idx(&self, cluster: usize, dest: Iface) -> usize {
        cluster * Iface::COUNT + dest.index()
    }

    pub fn ingress_has_space(&self, src: Iface, pe: usize) -> bool {
        self.in_voq[self.in_idx(src, pe)].has_space()
    }

    /// Sends a packet from interface `src` toward processor `pe`, starting
    /// no earlier than `ready_at`. Hands the item back if the queue is full.
    pub fn inject(
        &mut self,
        src: Iface,
        pe: usize,
        item: T,
        bytes: u64,
        ready_at: SimTime,
        out: &mut Outbox<T>,
    ) -> Result<SimTime, T> {
        let idx = self.in_idx(src, pe);
        if !self.in_voq[idx].has_space() {
            return Err(item);
        }
        let start = ready_at.max(self.src_free[src.index()]);
        let end = start + self.timing.wide.ser_time(bytes);
        self.src_free[src.index()] = end;
        // two switch stages between the source and the processor queue
        let head_at = start + self.timing.hop * 2;
        let tail_at = end + self.timing.hop * 2;
        self.in_voq[idx]
            .push(FifoEntry {
                item,
                bytes,
                head_at,
                tail_at,
            })
            .unwrap_or_else(|_| unreachable!());
        self.narrow[pe].wake(head_at, FabricEvent::ArbNarrow { pe }, out);
        Ok(start)
    }

    /// Readout slots toward `dest` not yet claimed by an in-progress readout.
    pub fn egress_has_space(&self, pe: usize, dest: Iface) -> bool {
        let idx = self.out_idx(pe, dest);
        self.out_voq[idx].occupancy() + self.out_reserved[idx] < self.depth
    }

    /// Claims an egress queue entry for a readout about to start.
    pub fn reserve_out(&mut self, pe: usize, dest: Iface) -> bool {
        if !self.egress_has_space(pe, dest) {
            return false;
        }
        let idx = self.out_idx(pe, dest);
        self.out_reserved[idx] += 1;
        true
    }

    /// A readout reserved with [`reserve_out`](Self::reserve_out) finished
    /// writing its last byte at `now`.
    pub fn readout_done(
        &mut self,
        now: SimTime,
        pe: usize,
        dest: Iface,
        item: T,
        bytes: u64,
        out: &mut Outbox<T>,
    ) {
        let idx = self.out_idx(pe, dest);
        assert!(self.out_reserved[idx] > 0, "readout without reservation");
        self.out_reserved[idx] -= 1;
        let at = now + self.timing.hop;
        self.out_voq[idx]
            .push(FifoEntry {
                item,
                bytes,
                head_at: at,
                tail_at: at,
            })
            .unwrap_or_else(|_| unreachable!("reserved entry missing"));
        let cluster = self.topo.cluster_of(pe);
        let ci = self.cl_idx(cluster, dest);
        self.cluster[ci].wake(at, FabricEvent::ArbCluster { cluster, dest }, out);
    }

    /// The MAC of `dest` released `bytes` of buffer space.
    pub fn sink_release(&mut self, now: SimTime, dest: Iface, bytes: u64, out: &mut Outbox<T>) {
        self.sink_credit[dest.index()] += bytes;
        self.iface[dest.index()].wake(now, FabricEvent::ArbIface { dest }, out);
    }

    pub fn handle(&mut self, now: SimTime, ev: FabricEvent, out: &mut Outbox<T>) {
        match ev {
            FabricEvent::ArbNarrow { pe } => self.arb_narrow(now, pe, out),
            FabricEvent::ArbCluster { cluster, dest } => self.arb_cluster(now, cluster, dest, out),
            FabricEvent::ArbIface { dest } => self.arb_iface(now, dest, out),
        }
    }

    fn arb_narrow(&mut self, now: SimTime, pe: usize, out: &mut Outbox<T>) {
        let ev = FabricEvent::ArbNarrow { pe };
        self.narrow[pe].fired(now);
        if self.narrow[pe].free_at > now {
            let at = self.narrow[pe].free_at;
            self.narrow[pe].wake(at, ev, out);
            return;
        }
        let pes = self.topo.pes;
        let voqs = &self.in_voq;
        let granted = self.narrow[pe]
            .rr
            .grant(&mut |s| voqs[s * pes + pe].head_ready(now));
        if let Some(s) = granted {
            let src = Iface::ALL[s];
            let e = self.in_voq[s * pes + pe].pop().unwrap();
            let (head_at, tail_at) = self.narrow[pe].transfer(
                now,
                self.timing.narrow,
                e.bytes,
                e.tail_at,
                self.timing.hop,
            );
            out.outputs.push(FabricOutput::Delivered {
                pe,
                src,
                item: e.item,
                bytes: e.bytes,
                head_at,
                tail_at,
            });
            out.outputs.push(FabricOutput::VoqSpace { src, pe });
        }
        let next = (0..Iface::COUNT)
            .filter_map(|s| self.in_voq[s * pes + pe].head_ready_at())
            .min();
        if let Some(t) = next {
            let at = t.max(self.narrow[pe].free_at).max(now);
            self.narrow[pe].wake(at, ev, out);
        }
    }

    fn arb_cluster(&mut self, now: SimTime, cluster: usize, dest: Iface, out: &mut Outbox<T>) {
        let ev = FabricEvent::ArbCluster { cluster, dest };
        let ci = self.cl_idx(cluster, dest);
        self.cluster[ci].fired(now);
        if self.cluster[ci].free_at > now {
            let at = self.cluster[ci].free_at;
            self.cluster[ci].wake(at, ev, out);
            return;
        }
        if !self.iface_fifo[ci].has_space() {
            // woken again when the interface link drains this FIFO
            return;
        }
        let topo = self.topo;
        let voqs = &self.out_voq;
        let granted = self.cluster[ci].rr.grant(&mut |l| {
            voqs[topo.pe_at(cluster, l) * Iface::COUNT + dest.index()].head_ready(now)
        });
        if let Some(l) = granted {
            let pe = topo.pe_at(cluster, l);
            let oi = self.out_idx(pe, dest);
            let e = self.out_voq[oi].pop().unwrap();
            let (head_at, tail_at) = self.cluster[ci].transfer(
                now,
                self.timing.wide,
                e.bytes,
                e.tail_at,
                self.timing.hop,
            );
            self.iface_fifo[ci]
                .push(FifoEntry {
                    item: e.item,
                    bytes: e.bytes,
                    head_at,
                    tail_at,
                })
                .unwrap_or_else(|_| unreachable!());
            out.outputs.push(FabricOutput::EgressSpace { pe, dest });
            self.iface[dest.index()].wake(head_at, FabricEvent::ArbIface { dest }, out);
        }
        let next = (0..topo.pes_per_cluster)
            .filter_map(|l| {
                self.out_voq[self.out_idx(topo.pe_at(cluster, l), dest)].head_ready_at()
            })
            .min();
        if let Some(t) = next {
            let at = t.max(self.cluster[ci].free_at).max(now);
            self.cluster[ci].wake(at, ev, out);
        }
    }

    fn arb_iface(&mut self, now: SimTime, dest: Iface, out: &mut Outbox<T>) {
        let ev = FabricEvent::ArbIface { dest };
        let d = dest.index();
        self.iface[d].fired(now);
        if self.iface[d].free_at > now {
            let at = self.iface[d].free_at;
            self.iface[d].wake(at, ev, out);
            return;
        }
        let credit = self.sink_credit[d];
        let fifos = &self.iface_fifo;
        let granted = self.iface[d].rr.grant(&mut |c| {
            fifos[c * Iface::COUNT + d]
                .head()
                .is_some_and(|e| e.head_at <= now && e.bytes <= credit)
        });
        if let Some(c) = granted {
            let ci = self.cl_idx(c, dest);
            let e = self.iface_fifo[ci].pop().unwrap();
            self.sink_credit[d] -= e.bytes;
            let (head_at, tail_at) = self.iface[d].transfer(
                now,
                self.timing.wide,
                e.bytes,
                e.tail_at,
                self.timing.hop,
            );
            out.outputs.push(FabricOutput::ToSink {
                dest,
                item: e.item,
                bytes: e.bytes,
                head_at,
                tail_at,
            });
            self.cluster[ci].wake(now, FabricEvent::ArbCluster { cluster: c, dest }, out);
        }
        // without sink credit the next attempt comes from `sink_release`
        let next = (0..self.topo.clusters())
            .filter_map(|c| self.iface_fifo[c * Iface::COUNT + d].head())
            .filter(|e| e.bytes <= self.sink_credit[d])
            .map(|e| e.head_at)
            .min();
        if let Some(t) = next {
            let at = t.max(self.iface[d].free_at).max(now);
            self.iface[d].wake(at, ev, out);
        }
    }

    pub fn narrow_stats(&self, pe: usize) -> LinkStats {
        let l = &self.narrow[pe];
        LinkStats {
            grants: l.grants,
            busy: l.busy,
        }
    }

    pub fn iface_stats(&self, dest: Iface) -> LinkStats {
        let l = &self.iface[dest.index()];
        LinkStats {
            grants: l.grants,
            busy: l.busy,
        }
    }

    /// Packets currently buffered anywhere in the fabric.
    pub fn in_flight(&self) -> usize {
        self.in_voq.iter().map(|f| f.occupancy()).sum::<usize>()
            + self.out_voq.iter().map(|f| f.occupancy()).sum::<usize>()
            + self.iface_fifo.iter().map(|f| f.occupancy()).sum::<usize>()
    }

    /// Deepest occupancy any fabric FIFO ever reached.
    pub fn high_water(&self) -> usize {
        self.in_voq
            .iter()
            .chain(self.out_voq.iter())
            .chain(self.iface_fifo.iter())
            .map(|f| f.high_water())
            .max()
            .unwrap_or(0)
    }
}

/// Fabric endpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Iface(Iface),
    Pe(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteRequest {
    pub at: SimTime,
    pub src: Endpoint,
    pub dst: Endpoint,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RouteResult {
    /// First byte at the destination.
    pub head_at: SimTime,
    /// Last byte at the destination.
    pub tail_at: SimTime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
pub enum RouteError {
    #[error("route {0:?} -> {1:?} does not cross the data fabric")]
    Unsupported(Endpoint, Endpoint),
    #[error("processor {0} does not exist")]
    NoSuchPe(usize),
}

/// Routes a batch of packets through an otherwise idle fabric with
/// unbounded sinks. Interface-to-processor requests enter at the source
/// wide link; processor-to-interface requests enter as completed readouts.
pub fn route_batch(
    topo: Topology,
    timing: HopTiming,
    depth: usize,
    reqs: &[RouteRequest],
) -> Result<Vec<RouteResult>, RouteError> {
    enum Ev {
        Start(usize),
        Fabric(FabricEvent),
    }
    for r in reqs {
        match (r.src, r.dst) {
            (Endpoint::Iface(_), Endpoint::Pe(p)) | (Endpoint::Pe(p), Endpoint::Iface(_)) => {
                if p >= topo.pes {
                    return Err(RouteError::NoSuchPe(p));
                }
            }
            (a, b) => return Err(RouteError::Unsupported(a, b)),
        }
    }
    let mut fabric: Fabric<usize> = Fabric::new(topo, timing, depth, [u64::MAX / 2; Iface::COUNT]);
    let mut q = EventQueue::new();
    for (i, r) in reqs.iter().enumerate() {
        q.schedule(r.at, Ev::Start(i));
    }
    let mut results = vec![None; reqs.len()];
    let mut out = Outbox::default();
    while let Some((now, ev)) = q.pop() {
        match ev {
            Ev::Start(i) => {
                let r = reqs[i];
                match (r.src, r.dst) {
                    (Endpoint::Iface(src), Endpoint::Pe(pe)) => {
                        if fabric.inject(src, pe, i, r.bytes, now, &mut out).is_err() {
                            // retry once the queue drains
                            q.schedule(now + timing.hop, Ev::Start(i));
                        }
                    }
                    (Endpoint::Pe(pe), Endpoint::Iface(dest)) => {
                        if fabric.reserve_out(pe, dest) {
                            let done = now + timing.narrow.ser_time(r.bytes);
                            fabric.readout_done(done, pe, dest, i, r.bytes, &mut out);
                        } else {
                            q.schedule(now + timing.hop, Ev::Start(i));
                        }
                    }
                    _ => unreachable!(),
                }
            }
            Ev::Fabric(fe) => fabric.handle(now, fe, &mut out),
        }
        for (at, fe) in out.events.drain(..) {
            q.schedule(at, Ev::Fabric(fe));
        }
        for o in out.outputs.drain(..) {
            match o {
                FabricOutput::Delivered {
                    item,
                    head_at,
                    tail_at,
                    ..
                }
                | FabricOutput::ToSink {
                    item,
                    head_at,
                    tail_at,
                    ..
                } => results[item] = Some(RouteResult { head_at, tail_at }),
                FabricOutput::VoqSpace { .. } | FabricOutput::EgressSpace { .. } => {}
            }
        }
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("route never completed"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timing() -> HopTiming {
        HopTiming::new(&ClockConfig::default(), &RateModel::default(), 1)
    }

    fn topo16() -> Topology {
        Topology::new(16, 4).unwrap()
    }

    fn ingress(at: u64, src: Iface, pe: usize, bytes: u64) -> RouteRequest {
        RouteRequest {
            at: SimTime(at),
            src: Endpoint::Iface(src),
            dst: Endpoint::Pe(pe),
            bytes,
        }
    }

    #[test]
    fn idle_ingress_pays_narrow_serialization() {
        let r = route_batch(topo16(), timing(), 18, &[ingress(0, Iface::Eth0, 5, 1500)]).unwrap();
        // two stage hops, 375 ns on the narrow link, one hop into the core
        assert_eq!(r[0].tail_at, SimTime(8_000 + 375_000 + 4_000));
        assert_eq!(r[0].head_at, SimTime(12_000));
    }

    #[test]
    fn distinct_destinations_do_not_interfere() {
        let both = route_batch(
            topo16(),
            timing(),
            18,
            &[ingress(0, Iface::Eth0, 0, 1500), ingress(0, Iface::Eth1, 1, 1500)],
        )
        .unwrap();
        let alone = route_batch(topo16(), timing(), 18, &[ingress(0, Iface::Eth1, 1, 1500)]).unwrap();
        assert_eq!(both[1], alone[0]);
        assert_eq!(both[0].tail_at, both[1].tail_at);
    }

    #[test]
    fn same_destination_serializes_on_narrow_link() {
        let r = route_batch(
            topo16(),
            timing(),
            18,
            &[ingress(0, Iface::Eth0, 0, 1500), ingress(0, Iface::Eth1, 0, 1500)],
        )
        .unwrap();
        assert_eq!(r[1].tail_at - r[0].tail_at, SimTime::from_ns(375));
    }

    #[test]
    fn idle_egress_is_cut_through() {
        let r = route_batch(
            topo16(),
            timing(),
            18,
            &[RouteRequest {
                at: SimTime(0),
                src: Endpoint::Pe(3),
                dst: Endpoint::Iface(Iface::Eth1),
                bytes: 1500,
            }],
        )
        .unwrap();
        // readout, then one hop into the queue and one per switch stage
        assert_eq!(r[0].head_at, SimTime(375_000 + 3 * 4_000));
    }

    #[test]
    fn rejects_non_fabric_routes() {
        let req = RouteRequest {
            at: SimTime(0),
            src: Endpoint::Pe(0),
            dst: Endpoint::Pe(1),
            bytes: 64,
        };
        assert!(route_batch(topo16(), timing(), 18, &[req]).is_err());
    }

    #[test]
    fn topology_validation() {
        assert_eq!(Topology::new(8, 2).unwrap().clusters(), 4);
        assert!(Topology::new(16, 3).is_err());
        assert!(Topology::new(6, 4).is_err());
    }

    #[test]
    fn full_sink_applies_backpressure() {
        let mut f: Fabric<u32> = Fabric::new(topo16(), timing(), 2, [0; Iface::COUNT]);
        let mut out = Outbox::default();
        assert!(f.reserve_out(0, Iface::Eth0));
        assert!(f.reserve_out(0, Iface::Eth0));
        assert!(!f.reserve_out(0, Iface::Eth0));
        f.readout_done(SimTime(0), 0, Iface::Eth0, 1, 64, &mut out);
        f.readout_done(SimTime(0), 0, Iface::Eth0, 2, 64, &mut out);
        let mut q = EventQueue::new();
        loop {
            for (at, e) in out.events.drain(..) {
                q.schedule(at, e);
            }
            assert!(out
                .outputs
                .iter()
                .all(|o| !matches!(o, FabricOutput::ToSink { .. })));
            out.outputs.clear();
            let Some((now, e)) = q.pop() else { break };
            f.handle(now, e, &mut out);
        }
        assert_eq!(f.in_flight(), 2);
        let now = q.now();
        f.sink_release(now, Iface::Eth0, 64, &mut out);
        while let Some((at, e)) = out.events.pop() {
            q.schedule(at, e);
        }
        let mut sunk = 0;
        while let Some((now, e)) = q.pop() {
            f.handle(now, e, &mut out);
            for (at, e) in out.events.drain(..) {
                q.schedule(at, e);
            }
            sunk += out
                .outputs
                .drain(..)
                .filter(|o| matches!(o, FabricOutput::ToSink { .. }))
                .count();
        }
        assert_eq!(sunk, 1);
        assert_eq!(f.in_flight(), 1);
    }
}
