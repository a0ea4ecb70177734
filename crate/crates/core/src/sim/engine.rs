//! The event loop tying tester, MACs, scheduler, fabric and processors
//! together.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;

use bytes::Bytes;
use slab::Slab;

use crate::accelerators::blacklist::{parse_rules, synthetic_rules};
use crate::accelerators::{
    Accelerator, BlacklistMatcher, FirewallAccel, FirewallHandler, FlatOracle, Rule,
    StreamAccelerator, StreamScanHandler,
};
use crate::event::EventQueue;
use crate::fabric::{
    ControlChannel, CtrlMsg, Fabric, FabricEvent, FabricOutput, HopTiming, Outbox,
};
use crate::flow::ReorderHandler;
use crate::messaging::{BcastEndpoint, BcastWriterHandler, BroadcastNet, Delivery, TwoStepHandler};
use crate::model::{ClockConfig, LinkRate, SimTime};
use crate::packet::{parse_five_tuple, Iface, Packet};
use crate::processor::handler::{Action, HandlerOutcome, HandlerProgram};
use crate::processor::slots::SlotState;
use crate::processor::{
    CoreState, ForwardMode, Forwarder, HostCommand, HostResponse, Processor, ProcessorError,
    Sink, IRQ_EVICT,
};
use crate::scheduler::{
    Assignment, Policy, Scheduler, SlotRequest, REG_ENABLE, REG_ENABLE_MASK, REG_FLUSH,
};

use super::config::{ConfigError, HandlerSpec, HostOp, RulesSource, SimConfig};
use super::metrics::{
    Conservation, DropStats, HostLogEntry, IfaceStats, LatencyRecorder, MetricsSnapshot, PeStats,
    ReconfigRecord,
};
use super::traffic::{build_sources, Frame, FrameSource, TrafficEnv, TrafficError};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error("rule list: {0}")]
    Rules(String),
    #[error("invariant violated at {at}: {msg}\nrecent events:\n{}", recent.join("\n"))]
    Invariant {
        at: SimTime,
        msg: String,
        recent: Vec<String>,
    },
}

/// Internal failure before event context is attached.
#[derive(Debug)]
struct Violation(String);

impl From<ProcessorError> for Violation {
    fn from(e: ProcessorError) -> Self {
        Violation(e.to_string())
    }
}

impl From<crate::scheduler::SchedError> for Violation {
    fn from(e: crate::scheduler::SchedError) -> Self {
        Violation(e.to_string())
    }
}

type Step = Result<(), Violation>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(Violation(format!($($arg)+)));
        }
    };
}

#[derive(Clone, Copy, Debug)]
enum Ev {
    WireStart(Iface),
    RxDone(Iface),
    SourceTry(Iface),
    Fabric(FabricEvent),
    LoadDone { pe: usize, key: usize },
    CoreDone(usize),
    TxTry(usize),
    ReadoutDone(usize),
    Ctrl(CtrlMsg),
    TesterRx(Iface),
    SinkRelease { dest: Iface, bytes: u64 },
    LoopbackArrive(usize),
    BcastTick,
    BcastDeliver(Delivery),
    Host(usize),
    Reconfig(usize),
    Horizon,
}

/// A packet travelling through the fabric toward processor `pe`'s `slot`
/// (or toward an interface, where those fields are unused).
struct Flight {
    pkt: Packet,
    pe: usize,
    slot: u16,
}

#[derive(Clone, Copy, Debug)]
struct TxReq {
    slot: u16,
    dest: Iface,
    bytes: u64,
    ready_at: SimTime,
    /// Loopback destination processor and its granted slot.
    lb: Option<(usize, u16)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Quiesce,
    Evicting,
    Drain,
    Saving,
    Reloading,
    Restoring,
}

struct Reconf {
    phase: Phase,
    spec: Option<HandlerSpec>,
    rules: Option<RuleSet>,
    reload_only: bool,
    rec: ReconfigRecord,
    drops_at_start: u64,
}

struct PeState {
    proc: Processor,
    current: Option<HandlerOutcome>,
    core_end: SimTime,
    core_pending: bool,
    wait_bcast: bool,
    tx_q: VecDeque<TxReq>,
    tx_busy: bool,
    tx_try_pending: bool,
    tx_wait_egress: bool,
    via_sched: HashMap<u16, crate::processor::handler::Descriptor>,
    lb_wait: HashMap<u16, (u64, usize)>,
    reconf: Option<Reconf>,
    spec: HandlerSpec,
    rules: Option<RuleSet>,
}

struct PortState {
    source: Option<Box<dyn FrameSource>>,
    next: Option<Frame>,
    wire_free: SimTime,
    on_wire: VecDeque<Packet>,
    rx: VecDeque<(Packet, SimTime)>,
    rx_bytes: u64,
    decision_at: SimTime,
    try_pending: bool,
    blocked: bool,
    egress_free: SimTime,
    egress_q: VecDeque<Packet>,
    stats: IfaceStats,
}

impl PortState {
    fn new() -> Self {
        PortState {
            source: None,
            next: None,
            wire_free: SimTime::ZERO,
            on_wire: VecDeque::new(),
            rx: VecDeque::new(),
            rx_bytes: 0,
            decision_at: SimTime::ZERO,
            try_pending: false,
            blocked: false,
            egress_free: SimTime::ZERO,
            egress_q: VecDeque::new(),
            stats: IfaceStats::default(),
        }
    }
}

pub type EgressHook = Box<dyn FnMut(&Packet, Iface, SimTime) + Send>;
pub type AssignHook = Box<dyn FnMut(&Packet, usize, Option<u32>) + Send>;

/// Observers called as packets leave the device and as the scheduler
/// places them.
#[derive(Default)]
pub struct Hooks {
    pub on_egress: Option<EgressHook>,
    pub on_assign: Option<AssignHook>,
}

/// A blacklist in both matcher and reference form.
#[derive(Clone)]
pub struct RuleSet {
    pub rules: Arc<Vec<Rule>>,
    pub matcher: Arc<BlacklistMatcher>,
    pub oracle: Arc<FlatOracle>,
}

impl RuleSet {
    pub fn load(src: &RulesSource) -> Result<Self, SimError> {
        let text = match src {
            RulesSource::Synthetic { seed, count } => synthetic_rules(*seed, *count),
            RulesSource::File { path } => std::fs::read_to_string(path)
                .map_err(|e| SimError::Rules(format!("{}: {e}", path.display())))?,
        };
        let rules = parse_rules(&text).map_err(|e| SimError::Rules(e.to_string()))?;
        Ok(RuleSet {
            matcher: Arc::new(BlacklistMatcher::build(&rules)),
            oracle: Arc::new(FlatOracle::build(&rules)),
            rules: Arc::new(rules),
        })
    }

    /// The rule set of the first firewall in the configuration, else the
    /// default synthetic list.
    pub fn for_config(cfg: &SimConfig) -> Result<Self, SimError> {
        let specs = std::iter::once(&cfg.handler).chain(cfg.overrides.iter().map(|o| &o.handler));
        for s in specs {
            if let HandlerSpec::Firewall { rules } = s {
                return Self::load(rules);
            }
        }
        Self::load(&RulesSource::default())
    }
}

/// Rule sets already loaded, keyed by where they came from.
#[derive(Default)]
struct RuleCache(Vec<(RulesSource, RuleSet)>);

impl RuleCache {
    fn get(&mut self, src: &RulesSource) -> Result<RuleSet, SimError> {
        if let Some((_, r)) = self.0.iter().find(|(s, _)| s == src) {
            return Ok(r.clone());
        }
        let r = RuleSet::load(src)?;
        self.0.push((src.clone(), r.clone()));
        Ok(r)
    }

    fn for_spec(&mut self, spec: &HandlerSpec) -> Result<Option<RuleSet>, SimError> {
        match spec {
            HandlerSpec::Firewall { rules } => self.get(rules).map(Some),
            _ => Ok(None),
        }
    }
}

fn build_program(
    spec: &HandlerSpec,
    cfg: &SimConfig,
    rules: Option<&RuleSet>,
) -> (Box<dyn HandlerProgram>, Option<Box<dyn Accelerator>>) {
    match spec {
        HandlerSpec::Forwarder { port } => (
            Box::new(Forwarder {
                mode: port.map_or(ForwardMode::PortFlip, ForwardMode::Fixed),
            }),
            None,
        ),
        HandlerSpec::Sink => (Box::new(Sink), None),
        HandlerSpec::Firewall { .. } => {
            let m = rules.expect("rule set loaded").matcher.clone();
            (
                Box::new(FirewallHandler::default()),
                Some(Box::new(FirewallAccel::new(m))),
            )
        }
        HandlerSpec::StreamScan { payload_offset } => (
            Box::new(StreamScanHandler {
                payload_offset: *payload_offset,
                results: 0,
            }),
            Some(Box::new(StreamAccelerator::new(cfg.stream))),
        ),
        HandlerSpec::TwoStep { out } => (Box::new(TwoStepHandler::new(cfg.pes, *out)), None),
        HandlerSpec::FlowReorder => (Box::new(ReorderHandler::new(&cfg.flow)), None),
        HandlerSpec::BcastWriter => (
            Box::new(BcastWriterHandler {
                writes: 0,
                region_bytes: cfg.broadcast.region_bytes,
            }),
            None,
        ),
    }
}

const RECENT_EVENTS: usize = 64;

pub struct Engine {
    cfg: SimConfig,
    clock: ClockConfig,
    cyc: SimTime,
    mac_in: SimTime,
    mac_out: SimTime,
    ext: LinkRate,
    host_rate: LinkRate,
    lb_rate: LinkRate,
    narrow: LinkRate,
    state_rate: LinkRate,
    q: EventQueue<Ev>,
    fabric: Fabric<usize>,
    outbox: Outbox<usize>,
    flights: Slab<Flight>,
    sched: Scheduler,
    ctrl: ControlChannel,
    pes: Vec<PeState>,
    ports: Vec<PortState>,
    bcast: BroadcastNet,
    bcast_wake: Option<SimTime>,
    endpoints: Vec<BcastEndpoint>,
    lb_free: SimTime,
    rules: Option<RuleSet>,
    rule_cache: RuleCache,
    hooks: Hooks,
    drops: DropStats,
    latency: LatencyRecorder,
    bcast_latency: LatencyRecorder,
    loopback_frames: u64,
    reconfigs: Vec<ReconfigRecord>,
    host_log: Vec<HostLogEntry>,
    pending_dumps: Vec<(usize, usize)>,
    recent: VecDeque<(SimTime, Ev)>,
    log: Vec<String>,
    events: u64,
    stopped: bool,
    reconfiguring: usize,
}

impl Engine {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let clock = cfg.clock;
        let cyc = clock.cycles(1);
        let topo = cfg.topology();
        let (mac_in, mac_out) = cfg.mac_constants();
        let needs_rules = std::iter::once(&cfg.handler)
            .chain(cfg.overrides.iter().map(|o| &o.handler))
            .any(|s| matches!(s, HandlerSpec::Firewall { .. }))
            || cfg
                .traffic
                .iter()
                .any(|t| matches!(t, super::config::TrafficSpec::FirewallMix { .. }));
        let mut rule_cache = RuleCache::default();
        let rules = if needs_rules {
            let first = std::iter::once(&cfg.handler)
                .chain(cfg.overrides.iter().map(|o| &o.handler))
                .find_map(|s| match s {
                    HandlerSpec::Firewall { rules } => Some(rules.clone()),
                    _ => None,
                })
                .unwrap_or_default();
            Some(rule_cache.get(&first)?)
        } else {
            None
        };
        let layout = &cfg.processor.layout;
        let mut sched = Scheduler::new(cfg.pes, &cfg.scheduler);
        let mut pes = Vec::with_capacity(cfg.pes);
        for pe in 0..cfg.pes {
            let spec = cfg.handler_for(pe).clone();
            let pe_rules = rule_cache.for_spec(&spec)?;
            let (prog, acc) = build_program(&spec, &cfg, pe_rules.as_ref());
            sched
                .register_slots(pe, layout.slot_count, layout.slot_size)
                .expect("processor in range");
            pes.push(PeState {
                proc: Processor::new(pe, cfg.processor.clone(), prog, acc),
                current: None,
                core_end: SimTime::ZERO,
                core_pending: false,
                wait_bcast: false,
                tx_q: VecDeque::new(),
                tx_busy: false,
                tx_try_pending: false,
                tx_wait_egress: false,
                via_sched: HashMap::new(),
                lb_wait: HashMap::new(),
                reconf: None,
                spec,
                rules: pe_rules,
            });
        }
        let mut sink = [cfg.timing.tx_fifo_bytes; Iface::COUNT];
        sink[Iface::Loopback.index()] = cfg.timing.tx_fifo_bytes;
        let fabric = Fabric::new(
            topo,
            HopTiming::new(&clock, &cfg.rates, cfg.fabric.hop_cycles),
            cfg.fabric.queue_depth(),
            sink,
        );
        let env = TrafficEnv {
            link: cfg.rates.external(),
            framing_bytes: cfg.timing.framing_bytes,
            rules: rules
                .as_ref()
                .map(|r| (r.rules.clone(), r.oracle.clone())),
        };
        let mut ports: Vec<PortState> = (0..Iface::COUNT).map(|_| PortState::new()).collect();
        for (i, spec) in cfg.traffic.iter().enumerate() {
            for (p, src) in build_sources(spec, cfg.seed.wrapping_add(i as u64), &env)? {
                if ports[p.index()].source.is_some() {
                    return Err(ConfigError::Invalid(format!(
                        "two traffic sources on {}",
                        p.name()
                    ))
                    .into());
                }
                ports[p.index()].source = Some(src);
            }
        }
        let mut e = Engine {
            clock,
            cyc,
            mac_in: SimTime(mac_in),
            mac_out: SimTime(mac_out),
            ext: cfg.rates.external(),
            host_rate: LinkRate::from_gbps(cfg.timing.host_gbps),
            lb_rate: LinkRate::from_gbps(cfg.loopback.gbps),
            narrow: cfg.rates.narrow(&clock),
            state_rate: LinkRate::from_gbps(cfg.reconfig.state_gbps),
            q: EventQueue::new(),
            fabric,
            outbox: Outbox::default(),
            flights: Slab::new(),
            sched,
            ctrl: ControlChannel::new(clock.cycles(cfg.timing.ctrl_latency_cycles), cfg.pes),
            pes,
            ports,
            bcast: BroadcastNet::new(cfg.broadcast.clone(), topo),
            bcast_wake: None,
            endpoints: vec![BcastEndpoint::default(); cfg.pes],
            lb_free: SimTime::ZERO,
            rules,
            rule_cache,
            hooks: Hooks::default(),
            drops: DropStats::default(),
            latency: LatencyRecorder::default(),
            bcast_latency: LatencyRecorder::default(),
            loopback_frames: 0,
            reconfigs: Vec::new(),
            host_log: Vec::new(),
            pending_dumps: Vec::new(),
            recent: VecDeque::with_capacity(RECENT_EVENTS),
            log: Vec::new(),
            events: 0,
            stopped: false,
            reconfiguring: 0,
            cfg,
        };
        for p in Iface::ALL {
            e.pull_frame(p);
        }
        for (i, s) in e.cfg.script.iter().enumerate() {
            e.q.schedule(SimTime::from_ns(s.at_ns), Ev::Host(i));
        }
        if let Some(h) = e.cfg.run.horizon_ns {
            e.q.schedule(SimTime::from_ns(h), Ev::Horizon);
        }
        Ok(e)
    }

    pub fn set_hooks(&mut self, hooks: Hooks) {
        self.hooks = hooks;
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.q.now()
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn processor(&self, pe: usize) -> &Processor {
        &self.pes[pe].proc
    }

    pub fn rules(&self) -> Option<&RuleSet> {
        self.rules.as_ref()
    }

    pub fn event_log(&self) -> &[String] {
        &self.log
    }

    /// Runs to the horizon, or until nothing is left to do.
    pub fn run(mut self) -> Result<MetricsSnapshot, SimError> {
        self.step_until(SimTime::MAX)?;
        self.final_checks()?;
        Ok(self.snapshot())
    }

    /// Processes every event before `t` and leaves the clock at `t`.
    pub fn step_until(&mut self, t: SimTime) -> Result<(), SimError> {
        while !self.stopped {
            match self.q.peek_time() {
                Some(at) if at < t => {}
                _ => break,
            }
            let (now, ev) = self.q.pop().unwrap();
            self.events += 1;
            if self.recent.len() == RECENT_EVENTS {
                self.recent.pop_front();
            }
            self.recent.push_back((now, ev));
            if let Some(n) = self.cfg.run.event_log_lines {
                if self.log.len() < n {
                    self.log.push(format!("{} {:?}", now.as_ps(), ev));
                }
            }
            if let Err(Violation(msg)) = self.dispatch(now, ev) {
                return Err(self.violation(msg));
            }
        }
        if t != SimTime::MAX && !self.stopped {
            self.q.advance_to(t);
        }
        Ok(())
    }

    fn violation(&self, msg: String) -> SimError {
        SimError::Invariant {
            at: self.q.now(),
            msg,
            recent: self
                .recent
                .iter()
                .map(|(t, e)| format!("  {} {:?}", t.as_ps(), e))
                .collect(),
        }
    }

    fn dispatch(&mut self, now: SimTime, ev: Ev) -> Step {
        match ev {
            Ev::WireStart(p) => self.wire_start(now, p),
            Ev::RxDone(p) => self.rx_done(now, p),
            Ev::SourceTry(p) => self.source_try(now, p)?,
            Ev::Fabric(fe) => {
                let mut out = std::mem::take(&mut self.outbox);
                self.fabric.handle(now, fe, &mut out);
                self.flush(now, out)?;
            }
            Ev::LoadDone { pe, key } => self.load_done(now, pe, key)?,
            Ev::CoreDone(pe) => self.core_done(now, pe)?,
            Ev::TxTry(pe) => self.tx_try(now, pe)?,
            Ev::ReadoutDone(pe) => self.readout_done(now, pe)?,
            Ev::Ctrl(m) => self.ctrl_delivered(now, m)?,
            Ev::TesterRx(p) => self.tester_rx(now, p),
            Ev::SinkRelease { dest, bytes } => {
                let mut out = std::mem::take(&mut self.outbox);
                self.fabric.sink_release(now, dest, bytes, &mut out);
                self.flush(now, out)?;
            }
            Ev::LoopbackArrive(key) => self.loopback_arrive(now, key)?,
            Ev::BcastTick => self.bcast_tick(now)?,
            Ev::BcastDeliver(d) => self.bcast_deliver(d)?,
            Ev::Host(i) => self.host_script(now, i)?,
            Ev::Reconfig(pe) => self.reconfig_step(now, pe)?,
            Ev::Horizon => self.stopped = true,
        }
        if self.reconfiguring > 0 {
            for pe in 0..self.pes.len() {
                if self.pes[pe].reconf.is_some() {
                    self.reconfig_progress(now, pe)?;
                }
            }
        }
        Ok(())
    }

    // tester and receive MACs

    fn pull_frame(&mut self, p: Iface) {
        let port = &mut self.ports[p.index()];
        let Some(src) = port.source.as_mut() else {
            return;
        };
        match src.next_frame() {
            Some(f) => {
                let at = f.at.max(port.wire_free).max(self.q.now());
                port.next = Some(f);
                self.q.schedule(at, Ev::WireStart(p));
            }
            None => port.source = None,
        }
    }

    fn wire_start(&mut self, now: SimTime, p: Iface) {
        let framing = self.cfg.timing.framing_bytes;
        let port = &mut self.ports[p.index()];
        let f = port.next.take().expect("frame staged");
        let size = f.data.len() as u64;
        port.wire_free = now + self.ext.ser_time(size + framing);
        port.on_wire.push_back(Packet::new(f.data, p, now));
        self.q.schedule(now + self.ext.ser_time(size), Ev::RxDone(p));
        self.pull_frame(p);
    }

    fn rx_done(&mut self, now: SimTime, p: Iface) {
        let port = &mut self.ports[p.index()];
        let pkt = port.on_wire.pop_front().expect("frame on the wire");
        let size = pkt.size();
        port.stats.rx_frames += 1;
        port.stats.rx_bytes += size;
        if !self.cfg.limits.admits(size) {
            port.stats.rx_invalid_drops += 1;
            self.drops.rx_invalid += 1;
            return;
        }
        if size > self.cfg.processor.layout.slot_size as u64 {
            self.drops.oversize += 1;
            return;
        }
        if port.rx_bytes + size > self.cfg.timing.rx_fifo_bytes {
            port.stats.rx_overflow_drops += 1;
            self.drops.rx_overflow += 1;
            return;
        }
        port.rx_bytes += size;
        port.rx.push_back((pkt, now + self.mac_in));
        self.kick_source(p);
    }

    fn kick_source(&mut self, p: Iface) {
        let now = self.q.now();
        let port = &mut self.ports[p.index()];
        if port.blocked || port.try_pending {
            return;
        }
        let Some((_, ready)) = port.rx.front() else {
            return;
        };
        let at = (*ready).max(port.decision_at).max(now);
        port.try_pending = true;
        self.q.schedule(at, Ev::SourceTry(p));
    }

    fn unblock_sources(&mut self) {
        for p in Iface::ALL {
            if self.ports[p.index()].blocked {
                self.ports[p.index()].blocked = false;
                self.kick_source(p);
            }
        }
    }

    fn source_try(&mut self, now: SimTime, p: Iface) -> Step {
        let port = &mut self.ports[p.index()];
        port.try_pending = false;
        let Some((pkt, _)) = port.rx.front() else {
            return Ok(());
        };
        let len = pkt.size();
        match self.sched.assign(&pkt.data, len) {
            Assignment::Backpressure => {
                if self.sched.policy() == Policy::Hash && parse_five_tuple(&pkt.data).is_none() {
                    self.sched.retract_fallback();
                }
                port.blocked = true;
            }
            Assignment::Granted { pe, slot, hash } => {
                let (mut pkt, _) = port.rx.pop_front().unwrap();
                port.rx_bytes -= len;
                self.pes[pe].proc.assign(slot)?;
                if let Some(h) = hash {
                    pkt.metadata = Some(h.to_be_bytes());
                }
                if let Some(f) = self.hooks.on_assign.as_mut() {
                    f(&pkt, pe, hash);
                }
                let bytes = pkt.stored_size();
                let key = self.flights.insert(Flight { pkt, pe, slot });
                let ready = now + self.clock.cycles(self.cfg.scheduler.decision_cycles);
                let mut out = std::mem::take(&mut self.outbox);
                let start = self
                    .fabric
                    .inject(p, pe, key, bytes, ready, &mut out)
                    .map_err(|_| Violation(format!("ingress queue {}->p{pe} full", p.name())))?;
                self.ports[p.index()].decision_at = (now + self.cyc).max(start);
                self.flush(now, out)?;
                self.kick_source(p);
            }
        }
        Ok(())
    }

    // fabric

    fn flush(&mut self, now: SimTime, mut out: Outbox<usize>) -> Step {
        for (t, fe) in out.events.drain(..) {
            self.q.schedule(t, Ev::Fabric(fe));
        }
        let outputs: Vec<FabricOutput<usize>> = out.outputs.drain(..).collect();
        self.outbox = out;
        for o in outputs {
            match o {
                FabricOutput::Delivered { pe, item, tail_at, .. } => {
                    let at = tail_at + self.clock.cycles(self.cfg.processor.dma_setup_cycles);
                    self.q.schedule(at.max(now), Ev::LoadDone { pe, key: item });
                }
                FabricOutput::VoqSpace { .. } => {}
                FabricOutput::EgressSpace { pe, .. } => {
                    if self.pes[pe].tx_wait_egress {
                        self.pes[pe].tx_wait_egress = false;
                        self.kick_tx(pe);
                    }
                }
                FabricOutput::ToSink {
                    dest,
                    item,
                    bytes,
                    head_at,
                    tail_at,
                } => self.to_sink(now, dest, item, bytes, head_at, tail_at),
            }
        }
        Ok(())
    }

    fn to_sink(
        &mut self,
        now: SimTime,
        dest: Iface,
        key: usize,
        bytes: u64,
        head_at: SimTime,
        tail_at: SimTime,
    ) {
        if dest == Iface::Loopback {
            let start = head_at.max(self.lb_free).max(now);
            let framing = self.cfg.loopback.framing_bytes as u64;
            let end = (start + self.lb_rate.ser_time(bytes + framing)).max(tail_at);
            self.lb_free = end;
            self.q.schedule(end, Ev::LoopbackArrive(key));
            self.q.schedule(end, Ev::SinkRelease { dest, bytes });
            return;
        }
        let f = self.flights.remove(key);
        let (rate, framing) = match dest {
            Iface::Host => (self.host_rate, 0),
            _ => (self.ext, self.cfg.timing.framing_bytes),
        };
        let size = f.pkt.size();
        let port = &mut self.ports[dest.index()];
        let start = (head_at + self.mac_out).max(port.egress_free).max(now);
        port.egress_free = start + rate.ser_time(size + framing);
        port.egress_q.push_back(f.pkt);
        self.q.schedule(start + rate.ser_time(size), Ev::TesterRx(dest));
        self.q.schedule(port.egress_free, Ev::SinkRelease { dest, bytes });
    }

    fn tester_rx(&mut self, now: SimTime, p: Iface) {
        let port = &mut self.ports[p.index()];
        let pkt = port.egress_q.pop_front().expect("frame on the egress wire");
        let size = pkt.size();
        port.stats.tx_frames += 1;
        port.stats.tx_bytes += size;
        let start = SimTime::from_ns(self.cfg.run.measure_start_ns);
        let end = self.cfg.run.measure_end_ns.map_or(SimTime::MAX, SimTime::from_ns);
        if now >= start && now < end {
            port.stats.window_frames += 1;
            port.stats.window_bytes += size;
        }
        self.latency.record((now - pkt.timestamp).as_ps());
        if let Some(f) = self.hooks.on_egress.as_mut() {
            f(&pkt, p, now);
        }
    }

    fn loopback_arrive(&mut self, now: SimTime, key: usize) -> Step {
        let mut f = self.flights.remove(key);
        f.pkt.arrival_port = Iface::Loopback;
        f.pkt.metadata = None;
        let bytes = f.pkt.size();
        let pe = f.pe;
        let key = self.flights.insert(f);
        let mut out = std::mem::take(&mut self.outbox);
        self.fabric
            .inject(Iface::Loopback, pe, key, bytes, now, &mut out)
            .map_err(|_| Violation(format!("loopback queue to p{pe} full")))?;
        self.flush(now, out)
    }

    // processors

    fn load_done(&mut self, now: SimTime, pe: usize, key: usize) -> Step {
        let f = self.flights.remove(key);
        ensure!(f.pe == pe, "flight for p{} delivered to p{pe}", f.pe);
        match self.pes[pe].proc.ingest_packet(f.slot, f.pkt) {
            Ok(_) => {}
            Err(ProcessorError::Mem(_)) => {
                self.drops.oversize += 1;
                self.send_ctrl(now, CtrlMsg::SlotFreed { pe, slot: f.slot });
            }
            Err(e) => return Err(e.into()),
        }
        self.try_core(now, pe);
        Ok(())
    }

    fn try_core(&mut self, now: SimTime, pe: usize) {
        let st = &mut self.pes[pe];
        if st.core_pending || !matches!(st.proc.core(), CoreState::Idle { .. }) {
            return;
        }
        let evicting = st.reconf.as_ref().is_some_and(|r| r.phase == Phase::Evicting);
        let outcome = if st.proc.irq_pending() & IRQ_EVICT != 0 && evicting {
            st.proc.run_evict(now, &self.clock)
        } else if st.proc.can_start() {
            match st.proc.start_handler(now, &self.clock) {
                Some((_, o)) if matches!(st.proc.core(), CoreState::Hung) => {
                    log::warn!("p{pe} hung after {} cycles", o.cycles);
                    return;
                }
                Some((_, o)) => Some(o),
                None => None,
            }
        } else {
            None
        };
        let Some(o) = outcome else {
            return;
        };
        let start_cycle = self.clock.cycle_at(now);
        let mut errors = 0;
        for w in &o.bcast_writes {
            let issue = (start_cycle + w.at).max(self.bcast.next_cycle());
            if self.bcast.write(pe, issue, w.addr, w.data).is_err() {
                errors += 1;
            }
        }
        if errors > 0 {
            log::warn!("p{pe}: {errors} broadcast writes rejected");
        }
        let st = &mut self.pes[pe];
        st.core_end = now + self.clock.cycles(o.cycles);
        st.core_pending = true;
        let has_writes = !o.bcast_writes.is_empty();
        st.current = Some(o);
        let end = st.core_end;
        self.q.schedule(end, Ev::CoreDone(pe));
        if has_writes {
            self.schedule_bcast();
        }
    }

    fn core_done(&mut self, now: SimTime, pe: usize) -> Step {
        if self.bcast.producer_pending(pe) {
            self.pes[pe].wait_bcast = true;
            self.schedule_bcast();
            return Ok(());
        }
        let shift = self.bcast.take_shift(pe);
        if shift > 0 {
            let st = &mut self.pes[pe];
            st.core_end += self.clock.cycles(shift);
            let end = st.core_end.max(now);
            self.q.schedule(end, Ev::CoreDone(pe));
            return Ok(());
        }
        let st = &mut self.pes[pe];
        st.core_pending = false;
        st.proc.core_done(now);
        let o = st.current.take().expect("outcome of the running handler");
        if let Some(r) = st.reconf.as_mut() {
            if r.phase == Phase::Evicting && st.proc.irq_pending() & IRQ_EVICT == 0 {
                r.phase = Phase::Drain;
            }
        }
        for a in o.actions {
            self.apply(now, pe, a)?;
        }
        self.retry_dumps(now);
        self.try_core(now, pe);
        Ok(())
    }

    fn drop_slot(&mut self, now: SimTime, pe: usize, slot: u16) -> Step {
        let p = &mut self.pes[pe].proc;
        p.begin_tx(slot)?;
        p.finish_tx(slot, None)?;
        self.send_ctrl(now, CtrlMsg::SlotFreed { pe, slot });
        Ok(())
    }

    fn apply(&mut self, now: SimTime, pe: usize, a: Action) -> Step {
        let tx_ready = now + self.clock.cycles(self.cfg.processor.tx_setup_cycles);
        match a {
            Action::Send(d) if d.len == 0 => {
                self.drops.handler += 1;
                self.drop_slot(now, pe, d.slot)?;
            }
            Action::Send(d) if d.port == Iface::Loopback => {
                self.drops.misrouted += 1;
                self.drop_slot(now, pe, d.slot)?;
            }
            Action::Send(d) => {
                let st = &mut self.pes[pe];
                st.proc.begin_tx(d.slot)?;
                st.tx_q.push_back(TxReq {
                    slot: d.slot,
                    dest: d.port,
                    bytes: d.len as u64,
                    ready_at: tx_ready,
                    lb: None,
                });
                self.kick_tx(pe);
            }
            Action::Hold(d) => {
                if self.pes[pe].proc.slots().state(d.slot) == SlotState::CoreOwned {
                    self.pes[pe].proc.hold(d.slot)?;
                }
            }
            Action::TxViaScheduler(d) => {
                let st = &mut self.pes[pe];
                if st.proc.slots().state(d.slot) == SlotState::CoreOwned {
                    st.proc.hold(d.slot)?;
                }
                st.via_sched.insert(d.slot, d);
                self.send_ctrl(now, CtrlMsg::SlotNotice { pe, slot: d.slot });
            }
            Action::Loopback { desc, dst } => {
                if dst >= self.pes.len() {
                    self.drops.misrouted += 1;
                    return self.drop_slot(now, pe, desc.slot);
                }
                let st = &mut self.pes[pe];
                if st.proc.slots().state(desc.slot) == SlotState::CoreOwned {
                    st.proc.hold(desc.slot)?;
                }
                let hdr = self.cfg.loopback.header_bytes as u64;
                st.lb_wait.insert(desc.slot, (desc.len as u64 + hdr, dst));
                self.send_ctrl(
                    now,
                    CtrlMsg::SlotRequest {
                        src: pe,
                        src_slot: desc.slot,
                        dst,
                    },
                );
            }
        }
        Ok(())
    }

    fn kick_tx(&mut self, pe: usize) {
        let now = self.q.now();
        let st = &mut self.pes[pe];
        if st.tx_busy || st.tx_try_pending || st.tx_wait_egress {
            return;
        }
        if let Some(r) = st.tx_q.front() {
            st.tx_try_pending = true;
            self.q.schedule(r.ready_at.max(now), Ev::TxTry(pe));
        }
    }

    fn tx_try(&mut self, now: SimTime, pe: usize) -> Step {
        let st = &mut self.pes[pe];
        st.tx_try_pending = false;
        if st.tx_busy {
            return Ok(());
        }
        let Some(r) = st.tx_q.front().copied() else {
            return Ok(());
        };
        ensure!(r.ready_at <= now, "transmit started early on p{pe}");
        if !self.fabric.reserve_out(pe, r.dest) {
            st.tx_wait_egress = true;
            return Ok(());
        }
        st.tx_busy = true;
        self.q
            .schedule(now + self.narrow.ser_time(r.bytes), Ev::ReadoutDone(pe));
        Ok(())
    }

    fn readout_done(&mut self, now: SimTime, pe: usize) -> Step {
        let st = &mut self.pes[pe];
        let r = st.tx_q.pop_front().expect("readout in progress");
        st.tx_busy = false;
        let mut pkt = st.proc.finish_tx(r.slot, Some(r.bytes))?;
        pkt.metadata = None;
        let (dst, dst_slot) = match r.lb {
            Some((d, s)) => {
                st.proc.count_loopback();
                self.loopback_frames += 1;
                (d, s)
            }
            None => (pe, 0),
        };
        self.send_ctrl(now, CtrlMsg::SlotFreed { pe, slot: r.slot });
        let key = self.flights.insert(Flight {
            pkt,
            pe: dst,
            slot: dst_slot,
        });
        let mut out = std::mem::take(&mut self.outbox);
        self.fabric
            .readout_done(now, pe, r.dest, key, r.bytes, &mut out);
        self.flush(now, out)?;
        self.kick_tx(pe);
        Ok(())
    }

    // control channel

    fn send_ctrl(&mut self, now: SimTime, m: CtrlMsg) {
        let at = self.ctrl.send(now, &m);
        self.q.schedule(at, Ev::Ctrl(m));
    }

    fn serve_loopback(&mut self, now: SimTime) -> Step {
        while let Some(g) = self.sched.serve_request() {
            self.pes[g.dst].proc.assign(g.dst_slot)?;
            self.send_ctrl(
                now,
                CtrlMsg::SlotGrant {
                    src: g.src,
                    src_slot: g.src_slot,
                    dst: g.dst,
                    dst_slot: g.dst_slot,
                },
            );
        }
        Ok(())
    }

    fn ctrl_delivered(&mut self, now: SimTime, m: CtrlMsg) -> Step {
        self.ctrl.delivered(&m);
        match m {
            CtrlMsg::SlotNotice { pe, slot } => {
                self.send_ctrl(now, CtrlMsg::TxCommand { pe, slot });
            }
            CtrlMsg::TxCommand { pe, slot } => {
                let tx_ready = now + self.clock.cycles(self.cfg.processor.tx_setup_cycles);
                let st = &mut self.pes[pe];
                let d = st
                    .via_sched
                    .remove(&slot)
                    .ok_or_else(|| Violation(format!("transmit command for idle slot p{pe}/{slot}")))?;
                st.proc.begin_tx(slot)?;
                st.tx_q.push_back(TxReq {
                    slot,
                    dest: d.port,
                    bytes: d.len as u64,
                    ready_at: tx_ready,
                    lb: None,
                });
                self.kick_tx(pe);
            }
            CtrlMsg::SlotFreed { pe, slot } => {
                self.sched.slot_freed(pe, slot)?;
                self.check_credits(pe)?;
                self.serve_loopback(now)?;
                self.unblock_sources();
            }
            CtrlMsg::SlotRequest { src, src_slot, dst } => {
                self.sched.request_slot(SlotRequest { src, src_slot, dst });
                self.serve_loopback(now)?;
            }
            CtrlMsg::SlotGrant {
                src,
                src_slot,
                dst,
                dst_slot,
            } => {
                let tx_ready = now + self.clock.cycles(self.cfg.processor.tx_setup_cycles);
                let st = &mut self.pes[src];
                let (bytes, want) = st
                    .lb_wait
                    .remove(&src_slot)
                    .ok_or_else(|| Violation(format!("grant for idle slot p{src}/{src_slot}")))?;
                ensure!(want == dst, "grant for p{dst}, asked for p{want}");
                st.proc.begin_tx(src_slot)?;
                st.tx_q.push_back(TxReq {
                    slot: src_slot,
                    dest: Iface::Loopback,
                    bytes,
                    ready_at: tx_ready,
                    lb: Some((dst, dst_slot)),
                });
                self.kick_tx(src);
            }
            CtrlMsg::DramRequest { .. } => {}
        }
        Ok(())
    }

    /// Every registered slot is either a credit, on its way back, or in use.
    fn check_credits(&self, pe: usize) -> Step {
        let credits = self.sched.credits(pe) as u32;
        let back = self.ctrl.freed_in_flight(pe);
        let used = self.pes[pe].proc.slots().non_free();
        let reg = self.sched.registered(pe) as u32;
        ensure!(
            credits + back + used == reg,
            "p{pe}: {credits} credits + {back} returning + {used} in use != {reg} registered"
        );
        ensure!(self.pes[pe].proc.verify(), "p{pe}: slot bookkeeping corrupt");
        Ok(())
    }

    // broadcast network

    fn schedule_bcast(&mut self) {
        let Some(c) = self.bcast.next_event_cycle() else {
            return;
        };
        let at = self.clock.cycles(c).max(self.q.now());
        if self.bcast_wake.is_none_or(|w| at < w) {
            self.bcast_wake = Some(at);
            self.q.schedule(at, Ev::BcastTick);
        }
    }

    fn bcast_tick(&mut self, now: SimTime) -> Step {
        if self.bcast_wake != Some(now) {
            return Ok(());
        }
        self.bcast_wake = None;
        self.bcast.run_until(self.clock.cycle_at(now) + 1);
        for d in self.bcast.drain_deliveries() {
            let at = self.clock.cycles(d.cycle).max(now);
            self.q.schedule(at, Ev::BcastDeliver(d));
        }
        for pe in 0..self.pes.len() {
            if self.pes[pe].wait_bcast && !self.bcast.producer_pending(pe) {
                self.pes[pe].wait_bcast = false;
                let at = self.pes[pe].core_end.max(now);
                self.q.schedule(at, Ev::CoreDone(pe));
            }
        }
        self.schedule_bcast();
        Ok(())
    }

    fn bcast_deliver(&mut self, d: Delivery) -> Step {
        self.bcast_latency.record(d.cycle - d.msg.issue_cycle);
        for pe in 0..self.pes.len() {
            if pe == d.msg.src {
                continue;
            }
            self.pes[pe]
                .proc
                .memory_mut()
                .bcast_store(d.msg.addr, d.msg.data)
                .map_err(|e| Violation(format!("broadcast store on p{pe}: {e}")))?;
            self.endpoints[pe].on_delivery(d.msg.addr);
        }
        Ok(())
    }

    // host control and reconfiguration

    fn host_log(&mut self, now: SimTime, op: String, result: String) {
        self.host_log.push(HostLogEntry { at: now, op, result });
    }

    fn host_script(&mut self, now: SimTime, i: usize) -> Step {
        let op = self.cfg.script[i].op.clone();
        let res = self.host(now, &op, Some(i))?;
        self.host_log(now, format!("{op:?}"), res);
        Ok(())
    }

    /// Executes one host operation and describes the result.
    fn host(&mut self, now: SimTime, op: &HostOp, script: Option<usize>) -> Result<String, Violation> {
        let pes = self.pes.len();
        Ok(match *op {
            HostOp::SchedWrite { addr, value } => {
                let touched = match addr {
                    REG_ENABLE_MASK => (0..pes).filter(|p| value >> p & 1 != 0).collect(),
                    a if (REG_ENABLE..REG_ENABLE + pes as u32).contains(&a)
                        || (REG_FLUSH..REG_FLUSH + pes as u32).contains(&a) =>
                    {
                        vec![(a & 0xF) as usize]
                    }
                    _ => Vec::new(),
                };
                if let Some(pe) = touched.into_iter().find(|&p| self.pes[p].reconf.is_some()) {
                    return Ok(format!("refused: p{pe} is being reconfigured"));
                }
                if (REG_FLUSH..REG_FLUSH + pes as u32).contains(&addr) {
                    let pe = (addr - REG_FLUSH) as usize;
                    if !self.pes[pe].proc.is_drained() || self.ctrl.freed_in_flight(pe) > 0 {
                        return Ok(format!("refused: p{pe} has slots in use"));
                    }
                }
                match self.sched.host_write(addr, value) {
                    Ok(()) => {
                        self.serve_loopback(now)?;
                        self.unblock_sources();
                        "ok".into()
                    }
                    Err(e) => format!("error: {e}"),
                }
            }
            HostOp::SchedRead { addr } => match self.sched.host_read(addr) {
                Ok(v) => format!("{v:#x}"),
                Err(e) => format!("error: {e}"),
            },
            HostOp::Pause { pe } => self.pe_cmd(now, pe, HostCommand::Pause),
            HostOp::Resume { pe } => self.pe_cmd(now, pe, HostCommand::Resume),
            HostOp::Interrupt { pe, bits } => self.pe_cmd(now, pe, HostCommand::Interrupt(bits)),
            HostOp::ReadCounters { pe } => self.pe_cmd(now, pe, HostCommand::ReadCounters),
            HostOp::ReadDebug { pe } => self.pe_cmd(now, pe, HostCommand::ReadDebug),
            HostOp::WriteDebug { pe, value } => {
                self.pe_cmd(now, pe, HostCommand::WriteDebug(value))
            }
            HostOp::Dump { pe, region } => {
                match self.pes[pe].proc.host_control(HostCommand::DumpMemory(region), now, &self.clock) {
                    HostResponse::Dump(bytes) => self.write_dump(now, pe, region, &bytes),
                    _ => {
                        if let Some(i) = script {
                            self.pending_dumps.push((pe, i));
                        }
                        "deferred".into()
                    }
                }
            }
            HostOp::Reconfigure { pe, ref handler } => self.start_reconfig(now, pe, handler.clone()),
        })
    }

    fn pe_cmd(&mut self, now: SimTime, pe: usize, cmd: HostCommand) -> String {
        let r = self.pes[pe].proc.host_control(cmd, now, &self.clock);
        self.try_core(now, pe);
        match r {
            HostResponse::Ack => "ok".into(),
            HostResponse::Deferred => "deferred".into(),
            HostResponse::Masked => "masked".into(),
            HostResponse::Debug(v) => format!("{v:#x}"),
            HostResponse::Counters(c) => format!(
                "bytes={} frames={} drops={} stalled={}",
                c.rx_bytes, c.rx_frames, c.drops, c.stalled_cycles
            ),
            HostResponse::Dump(b) => format!("{} bytes", b.len()),
        }
    }

    fn write_dump(
        &mut self,
        now: SimTime,
        pe: usize,
        region: crate::processor::memory::Region,
        bytes: &[u8],
    ) -> String {
        let Some(dir) = self.cfg.run.dump_dir.clone() else {
            return format!("{} bytes", bytes.len());
        };
        let name = format!("p{pe}_{}_{}ns.bin", region.name(), now.as_ps() / 1_000);
        let path: PathBuf = dir.join(&name);
        let manifest = dir.join("manifest.csv");
        let res = std::fs::create_dir_all(&dir)
            .and_then(|_| std::fs::write(&path, bytes))
            .and_then(|_| {
                use std::io::Write;
                let new = !manifest.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&manifest)?;
                if new {
                    writeln!(f, "file,pe,region,time_ps,bytes")?;
                }
                writeln!(f, "{name},{pe},{},{},{}", region.name(), now.as_ps(), bytes.len())
            });
        match res {
            Ok(()) => format!("{} bytes -> {}", bytes.len(), path.display()),
            Err(e) => format!("error: {e}"),
        }
    }

    fn retry_dumps(&mut self, now: SimTime) {
        let pending = std::mem::take(&mut self.pending_dumps);
        for (pe, i) in pending {
            let HostOp::Dump { region, .. } = self.cfg.script[i].op else {
                continue;
            };
            match self.pes[pe].proc.host_control(HostCommand::DumpMemory(region), now, &self.clock) {
                HostResponse::Dump(b) => {
                    let r = self.write_dump(now, pe, region, &b);
                    self.host_log(now, format!("{:?}", self.cfg.script[i].op), r);
                }
                _ => self.pending_dumps.push((pe, i)),
            }
        }
    }

    fn start_reconfig(&mut self, now: SimTime, pe: usize, spec: Option<HandlerSpec>) -> String {
        if self.pes[pe].reconf.is_some() {
            return format!("refused: p{pe} already reconfiguring");
        }
        let rules = match &spec {
            Some(s) => match self.rule_cache.for_spec(s) {
                Ok(r) => r,
                Err(e) => return format!("refused: {e}"),
            },
            None => self.pes[pe].rules.clone(),
        };
        let reload_only = !self.sched.is_enabled(pe);
        if !reload_only {
            self.sched.set_enabled(pe, false);
        }
        self.reconfiguring += 1;
        self.pes[pe].reconf = Some(Reconf {
            phase: if reload_only { Phase::Drain } else { Phase::Quiesce },
            spec,
            rules,
            reload_only,
            rec: ReconfigRecord {
                pe,
                start: now,
                reload_only,
                ..Default::default()
            },
            drops_at_start: self.drops.total(),
        });
        "started".into()
    }

    fn reconfig_progress(&mut self, now: SimTime, pe: usize) -> Step {
        let st = &mut self.pes[pe];
        let Some(r) = st.reconf.as_mut() else {
            return Ok(());
        };
        let slots = st.proc.slots();
        let idle = !st.core_pending && matches!(st.proc.core(), CoreState::Idle { .. });
        match r.phase {
            Phase::Quiesce => {
                let quiet = slots.count(SlotState::Assigned) == 0
                    && slots.count(SlotState::Loaded) == 0
                    && st.proc.rx_queue_len() == 0
                    && idle;
                if quiet {
                    r.rec.evict_at = Some(now);
                    if st.proc.raise_irq(IRQ_EVICT) {
                        r.phase = Phase::Evicting;
                        self.try_core(now, pe);
                    } else {
                        r.phase = Phase::Drain;
                    }
                }
            }
            Phase::Drain => {
                let drained = slots.non_free() == 0
                    && idle
                    && st.tx_q.is_empty()
                    && !st.tx_busy
                    && st.via_sched.is_empty()
                    && st.lb_wait.is_empty()
                    && self.ctrl.freed_in_flight(pe) == 0;
                if drained {
                    r.rec.drained_at = Some(now);
                    if r.reload_only {
                        r.phase = Phase::Reloading;
                        r.rec.reload_start = Some(now);
                        let at = now + SimTime::from_ns(self.cfg.reconfig.reload_ns);
                        self.q.schedule(at, Ev::Reconfig(pe));
                    } else {
                        r.phase = Phase::Saving;
                        let at = now + self.state_rate.ser_time(st.proc.image_bytes());
                        self.q.schedule(at, Ev::Reconfig(pe));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn reconfig_step(&mut self, now: SimTime, pe: usize) -> Step {
        let phase = self.pes[pe]
            .reconf
            .as_ref()
            .map(|r| r.phase)
            .ok_or_else(|| Violation(format!("stray reconfiguration timer for p{pe}")))?;
        match phase {
            Phase::Saving => {
                let r = self.pes[pe].reconf.as_mut().unwrap();
                r.phase = Phase::Reloading;
                r.rec.reload_start = Some(now);
                self.q
                    .schedule(now + SimTime::from_ns(self.cfg.reconfig.reload_ns), Ev::Reconfig(pe));
            }
            Phase::Reloading => {
                let r = self.pes[pe].reconf.as_ref().unwrap();
                let (spec, rules) = (r.spec.clone(), r.rules.clone());
                let spec = spec.unwrap_or_else(|| self.pes[pe].spec.clone());
                let (prog, acc) = build_program(&spec, &self.cfg, rules.as_ref());
                let st = &mut self.pes[pe];
                ensure!(st.proc.is_drained(), "p{pe} reloaded with live slots");
                st.proc.reload(now, Some(prog), Some(acc));
                st.spec = spec;
                st.rules = rules;
                let r = st.reconf.as_mut().unwrap();
                r.rec.reload_end = Some(now);
                if r.reload_only {
                    self.finish_reconfig(now, pe)?;
                } else {
                    r.phase = Phase::Restoring;
                    let at = now + self.state_rate.ser_time(st.proc.image_bytes());
                    self.q.schedule(at, Ev::Reconfig(pe));
                }
            }
            Phase::Restoring => self.finish_reconfig(now, pe)?,
            p => return Err(Violation(format!("reconfiguration timer in phase {p:?}"))),
        }
        Ok(())
    }

    fn finish_reconfig(&mut self, now: SimTime, pe: usize) -> Step {
        let layout = &self.cfg.processor.layout;
        let mut r = self.pes[pe].reconf.take().unwrap();
        self.reconfiguring -= 1;
        self.sched.flush(pe);
        self.sched
            .register_slots(pe, layout.slot_count, layout.slot_size)?;
        if !r.reload_only {
            self.sched.set_enabled(pe, true);
        }
        r.rec.done_at = Some(now);
        r.rec.drops_during = self.drops.total() - r.drops_at_start;
        self.reconfigs.push(r.rec);
        self.check_credits(pe)?;
        self.serve_loopback(now)?;
        self.unblock_sources();
        Ok(())
    }

    /// Runs a host operation outside the script, at the current time.
    pub fn host_now(&mut self, op: &HostOp) -> Result<String, SimError> {
        let now = self.q.now();
        match self.host(now, op, None) {
            Ok(s) => {
                self.host_log(now, format!("{op:?}"), s.clone());
                Ok(s)
            }
            Err(Violation(m)) => Err(self.violation(m)),
        }
    }

    // accounting

    fn in_flight(&self) -> u64 {
        let ports: usize = self
            .ports
            .iter()
            .map(|p| p.rx.len() + p.egress_q.len())
            .sum();
        let resident: u32 = self
            .pes
            .iter()
            .map(|s| {
                let t = s.proc.slots();
                t.non_free() - t.count(SlotState::Assigned)
            })
            .sum();
        (ports + self.flights.len()) as u64 + resident as u64
    }

    pub fn conservation(&self) -> Conservation {
        Conservation {
            offered: self.ports.iter().map(|p| p.stats.rx_frames).sum(),
            delivered: self.ports.iter().map(|p| p.stats.tx_frames).sum(),
            dropped: self.drops.total(),
            in_flight: self.in_flight(),
        }
    }

    fn final_checks(&self) -> Result<(), SimError> {
        for pe in 0..self.pes.len() {
            if let Err(Violation(m)) = self.check_credits(pe) {
                return Err(self.violation(m));
            }
        }
        let c = self.conservation();
        if !c.holds() {
            return Err(self.violation(format!("frame conservation broken: {c:?}")));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        let now = self.q.now();
        let start = SimTime::from_ns(self.cfg.run.measure_start_ns);
        let end = self
            .cfg
            .run
            .measure_end_ns
            .map_or(now, SimTime::from_ns)
            .max(start);
        MetricsSnapshot {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            end: now,
            events: self.events,
            window: (start, end),
            ifaces: Iface::ALL
                .iter()
                .map(|&p| (p, self.ports[p.index()].stats))
                .collect(),
            pes: self
                .pes
                .iter()
                .map(|s| PeStats {
                    counters: s.proc.counters(now, &self.clock),
                    program: s.proc.program().name().to_string(),
                    program_counters: s
                        .proc
                        .program()
                        .counters()
                        .into_iter()
                        .map(|(k, v)| (k.to_string(), v))
                        .collect(),
                    slots_in_use: s.proc.slots().non_free(),
                    hung: matches!(s.proc.core(), CoreState::Hung),
                })
                .collect(),
            latency: self.latency.summary(),
            scheduler: self.sched.stats(),
            bcast: self.bcast.stats(),
            bcast_latency: self.bcast_latency.summary(),
            loopback_frames: self.loopback_frames,
            drops: self.drops,
            conservation: self.conservation(),
            fabric_high_water: self.fabric.high_water(),
            reconfigs: self.reconfigs.clone(),
            host_log: self.host_log.clone(),
        }
    }

    /// Frames a port source has yet to put on the wire.
    pub fn frames_pending(&self, p: Iface) -> bool {
        let port = &self.ports[p.index()];
        port.next.is_some() || port.source.is_some()
    }

    pub fn endpoint(&self, pe: usize) -> &BcastEndpoint {
        &self.endpoints[pe]
    }

    #[doc(hidden)]
    pub fn raw_frame(data: &[u8]) -> Bytes {
        Bytes::copy_from_slice(data)
    }
}

/// Builds and runs one configuration.
pub fn run(cfg: &SimConfig) -> Result<MetricsSnapshot, SimError> {
    Engine::new(cfg.clone())?.run()
}

/// Runs with observers attached.
pub fn run_with_hooks(cfg: &SimConfig, hooks: Hooks) -> Result<MetricsSnapshot, SimError> {
    let mut e = Engine::new(cfg.clone())?;
    e.set_hooks(hooks);
    e.run()
}
