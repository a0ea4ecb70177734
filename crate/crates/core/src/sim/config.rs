//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accelerators::StreamConfig;
use crate::fabric::{FabricConfig, Topology};
use crate::flow::FlowConfig;
use crate::messaging::{BroadcastConfig, LoopbackConfig};
use crate::model::{ClockConfig, RateModel, REFERENCE_INTERCEPT_PS};
use crate::packet::{Iface, PacketLimits};
use crate::processor::memory::Region;
use crate::processor::ProcessorConfig;
use crate::scheduler::{SchedulerConfig, MAX_PES};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub name: String,
    pub seed: u64,
    pub pes: usize,
    pub clock: ClockConfig,
    pub rates: RateModel,
    pub fabric: FabricConfig,
    pub processor: ProcessorConfig,
    pub limits: PacketLimits,
    pub scheduler: SchedulerConfig,
    pub timing: TimingConfig,
    pub handler: HandlerSpec,
    /// Per-processor handler selection, applied in order.
    pub overrides: Vec<HandlerOverride>,
    pub broadcast: BroadcastConfig,
    pub loopback: LoopbackConfig,
    pub flow: FlowConfig,
    pub stream: StreamConfig,
    pub reconfig: ReconfigConfig,
    pub traffic: Vec<TrafficSpec>,
    pub script: Vec<ScriptEntry>,
    pub run: RunConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            name: "default".into(),
            seed: 1,
            pes: 16,
            clock: ClockConfig::default(),
            rates: RateModel::default(),
            fabric: FabricConfig::default(),
            processor: ProcessorConfig::default(),
            limits: PacketLimits::default(),
            scheduler: SchedulerConfig::default(),
            timing: TimingConfig::default(),
            handler: HandlerSpec::default(),
            overrides: Vec::new(),
            broadcast: BroadcastConfig::default(),
            loopback: LoopbackConfig::default(),
            flow: FlowConfig::default(),
            stream: StreamConfig::default(),
            reconfig: ReconfigConfig::default(),
            traffic: Vec::new(),
            script: Vec::new(),
            run: RunConfig::default(),
        }
    }
}

/// Fixed latencies and buffer sizes around the fabric.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    /// Round-trip latency of a zero-byte frame; the MAC constants are
    /// derived from it unless given explicitly.
    pub intercept_ps: u64,
    /// Receive MAC pipeline after the last byte, before scheduling.
    pub mac_in_ps: Option<u64>,
    /// Transmit MAC pipeline from the first byte to the wire.
    pub mac_out_ps: Option<u64>,
    /// Preamble, FCS and inter-frame gap per Ethernet frame.
    pub framing_bytes: u64,
    /// Receive buffer per interface; overflow drops.
    pub rx_fifo_bytes: u64,
    /// Transmit buffer per interface.
    pub tx_fifo_bytes: u64,
    pub ctrl_latency_cycles: u64,
    /// Link rate of the host interface.
    pub host_gbps: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            intercept_ps: REFERENCE_INTERCEPT_PS,
            mac_in_ps: None,
            mac_out_ps: None,
            framing_bytes: 24,
            rx_fifo_bytes: 280_000,
            tx_fifo_bytes: 64 << 10,
            ctrl_latency_cycles: 3,
            host_gbps: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconfigConfig {
    pub reload_ns: u64,
    /// Rate of the state save and restore transfers.
    pub state_gbps: u64,
}

impl Default for ReconfigConfig {
    fn default() -> Self {
        ReconfigConfig {
            reload_ns: 756_000_000,
            state_gbps: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Hard stop; `None` runs until the event queue empties.
    pub horizon_ns: Option<u64>,
    /// Throughput window at the traffic sink.
    pub measure_start_ns: u64,
    pub measure_end_ns: Option<u64>,
    /// Keep a line-oriented event log of at most this many lines.
    pub event_log_lines: Option<usize>,
    /// Memory dumps land here.
    pub dump_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "program", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HandlerSpec {
    Forwarder {
        #[serde(default)]
        port: Option<Iface>,
    },
    Sink,
    Firewall {
        #[serde(default)]
        rules: RulesSource,
    },
    StreamScan {
        #[serde(default)]
        payload_offset: u32,
    },
    TwoStep {
        #[serde(default = "default_out")]
        out: Iface,
    },
    FlowReorder,
    BcastWriter,
}

fn default_out() -> Iface {
    Iface::Eth1
}

impl Default for HandlerSpec {
    fn default() -> Self {
        HandlerSpec::Forwarder { port: None }
    }
}

impl HandlerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            HandlerSpec::Forwarder { .. } => "forwarder",
            HandlerSpec::Sink => "sink",
            HandlerSpec::Firewall { .. } => "firewall",
            HandlerSpec::StreamScan { .. } => "stream-scan",
            HandlerSpec::TwoStep { .. } => "two-step",
            HandlerSpec::FlowReorder => "flow-reorder",
            HandlerSpec::BcastWriter => "bcast-writer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RulesSource {
    Synthetic { seed: u64, count: usize },
    File { path: PathBuf },
}

impl Default for RulesSource {
    fn default() -> Self {
        RulesSource::Synthetic {
            seed: 7,
            count: 1050,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandlerOverride {
    pub pes: Vec<usize>,
    pub handler: HandlerSpec,
}

/// How the traffic source spaces frames. Packet counts are per port.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TrafficSpec {
    /// Back to back at line rate.
    FullThrottle {
        size: u64,
        ports: Vec<Iface>,
        packets: u64,
    },
    /// One frame every `interval_ns`.
    Paced {
        size: u64,
        ports: Vec<Iface>,
        interval_ns: u64,
        packets: u64,
    },
    /// Evenly spaced at a fraction of line rate.
    Load {
        size: u64,
        ports: Vec<Iface>,
        load: f64,
        packets: u64,
    },
    /// Replay of a capture file.
    Pcap {
        path: PathBuf,
        port: Iface,
        /// Divides every inter-arrival gap.
        #[serde(default)]
        speedup: Option<f64>,
    },
    /// TCP flows with a fraction of segments displaced.
    FlowSynth {
        port: Iface,
        flows: u32,
        packets: u64,
        size: u64,
        load: f64,
        reorder: f64,
        max_displacement: u32,
        #[serde(default = "default_burst")]
        burst: u32,
    },
    /// IPv4 traffic with sources drawn partly from the blacklist, plus
    /// some IPv6 frames.
    FirewallMix {
        ports: Vec<Iface>,
        packets: u64,
        size: u64,
        load: f64,
        blacklisted: f64,
        ipv6: f64,
    },
}

fn default_burst() -> u32 {
    8
}

impl TrafficSpec {
    pub fn ports(&self) -> Vec<Iface> {
        match self {
            TrafficSpec::FullThrottle { ports, .. }
            | TrafficSpec::Paced { ports, .. }
            | TrafficSpec::Load { ports, .. }
            | TrafficSpec::FirewallMix { ports, .. } => ports.clone(),
            TrafficSpec::Pcap { port, .. } | TrafficSpec::FlowSynth { port, .. } => vec![*port],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub at_ns: u64,
    #[serde(flatten)]
    pub op: HostOp,
}

/// A host action injected at a fixed simulated time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case", deny_unknown_fields)]
pub enum HostOp {
    SchedWrite { addr: u32, value: u32 },
    SchedRead { addr: u32 },
    Pause { pe: usize },
    Resume { pe: usize },
    Interrupt { pe: usize, bits: u32 },
    ReadCounters { pe: usize },
    ReadDebug { pe: usize },
    WriteDebug { pe: usize, value: u64 },
    Dump { pe: usize, region: Region },
    Reconfigure {
        pe: usize,
        #[serde(default)]
        handler: Option<HandlerSpec>,
    },
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Makes relative file references relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.exists() {
                *p = base.join(&*p);
            }
        };
        for t in &mut self.traffic {
            if let TrafficSpec::Pcap { path, .. } = t {
                fix(path);
            }
        }
        let mut specs: Vec<&mut HandlerSpec> = vec![&mut self.handler];
        specs.extend(self.overrides.iter_mut().map(|o| &mut o.handler));
        for s in specs {
            if let HandlerSpec::Firewall {
                rules: RulesSource::File { path },
            } = s
            {
                fix(path);
            }
        }
    }

    pub fn topology(&self) -> Topology {
        Topology::new(self.pes, self.fabric.pes_per_cluster).expect("validated topology")
    }

    /// Receive and transmit MAC constants. Unless given, the zero-byte
    /// round trip left after the fixed pipeline stages is split evenly.
    pub fn mac_constants(&self) -> (u64, u64) {
        let fixed = self.fixed_pipeline_ps();
        let rest = self.timing.intercept_ps.saturating_sub(fixed);
        match (self.timing.mac_in_ps, self.timing.mac_out_ps) {
            (Some(i), Some(o)) => (i, o),
            (Some(i), None) => (i, rest.saturating_sub(i)),
            (None, Some(o)) => (rest.saturating_sub(o), o),
            (None, None) => (rest / 2, rest - rest / 2),
        }
    }

    /// Zero-byte latency of everything between the two MACs.
    pub fn fixed_pipeline_ps(&self) -> u64 {
        let cyc = self.clock.cycle_ps();
        let hop = self.fabric.hop_cycles * cyc;
        let p = &self.processor;
        self.scheduler.decision_cycles * cyc
            + 2 * hop
            + hop
            + p.dma_setup_cycles * cyc
            + p.cost.base_cycles * cyc
            + p.tx_setup_cycles * cyc
            + 3 * hop
    }

    pub fn handler_for(&self, pe: usize) -> &HandlerSpec {
        self.overrides
            .iter()
            .rev()
            .find(|o| o.pes.contains(&pe))
            .map_or(&self.handler, |o| &o.handler)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.clock.validate().map_err(ConfigError::Invalid)?;
        Topology::new(self.pes, self.fabric.pes_per_cluster).map_err(ConfigError::Invalid)?;
        if self.pes > MAX_PES {
            return bad(format!("at most {MAX_PES} processors"));
        }
        self.processor.layout.validate().map_err(ConfigError::Invalid)?;
        self.flow.validate().map_err(ConfigError::Invalid)?;
        let slots = self.processor.layout.slot_count as usize;
        if self.fabric.queue_depth() < slots {
            return bad(format!(
                "fabric queues ({}) shallower than the {slots} slots they must absorb",
                self.fabric.queue_depth()
            ));
        }
        if self.timing.tx_fifo_bytes < self.limits.max_size + 4 {
            return bad("tx_fifo_bytes smaller than the largest frame".into());
        }
        if self.timing.rx_fifo_bytes < self.limits.max_size {
            return bad("rx_fifo_bytes smaller than the largest frame".into());
        }
        if self.limits.min_size > self.limits.max_size {
            return bad("min_size above max_size".into());
        }
        let lb = self.loopback.gbps;
        if lb == 0 || self.reconfig.state_gbps == 0 || self.timing.host_gbps == 0 {
            return bad("link rates must be positive".into());
        }
        if let Some(list) = &self.scheduler.ingress_pes {
            if let Some(p) = list.iter().find(|&&p| p >= self.pes) {
                return bad(format!("ingress processor {p} out of range"));
            }
        }
        for o in &self.overrides {
            if let Some(p) = o.pes.iter().find(|&&p| p >= self.pes) {
                return bad(format!("override for missing processor {p}"));
            }
        }
        let mut fed = [false; Iface::COUNT];
        for t in &self.traffic {
            self.validate_traffic(t)?;
            for p in t.ports() {
                if std::mem::replace(&mut fed[p.index()], true) {
                    return bad(format!("{} fed by two traffic sources", p.name()));
                }
            }
        }
        for s in &self.script {
            let pe = match &s.op {
                HostOp::SchedWrite { .. } | HostOp::SchedRead { .. } => None,
                HostOp::Pause { pe }
                | HostOp::Resume { pe }
                | HostOp::Interrupt { pe, .. }
                | HostOp::ReadCounters { pe }
                | HostOp::ReadDebug { pe }
                | HostOp::WriteDebug { pe, .. }
                | HostOp::Dump { pe, .. }
                | HostOp::Reconfigure { pe, .. } => Some(*pe),
            };
            if pe.is_some_and(|p| p >= self.pes) {
                return bad(format!("script targets missing processor {}", pe.unwrap()));
            }
        }
        Ok(())
    }

    fn validate_traffic(&self, t: &TrafficSpec) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for p in t.ports() {
            if p == Iface::Loopback {
                return bad("traffic cannot enter on the loopback port".into());
            }
        }
        if t.ports().is_empty() {
            return bad("traffic without ports".into());
        }
        let load = match t {
            TrafficSpec::Load { load, .. }
            | TrafficSpec::FlowSynth { load, .. }
            | TrafficSpec::FirewallMix { load, .. } => Some(*load),
            _ => None,
        };
        if let Some(l) = load {
            if !(l > 0.0 && l <= 1.0) {
                return bad(format!("offered load {l} outside (0, 1]"));
            }
        }
        match t {
            TrafficSpec::FlowSynth {
                flows,
                reorder,
                max_displacement,
                burst,
                ..
            } => {
                if *flows == 0 || *burst == 0 {
                    return bad("flow synth needs flows and a burst length".into());
                }
                if !(0.0..1.0).contains(reorder) {
                    return bad(format!("reorder fraction {reorder} outside [0, 1)"));
                }
                if *reorder > 0.0 && *max_displacement == 0 {
                    return bad("reordering needs a positive displacement".into());
                }
            }
            TrafficSpec::FirewallMix {
                blacklisted, ipv6, ..
            } => {
                if blacklisted + ipv6 > 1.0 {
                    return bad("firewall mix fractions exceed 1".into());
                }
            }
            TrafficSpec::Paced { interval_ns, .. } if *interval_ns == 0 => {
                return bad("paced interval must be positive".into());
            }
            TrafficSpec::Pcap {
                speedup: Some(s), ..
            } if *s <= 0.0 => {
                return bad("pcap speedup must be positive".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mac_split_matches_intercept() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.fixed_pipeline_ps(), 104_000);
        assert_eq!(cfg.mac_constants(), (330_500, 330_500));
        let mut c = cfg.clone();
        c.timing.mac_in_ps = Some(100_000);
        assert_eq!(c.mac_constants(), (100_000, 561_000));
    }

    #[test]
    fn toml_round_trip_and_unknown_fields() {
        let mut cfg = SimConfig::default();
        cfg.traffic.push(TrafficSpec::FullThrottle {
            size: 64,
            ports: vec![Iface::Eth0, Iface::Eth1],
            packets: 10,
        });
        cfg.script.push(ScriptEntry {
            at_ns: 5,
            op: HostOp::SchedWrite {
                addr: 0x13,
                value: 0,
            },
        });
        let text = cfg.to_toml();
        assert_eq!(SimConfig::from_toml(&text).unwrap(), cfg);
        assert!(SimConfig::from_toml("bogus = 1").is_err());
        assert!(SimConfig::from_toml("[timing]\nframing = 3").is_err());
        let stray = "[[script]]\nat_ns = 1\nop = \"pause\"\npe = 0\nbogus = 1";
        assert!(SimConfig::from_toml(stray).is_err());
        assert!(SimConfig::from_toml(&stray.replace("bogus = 1", "")).is_ok());
    }

    #[test]
    fn validation_catches_bad_topology() {
        let e = SimConfig::from_toml("pes = 6").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)), "{e}");
        let e = SimConfig::from_toml("pes = 8\n[fabric]\npes_per_cluster = 3").unwrap_err();
        assert!(e.to_string().contains("2 or 4"));
    }

    #[test]
    fn overrides_pick_last_match() {
        let cfg = SimConfig::from_toml(
            r#"
            pes = 4
            [[overrides]]
            pes = [1, 2]
            handler = { program = "sink" }
            [[overrides]]
            pes = [2]
            handler = { program = "flow-reorder" }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.handler_for(0).name(), "forwarder");
        assert_eq!(cfg.handler_for(1).name(), "sink");
        assert_eq!(cfg.handler_for(2).name(), "flow-reorder");
    }
}
