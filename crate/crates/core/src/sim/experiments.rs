//! Preset experiments: parameter sweeps over the engine, their CSV tables
//! and the thresholds each result is held to.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accelerators::{Accelerator, FirewallAccel, ACC_FW_MATCH, ACC_SRC_IP};
use crate::messaging::{run_broadcast, BcastWorkload};
use crate::model::{eq1_latency_ps, REFERENCE_INTERCEPT_PS};
use crate::packet::{parse_five_tuple, Iface, ETHERTYPE_IPV4};
use crate::processor::handler::flip;
use crate::scheduler::Policy;

use super::config::{ConfigError, HandlerSpec, HostOp, ScriptEntry, SimConfig, TrafficSpec};
use super::engine::{run, run_with_hooks, Hooks, RuleSet, SimError};
use super::metrics::MetricsSnapshot;
use super::traffic::{port_seed, FirewallMix, FlowSynth, FlowSynthParams, MixKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Fig6a,
    Fig6b,
    Fig7Latency,
    BroadcastLatency,
    LoopbackThroughput,
    Firewall,
    FlowReorder,
    Reconfig,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Fig6a,
        Preset::Fig6b,
        Preset::Fig7Latency,
        Preset::BroadcastLatency,
        Preset::LoopbackThroughput,
        Preset::Firewall,
        Preset::FlowReorder,
        Preset::Reconfig,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig6a => "fig6a",
            Preset::Fig6b => "fig6b",
            Preset::Fig7Latency => "fig7-latency",
            Preset::BroadcastLatency => "broadcast-latency",
            Preset::LoopbackThroughput => "loopback-throughput",
            Preset::Firewall => "firewall",
            Preset::FlowReorder => "flow-reorder",
            Preset::Reconfig => "reconfig",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "fig7" => Some(Preset::Fig7Latency),
            "broadcast" => Some(Preset::BroadcastLatency),
            "loopback" => Some(Preset::LoopbackThroughput),
            _ => Preset::ALL.into_iter().find(|p| p.name() == s),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Preset::Fig6a => "full-throttle forwarding vs frame size, 16 processors",
            Preset::Fig6b => "full-throttle forwarding vs frame size, 8 processors",
            Preset::Fig7Latency => "low-load round-trip latency vs frame size",
            Preset::BroadcastLatency => "broadcast write latency, paced and full rate",
            Preset::LoopbackThroughput => "two-step forwarding through the loopback port",
            Preset::Firewall => "blacklist firewall on a mixed IPv4/IPv6 stream",
            Preset::FlowReorder => "per-flow TCP reordering vs segment displacement",
            Preset::Reconfig => "reconfiguring one processor under load",
        }
    }

    /// Version tag written into the first CSV column.
    pub fn schema(self) -> String {
        format!("{}.v1", self.name())
    }

    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Preset::Fig6a | Preset::Fig6b | Preset::LoopbackThroughput => &[
                "schema",
                "pes",
                "size",
                "packets",
                "offered_mpps",
                "achieved_mpps",
                "fraction",
                "offered_gbps",
                "achieved_gbps",
                "drops",
                "loopback_frames",
                "p50_latency_ns",
            ],
            Preset::Fig7Latency => &[
                "schema", "size", "packets", "min_ns", "mean_ns", "p99_ns", "max_ns", "eq1_ns",
                "error_pct",
            ],
            Preset::BroadcastLatency => &[
                "schema",
                "mode",
                "messages",
                "measured",
                "min_ns",
                "mean_ns",
                "max_ns",
                "fifo_wait_min_ns",
                "fifo_wait_max_ns",
            ],
            Preset::Firewall => &[
                "schema",
                "packets",
                "blacklisted_offered",
                "clean_offered",
                "ipv6_offered",
                "forwarded",
                "blocked",
                "blacklist_leaks",
                "clean_dropped",
                "unflipped",
                "probes",
                "probe_mismatches",
                "lookup_cycles",
            ],
            Preset::FlowReorder => &[
                "schema",
                "max_displacement",
                "packets",
                "displaced",
                "holds",
                "released",
                "escalations",
                "escalation_drops",
                "late",
                "order_violations",
                "affinity_violations",
                "delivered",
                "dropped",
                "conserved",
            ],
            Preset::Reconfig => &[
                "schema",
                "pe",
                "packets",
                "start_ns",
                "drained_ns",
                "reload_ms",
                "done_ns",
                "offered",
                "delivered",
                "drops",
                "drops_during",
                "conserved",
            ],
        }
    }
}

/// Full-throttle frame-size sweep. Packet counts are per port.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSweep {
    pub sizes: Vec<u64>,
    pub ports: Vec<Iface>,
    pub packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencySweep {
    pub sizes: Vec<u64>,
    pub port: Iface,
    pub interval_ns: u64,
    pub packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BcastSweep {
    pub paced_src: usize,
    pub paced_period: u64,
    pub paced_count: u64,
    pub full_cycles: u64,
    pub full_warmup: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirewallSweep {
    pub ports: Vec<Iface>,
    /// Per port.
    pub packets: u64,
    pub size: u64,
    pub load: f64,
    pub blacklisted: f64,
    pub ipv6: f64,
    /// Random addresses checked against the reference set.
    pub probes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderSweep {
    pub displacements: Vec<u32>,
    pub port: Iface,
    pub flows: u32,
    pub packets: u64,
    pub size: u64,
    pub load: f64,
    pub reorder: f64,
    pub burst: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconfigSweep {
    pub pe: usize,
    pub at_ns: u64,
    pub port: Iface,
    pub size: u64,
    pub load: f64,
    pub packets: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Sweep {
    Fig6a(RateSweep),
    Fig6b(RateSweep),
    Fig7Latency(LatencySweep),
    BroadcastLatency(BcastSweep),
    LoopbackThroughput(RateSweep),
    Firewall(FirewallSweep),
    FlowReorder(ReorderSweep),
    Reconfig(ReconfigSweep),
}

impl Sweep {
    pub fn preset(&self) -> Preset {
        match self {
            Sweep::Fig6a(_) => Preset::Fig6a,
            Sweep::Fig6b(_) => Preset::Fig6b,
            Sweep::Fig7Latency(_) => Preset::Fig7Latency,
            Sweep::BroadcastLatency(_) => Preset::BroadcastLatency,
            Sweep::LoopbackThroughput(_) => Preset::LoopbackThroughput,
            Sweep::Firewall(_) => Preset::Firewall,
            Sweep::FlowReorder(_) => Preset::FlowReorder,
            Sweep::Reconfig(_) => Preset::Reconfig,
        }
    }
}

pub const THROUGHPUT_SIZES: [u64; 11] = [64, 65, 128, 256, 512, 1024, 1500, 2048, 4096, 8192, 9000];
pub const LATENCY_SIZES: [u64; 10] = [64, 128, 256, 512, 1024, 1500, 2048, 4096, 8192, 9000];

/// A preset with its parameters and the configuration every point starts
/// from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDef {
    pub name: String,
    pub sweep: Sweep,
    pub base: SimConfig,
}

impl ExperimentDef {
    pub fn preset(&self) -> Preset {
        self.sweep.preset()
    }

    /// The shipped definition of a preset.
    pub fn builtin(p: Preset) -> Self {
        let mut base = SimConfig {
            name: p.name().into(),
            ..SimConfig::default()
        };
        let both = vec![Iface::Eth0, Iface::Eth1];
        let rate = |packets| RateSweep {
            sizes: THROUGHPUT_SIZES.to_vec(),
            ports: both.clone(),
            packets,
        };
        let sweep = match p {
            Preset::Fig6a => Sweep::Fig6a(rate(500_000)),
            Preset::Fig6b => {
                base.pes = 8;
                Sweep::Fig6b(rate(500_000))
            }
            Preset::Fig7Latency => Sweep::Fig7Latency(LatencySweep {
                sizes: LATENCY_SIZES.to_vec(),
                port: Iface::Eth0,
                interval_ns: 10_000,
                packets: 200,
            }),
            Preset::BroadcastLatency => Sweep::BroadcastLatency(BcastSweep {
                paced_src: 5,
                paced_period: 100,
                paced_count: 1_000,
                full_cycles: 50_000,
                full_warmup: 10_000,
            }),
            Preset::LoopbackThroughput => {
                base.handler = HandlerSpec::TwoStep { out: Iface::Eth1 };
                base.scheduler.ingress_pes = Some((0..base.pes / 2).collect());
                Sweep::LoopbackThroughput(RateSweep {
                    sizes: THROUGHPUT_SIZES.to_vec(),
                    ports: vec![Iface::Eth0],
                    packets: 500_000,
                })
            }
            Preset::Firewall => {
                base.handler = HandlerSpec::Firewall {
                    rules: Default::default(),
                };
                Sweep::Firewall(FirewallSweep {
                    ports: both,
                    packets: 500_000,
                    size: 128,
                    load: 0.5,
                    blacklisted: 0.25,
                    ipv6: 0.05,
                    probes: 1_000_000,
                })
            }
            Preset::FlowReorder => {
                base.handler = HandlerSpec::FlowReorder;
                base.scheduler.policy = Policy::Hash;
                Sweep::FlowReorder(ReorderSweep {
                    displacements: vec![1, 2, 4, 8, 12, 16, 24],
                    port: Iface::Eth0,
                    flows: 64,
                    packets: 200_000,
                    size: 256,
                    load: 0.4,
                    reorder: 0.01,
                    burst: 32,
                })
            }
            Preset::Reconfig => Sweep::Reconfig(ReconfigSweep {
                pe: 3,
                at_ns: 100_000,
                port: Iface::Eth0,
                size: 1500,
                load: 0.5,
                packets: 200_000,
            }),
        };
        ExperimentDef {
            name: p.name().into(),
            sweep,
            base,
        }
    }

    pub fn to_toml(&self) -> String {
        let head = format!("# {}: {}\n", self.name, self.preset().describe());
        head + &toml::to_string(self).expect("definition serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::from_toml_with(text, &[])
    }

    /// Parses a definition after applying `key=value` overrides, where the
    /// key is a dotted path such as `sweep.packets` or `base.seed`.
    pub fn from_toml_with(text: &str, sets: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut v: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, val) in sets {
            set_path(&mut v, k, val).map_err(ConfigError::Invalid)?;
        }
        let def: ExperimentDef = v.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        def.base.validate()?;
        Ok(def)
    }

    pub fn with_overrides(&self, sets: &[(String, String)]) -> Result<Self, ConfigError> {
        Self::from_toml_with(&toml::to_string(self).expect("definition serializes"), sets)
    }
}

/// Sets one dotted path in a TOML tree. Values are read as TOML literals,
/// falling back to a bare string.
pub fn set_path(root: &mut toml::Value, key: &str, raw: &str) -> Result<(), String> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("bad key {key:?}"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("{key}: {part:?} is not an array index"))?;
                let len = a.len();
                let slot = a
                    .get_mut(idx)
                    .ok_or_else(|| format!("{key}: index {idx} past the {len} entries"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("{key}: {part:?} is inside a plain value")),
        };
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail,
    /// Calibration figures that carry no threshold.
    Reported,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Reported => "INFO",
        }
    }

    fn of(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    /// Acceptance criterion number.
    pub criterion: u8,
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(criterion: u8, name: &str, status: Status, detail: String) -> Self {
        Check {
            criterion,
            name: name.into(),
            status,
            detail,
        }
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} [{}] {}: {}",
            self.status.label(),
            self.criterion,
            self.name,
            self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub preset: Preset,
    pub rows: Vec<Vec<String>>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.preset.columns()).expect("in-memory write");
        let schema = self.preset.schema();
        for r in &self.rows {
            w.write_record(std::iter::once(schema.as_str()).chain(r.iter().map(String::as_str)))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

fn f(v: f64, digits: usize) -> String {
    format!("{v:.digits$}")
}

/// Runs every point of a preset; points are independent and run in
/// parallel, rows come back in sweep order.
pub fn run_experiment(def: &ExperimentDef) -> Result<Outcome, SimError> {
    def.base.validate()?;
    let (rows, checks) = match &def.sweep {
        Sweep::Fig6a(s) | Sweep::Fig6b(s) | Sweep::LoopbackThroughput(s) => {
            rate_experiment(def.preset(), &def.base, s)?
        }
        Sweep::Fig7Latency(s) => latency_experiment(&def.base, s)?,
        Sweep::BroadcastLatency(s) => broadcast_experiment(&def.base, s),
        Sweep::Firewall(s) => firewall_experiment(&def.base, s)?,
        Sweep::FlowReorder(s) => reorder_experiment(&def.base, s)?,
        Sweep::Reconfig(s) => reconfig_experiment(&def.base, s)?,
    };
    Ok(Outcome {
        name: def.name.clone(),
        preset: def.preset(),
        rows,
        checks,
    })
}

type Table = (Vec<Vec<String>>, Vec<Check>);

/// Throughput window: the middle 80% of the arrival span.
fn set_window(cfg: &mut SimConfig, size: u64, packets: u64) {
    let span = cfg
        .rates
        .external()
        .nth_start(size + cfg.timing.framing_bytes, packets)
        .as_ps();
    cfg.run.measure_start_ns = span / 10 / 1000;
    cfg.run.measure_end_ns = Some(span * 9 / 10 / 1000);
}

struct RatePoint {
    size: u64,
    offered_pps: f64,
    m: MetricsSnapshot,
}

impl RatePoint {
    fn fraction(&self) -> f64 {
        self.m.window_pps() / self.offered_pps
    }

    fn full_rate(&self) -> bool {
        self.m.drops.total() == 0 && self.fraction() >= 0.999
    }
}

fn rate_experiment(p: Preset, base: &SimConfig, s: &RateSweep) -> Result<Table, SimError> {
    let points: Vec<RatePoint> = s
        .sizes
        .par_iter()
        .map(|&size| {
            let mut cfg = base.clone();
            cfg.name = format!("{}-{size}", base.name);
            cfg.traffic = vec![TrafficSpec::FullThrottle {
                size,
                ports: s.ports.clone(),
                packets: s.packets,
            }];
            set_window(&mut cfg, size, s.packets);
            let per_port = 1e12
                / cfg
                    .rates
                    .external()
                    .ser_time(size + cfg.timing.framing_bytes)
                    .as_ps() as f64;
            Ok(RatePoint {
                size,
                offered_pps: per_port * s.ports.len() as f64,
                m: run(&cfg)?,
            })
        })
        .collect::<Result<_, SimError>>()?;
    let total = s.packets * s.ports.len() as u64;
    let rows = points
        .iter()
        .map(|pt| {
            let m = &pt.m;
            let secs = m.window_len().as_secs_f64();
            let bytes: u64 = m.ifaces.iter().map(|(_, x)| x.window_bytes).sum();
            let gbps = if secs > 0.0 { bytes as f64 * 8.0 / secs / 1e9 } else { 0.0 };
            vec![
                base.pes.to_string(),
                pt.size.to_string(),
                total.to_string(),
                f(pt.offered_pps / 1e6, 3),
                f(m.window_pps() / 1e6, 3),
                f(pt.fraction(), 4),
                f(pt.offered_pps * pt.size as f64 * 8.0 / 1e9, 3),
                f(gbps, 3),
                m.drops.total().to_string(),
                m.loopback_frames.to_string(),
                f(m.latency.p50 as f64 / 1e3, 1),
            ]
        })
        .collect();
    let mut checks = Vec::new();
    let cap_mpps = base.pes as f64 * 1e12
        / (base.clock.cycle_ps() * base.processor.cost.base_cycles) as f64
        / 1e6;
    let by_size = |sz: u64| points.iter().find(|pt| pt.size == sz);
    match p {
        Preset::Fig6a | Preset::Fig6b => {
            let small: &[u64] = if p == Preset::Fig6a { &[64, 65] } else { &[64] };
            for &sz in small {
                let Some(pt) = by_size(sz) else { continue };
                let got = pt.m.window_pps() / 1e6;
                let ok = (got - cap_mpps).abs() <= cap_mpps * 0.005 && total >= 1_000_000;
                checks.push(Check::new(
                    2,
                    &format!("{} rate cap at {sz} B", p.name()),
                    Status::of(ok),
                    format!(
                        "{got:.2} Mpps ({:.1}% of offered) over {total} packets, target {cap_mpps:.0} Mpps +-0.5%",
                        pt.fraction() * 100.0
                    ),
                ));
            }
            let big: Vec<&RatePoint> = points.iter().filter(|pt| pt.size >= 128).collect();
            if p == Preset::Fig6a {
                let bad: Vec<String> = big
                    .iter()
                    .filter(|pt| !pt.full_rate())
                    .map(|pt| format!("{} B at {:.2}%", pt.size, pt.fraction() * 100.0))
                    .collect();
                checks.push(Check::new(
                    3,
                    "fig6a line rate from 128 B",
                    Status::of(!big.is_empty() && bad.is_empty()),
                    if bad.is_empty() {
                        format!("{} sizes forwarded in full without drops", big.len())
                    } else {
                        format!("short of line rate: {}", bad.join(", "))
                    },
                ));
            } else {
                let first = points.iter().find(|pt| {
                    pt.full_rate() && points.iter().all(|q| q.size < pt.size || q.full_rate())
                });
                checks.push(Check::new(
                    3,
                    "fig6b line-rate threshold",
                    Status::Reported,
                    match first {
                        Some(pt) => format!("full rate from {} B (reference figure: 1024 B)", pt.size),
                        None => "never reaches full rate".into(),
                    },
                ));
            }
        }
        Preset::LoopbackThroughput => {
            let big: Vec<&RatePoint> = points.iter().filter(|pt| pt.size >= 128).collect();
            let bad: Vec<String> = big
                .iter()
                .filter(|pt| !pt.full_rate())
                .map(|pt| format!("{} B at {:.2}%", pt.size, pt.fraction() * 100.0))
                .collect();
            checks.push(Check::new(
                5,
                "two-step line rate from 128 B",
                Status::of(!big.is_empty() && bad.is_empty()),
                if bad.is_empty() {
                    format!("{} sizes at 100 Gbps line rate without drops", big.len())
                } else {
                    format!("short of line rate: {}", bad.join(", "))
                },
            ));
            for (sz, target) in [(64, 60), (65, 61)] {
                if let Some(pt) = by_size(sz) {
                    checks.push(Check::new(
                        5,
                        &format!("two-step {sz} B"),
                        Status::Reported,
                        format!(
                            "{:.1}% of line rate (calibration target {target}%)",
                            pt.fraction() * 100.0
                        ),
                    ));
                }
            }
        }
        _ => unreachable!("not a rate preset"),
    }
    Ok((rows, checks))
}

fn latency_experiment(base: &SimConfig, s: &LatencySweep) -> Result<Table, SimError> {
    let snaps: Vec<(u64, MetricsSnapshot)> = s
        .sizes
        .par_iter()
        .map(|&size| {
            let mut cfg = base.clone();
            cfg.name = format!("{}-{size}", base.name);
            cfg.traffic = vec![TrafficSpec::Paced {
                size,
                ports: vec![s.port],
                interval_ns: s.interval_ns,
                packets: s.packets,
            }];
            Ok((size, run(&cfg)?))
        })
        .collect::<Result<_, SimError>>()?;
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    let rows = snaps
        .iter()
        .map(|(size, m)| {
            let l = &m.latency;
            let eq1 = eq1_latency_ps(*size) as f64;
            let err = (l.mean - eq1) / eq1 * 100.0;
            worst = worst.max(err.abs());
            if l.count != s.packets {
                missing.push(*size);
            }
            vec![
                size.to_string(),
                l.count.to_string(),
                f(l.min as f64 / 1e3, 3),
                f(l.mean / 1e3, 3),
                f(l.p99 as f64 / 1e3, 3),
                f(l.max as f64 / 1e3, 3),
                f(eq1 / 1e3, 3),
                f(err, 3),
            ]
        })
        .collect();
    let (mi, mo) = base.mac_constants();
    let zero = mi + mo + base.fixed_pipeline_ps();
    let checks = vec![
        Check::new(
            1,
            "latency follows the reference line",
            Status::of(worst <= 3.0 && missing.is_empty() && !snaps.is_empty()),
            if missing.is_empty() {
                format!("worst mean error {worst:.3}% over {} sizes, limit 3%", snaps.len())
            } else {
                format!("frames lost at sizes {missing:?}")
            },
        ),
        Check::new(
            1,
            "zero-byte intercept",
            Status::of(zero == REFERENCE_INTERCEPT_PS),
            format!("{zero} ps, reference {REFERENCE_INTERCEPT_PS} ps"),
        ),
    ];
    Ok((rows, checks))
}

fn broadcast_experiment(base: &SimConfig, s: &BcastSweep) -> Table {
    let topo = base.topology();
    let ns = base.clock.cycle_ps() as f64 / 1e3;
    let paced = run_broadcast(
        &base.broadcast,
        topo,
        BcastWorkload::Paced {
            src: s.paced_src.min(base.pes - 1),
            period: s.paced_period,
            count: s.paced_count,
        },
    );
    let full = run_broadcast(
        &base.broadcast,
        topo,
        BcastWorkload::FullRate {
            cycles: s.full_cycles,
            warmup: s.full_warmup,
        },
    );
    let ext = |v: &[u64]| {
        (
            v.iter().copied().min().unwrap_or(0),
            v.iter().copied().max().unwrap_or(0),
        )
    };
    let row = |mode: &str, r: &crate::messaging::BcastReport| {
        let (wmin, wmax) = ext(&r.fifo_waits);
        vec![
            mode.to_string(),
            r.messages.to_string(),
            r.latencies.len().to_string(),
            f(r.min() as f64 * ns, 1),
            f(r.mean() * ns, 1),
            f(r.max() as f64 * ns, 1),
            f(wmin as f64 * ns, 1),
            f(wmax as f64 * ns, 1),
        ]
    };
    let rows = vec![row("paced", &paced), row("full-rate", &full)];
    let (pmin, pmax) = (paced.min() as f64 * ns, paced.max() as f64 * ns);
    let (fmin, fmax) = (full.min() as f64 * ns, full.max() as f64 * ns);
    let (wmin, wmax) = ext(&full.fifo_waits);
    let (wmin, wmax) = (wmin as f64 * ns, wmax as f64 * ns);
    let checks = vec![
        Check::new(
            4,
            "paced broadcast latency",
            Status::of(!paced.latencies.is_empty() && pmin >= 72.0 && pmax <= 92.0),
            format!("{pmin:.0}..{pmax:.0} ns, window 72..92 ns"),
        ),
        Check::new(
            4,
            "full-rate FIFO drain",
            Status::of(!full.fifo_waits.is_empty() && wmin == 1152.0 && wmax == 1152.0),
            format!("{wmin:.0}..{wmax:.0} ns in the writer FIFO, expected exactly 1152 ns"),
        ),
        Check::new(
            4,
            "full-rate broadcast latency",
            Status::of(!full.latencies.is_empty() && fmin >= 1500.0 && fmax <= 1700.0),
            format!("{fmin:.0}..{fmax:.0} ns, window 1500..1700 ns"),
        ),
    ];
    (rows, checks)
}

fn firewall_experiment(base: &SimConfig, s: &FirewallSweep) -> Result<Table, SimError> {
    let mut cfg = base.clone();
    if !matches!(cfg.handler, HandlerSpec::Firewall { .. }) {
        return Err(ConfigError::Invalid("firewall preset needs the firewall program".into()).into());
    }
    let spec = TrafficSpec::FirewallMix {
        ports: s.ports.clone(),
        packets: s.packets,
        size: s.size,
        load: s.load,
        blacklisted: s.blacklisted,
        ipv6: s.ipv6,
    };
    cfg.traffic = vec![spec.clone()];
    let rules = RuleSet::for_config(&cfg)?;

    // offered mix, regenerated from the same seeds the engine uses
    let mut offered = [0u64; 3];
    for &p in &s.ports {
        let mut mix = FirewallMix::new(&spec, cfg.seed, p, rules.rules.clone(), rules.oracle.clone());
        for _ in 0..s.packets {
            offered[mix.next().1 as usize] += 1;
        }
    }

    #[derive(Default)]
    struct Seen {
        forwarded: u64,
        leaks: u64,
        clean: u64,
        unflipped: u64,
    }
    let seen = Arc::new(Mutex::new(Seen::default()));
    let oracle = rules.oracle.clone();
    let sink = seen.clone();
    let hooks = Hooks {
        on_egress: Some(Box::new(move |pkt, port, _| {
            let mut s = sink.lock().unwrap();
            s.forwarded += 1;
            let d = &pkt.data;
            let ipv4 = d.len() >= 14 && u16::from_be_bytes([d[12], d[13]]) == ETHERTYPE_IPV4;
            match parse_five_tuple(d).filter(|_| ipv4) {
                Some(t) if oracle.contains(t.src_ip) => s.leaks += 1,
                Some(_) => s.clean += 1,
                None => s.leaks += 1,
            }
            if port != flip(pkt.arrival_port) {
                s.unflipped += 1;
            }
        })),
        on_assign: None,
    };
    let m = run_with_hooks(&cfg, hooks)?;
    let seen = seen.lock().unwrap();
    let blocked: u64 = m
        .pes
        .iter()
        .flat_map(|p| p.program_counters.iter())
        .filter(|(k, _)| k == "fw_blocked" || k == "fw_non_ipv4")
        .map(|(_, v)| v)
        .sum();
    let clean_offered = offered[MixKind::Clean as usize];
    let clean_dropped = clean_offered.saturating_sub(seen.clean);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_F00D);
    let mut mismatches = 0u64;
    for i in 0..s.probes {
        let ip = if i % 2 == 0 {
            rng.gen::<u32>()
        } else {
            let r = rules.rules[rng.gen_range(0..rules.rules.len())];
            r.net | (rng.gen::<u32>() & !r.mask())
        };
        if rules.matcher.match_ip(ip) != rules.oracle.contains(ip) {
            mismatches += 1;
        }
    }
    let mut acc = FirewallAccel::new(rules.matcher.clone());
    let issue = 1_000;
    let lookup = acc
        .write(issue, ACC_SRC_IP, rules.rules[0].net)
        .and_then(|_| acc.read(issue, ACC_FW_MATCH))
        .map_or(u64::MAX, |(_, ready)| ready - issue);

    let total = s.packets * s.ports.len() as u64;
    let rows = vec![vec![
        total.to_string(),
        offered[MixKind::Blacklisted as usize].to_string(),
        clean_offered.to_string(),
        offered[MixKind::Ipv6 as usize].to_string(),
        seen.forwarded.to_string(),
        blocked.to_string(),
        seen.leaks.to_string(),
        clean_dropped.to_string(),
        seen.unflipped.to_string(),
        s.probes.to_string(),
        mismatches.to_string(),
        lookup.to_string(),
    ]];
    let checks = vec![
        Check::new(
            6,
            "no blacklisted source forwarded",
            Status::of(seen.leaks == 0 && total >= 1_000_000),
            format!(
                "{} leaks among {} forwarded, {total} offered",
                seen.leaks, seen.forwarded
            ),
        ),
        Check::new(
            6,
            "no clean IPv4 frame dropped",
            Status::of(clean_dropped == 0 && m.drops.total() == blocked),
            format!(
                "{clean_dropped} of {clean_offered} clean frames missing, {} drops outside the handler",
                m.drops.total() - m.drops.handler
            ),
        ),
        Check::new(
            6,
            "forwarded frames leave on the other port",
            Status::of(seen.unflipped == 0),
            format!("{} frames on the wrong port", seen.unflipped),
        ),
        Check::new(
            6,
            "matcher agrees with the flat reference",
            Status::of(mismatches == 0 && s.probes >= 1_000_000),
            format!("{mismatches} mismatches in {} probes", s.probes),
        ),
        Check::new(
            6,
            "lookup latency",
            Status::of(lookup == 2),
            format!("{lookup} cycles, expected 2"),
        ),
    ];
    Ok((rows, checks))
}

fn reorder_experiment(base: &SimConfig, s: &ReorderSweep) -> Result<Table, SimError> {
    if base.scheduler.policy != Policy::Hash {
        return Err(ConfigError::Invalid("flow-reorder preset needs the hash policy".into()).into());
    }
    if too_small_for_tag(s.size) {
        return Err(ConfigError::Invalid(format!(
            "flow-reorder frames of {} B cannot carry a segment tag",
            s.size
        ))
        .into());
    }
    let capacity = base.flow.reorder_capacity as u32;
    struct Point {
        d: u32,
        displaced: u64,
        counters: BTreeMap<String, u64>,
        order: u64,
        affinity: u64,
        m: MetricsSnapshot,
    }
    let points: Vec<Point> = s
        .displacements
        .par_iter()
        .map(|&d| {
            let mut cfg = base.clone();
            cfg.name = format!("{}-d{d}", base.name);
            cfg.traffic = vec![TrafficSpec::FlowSynth {
                port: s.port,
                flows: s.flows,
                packets: s.packets,
                size: s.size,
                load: s.load,
                reorder: s.reorder,
                max_displacement: d,
                burst: s.burst,
            }];
            let synth = FlowSynth::new(
                &FlowSynthParams {
                    flows: s.flows,
                    packets: s.packets,
                    size: s.size,
                    reorder: s.reorder,
                    max_displacement: d,
                    burst: s.burst,
                },
                port_seed(cfg.seed, s.port),
            );
            let flows = s.flows as usize;
            let owner = Arc::new(Mutex::new((vec![usize::MAX; flows], 0u64)));
            let last = Arc::new(Mutex::new((vec![None::<u32>; flows], 0u64)));
            let (o2, l2) = (owner.clone(), last.clone());
            let hooks = Hooks {
                on_assign: Some(Box::new(move |pkt, pe, _| {
                    let (f, _) = segment_tag(&pkt.data);
                    let mut o = o2.lock().unwrap();
                    match o.0[f as usize] {
                        usize::MAX => o.0[f as usize] = pe,
                        p if p != pe => o.1 += 1,
                        _ => {}
                    }
                })),
                on_egress: Some(Box::new(move |pkt, _, _| {
                    let (f, idx) = segment_tag(&pkt.data);
                    let mut l = l2.lock().unwrap();
                    if l.0[f as usize].is_some_and(|prev| idx <= prev) {
                        l.1 += 1;
                    }
                    l.0[f as usize] = Some(idx);
                })),
            };
            let m = run_with_hooks(&cfg, hooks)?;
            let mut counters = BTreeMap::new();
            for p in &m.pes {
                for (k, v) in &p.program_counters {
                    *counters.entry(k.clone()).or_insert(0) += v;
                }
            }
            let affinity = owner.lock().unwrap().1;
            let order = last.lock().unwrap().1;
            Ok(Point {
                d,
                displaced: synth.displaced,
                counters,
                order,
                affinity,
                m,
            })
        })
        .collect::<Result<_, SimError>>()?;
    let c = |pt: &Point, k: &str| pt.counters.get(k).copied().unwrap_or(0);
    let rows = points
        .iter()
        .map(|pt| {
            vec![
                pt.d.to_string(),
                s.packets.to_string(),
                pt.displaced.to_string(),
                c(pt, "holds").to_string(),
                c(pt, "released").to_string(),
                c(pt, "escalations").to_string(),
                c(pt, "escalation_drops").to_string(),
                c(pt, "late").to_string(),
                pt.order.to_string(),
                pt.affinity.to_string(),
                pt.m.delivered().to_string(),
                pt.m.drops.total().to_string(),
                pt.m.conservation.holds().to_string(),
            ]
        })
        .collect();
    let affinity: u64 = points.iter().map(|pt| pt.affinity).sum();
    let within: Vec<&Point> = points.iter().filter(|pt| pt.d <= capacity).collect();
    let beyond: Vec<&Point> = points.iter().filter(|pt| pt.d > capacity).collect();
    let clean = |pt: &&Point| {
        c(pt, "escalations") == 0
            && c(pt, "late") == 0
            && pt.order == 0
            && pt.m.drops.total() == 0
            && pt.displaced > 0
    };
    let bad_within: Vec<u32> = within.iter().filter(|pt| !clean(pt)).map(|pt| pt.d).collect();
    let bad_beyond: Vec<u32> = beyond
        .iter()
        .filter(|pt| c(pt, "escalations") == 0 || !pt.m.conservation.holds())
        .map(|pt| pt.d)
        .collect();
    let checks = vec![
        Check::new(
            7,
            "flow affinity",
            Status::of(affinity == 0 && !points.is_empty()),
            format!("{affinity} frames placed away from their flow's processor"),
        ),
        Check::new(
            7,
            "in-order release within capacity",
            Status::of(!within.is_empty() && bad_within.is_empty()),
            if bad_within.is_empty() {
                format!(
                    "displacements {:?}: in order, no escalations",
                    within.iter().map(|pt| pt.d).collect::<Vec<_>>()
                )
            } else {
                let why: Vec<String> = within
                    .iter()
                    .filter(|pt| !clean(pt))
                    .map(|pt| {
                        format!(
                            "d={}: {} escalations, {} out of order, {} dropped",
                            pt.d,
                            c(pt, "escalations"),
                            pt.order,
                            pt.m.drops.total()
                        )
                    })
                    .collect();
                format!("not clean within capacity: {}", why.join("; "))
            },
        ),
        Check::new(
            7,
            "escalation beyond capacity",
            Status::of(!beyond.is_empty() && bad_beyond.is_empty()),
            if bad_beyond.is_empty() {
                format!(
                    "escalations {:?}, frames conserved",
                    beyond.iter().map(|pt| c(pt, "escalations")).collect::<Vec<_>>()
                )
            } else {
                format!("no escalation or lost frames at displacements {bad_beyond:?}")
            },
        ),
    ];
    Ok((rows, checks))
}

/// Segments need eight payload bytes for the flow and index tag.
fn too_small_for_tag(size: u64) -> bool {
    size < 54 + 8
}

fn segment_tag(d: &[u8]) -> (u32, u32) {
    let word = |o: usize| u32::from_be_bytes(d[o..o + 4].try_into().unwrap());
    (word(54), word(58))
}

fn reconfig_experiment(base: &SimConfig, s: &ReconfigSweep) -> Result<Table, SimError> {
    let mut cfg = base.clone();
    cfg.traffic = vec![TrafficSpec::Load {
        size: s.size,
        ports: vec![s.port],
        load: s.load,
        packets: s.packets,
    }];
    cfg.script.push(ScriptEntry {
        at_ns: s.at_ns,
        op: HostOp::Reconfigure {
            pe: s.pe,
            handler: None,
        },
    });
    let m = run(&cfg)?;
    let rec = m.reconfigs.iter().find(|r| r.pe == s.pe);
    let ns = |t: Option<crate::model::SimTime>| t.map_or(String::new(), |t| (t.as_ps() / 1000).to_string());
    let reload = rec
        .and_then(|r| Some(r.reload_end? - r.reload_start?))
        .map(|t| t.as_ps());
    let rows = vec![vec![
        s.pe.to_string(),
        s.packets.to_string(),
        rec.map_or(String::new(), |r| (r.start.as_ps() / 1000).to_string()),
        ns(rec.and_then(|r| r.drained_at)),
        reload.map_or(String::new(), |r| f(r as f64 / 1e9, 3)),
        ns(rec.and_then(|r| r.done_at)),
        m.offered().to_string(),
        m.delivered().to_string(),
        m.drops.total().to_string(),
        rec.map_or(String::new(), |r| r.drops_during.to_string()),
        m.conservation.holds().to_string(),
    ]];
    let done = rec.is_some_and(|r| r.done_at.is_some());
    let want = cfg.reconfig.reload_ns * 1000;
    let checks = vec![
        Check::new(
            8,
            "reconfiguration without loss",
            Status::of(
                done && m.drops.total() == 0
                    && rec.is_some_and(|r| r.drops_during == 0)
                    && m.conservation.holds()
                    && m.delivered() == s.packets,
            ),
            format!(
                "{} offered, {} delivered, {} dropped, completed: {done}",
                m.offered(),
                m.delivered(),
                m.drops.total()
            ),
        ),
        Check::new(
            8,
            "reload time",
            Status::of(reload == Some(want)),
            format!(
                "{} ms, configured {} ms",
                reload.map_or("none".into(), |r| f(r as f64 / 1e9, 3)),
                want as f64 / 1e9
            ),
        ),
    ];
    Ok((rows, checks))
}
