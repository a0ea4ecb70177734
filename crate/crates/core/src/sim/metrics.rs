//! Run counters, latency histograms and their CSV form.

use std::fmt::Write as _;

use hdrhistogram::Histogram;
use serde::Serialize;

use crate::messaging::BcastStats;
use crate::model::SimTime;
use crate::packet::Iface;
use crate::processor::PeCounters;
use crate::scheduler::SchedStats;

pub const METRICS_SCHEMA: &str = "metrics.v1";

/// Largest value the histogram resolves; larger ones land in the top
/// bucket (about 17.6 s in picoseconds).
const HIST_MAX: u64 = 1 << 44;

/// Exact extremes and sum, plus a 3-digit histogram for quantiles.
#[derive(Clone, Debug)]
pub struct LatencyRecorder {
    hist: Histogram<u64>,
    count: u64,
    min: u64,
    max: u64,
    sum: u128,
}

impl Default for LatencyRecorder {
    fn default() -> Self {
        LatencyRecorder {
            hist: Histogram::new_with_bounds(1, HIST_MAX, 3).expect("histogram bounds"),
            count: 0,
            min: u64::MAX,
            max: 0,
            sum: 0,
        }
    }
}

impl LatencyRecorder {
    pub fn record(&mut self, v: u64) {
        self.hist.saturating_record(v);
        self.count += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
        self.sum += v as u128;
    }

    pub fn summary(&self) -> LatencySummary {
        if self.count == 0 {
            return LatencySummary::default();
        }
        LatencySummary {
            count: self.count,
            min: self.min,
            max: self.max,
            mean: self.sum as f64 / self.count as f64,
            p50: self.hist.value_at_quantile(0.5),
            p99: self.hist.value_at_quantile(0.99),
            p999: self.hist.value_at_quantile(0.999),
        }
    }
}

/// Latency figures in the recorder's unit (picoseconds for packets,
/// cycles for broadcast messages).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: u64,
    pub min: u64,
    pub max: u64,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
    pub p999: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IfaceStats {
    /// Frames fully received from the tester.
    pub rx_frames: u64,
    pub rx_bytes: u64,
    pub rx_overflow_drops: u64,
    pub rx_invalid_drops: u64,
    /// Frames handed back to the tester.
    pub tx_frames: u64,
    pub tx_bytes: u64,
    /// Deliveries inside the measurement window.
    pub window_frames: u64,
    pub window_bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DropStats {
    pub rx_overflow: u64,
    pub rx_invalid: u64,
    pub oversize: u64,
    /// Dropped by handler decision.
    pub handler: u64,
    /// Sent to a port or processor that does not exist.
    pub misrouted: u64,
}

impl DropStats {
    pub fn total(&self) -> u64 {
        self.rx_overflow + self.rx_invalid + self.oversize + self.handler + self.misrouted
    }
}

/// Frame accounting: everything received is dropped, delivered, or still
/// inside the device.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub offered: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.offered == self.delivered + self.dropped + self.in_flight
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PeStats {
    pub counters: PeCounters,
    pub program: String,
    pub program_counters: Vec<(String, u64)>,
    pub slots_in_use: u32,
    pub hung: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ReconfigRecord {
    pub pe: usize,
    pub start: SimTime,
    pub evict_at: Option<SimTime>,
    pub drained_at: Option<SimTime>,
    pub reload_start: Option<SimTime>,
    pub reload_end: Option<SimTime>,
    pub done_at: Option<SimTime>,
    pub reload_only: bool,
    /// Drops of any kind between start and completion.
    pub drops_during: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HostLogEntry {
    pub at: SimTime,
    pub op: String,
    pub result: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsSnapshot {
    pub name: String,
    pub seed: u64,
    pub end: SimTime,
    pub events: u64,
    pub window: (SimTime, SimTime),
    pub ifaces: Vec<(Iface, IfaceStats)>,
    pub pes: Vec<PeStats>,
    /// Tester send to tester receive, in picoseconds.
    pub latency: LatencySummary,
    pub scheduler: SchedStats,
    pub bcast: BcastStats,
    /// Issue to delivery, in cycles.
    pub bcast_latency: LatencySummary,
    pub loopback_frames: u64,
    pub drops: DropStats,
    pub conservation: Conservation,
    pub fabric_high_water: usize,
    pub reconfigs: Vec<ReconfigRecord>,
    pub host_log: Vec<HostLogEntry>,
}

impl MetricsSnapshot {
    pub fn iface(&self, i: Iface) -> IfaceStats {
        self.ifaces
            .iter()
            .find(|(p, _)| *p == i)
            .map_or_else(IfaceStats::default, |(_, s)| *s)
    }

    pub fn window_len(&self) -> SimTime {
        self.window.1.saturating_sub(self.window.0)
    }

    /// Deliveries per second inside the window, all ports.
    pub fn window_pps(&self) -> f64 {
        let s = self.window_len().as_secs_f64();
        if s == 0.0 {
            return 0.0;
        }
        self.ifaces.iter().map(|(_, x)| x.window_frames).sum::<u64>() as f64 / s
    }

    pub fn delivered(&self) -> u64 {
        self.ifaces.iter().map(|(_, x)| x.tx_frames).sum()
    }

    pub fn offered(&self) -> u64 {
        self.ifaces.iter().map(|(_, x)| x.rx_frames).sum()
    }

    /// Long-format CSV: one `section,index,key,value` row per figure.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema,section,index,key,value\n");
        let mut row = |sec: &str, idx: &str, key: &str, val: String| {
            let _ = writeln!(out, "{METRICS_SCHEMA},{sec},{idx},{key},{val}");
        };
        row("run", "", "name", self.name.clone());
        row("run", "", "seed", self.seed.to_string());
        row("run", "", "end_ps", self.end.as_ps().to_string());
        row("run", "", "events", self.events.to_string());
        row("run", "", "window_start_ps", self.window.0.as_ps().to_string());
        row("run", "", "window_end_ps", self.window.1.as_ps().to_string());
        for (p, s) in &self.ifaces {
            let i = p.name();
            row("iface", i, "rx_frames", s.rx_frames.to_string());
            row("iface", i, "rx_bytes", s.rx_bytes.to_string());
            row("iface", i, "rx_overflow_drops", s.rx_overflow_drops.to_string());
            row("iface", i, "rx_invalid_drops", s.rx_invalid_drops.to_string());
            row("iface", i, "tx_frames", s.tx_frames.to_string());
            row("iface", i, "tx_bytes", s.tx_bytes.to_string());
            row("iface", i, "window_frames", s.window_frames.to_string());
            row("iface", i, "window_bytes", s.window_bytes.to_string());
        }
        for (n, p) in self.pes.iter().enumerate() {
            let i = format!("p{n}");
            let c = &p.counters;
            row("pe", &i, "program", p.program.clone());
            row("pe", &i, "rx_frames", c.rx_frames.to_string());
            row("pe", &i, "rx_bytes", c.rx_bytes.to_string());
            row("pe", &i, "tx_frames", c.tx_frames.to_string());
            row("pe", &i, "tx_bytes", c.tx_bytes.to_string());
            row("pe", &i, "drops", c.drops.to_string());
            row("pe", &i, "stalled_cycles", c.stalled_cycles.to_string());
            row("pe", &i, "busy_cycles", c.busy_cycles.to_string());
            row("pe", &i, "faults", c.faults.to_string());
            row("pe", &i, "loopback_frames", c.loopback_frames.to_string());
            row("pe", &i, "slots_in_use", p.slots_in_use.to_string());
            for (k, v) in &p.program_counters {
                row("pe", &i, k, v.to_string());
            }
        }
        let lat = |row: &mut dyn FnMut(&str, &str, &str, String), sec: &str, l: &LatencySummary| {
            row(sec, "", "count", l.count.to_string());
            row(sec, "", "min", l.min.to_string());
            row(sec, "", "mean", format!("{:.3}", l.mean));
            row(sec, "", "p50", l.p50.to_string());
            row(sec, "", "p99", l.p99.to_string());
            row(sec, "", "p999", l.p999.to_string());
            row(sec, "", "max", l.max.to_string());
        };
        lat(&mut row, "latency_ps", &self.latency);
        lat(&mut row, "bcast_latency_cycles", &self.bcast_latency);
        let s = &self.scheduler;
        row("scheduler", "", "assigned", s.assigned.to_string());
        row("scheduler", "", "backpressure", s.backpressure.to_string());
        row("scheduler", "", "hash_fallbacks", s.hash_fallbacks.to_string());
        row("scheduler", "", "loopback_grants", s.loopback_grants.to_string());
        row("scheduler", "", "freed", s.freed.to_string());
        let b = &self.bcast;
        row("bcast", "", "issued", b.issued.to_string());
        row("bcast", "", "delivered", b.delivered.to_string());
        row("bcast", "", "blocked_cycles", b.blocked_cycles.to_string());
        row("bcast", "", "pe_fifo_high_water", b.pe_fifo_high_water.to_string());
        row("bcast", "", "cluster_fifo_high_water", b.cluster_fifo_high_water.to_string());
        let d = &self.drops;
        row("drops", "", "rx_overflow", d.rx_overflow.to_string());
        row("drops", "", "rx_invalid", d.rx_invalid.to_string());
        row("drops", "", "oversize", d.oversize.to_string());
        row("drops", "", "handler", d.handler.to_string());
        row("drops", "", "misrouted", d.misrouted.to_string());
        let c = &self.conservation;
        row("conservation", "", "offered", c.offered.to_string());
        row("conservation", "", "delivered", c.delivered.to_string());
        row("conservation", "", "dropped", c.dropped.to_string());
        row("conservation", "", "in_flight", c.in_flight.to_string());
        row("fabric", "", "high_water", self.fabric_high_water.to_string());
        row("loopback", "", "frames", self.loopback_frames.to_string());
        let t = |x: Option<SimTime>| x.map_or(String::new(), |t| t.as_ps().to_string());
        for r in &self.reconfigs {
            let i = format!("p{}", r.pe);
            row("reconfig", &i, "start_ps", r.start.as_ps().to_string());
            row("reconfig", &i, "evict_ps", t(r.evict_at));
            row("reconfig", &i, "drained_ps", t(r.drained_at));
            row("reconfig", &i, "reload_start_ps", t(r.reload_start));
            row("reconfig", &i, "reload_end_ps", t(r.reload_end));
            row("reconfig", &i, "done_ps", t(r.done_at));
            row("reconfig", &i, "drops_during", r.drops_during.to_string());
        }
        for (n, h) in self.host_log.iter().enumerate() {
            let v = format!("\"{} {} => {}\"", h.at, h.op, h.result.replace('"', "'"));
            row("host", &n.to_string(), "entry", v);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recorder_keeps_exact_extremes() {
        let mut r = LatencyRecorder::default();
        for v in [765_000u64, 1_000_123, 2_000_777] {
            r.record(v);
        }
        let s = r.summary();
        assert_eq!((s.count, s.min, s.max), (3, 765_000, 2_000_777));
        assert!((s.mean - 1_255_300.0).abs() < 1e-6);
        assert_eq!(LatencyRecorder::default().summary().count, 0);
    }

    #[test]
    fn quantiles_within_three_digits() {
        let mut r = LatencyRecorder::default();
        for v in 1..=1000u64 {
            r.record(v * 1_000_000);
        }
        let s = r.summary();
        let near = |got: u64, want: u64| (got as f64 - want as f64).abs() <= want as f64 * 1e-3;
        assert!(near(s.p50, 500_000_000), "{}", s.p50);
        assert!(near(s.p99, 990_000_000), "{}", s.p99);
        assert!(near(s.p999, 999_000_000), "{}", s.p999);
    }

    #[test]
    fn conservation_identity() {
        let c = Conservation {
            offered: 10,
            delivered: 6,
            dropped: 3,
            in_flight: 1,
        };
        assert!(c.holds());
        assert!(!Conservation { in_flight: 0, ..c }.holds());
    }
}
