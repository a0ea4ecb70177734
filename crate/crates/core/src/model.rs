//! Time base, link rates and Ethernet framing arithmetic.
//!
//! All simulated time is integer picoseconds. Rates are stored as bits per
//! second and serialization times are rounded up to the next picosecond, so
//! every timing identity used elsewhere in the crate is exact.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use serde::{Deserialize, Serialize};

pub const PS_PER_NS: u64 = 1_000;
pub const PS_PER_US: u64 = 1_000_000;
pub const PS_PER_MS: u64 = 1_000_000_000;
pub const PS_PER_SEC: u64 = 1_000_000_000_000;

/// FCS (4) + preamble/SFD (8) + inter-frame gap (12).
pub const DEFAULT_FRAMING_BYTES: u64 = 24;

/// Constant term of the reference round-trip latency, in picoseconds.
pub const REFERENCE_INTERCEPT_PS: u64 = 765_000;

/// A point in (or span of) simulated time, in picoseconds.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_ps(ps: u64) -> Self {
        SimTime(ps)
    }

    pub const fn from_ns(ns: u64) -> Self {
        SimTime(ns * PS_PER_NS)
    }

    pub const fn from_us(us: u64) -> Self {
        SimTime(us * PS_PER_US)
    }

    pub const fn from_ms(ms: u64) -> Self {
        SimTime(ms * PS_PER_MS)
    }

    pub const fn as_ps(self) -> u64 {
        self.0
    }

    pub fn as_ns_f64(self) -> f64 {
        self.0 as f64 / PS_PER_NS as f64
    }

    pub fn as_us_f64(self) -> f64 {
        self.0 as f64 / PS_PER_US as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / PS_PER_SEC as f64
    }

    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(
            self.0
                .checked_sub(rhs.0)
                .expect("simulated time went backwards"),
        )
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ps = self.0;
        if ps % PS_PER_NS == 0 {
            write!(f, "{}ns", ps / PS_PER_NS)
        } else {
            write!(f, "{}ps", ps)
        }
    }
}

/// Core clock of the fabric and the soft cores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub core_clock_hz: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        ClockConfig {
            core_clock_hz: 250_000_000,
        }
    }
}

impl ClockConfig {
    pub fn new(core_clock_hz: u64) -> Result<Self, String> {
        let clk = ClockConfig { core_clock_hz };
        clk.validate()?;
        Ok(clk)
    }

    /// The clock period must be a whole number of picoseconds.
    pub fn validate(&self) -> Result<(), String> {
        if self.core_clock_hz == 0 || PS_PER_SEC % self.core_clock_hz != 0 {
            return Err(format!(
                "core clock {} Hz does not have an integer picosecond period",
                self.core_clock_hz
            ));
        }
        Ok(())
    }

    pub fn cycle_ps(&self) -> u64 {
        PS_PER_SEC / self.core_clock_hz
    }

    pub fn cycles(&self, n: u64) -> SimTime {
        SimTime(self.cycle_ps() * n)
    }

    /// Whole cycles elapsed at `t` (floor).
    pub fn cycle_at(&self, t: SimTime) -> u64 {
        t.0 / self.cycle_ps()
    }
}

/// A serial link rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkRate {
    pub bits_per_sec: u64,
}

impl LinkRate {
    pub const fn from_gbps(gbps: u64) -> Self {
        LinkRate {
            bits_per_sec: gbps * 1_000_000_000,
        }
    }

    /// A datapath `width_bits` wide moving one word per clock.
    pub fn from_width(width_bits: u64, clock: &ClockConfig) -> Self {
        LinkRate {
            bits_per_sec: width_bits * clock.core_clock_hz,
        }
    }

    pub fn gbps(&self) -> f64 {
        self.bits_per_sec as f64 / 1e9
    }

    /// Time to push `bytes` through the link, rounded up to a picosecond.
    pub fn ser_time(&self, bytes: u64) -> SimTime {
        let num = bytes as u128 * 8 * PS_PER_SEC as u128;
        let den = self.bits_per_sec as u128;
        SimTime(num.div_ceil(den) as u64)
    }

    /// Start offset of the `k`-th back-to-back item of `bytes` each,
    /// computed in closed form so long streams never drift.
    pub fn nth_start(&self, bytes: u64, k: u64) -> SimTime {
        let num = k as u128 * bytes as u128 * 8 * PS_PER_SEC as u128;
        SimTime((num / self.bits_per_sec as u128) as u64)
    }
}

/// External and internal datapath rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateModel {
    pub external_link_gbps: u64,
    pub external_ports: u8,
    pub wide_switch_bits: u64,
    pub narrow_switch_bits: u64,
}

impl Default for RateModel {
    fn default() -> Self {
        RateModel {
            external_link_gbps: 100,
            external_ports: 2,
            wide_switch_bits: 512,
            narrow_switch_bits: 128,
        }
    }
}

impl RateModel {
    pub fn external(&self) -> LinkRate {
        LinkRate::from_gbps(self.external_link_gbps)
    }

    pub fn wide(&self, clock: &ClockConfig) -> LinkRate {
        LinkRate::from_width(self.wide_switch_bits, clock)
    }

    pub fn narrow(&self, clock: &ClockConfig) -> LinkRate {
        LinkRate::from_width(self.narrow_switch_bits, clock)
    }
}

/// Bytes a frame occupies on an Ethernet wire, given its size without FCS.
pub fn wire_bytes(payload_size: u64) -> u64 {
    wire_bytes_with(payload_size, DEFAULT_FRAMING_BYTES)
}

pub fn wire_bytes_with(payload_size: u64, framing_bytes: u64) -> u64 {
    payload_size + framing_bytes
}

/// Maximum frames per second a link of `link_gbps` can carry.
pub fn line_rate_pps(link_gbps: f64, payload_size: u64) -> f64 {
    assert!(link_gbps > 0.0, "link rate must be positive");
    link_gbps * 1e9 / (wire_bytes(payload_size) as f64 * 8.0)
}

pub fn serialization_ns(bytes: u64, rate_gbps: f64) -> f64 {
    assert!(rate_gbps > 0.0, "rate must be positive");
    bytes as f64 * 8.0 / rate_gbps
}

/// Analytic round-trip latency in microseconds: two 100 Gbps and two
/// 32 Gbps serializations plus a fixed pipeline constant.
pub fn eq1_latency_us(payload_size: u64) -> f64 {
    (payload_size as f64 * 8.0 * (2.0 / 100.0 + 2.0 / 32.0) / 1000.0) + 0.765
}

/// Integer form of [`eq1_latency_us`]: 660 ps per byte plus 765 ns.
pub fn eq1_latency_ps(payload_size: u64) -> u64 {
    let ext = LinkRate::from_gbps(100);
    let pe = LinkRate::from_gbps(32);
    REFERENCE_INTERCEPT_PS + 2 * ext.ser_time(payload_size).0 + 2 * pe.ser_time(payload_size).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_bytes_adds_framing() {
        assert_eq!(wire_bytes(64), 88);
        assert_eq!(wire_bytes(65), 89);
        assert_eq!(wire_bytes(0), 24);
    }

    #[test]
    fn line_rate_examples() {
        assert_eq!(line_rate_pps(200.0, 64).floor(), 284_090_909.0);
        assert_eq!(line_rate_pps(200.0, 65).floor(), 280_898_876.0);
        assert_eq!(line_rate_pps(100.0, 1500).floor(), 8_202_099.0);
    }

    #[test]
    fn serialization_examples() {
        assert!((serialization_ns(64, 100.0) - 5.12).abs() < 1e-12);
        assert_eq!(serialization_ns(64, 32.0), 16.0);
        assert_eq!(serialization_ns(1500, 32.0), 375.0);
        assert_eq!(LinkRate::from_gbps(100).ser_time(64), SimTime(5_120));
        assert_eq!(LinkRate::from_gbps(32).ser_time(1500), SimTime::from_ns(375));
    }

    #[test]
    fn eq1_examples() {
        assert_eq!(eq1_latency_us(0), 0.765);
        assert!((eq1_latency_us(64) - 0.80724).abs() < 1e-12);
        assert!((eq1_latency_us(1500) - 1.755).abs() < 1e-12);
        assert!((eq1_latency_us(9000) - 6.705).abs() < 1e-12);
        assert_eq!(eq1_latency_ps(0), 765_000);
        assert_eq!(eq1_latency_ps(64), 807_240);
        assert_eq!(eq1_latency_ps(1500), 1_755_000);
    }

    #[test]
    fn default_clock_is_4ns() {
        let clk = ClockConfig::default();
        assert_eq!(clk.cycle_ps(), 4_000);
        assert_eq!(clk.cycle_ps() * clk.core_clock_hz, PS_PER_SEC);
        assert!(ClockConfig::new(300_000_007).is_err());
    }

    #[test]
    fn switch_rates() {
        let clk = ClockConfig::default();
        let rates = RateModel::default();
        assert_eq!(rates.wide(&clk), LinkRate::from_gbps(128));
        assert_eq!(rates.narrow(&clk), LinkRate::from_gbps(32));
        // 62.5 ps per byte rounds up on odd byte counts
        assert_eq!(rates.wide(&clk).ser_time(1), SimTime(63));
        assert_eq!(rates.wide(&clk).ser_time(2), SimTime(125));
    }

    #[test]
    fn closed_form_spacing_has_no_drift() {
        let link = LinkRate::from_gbps(100);
        let k = 1_000_000_000;
        assert_eq!(link.nth_start(wire_bytes(64), k), SimTime(7_040 * k));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn eq1_is_affine(a in 0u64..20_000, b in 0u64..20_000) {
                let lhs = eq1_latency_ps(a) + eq1_latency_ps(b);
                let rhs = eq1_latency_ps(a + b) + eq1_latency_ps(0);
                prop_assert_eq!(lhs, rhs);
            }

            #[test]
            fn monotone_in_size(s in 0u64..20_000) {
                prop_assert!(wire_bytes(s + 1) > wire_bytes(s));
                prop_assert!(line_rate_pps(100.0, s + 1) < line_rate_pps(100.0, s));
            }
        }
    }
}
