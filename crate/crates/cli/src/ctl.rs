//! `ctl`: host control operations against a configuration frozen at a
//! chosen simulated time.

use std::path::{Path, PathBuf};

use clap::Args;

use mbsim_core::model::SimTime;
use mbsim_core::processor::memory::Region;
use mbsim_core::scheduler::{register_by_name, REGISTER_MAP, REG_DISABLE, REG_ENABLE, REG_FLUSH};
use mbsim_core::sim::config::{HandlerSpec, HostOp, SimConfig};
use mbsim_core::sim::engine::Engine;
use mbsim_core::sim::experiments::{ExperimentDef, Preset};

use crate::run::{load_target, Target};
use crate::{exit, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct CtlArgs {
    /// Configuration file, or a preset name for its base configuration.
    pub config: String,
    /// Operations, one per argument: `read p3 counters`, `read p3 debug`,
    /// `write p3 debug 0x10`, `pause p3`, `resume p3`, `irq p3 1`,
    /// `disable p3`, `enable p3`, `flush p3`, `dump p3 packet_mem`,
    /// `reconfigure p3 [program]`, `sched read REG`, `sched write REG VALUE`,
    /// `registers`.
    #[arg(required = true)]
    pub ops: Vec<String>,
    /// Simulated time in nanoseconds at which the operations apply.
    #[arg(long, default_value_t = 0)]
    pub at: u64,
    /// Run to completion afterwards and report per-processor traffic.
    #[arg(long)]
    pub finish: bool,
    /// Where memory dumps go; defaults to `<out-root>/ctl`.
    #[arg(long)]
    pub dump_dir: Option<PathBuf>,
}

fn register_table() -> String {
    let mut s = String::from("registers (per-processor ones take NAME:pe):\n");
    for (name, addr, access, meaning) in REGISTER_MAP {
        s += &format!("  {addr:#05x} {access:<2} {name:<18} {meaning}\n");
    }
    s
}

fn register(raw: &str) -> Result<u32, Failure> {
    let num = match raw.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16).ok(),
        None => raw.parse().ok(),
    };
    num.or_else(|| register_by_name(raw))
        .ok_or_else(|| Failure::usage(format!("unknown register {raw:?}\n{}", register_table())))
}

fn value(raw: &str) -> Result<u64, Failure> {
    let v = match raw.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => raw.parse().ok(),
    };
    v.ok_or_else(|| Failure::usage(format!("bad value {raw:?}")))
}

fn pe_arg(raw: Option<&&str>, pes: usize) -> Result<usize, Failure> {
    let raw = raw.ok_or_else(|| Failure::usage("missing processor, e.g. p3"))?;
    raw.strip_prefix('p')
        .unwrap_or(raw)
        .parse::<usize>()
        .ok()
        .filter(|&p| p < pes)
        .ok_or_else(|| Failure::usage(format!("bad processor {raw:?}; this config has {pes}")))
}

fn program(name: &str) -> Result<HandlerSpec, Failure> {
    toml::from_str::<HandlerSpec>(&format!("program = {name:?}"))
        .map_err(|_| Failure::usage(format!("unknown program {name:?}")))
}

/// Parses one operation; `None` means a local command with no host effect.
pub fn parse_op(text: &str, pes: usize) -> Result<Option<HostOp>, Failure> {
    let w: Vec<&str> = text.split_whitespace().collect();
    let bad = || Failure::usage(format!("cannot parse operation {text:?}"));
    let op = match w.as_slice() {
        ["registers"] => return Ok(None),
        ["read", _, "counters"] => HostOp::ReadCounters {
            pe: pe_arg(w.get(1), pes)?,
        },
        ["read", _, "debug"] => HostOp::ReadDebug {
            pe: pe_arg(w.get(1), pes)?,
        },
        ["write", _, "debug", v] => HostOp::WriteDebug {
            pe: pe_arg(w.get(1), pes)?,
            value: value(v)?,
        },
        ["pause", _] => HostOp::Pause {
            pe: pe_arg(w.get(1), pes)?,
        },
        ["resume", _] => HostOp::Resume {
            pe: pe_arg(w.get(1), pes)?,
        },
        ["irq", _, bits] => HostOp::Interrupt {
            pe: pe_arg(w.get(1), pes)?,
            bits: u32::try_from(value(bits)?).map_err(|_| bad())?,
        },
        [verb @ ("disable" | "enable" | "flush"), _] => {
            let base = match *verb {
                "disable" => REG_DISABLE,
                "enable" => REG_ENABLE,
                _ => REG_FLUSH,
            };
            HostOp::SchedWrite {
                addr: base + pe_arg(w.get(1), pes)? as u32,
                value: 1,
            }
        }
        ["dump", _, region] => HostOp::Dump {
            pe: pe_arg(w.get(1), pes)?,
            region: Region::parse(region).ok_or_else(|| {
                let names: Vec<&str> = Region::ALL.iter().map(|r| r.name()).collect();
                Failure::usage(format!("unknown region {region:?}; one of {}", names.join(", ")))
            })?,
        },
        ["reconfigure", _, rest @ ..] => HostOp::Reconfigure {
            pe: pe_arg(w.get(1), pes)?,
            handler: match rest {
                [] => None,
                [name] => Some(program(name)?),
                _ => return Err(bad()),
            },
        },
        ["sched", "read", reg] => HostOp::SchedRead { addr: register(reg)? },
        ["sched", "write", reg, v] => HostOp::SchedWrite {
            addr: register(reg)?,
            value: u32::try_from(value(v)?).map_err(|_| bad())?,
        },
        _ => return Err(bad()),
    };
    Ok(Some(op))
}

fn load_config(target: &str) -> Result<SimConfig, Failure> {
    if let Some(p) = Preset::parse(target) {
        return Ok(ExperimentDef::builtin(p).base);
    }
    match load_target(target, &[])? {
        Target::Config(cfg) => Ok(*cfg),
        Target::Experiment(def) => Ok(def.base),
    }
}

pub fn ctl(a: CtlArgs, root: &Path) -> CmdResult {
    let mut cfg = load_config(&a.config)?;
    let ops = a
        .ops
        .iter()
        .map(|t| parse_op(t, cfg.pes).map(|op| (t, op)))
        .collect::<Result<Vec<_>, _>>()?;
    if ops.iter().any(|(_, op)| matches!(op, Some(HostOp::Dump { .. }))) {
        let dir = a.dump_dir.clone().unwrap_or_else(|| root.join("ctl"));
        cfg.run.dump_dir = Some(dir);
    }
    let pes = cfg.pes;
    let mut eng = Engine::new(cfg)?;
    eng.step_until(SimTime::from_ns(a.at))?;
    for (text, op) in &ops {
        match op {
            None => print!("{}", register_table()),
            Some(op) => println!("{text}: {}", eng.host_now(op)?),
        }
    }
    if a.finish {
        let m = eng.run()?;
        println!(
            "finished at {:.3} us: offered {} delivered {} dropped {}",
            m.end.as_ps() as f64 / 1e6,
            m.conservation.offered,
            m.conservation.delivered,
            m.conservation.dropped
        );
        for (pe, s) in m.pes.iter().enumerate().take(pes) {
            println!("p{pe} {:<12} rx_frames {}", s.program, s.counters.rx_frames);
        }
    }
    Ok(exit::PASS)
}
