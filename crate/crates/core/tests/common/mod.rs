//! Randomized scenarios and invariant trials shared by the integration
//! tests.

#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mbsim_core::fabric::arbiter::{Arbitrate, RoundRobin};
use mbsim_core::fabric::fifo::{FifoChannel, FifoEntry};
use mbsim_core::fabric::Topology;
use mbsim_core::messaging::{BroadcastConfig, BroadcastNet};
use mbsim_core::model::SimTime;
use mbsim_core::packet::Iface;
use mbsim_core::processor::memory::Region;
use mbsim_core::processor::slots::{SlotState, SlotTable};
use mbsim_core::scheduler::{Policy, REG_ENABLE, REG_ENABLE_MASK, REG_FLUSH, REG_POLICY};
use mbsim_core::sim::config::{
    HandlerOverride, HandlerSpec, HostOp, RulesSource, ScriptEntry, SimConfig, TrafficSpec,
};
use mbsim_core::sim::engine::{Engine, Hooks};

const SIZES: [u64; 10] = [40, 60, 64, 65, 128, 256, 777, 1500, 9000, 20_000];

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    *xs.choose(rng).unwrap()
}

fn random_handler(rng: &mut ChaCha8Rng) -> HandlerSpec {
    match rng.gen_range(0..20) {
        0..=6 => HandlerSpec::Forwarder {
            port: pick(rng, &[None, Some(Iface::Eth0), Some(Iface::Eth1)]),
        },
        7..=8 => HandlerSpec::Sink,
        9..=10 => HandlerSpec::StreamScan {
            payload_offset: rng.gen_range(0..80),
        },
        11..=13 => HandlerSpec::TwoStep {
            out: pick(rng, &[Iface::Eth0, Iface::Eth1]),
        },
        14..=16 => HandlerSpec::FlowReorder,
        17..=18 => HandlerSpec::BcastWriter,
        _ => HandlerSpec::Firewall {
            rules: RulesSource::Synthetic {
                seed: rng.gen(),
                count: rng.gen_range(1..64),
            },
        },
    }
}

fn random_traffic(rng: &mut ChaCha8Rng, ports: Vec<Iface>) -> TrafficSpec {
    let packets = rng.gen_range(1..120);
    let size = pick(rng, &SIZES);
    let load = pick(rng, &[0.05, 0.3, 0.7, 1.0]);
    match rng.gen_range(0..5) {
        0 => TrafficSpec::FullThrottle {
            size,
            ports,
            packets,
        },
        1 => TrafficSpec::Paced {
            size,
            ports,
            interval_ns: rng.gen_range(1..2_000),
            packets,
        },
        2 => TrafficSpec::Load {
            size,
            ports,
            load,
            packets,
        },
        3 => TrafficSpec::FlowSynth {
            port: ports[0],
            flows: rng.gen_range(1..16),
            packets,
            size: size.clamp(64, 9000),
            load,
            reorder: pick(rng, &[0.0, 0.05, 0.3]),
            max_displacement: rng.gen_range(1..16),
            burst: rng.gen_range(1..8),
        },
        _ => TrafficSpec::FirewallMix {
            ports,
            packets,
            size: size.clamp(64, 9000),
            load,
            blacklisted: 0.3,
            ipv6: 0.1,
        },
    }
}

fn random_op(rng: &mut ChaCha8Rng, pes: usize) -> HostOp {
    let pe = rng.gen_range(0..pes);
    let mask = (1u32 << pes) - 1;
    match rng.gen_range(0..14) {
        0 => HostOp::Pause { pe },
        1 | 2 => HostOp::Resume { pe },
        3 => HostOp::SchedWrite {
            addr: REG_ENABLE_MASK,
            value: rng.gen::<u32>() & mask | 1,
        },
        4 => HostOp::SchedWrite {
            addr: pick(rng, &[REG_ENABLE, REG_FLUSH]) + pe as u32,
            value: 1,
        },
        5 => HostOp::SchedWrite {
            addr: REG_POLICY,
            value: pick(rng, &[Policy::RoundRobin, Policy::Hash]).code(),
        },
        6 => HostOp::SchedRead {
            addr: rng.gen_range(0..0x404),
        },
        7 => HostOp::Interrupt {
            pe,
            bits: rng.gen_range(0..4),
        },
        8 => HostOp::ReadCounters { pe },
        9 => HostOp::ReadDebug { pe },
        10 => HostOp::WriteDebug { pe, value: rng.gen() },
        11 => HostOp::Dump {
            pe,
            region: pick(rng, &Region::ALL),
        },
        _ => HostOp::Reconfigure {
            pe,
            handler: rng.gen_bool(0.5).then(|| random_handler(rng)),
        },
    }
}

/// A small but structurally varied configuration. Every generated config
/// passes validation.
pub fn random_scenario(rng: &mut ChaCha8Rng) -> SimConfig {
    let mut cfg = SimConfig::default();
    cfg.name = "random".into();
    cfg.seed = rng.gen();
    cfg.pes = pick(rng, &[2, 4, 8, 16]);
    let per_cluster: Vec<usize> = [2, 4]
        .into_iter()
        .filter(|&c| c <= cfg.pes && cfg.pes % c == 0)
        .collect();
    cfg.fabric.pes_per_cluster = pick(rng, &per_cluster);
    cfg.handler = random_handler(rng);
    for _ in 0..rng.gen_range(0..3) {
        let mut pes: Vec<usize> = (0..cfg.pes).filter(|_| rng.gen_bool(0.3)).collect();
        if pes.is_empty() {
            pes.push(0);
        }
        cfg.overrides.push(HandlerOverride {
            pes,
            handler: random_handler(rng),
        });
    }
    cfg.scheduler.policy = pick(rng, &[Policy::RoundRobin, Policy::Hash]);
    if rng.gen_bool(0.2) {
        let mut ing: Vec<usize> = (0..cfg.pes).filter(|_| rng.gen_bool(0.5)).collect();
        if ing.is_empty() {
            ing.push(cfg.pes - 1);
        }
        cfg.scheduler.ingress_pes = Some(ing);
    }
    if rng.gen_bool(0.3) {
        cfg.timing.rx_fifo_bytes = cfg.limits.max_size + rng.gen_range(0..4096);
    }
    cfg.flow.timeout_ns = pick(rng, &[2_000, 50_000, 1_000_000]);
    cfg.reconfig.reload_ns = rng.gen_range(100..20_000);
    let mut ports = vec![Iface::Eth0, Iface::Eth1];
    ports.shuffle(rng);
    match rng.gen_range(0..3) {
        0 => cfg.traffic.push(random_traffic(rng, vec![ports[0]])),
        1 => {
            cfg.traffic.push(random_traffic(rng, vec![ports[0]]));
            cfg.traffic.push(random_traffic(rng, vec![ports[1]]));
        }
        _ => cfg.traffic.push(random_traffic(rng, ports)),
    }
    for _ in 0..rng.gen_range(0..5) {
        cfg.script.push(ScriptEntry {
            at_ns: rng.gen_range(0..40_000),
            op: random_op(rng, cfg.pes),
        });
    }
    cfg.script.sort_by_key(|s| s.at_ns);
    cfg.validate().expect("generated config is valid");
    cfg
}

fn touches_mapping(op: &HostOp) -> bool {
    matches!(
        op,
        HostOp::SchedWrite { .. } | HostOp::Reconfigure { .. } | HostOp::Pause { .. }
    )
}

/// Runs a scenario in a few chunks and checks what the engine does not
/// already assert on every event.
pub fn check_scenario(cfg: &SimConfig, dump_dir: Option<&std::path::Path>) -> Result<(), String> {
    let mut cfg = cfg.clone();
    if cfg.script.iter().any(|s| matches!(s.op, HostOp::Dump { .. })) {
        match dump_dir {
            Some(d) => cfg.run.dump_dir = Some(d.to_path_buf()),
            None => cfg.script.retain(|s| !matches!(s.op, HostOp::Dump { .. })),
        }
    }
    let ctx = |e: String| format!("{e}\nconfig:\n{}", cfg.to_toml());
    let assigned: Arc<Mutex<HashMap<u32, usize>>> = Arc::default();
    let stable = cfg.scheduler.policy == Policy::Hash
        && !cfg.script.iter().any(|s| touches_mapping(&s.op));
    let mut eng = Engine::new(cfg.clone()).map_err(|e| ctx(e.to_string()))?;
    let broken = Arc::new(Mutex::new(None::<String>));
    if stable {
        let (seen, broken) = (assigned.clone(), broken.clone());
        eng.set_hooks(Hooks {
            on_assign: Some(Box::new(move |_, pe, hash| {
                if let Some(h) = hash {
                    let prev = *seen.lock().unwrap().entry(h).or_insert(pe);
                    if prev != pe {
                        *broken.lock().unwrap() = Some(format!("hash {h:#x} on p{prev} and p{pe}"));
                    }
                }
            })),
            ..Hooks::default()
        });
    }
    for t in [5_000u64, 20_000, 60_000] {
        eng.step_until(SimTime::from_ns(t)).map_err(|e| ctx(e.to_string()))?;
        let c = eng.conservation();
        if !c.holds() {
            return Err(ctx(format!("conservation broken at {t} ns: {c:?}")));
        }
        for pe in 0..cfg.pes {
            let s = eng.processor(pe).slots();
            if !s.verify_counts() {
                return Err(ctx(format!("p{pe} slot counts inconsistent")));
            }
        }
    }
    eng.step_until(SimTime::MAX).map_err(|e| ctx(e.to_string()))?;
    // a broadcast reaches every processor but its writer in one event
    let delivered = eng.snapshot().bcast.delivered;
    let received: u64 = (0..cfg.pes).map(|p| eng.endpoint(p).received()).sum();
    if received != delivered * (cfg.pes as u64 - 1) {
        return Err(ctx(format!("{received} receptions for {delivered} broadcasts")));
    }
    let m = eng.run().map_err(|e| ctx(e.to_string()))?;
    if !m.conservation.holds() {
        return Err(ctx(format!("conservation broken at end: {:?}", m.conservation)));
    }
    if let Some(msg) = broken.lock().unwrap().take() {
        return Err(ctx(format!("flow affinity broken: {msg}")));
    }
    Ok(())
}

/// Random request patterns against one round-robin arbiter. An input that
/// keeps requesting is served within `inputs` grants, and inputs that all
/// keep requesting stay within one grant of each other.
pub fn arbiter_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..=16);
    let mut rr = RoundRobin::with_last_grant(n, rng.gen_range(0..n));
    let backlogged: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let mut waited = vec![0usize; n];
    let mut grants = vec![0u64; n];
    for _ in 0..rng.gen_range(1..400) {
        let req: Vec<bool> = (0..n).map(|i| backlogged[i] || rng.gen_bool(0.3)).collect();
        let Some(g) = rr.grant(&mut |i| req[i]) else {
            if req.iter().any(|&r| r) {
                return Err("requests left ungranted".into());
            }
            continue;
        };
        if !req[g] {
            return Err(format!("granted idle input {g}"));
        }
        grants[g] += 1;
        for i in 0..n {
            if i == g || !req[i] {
                waited[i] = 0;
            } else {
                waited[i] += 1;
                if waited[i] >= n {
                    return Err(format!("input {i} waited {} grants", waited[i]));
                }
            }
        }
        let busy: Vec<u64> = (0..n).filter(|&i| backlogged[i]).map(|i| grants[i]).collect();
        if backlogged.iter().all(|&b| b) {
            let (lo, hi) = (busy.iter().min().unwrap(), busy.iter().max().unwrap());
            if hi - lo > 1 {
                return Err(format!("grant spread {lo}..{hi} with every input backlogged"));
            }
        }
    }
    Ok(())
}

/// Random pushes and pops against a reference queue.
pub fn fifo_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let depth = rng.gen_range(1..=32);
    let mut f = FifoChannel::new(depth, 512);
    let mut model = VecDeque::new();
    let mut next = 0u64;
    for step in 0..rng.gen_range(1..500) {
        if rng.gen_bool(0.55) {
            let e = FifoEntry {
                item: next,
                bytes: 64,
                head_at: SimTime::from_ps(step),
                tail_at: SimTime::from_ps(step),
            };
            match f.push(e) {
                Ok(()) => {
                    model.push_back(next);
                    next += 1;
                }
                Err(_) if model.len() == depth => {}
                Err(_) => return Err(format!("push refused at {} of {depth}", model.len())),
            }
        } else if f.pop().map(|e| e.item) != model.pop_front() {
            return Err("pop order differs from the reference".into());
        }
        if f.occupancy() != model.len() || f.occupancy() > depth {
            return Err("occupancy differs from the reference".into());
        }
    }
    Ok(())
}

const SLOT_STATES: [SlotState; 6] = [
    SlotState::Free,
    SlotState::Assigned,
    SlotState::Loaded,
    SlotState::CoreOwned,
    SlotState::Held,
    SlotState::Transmitting,
];

fn legal(from: SlotState, to: SlotState) -> bool {
    use SlotState::*;
    matches!(
        (from, to),
        (Free, Assigned)
            | (Assigned, Loaded)
            | (Loaded, CoreOwned)
            | (CoreOwned, Held)
            | (CoreOwned, Transmitting)
            | (Held, Transmitting)
            | (Transmitting, Free)
    )
}

/// Random transitions, legal or not, against the ownership state machine.
pub fn slot_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let n = rng.gen_range(1..=32u16);
    let mut t = SlotTable::new(n);
    let mut model = vec![SlotState::Free; n as usize];
    for _ in 0..rng.gen_range(1..400) {
        let s = rng.gen_range(0..n + 1);
        let to = pick(rng, &SLOT_STATES);
        let res = t.transition(s, to);
        if s >= n {
            if res.is_ok() {
                return Err(format!("slot {s} of {n} accepted"));
            }
            continue;
        }
        let from = model[s as usize];
        match (res.is_ok(), legal(from, to)) {
            (true, true) => model[s as usize] = to,
            (false, false) => {}
            (ok, _) => return Err(format!("{from} -> {to} accepted={ok}")),
        }
        if t.state(s) != model[s as usize] || !t.verify_counts() {
            return Err(format!("slot {s} state diverged"));
        }
    }
    let busy = model.iter().filter(|&&s| s != SlotState::Free).count() as u32;
    if t.non_free() != busy {
        return Err("non-free count diverged".into());
    }
    Ok(())
}

/// Random writers on a random topology. Every accepted write is delivered
/// once, in per-writer order, no sooner than the pipeline allows, and
/// never while the network reports idle.
pub fn bcast_trial(rng: &mut ChaCha8Rng) -> Result<(), String> {
    let pes = pick(rng, &[2usize, 4, 8, 16]);
    let per: Vec<usize> = [2, 4].into_iter().filter(|&c| c <= pes && pes % c == 0).collect();
    let topo = Topology::new(pes, pick(rng, &per)).unwrap();
    let cfg = BroadcastConfig {
        pe_fifo_depth: rng.gen_range(1..20),
        cluster_fifo_depth: rng.gen_range(1..4),
        ..BroadcastConfig::default()
    };
    let mut net = BroadcastNet::new(cfg.clone(), topo);
    let mut cycle = 0u64;
    let mut issued = 0u64;
    let mut delivered = Vec::new();
    for _ in 0..rng.gen_range(1..200) {
        cycle += rng.gen_range(0..20);
        let src = rng.gen_range(0..pes);
        net.write(src, cycle, rng.gen_range(0..cfg.region_bytes / 4) * 4, rng.gen())
            .map_err(|e| e.to_string())?;
        issued += 1;
        if rng.gen_bool(0.2) {
            net.run_until(cycle);
            delivered.extend(net.drain_deliveries());
        }
    }
    while let Some(c) = net.next_event_cycle() {
        net.run_until(c + 1);
        delivered.extend(net.drain_deliveries());
    }
    delivered.extend(net.drain_deliveries());
    if !net.is_idle() || delivered.len() as u64 != issued {
        return Err(format!("{} of {issued} writes delivered", delivered.len()));
    }
    let mut last_issue = vec![None::<u64>; pes];
    let mut last_cycle = 0;
    for d in &delivered {
        if d.cycle < last_cycle {
            return Err("deliveries out of time order".into());
        }
        last_cycle = d.cycle;
        if d.cycle < d.msg.issue_cycle + cfg.pipeline_cycles {
            return Err(format!("delivered at {} before its pipeline", d.cycle));
        }
        let prev = &mut last_issue[d.msg.src];
        if prev.is_some_and(|p| p > d.msg.issue_cycle) {
            return Err(format!("p{} writes reordered", d.msg.src));
        }
        *prev = Some(d.msg.issue_cycle);
    }
    Ok(())
}
