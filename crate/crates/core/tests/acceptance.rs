//! One pass/fail line per acceptance criterion. Presets run at their
//! builtin scale.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mbsim_core::sim::experiments::{run_experiment, Check, ExperimentDef, Preset, Status, Sweep};

use common::*;

const CRITERIA: [(u8, &str); 10] = [
    (1, "latency follows the store-and-forward model"),
    (2, "small-packet rate cap"),
    (3, "line-rate forwarding"),
    (4, "broadcast latency"),
    (5, "loopback messaging"),
    (6, "firewall correctness"),
    (7, "flow affinity and reorder"),
    (8, "reconfiguration without loss"),
    (9, "determinism"),
    (10, "structural invariants"),
];

const SCENARIOS: u64 = 10_000;
const TRIALS: u64 = 10_000;

/// The same preset with every packet count cut by `div`.
fn scaled(p: Preset, div: u64) -> ExperimentDef {
    let mut def = ExperimentDef::builtin(p);
    let cut = |n: &mut u64| *n = (*n / div).max(1);
    match &mut def.sweep {
        Sweep::Fig6a(s) | Sweep::Fig6b(s) | Sweep::LoopbackThroughput(s) => {
            s.sizes.truncate(4);
            cut(&mut s.packets);
        }
        Sweep::Fig7Latency(s) => cut(&mut s.packets),
        Sweep::BroadcastLatency(s) => {
            cut(&mut s.paced_count);
            cut(&mut s.full_cycles);
            cut(&mut s.full_warmup);
        }
        Sweep::Firewall(s) => {
            cut(&mut s.packets);
            cut(&mut s.probes);
        }
        Sweep::FlowReorder(s) => cut(&mut s.packets),
        Sweep::Reconfig(s) => cut(&mut s.packets),
    }
    def
}

fn determinism() -> Check {
    let mut differ = Vec::new();
    for p in Preset::ALL {
        let def = scaled(p, 20);
        let a = run_experiment(&def).expect("preset runs").to_csv();
        let b = run_experiment(&def).expect("preset runs").to_csv();
        if a != b {
            differ.push(p.name());
        }
    }
    Check {
        criterion: 9,
        name: "repeat runs".into(),
        status: if differ.is_empty() { Status::Pass } else { Status::Fail },
        detail: if differ.is_empty() {
            format!("{} presets byte-identical on rerun", Preset::ALL.len())
        } else {
            format!("CSV differs for {}", differ.join(", "))
        },
    }
}

fn invariants() -> Vec<Check> {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for i in 0..SCENARIOS {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let cfg = random_scenario(&mut rng);
        if let Err(e) = check_scenario(&cfg, Some(dir.path())) {
            failures.push(format!("scenario {i}: {e}"));
        }
    }
    let mut checks = vec![Check {
        criterion: 10,
        name: "randomized engine scenarios".into(),
        status: if failures.is_empty() { Status::Pass } else { Status::Fail },
        detail: match failures.first() {
            None => format!("{SCENARIOS} scenarios clean"),
            Some(f) => format!("{} of {SCENARIOS} failed; first: {f}", failures.len()),
        },
    }];
    type Trial = fn(&mut ChaCha8Rng) -> Result<(), String>;
    let trials: [(&str, Trial); 4] = [
        ("arbiter fairness", arbiter_trial),
        ("fifo ordering", fifo_trial),
        ("slot ownership", slot_trial),
        ("broadcast delivery", bcast_trial),
    ];
    for (name, trial) in trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCE97);
        let err = (0..TRIALS).find_map(|i| trial(&mut rng).err().map(|e| format!("trial {i}: {e}")));
        checks.push(Check {
            criterion: 10,
            name: name.into(),
            status: if err.is_none() { Status::Pass } else { Status::Fail },
            detail: err.unwrap_or_else(|| format!("{TRIALS} randomized trials clean")),
        });
    }
    checks
}

#[test]
fn acceptance() {
    let mut checks: Vec<Check> = Vec::new();
    for p in Preset::ALL {
        let t = Instant::now();
        match run_experiment(&ExperimentDef::builtin(p)) {
            Ok(o) => {
                println!("{} ran in {:.1?}", p.name(), t.elapsed());
                checks.extend(o.checks);
            }
            Err(e) => panic!("{} failed to run: {e}", p.name()),
        }
    }
    checks.push(determinism());
    checks.extend(invariants());

    let mut by: BTreeMap<u8, Vec<&Check>> = BTreeMap::new();
    for c in &checks {
        println!("  {c}");
        by.entry(c.criterion).or_default().push(c);
    }
    let mut failed = Vec::new();
    for (n, title) in CRITERIA {
        let cs = by.get(&n).map(Vec::as_slice).unwrap_or(&[]);
        let gated = cs.iter().filter(|c| c.status != Status::Reported).count();
        let ok = gated > 0 && cs.iter().all(|c| c.status != Status::Fail);
        println!(
            "{} criterion {n}: {title} ({gated} checks, {} reported)",
            if ok { "PASS" } else { "FAIL" },
            cs.len() - gated
        );
        if !ok {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
