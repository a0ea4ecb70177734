use mbsim_core::model::eq1_latency_ps;
use mbsim_core::packet::Iface;
use mbsim_core::model::SimTime;
use mbsim_core::processor::memory::Region;
use mbsim_core::scheduler::{REG_ENABLE, REG_SLOT_COUNT};
use mbsim_core::sim::config::{
    HandlerSpec, HostOp, RulesSource, ScriptEntry, SimConfig, TrafficSpec,
};
use mbsim_core::sim::engine::{run, Engine};

fn paced(size: u64, packets: u64) -> SimConfig {
    SimConfig {
        traffic: vec![TrafficSpec::Paced {
            size,
            ports: vec![Iface::Eth0],
            interval_ns: 20_000,
            packets,
        }],
        ..SimConfig::default()
    }
}

#[test]
fn single_frame_latency_follows_the_model() {
    for size in [64, 128, 1500, 9000] {
        let m = run(&paced(size, 1)).unwrap();
        assert_eq!(m.latency.count, 1);
        let want = eq1_latency_ps(size);
        let got = m.latency.max;
        let err = (got as f64 - want as f64).abs() / want as f64;
        println!("{size}: {got} vs {want}");
        assert!(err < 0.03, "{size}: {got} vs {want}");
        assert_eq!(m.iface(Iface::Eth1).tx_frames, 1);
    }
}

#[test]
fn paced_run_conserves_frames() {
    let m = run(&paced(256, 200)).unwrap();
    assert_eq!(m.delivered(), 200);
    assert!(m.conservation.holds());
}

#[test]
fn two_sources_on_one_port_are_rejected() {
    let mut cfg = paced(64, 1);
    cfg.traffic.push(TrafficSpec::Load {
        size: 64,
        ports: vec![Iface::Eth1, Iface::Eth0],
        load: 0.5,
        packets: 1,
    });
    let err = run(&cfg).unwrap_err().to_string();
    assert!(err.contains("eth0 fed by two traffic sources"), "{err}");
}

#[test]
fn host_reads_scheduler_registers() {
    let cfg = paced(64, 1);
    let slots = cfg.processor.layout.slot_count;
    let mut eng = Engine::new(cfg).unwrap();
    let r = eng
        .host_now(&HostOp::SchedRead {
            addr: REG_SLOT_COUNT + 3,
        })
        .unwrap();
    assert_eq!(r, format!("{slots:#x}"));
    let r = eng.host_now(&HostOp::SchedRead { addr: 0xFFF }).unwrap();
    assert!(r.starts_with("error"), "{r}");
}

#[test]
fn dumps_land_in_the_dump_dir_with_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = paced(128, 10);
    cfg.run.dump_dir = Some(dir.path().to_path_buf());
    cfg.script.push(ScriptEntry {
        at_ns: 1_000,
        op: HostOp::Dump {
            pe: 2,
            region: Region::Dmem,
        },
    });
    let m = run(&cfg).unwrap();
    assert_eq!(m.host_log.len(), 1);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("file,pe,region,time_ps,bytes"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[1], "2");
    let bytes = std::fs::metadata(dir.path().join(row[0])).unwrap().len();
    assert_eq!(bytes.to_string(), row[4]);
}

#[test]
fn event_log_is_bounded() {
    let mut cfg = paced(64, 50);
    cfg.run.event_log_lines = Some(10);
    let mut eng = Engine::new(cfg).unwrap();
    eng.step_until(SimTime::MAX).unwrap();
    assert_eq!(eng.event_log().len(), 10);
}

#[test]
fn reconfigure_into_a_firewall_loads_its_rules() {
    let mut cfg = paced(128, 100);
    cfg.reconfig.reload_ns = 5_000;
    cfg.script.push(ScriptEntry {
        at_ns: 10_000,
        op: HostOp::Reconfigure {
            pe: 1,
            handler: Some(HandlerSpec::Firewall {
                rules: RulesSource::Synthetic { seed: 3, count: 20 },
            }),
        },
    });
    let m = run(&cfg).unwrap();
    assert_eq!(m.reconfigs.len(), 1);
    assert_eq!(m.reconfigs[0].drops_during, 0);
    assert_eq!(m.pes[1].program, "firewall");
    assert_eq!(m.delivered(), 100);
}

#[test]
fn enabling_a_processor_mid_reconfiguration_is_refused() {
    let mut cfg = paced(128, 100);
    cfg.reconfig.reload_ns = 50_000;
    for (at_ns, op) in [
        (10_000, HostOp::Reconfigure { pe: 1, handler: None }),
        (
            20_000,
            HostOp::SchedWrite {
                addr: REG_ENABLE + 1,
                value: 1,
            },
        ),
    ] {
        cfg.script.push(ScriptEntry { at_ns, op });
    }
    let m = run(&cfg).unwrap();
    assert!(m.host_log[1].result.starts_with("refused"), "{:?}", m.host_log);
    assert!(m.conservation.holds());
    assert_eq!(m.drops.total(), 0);
}
