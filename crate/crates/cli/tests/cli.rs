use assert_cmd::Command;
use predicates::prelude::*;
use predicates::str::contains;

fn mbsim(out: &std::path::Path) -> Command {
    let mut c = Command::cargo_bin("mbsim").unwrap();
    c.env("MBSIM_OUT", out);
    c
}

const SMALL_CONFIG: &str = r#"
name = "small"
[[traffic]]
mode = "load"
size = 256
ports = ["eth0"]
load = 0.5
packets = 500
"#;

#[test]
fn run_writes_csv_summary_and_definition() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path())
        .args(["run", "fig7", "--set", "sweep.packets=5"])
        .assert()
        .code(0)
        .stdout(contains("PASS [1]"));
    let run = dir.path().join("fig7-latency");
    let csv = std::fs::read_to_string(run.join("fig7-latency.csv")).unwrap();
    assert!(csv.starts_with("schema,size,"));
    assert_eq!(csv.lines().count(), 11);
    assert!(run.join("summary.txt").exists());
    assert!(run.join("experiment.toml").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let csv = |sub: &str| {
        let out = dir.path().join(sub);
        mbsim(dir.path())
            .args(["run", "flow-reorder", "--set", "sweep.packets=2000", "--out"])
            .arg(&out)
            .assert()
            .code(0);
        std::fs::read(out.join("flow-reorder.csv")).unwrap()
    };
    assert_eq!(csv("a"), csv("b"));
}

#[test]
fn failed_threshold_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path())
        .args(["run", "fig6a", "--set", "sweep.packets=2000", "--set", "sweep.sizes=[64]"])
        .assert()
        .code(2)
        .stdout(contains("FAIL [2]"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path()).args(["run", "fig99"]).assert().code(1).stderr(contains("neither a preset"));
    mbsim(dir.path()).arg("frobnicate").assert().code(1);
    mbsim(dir.path())
        .args(["run", "fig7", "--set", "sweep.bogus=1"])
        .assert()
        .code(1)
        .stderr(contains("bogus"));
    mbsim(dir.path())
        .args(["run", "fig6a", "--rules", "x.rules"])
        .assert()
        .code(1)
        .stderr(contains("firewall"));
}

#[test]
fn frames_larger_than_a_slot_are_dropped_not_stuck() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny_slots.toml");
    let text = format!("{SMALL_CONFIG}\n[processor.layout]\nslot_size = 128\n");
    std::fs::write(&cfg, text).unwrap();
    mbsim(dir.path())
        .arg("run")
        .arg(&cfg)
        .assert()
        .code(0)
        .stdout(contains("offered 500 delivered 0 dropped 500 in flight 0"));
}

#[test]
fn firewall_takes_a_rules_file() {
    let dir = tempfile::tempdir().unwrap();
    let rules = dir.path().join("drop.rules");
    std::fs::write(&rules, "# test list\n10.0.0.0/16\n192.168.7.7\n").unwrap();
    mbsim(dir.path())
        .args(["run", "firewall", "--set", "sweep.packets=2000", "--set", "sweep.probes=1000", "--rules"])
        .arg(&rules)
        .assert()
        .code(2)
        .stdout(contains("0 leaks among").and(contains("FAIL [6] no blacklisted")));
    let def = std::fs::read_to_string(dir.path().join("firewall/experiment.toml")).unwrap();
    assert!(def.contains("drop.rules"));
}

#[test]
fn bare_config_runs_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    mbsim(dir.path())
        .arg("run")
        .arg(&cfg)
        .assert()
        .code(0)
        .stdout(contains("offered 500 delivered 500 dropped 0"));
    let json = std::fs::read_to_string(dir.path().join("small/metrics.json")).unwrap();
    assert!(json.contains("\"conservation\""));
}

#[test]
fn validate_config_accepts_presets_and_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let presets = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for entry in std::fs::read_dir(presets).unwrap() {
        mbsim(dir.path())
            .arg("validate-config")
            .arg(entry.unwrap().path())
            .assert()
            .code(0)
            .stdout(contains("ok:"));
    }
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "pes = 3").unwrap();
    mbsim(dir.path())
        .arg("validate-config")
        .arg(&bad)
        .assert()
        .code(1)
        .stderr(contains("clusters"));
}

#[test]
fn list_presets_names_every_schema() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path())
        .args(["list-presets", "--write"])
        .arg(dir.path())
        .assert()
        .code(0)
        .stdout(contains("fig6a.v1").and(contains("reconfig.v1")));
    assert!(dir.path().join("broadcast-latency.toml").exists());
}

#[test]
fn plot_overlays_the_reference_curves() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path())
        .args(["run", "fig7", "--set", "sweep.packets=3"])
        .assert()
        .code(0);
    let csv = dir.path().join("fig7-latency/fig7-latency.csv");
    mbsim(dir.path()).arg("plot").arg(&csv).assert().code(0);
    let svg = std::fs::read_to_string(csv.with_extension("svg")).unwrap();
    assert!(svg.contains("store-and-forward model"));
    assert!(svg.contains("<svg"));

    mbsim(dir.path())
        .args(["run", "fig6b", "--set", "sweep.packets=500", "--set", "sweep.sizes=[512,1500]"])
        .assert()
        .code(0);
    let csv = dir.path().join("fig6b/fig6b.csv");
    mbsim(dir.path()).arg("plot").arg(&csv).assert().code(0);
    let svg = std::fs::read_to_string(csv.with_extension("svg")).unwrap();
    assert!(svg.contains("offered load"));
}

#[test]
fn plot_rejects_empty_and_mismatched_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    mbsim(dir.path()).arg("plot").arg(&empty).assert().code(1).stderr(contains("no data rows"));
    let partial = dir.path().join("partial.csv");
    std::fs::write(&partial, "schema,size,mean_ns\nfig7-latency.v1,64,800\n").unwrap();
    mbsim(dir.path())
        .arg("plot")
        .arg(&partial)
        .assert()
        .code(1)
        .stderr(contains("missing columns").and(contains("eq1_ns")));
}

#[test]
fn ctl_reads_counters_disables_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let out = mbsim(dir.path())
        .arg("ctl")
        .arg(&cfg)
        .args(["--at", "3000", "read p3 counters", "disable p3", "dump p3 packet_mem", "--finish"])
        .assert()
        .code(0)
        .get_output()
        .stdout
        .clone();
    let out = String::from_utf8(out).unwrap();
    assert!(out.contains("read p3 counters: bytes="), "{out}");
    assert!(out.contains("disable p3: ok"), "{out}");
    let p3: u64 = out
        .lines()
        .find(|l| l.starts_with("p3 "))
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    let p4: u64 = out
        .lines()
        .find(|l| l.starts_with("p4 "))
        .and_then(|l| l.rsplit(' ').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(p3 < p4 / 2, "{out}");
    let manifest = std::fs::read_to_string(dir.path().join("ctl/manifest.csv")).unwrap();
    assert!(manifest.contains("p3_packet_mem_3000ns.bin"), "{manifest}");
}

#[test]
fn ctl_lists_the_register_map_for_unknown_names() {
    let dir = tempfile::tempdir().unwrap();
    mbsim(dir.path())
        .args(["ctl", "fig6a", "sched read NOPE"])
        .assert()
        .code(1)
        .stderr(contains("CREDITS:pe").and(contains("0x040")));
}
