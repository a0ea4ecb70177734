//! `run` and `validate-config`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;

use mbsim_core::model::wire_bytes_with;
use mbsim_core::sim::config::{HandlerSpec, RulesSource, SimConfig};
use mbsim_core::sim::engine;
use mbsim_core::sim::experiments::{
    run_experiment, set_path, ExperimentDef, Preset, Status, Sweep,
};

use crate::{exit, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Preset name or path to a TOML file.
    pub target: String,
    /// Override one field, e.g. `sweep.packets=1000` or `base.seed=9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Output directory; defaults to `<out-root>/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Blacklist in DROP-rule format for firewall processors.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Offered load as a fraction of line rate, or `low`.
    #[arg(long)]
    pub load: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// What a target names.
pub enum Target {
    Experiment(Box<ExperimentDef>),
    Config(Box<SimConfig>),
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Failure> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Failure::usage(format!("--set {s:?}: expected KEY=VALUE")))
        })
        .collect()
}

/// Resolves a preset name or file, applying overrides.
pub fn load_target(target: &str, sets: &[(String, String)]) -> Result<Target, Failure> {
    if let Some(p) = Preset::parse(target) {
        let def = ExperimentDef::builtin(p).with_overrides(sets)?;
        return Ok(Target::Experiment(Box::new(def)));
    }
    let path = Path::new(target);
    if !path.exists() {
        let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
        return Err(Failure::usage(format!(
            "{target:?} is neither a preset ({}) nor a file",
            names.join(", ")
        )));
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| path.display().to_string())?;
    let base = path.parent().unwrap_or(Path::new("."));
    let table: toml::Table = text
        .parse()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if table.contains_key("sweep") {
        let mut def = ExperimentDef::from_toml_with(&text, sets)?;
        def.base.resolve_paths(base);
        Ok(Target::Experiment(Box::new(def)))
    } else {
        let mut v = toml::Value::Table(table);
        for (k, val) in sets {
            set_path(&mut v, k, val).map_err(Failure::usage)?;
        }
        let mut cfg: SimConfig = v
            .try_into()
            .map_err(|e: toml::de::Error| Failure::usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        cfg.resolve_paths(base);
        Ok(Target::Config(Box::new(cfg)))
    }
}

fn apply_shortcuts(def: &mut ExperimentDef, a: &RunArgs) -> Result<(), Failure> {
    if let Some(seed) = a.seed {
        def.base.seed = seed;
    }
    if let Some(path) = &a.rules {
        if !matches!(def.base.handler, HandlerSpec::Firewall { .. }) {
            return Err(Failure::usage(format!(
                "--rules needs a firewall handler; {} runs {}",
                def.name,
                def.base.handler.name()
            )));
        }
        def.base.handler = HandlerSpec::Firewall {
            rules: RulesSource::File { path: path.clone() },
        };
    }
    if let Some(raw) = &a.load {
        let load = match raw.as_str() {
            "low" => 0.05,
            s => s
                .parse::<f64>()
                .ok()
                .filter(|l| *l > 0.0 && *l <= 1.0)
                .ok_or_else(|| Failure::usage(format!("--load {s:?}: expected low or a fraction in (0, 1]")))?,
        };
        let framing = def.base.timing.framing_bytes;
        let link = def.base.rates.external();
        match &mut def.sweep {
            Sweep::Fig7Latency(s) => {
                let biggest = s.sizes.iter().copied().max().unwrap_or(64);
                let wire_ps = link.ser_time(wire_bytes_with(biggest, framing)).as_ps();
                s.interval_ns = s.interval_ns.max((wire_ps as f64 / load / 1_000.0).ceil() as u64);
            }
            Sweep::Firewall(s) => s.load = load,
            Sweep::FlowReorder(s) => s.load = load,
            Sweep::Reconfig(s) => s.load = load,
            _ => {
                return Err(Failure::usage(format!(
                    "{} has no offered-load parameter",
                    def.preset().name()
                )))
            }
        }
    }
    def.base.validate()?;
    Ok(())
}

fn out_dir(a: &RunArgs, root: &Path, name: &str) -> Result<PathBuf, Failure> {
    let dir = a.out.clone().unwrap_or_else(|| root.join(name));
    std::fs::create_dir_all(&dir).with_context(|| dir.display().to_string())?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).with_context(|| path.display().to_string())?;
    Ok(())
}

pub fn run(a: RunArgs, root: &Path) -> CmdResult {
    let sets = parse_sets(&a.sets)?;
    match load_target(&a.target, &sets)? {
        Target::Experiment(mut def) => {
            apply_shortcuts(&mut def, &a)?;
            let dir = out_dir(&a, root, &def.name)?;
            write(&dir.join("experiment.toml"), &def.to_toml())?;
            let outcome = run_experiment(&def)?;
            let csv = dir.join(format!("{}.csv", def.name));
            write(&csv, &outcome.to_csv())?;
            let mut summary = String::new();
            for c in &outcome.checks {
                summary += &format!("{c}\n");
            }
            write(&dir.join("summary.txt"), &summary)?;
            print!("{summary}");
            println!("wrote {}", csv.display());
            let failed = outcome.checks.iter().any(|c| c.status == Status::Fail);
            Ok(if failed { exit::THRESHOLD } else { exit::PASS })
        }
        Target::Config(mut cfg) => {
            if a.rules.is_some() || a.load.is_some() {
                return Err(Failure::usage("--rules and --load apply to presets; use --set for configs"));
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            let dir = out_dir(&a, root, &cfg.name)?;
            let m = engine::run(&cfg)?;
            let path = dir.join("metrics.json");
            let json = serde_json::to_string_pretty(&m).context("metrics to json")?;
            write(&path, &json)?;
            let c = m.conservation;
            println!(
                "{}: offered {} delivered {} dropped {} in flight {} ({} events, {:.3} us simulated)",
                cfg.name,
                c.offered,
                c.delivered,
                c.dropped,
                c.in_flight,
                m.events,
                m.end.as_ps() as f64 / 1e6
            );
            if m.latency.count > 0 {
                println!(
                    "latency ns: min {:.1} mean {:.1} p99 {:.1} max {:.1}",
                    m.latency.min as f64 / 1e3,
                    m.latency.mean / 1e3,
                    m.latency.p99 as f64 / 1e3,
                    m.latency.max as f64 / 1e3
                );
            }
            println!("wrote {}", path.display());
            Ok(exit::PASS)
        }
    }
}

pub fn validate(file: &Path) -> CmdResult {
    let target = file
        .to_str()
        .ok_or_else(|| Failure::usage("path is not UTF-8"))?;
    if !file.exists() {
        return Err(Failure::usage(format!("{}: no such file", file.display())));
    }
    match load_target(target, &[])? {
        Target::Experiment(def) => {
            println!("ok: {} experiment {}", def.preset().name(), def.name)
        }
        Target::Config(cfg) => println!(
            "ok: config {} with {} processors and {} traffic sources",
            cfg.name,
            cfg.pes,
            cfg.traffic.len()
        ),
    }
    Ok(exit::PASS)
}
