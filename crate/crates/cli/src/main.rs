//! `mbsim`: runs presets and configurations, plots their CSVs and pokes at
//! the host control surface.

mod ctl;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit statuses shared by every subcommand.
pub mod exit {
    pub const PASS: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const THRESHOLD: u8 = 2;
    pub const INVARIANT: u8 = 3;
}

#[derive(Parser, Debug)]
#[command(name = "mbsim", version, about = "Discrete-event model of a multi-core FPGA middlebox")]
struct Cli {
    /// Root for output directories.
    #[arg(long, global = true, env = "MBSIM_OUT", default_value = "out")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run a preset or a TOML file (experiment definition or bare config).
    Run(run::RunArgs),
    /// Draw an SVG from a preset CSV.
    Plot(plot::PlotArgs),
    /// Apply host control operations to a configuration at a given time.
    Ctl(ctl::CtlArgs),
    /// Check a TOML file without running it.
    ValidateConfig {
        file: PathBuf,
    },
    /// Show the shipped presets.
    ListPresets {
        /// Write every preset as `<name>.toml` into this directory.
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

/// A failure together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure {
            code: exit::USAGE,
            msg: msg.into(),
        }
    }
}

impl From<mbsim_core::sim::engine::SimError> for Failure {
    fn from(e: mbsim_core::sim::engine::SimError) -> Self {
        use mbsim_core::sim::engine::SimError;
        let code = match e {
            SimError::Invariant { .. } => exit::INVARIANT,
            _ => exit::USAGE,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<mbsim_core::sim::config::ConfigError> for Failure {
    fn from(e: mbsim_core::sim::config::ConfigError) -> Self {
        Failure::usage(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::usage(format!("{e:#}"))
    }
}

pub type CmdResult = Result<u8, Failure>;

fn list_presets(write: Option<PathBuf>) -> CmdResult {
    use mbsim_core::sim::experiments::{ExperimentDef, Preset};
    if let Some(dir) = &write {
        std::fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    for p in Preset::ALL {
        println!("{:<20} {:<28} {}", p.name(), p.schema(), p.describe());
        if let Some(dir) = &write {
            let path = dir.join(format!("{}.toml", p.name()));
            std::fs::write(&path, ExperimentDef::builtin(p).to_toml())
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(exit::PASS)
}

fn main() -> ExitCode {
    // exit quietly when piped into `head` and the like
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::PASS });
        }
    };
    let res = match cli.cmd {
        Cmd::Run(a) => run::run(a, &cli.out_root),
        Cmd::Plot(a) => plot::plot(a),
        Cmd::Ctl(a) => ctl::ctl(a, &cli.out_root),
        Cmd::ValidateConfig { file } => run::validate(&file),
        Cmd::ListPresets { write } => list_presets(write),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mbsim_core::model::SimTime;
    use mbsim_core::sim::config::ConfigError;
    use mbsim_core::sim::engine::SimError;

    #[test]
    fn errors_map_to_exit_codes() {
        let inv = SimError::Invariant {
            at: SimTime::from_ns(5),
            msg: "slot 3 double free".into(),
            recent: vec![],
        };
        assert_eq!(Failure::from(inv).code, exit::INVARIANT);
        let cfg = SimError::Config(ConfigError::Invalid("pes".into()));
        assert_eq!(Failure::from(cfg).code, exit::USAGE);
        assert_eq!(Failure::from(ConfigError::Parse("x".into())).code, exit::USAGE);
    }
}
