//! Command-line harness wiring configs to the core pipelines: dataset
//! generation, training, attacks, evaluation grids, and gradient checks.
//!
//! Exposed as a library so integration tests can drive complete runs
//! in-process; `main` is a thin wrapper around [`run_cli`].

pub mod commands;
pub mod config;
pub mod pgm;
pub mod report;

use config::{CliOverrides, Command};

const USAGE: &str = "\
usage: vafa <command> [--config PATH] [--out DIR] [--seed N] [--workers N] [--precision {32,64}]

commands:
  gen-data    synthesize the dataset directory ([data] section)
  train       fit a model on the train split ([train] section)
  attack      run one attack against a checkpoint ([attack] section)
  eval        clean-data metrics for a checkpoint
  compare     models x attacks grid ([eval] models/attacks)
  gradcheck   finite-difference validation of all gradients
  run         read the command from the config file ([run] command)

Any config key can be overridden with VAFA_<SECTION>_<KEY> environment
variables (e.g. VAFA_ATTACK_Q_MAX=30). Exit codes: 0 ok, 2 config error,
3 numerical failure, 4 threshold failure.";

/// Parses CLI arguments (without the program name), runs the command, and
/// returns the process exit code.
pub fn run_cli(args: &[String]) -> i32 {
    let mut command: Option<Command> = None;
    let mut from_config_command = false;
    let mut config_path: Option<std::path::PathBuf> = None;
    let mut overrides = CliOverrides::default();

    let mut it = args.iter().peekable();
    match it.next().map(|s| s.as_str()) {
        None | Some("--help") | Some("-h") | Some("help") => {
            println!("{USAGE}");
            return if args.is_empty() { commands::EXIT_CONFIG } else { commands::EXIT_OK };
        }
        Some("run") => from_config_command = true,
        Some(name) => match Command::parse(name) {
            Some(c) => command = Some(c),
            None => {
                eprintln!("error: unknown command {name:?}\n{USAGE}");
                return commands::EXIT_CONFIG;
            }
        },
    }

    while let Some(flag) = it.next() {
        let mut take = |name: &str| -> Option<String> {
            match it.next() {
                Some(v) => Some(v.clone()),
                None => {
                    eprintln!("error: flag {name} needs a value");
                    None
                }
            }
        };
        match flag.as_str() {
            "--config" => match take("--config") {
                Some(v) => config_path = Some(v.into()),
                None => return commands::EXIT_CONFIG,
            },
            "--out" => match take("--out") {
                Some(v) => overrides.out = Some(v),
                None => return commands::EXIT_CONFIG,
            },
            "--seed" => match take("--seed") {
                Some(v) => overrides.seed = Some(v),
                None => return commands::EXIT_CONFIG,
            },
            "--workers" => match take("--workers") {
                Some(v) => overrides.workers = Some(v),
                None => return commands::EXIT_CONFIG,
            },
            "--precision" => match take("--precision") {
                Some(v) => overrides.precision = Some(v),
                None => return commands::EXIT_CONFIG,
            },
            other => {
                eprintln!("error: unknown flag {other:?}\n{USAGE}");
                return commands::EXIT_CONFIG;
            }
        }
    }

    if from_config_command && config_path.is_none() {
        eprintln!("error: `vafa run` needs --config with a [run] command key");
        return commands::EXIT_CONFIG;
    }

    match config::load(config_path.as_deref(), command, &overrides) {
        Ok(cfg) => commands::execute(&cfg),
        Err(errors) => {
            for e in &errors {
                eprintln!("config error: {e}");
            }
            commands::EXIT_CONFIG
        }
    }
}
