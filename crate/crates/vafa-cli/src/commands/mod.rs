//! Command implementations and the shared artifact plumbing.
//!
//! Every command writes a deterministic artifact tree under the output
//! directory: `report.json`, `per_sample.csv`, `slices/*.pgm`, and
//! checkpoints where applicable. Timing goes to `run.log`, never into
//! report.json, so identical configs reproduce identical reports. A
//! mid-run failure leaves the partial artifacts in place and drops a
//! `FAILED` marker file with the error message.

mod attack_cmd;
mod compare;
mod eval_cmd;
mod gen_data;
mod gradcheck_cmd;
mod train_cmd;

use std::path::Path;
use std::time::Instant;

use crate::config::{Command, RunConfig};

/// Exit codes: 0 success, 2 config error, 3 numerical failure,
/// 4 acceptance-threshold failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_THRESHOLD: i32 = 4;

#[derive(Debug)]
pub enum CmdError {
    /// Non-finite losses, failed packing, corrupt inputs discovered mid-run.
    Numerical(String),
    Io(String),
    /// A validation threshold was not met (gradcheck).
    Threshold(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Numerical(_) | CmdError::Io(_) => EXIT_NUMERICAL,
            CmdError::Threshold(_) => EXIT_THRESHOLD,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Numerical(m) | CmdError::Io(m) | CmdError::Threshold(m) => m,
        }
    }
}

pub fn io_err<E: std::fmt::Display>(context: &str) -> impl Fn(E) -> CmdError + '_ {
    move |e| CmdError::Io(format!("{context}: {e}"))
}

/// Runs a validated config to completion, writing artifacts under
/// `cfg.out`. Returns the process exit code.
pub fn execute(cfg: &RunConfig) -> i32 {
    if let Err(e) = std::fs::create_dir_all(&cfg.out) {
        eprintln!("error: cannot create output directory {}: {e}", cfg.out.display());
        return EXIT_NUMERICAL;
    }
    let failed_marker = cfg.out.join("FAILED");
    let _ = std::fs::remove_file(&failed_marker);

    let start = Instant::now();
    let result = match cfg.command {
        Command::GenData => gen_data::run(cfg),
        Command::Train => train_cmd::run(cfg),
        Command::Attack => attack_cmd::run(cfg),
        Command::Eval => eval_cmd::run(cfg),
        Command::Compare => compare::run(cfg),
        Command::Gradcheck => gradcheck_cmd::run(cfg),
    };
    let elapsed = start.elapsed().as_secs_f64();
    log_line(
        &cfg.out,
        &format!("command={} seed={} elapsed_secs={elapsed:.3}", cfg.command.name(), cfg.seed),
    );

    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = std::fs::write(&failed_marker, format!("{}\n", e.message()));
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CmdError> {
    std::fs::write(path, text)
        .map_err(|e| CmdError::Io(format!("write {}: {e}", path.display())))
}

fn log_line(out: &Path, line: &str) {
    use std::io::Write;
    if let Ok(mut f) =
        std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log"))
    {
        let _ = writeln!(f, "{line}");
    }
}

/// Echo of the knobs that shaped a run, embedded in every report.
pub fn config_echo(cfg: &RunConfig) -> crate::report::Json {
    use crate::report::Json;
    let mut j = Json::obj();
    j.push("command", Json::Str(cfg.command.name().into()));
    j.push("seed", Json::Int(cfg.seed as i64));
    j.push(
        "precision",
        Json::Int(match cfg.precision {
            vafa_core::autodiff::Precision::F64 => 64,
            vafa_core::autodiff::Precision::F32 => 32,
        }),
    );
    j.push("data_dir", Json::Str(cfg.data_dir.display().to_string()));
    j
}

/// Mean over the defined entries; None when none are defined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}
