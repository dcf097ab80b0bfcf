//! `gradcheck`: finite-difference validation of every op and composite,
//! always at 64-bit precision. Prints one line per op and exits with the
//! threshold-failure code if any check exceeds its tolerance.

use vafa_core::fdcheck;

use super::{write_text, CmdError};
use crate::config::RunConfig;
use crate::report::Json;

pub fn run(cfg: &RunConfig) -> Result<(), CmdError> {
    let outcomes = fdcheck::check_all(cfg.seed);
    let mut rows = Json::obj();
    let mut failures = Vec::new();
    for o in &outcomes {
        println!(
            "{:<28} max rel err {:.3e}  (tol {:.0e}, {} instances)  {}",
            o.name,
            o.max_rel_err,
            o.threshold,
            o.instances,
            if o.passed() { "ok" } else { "FAIL" }
        );
        let mut entry = Json::obj();
        entry.push("max_rel_err", Json::Num(o.max_rel_err));
        entry.push("threshold", Json::Num(o.threshold));
        entry.push("instances", Json::Int(o.instances as i64));
        entry.push("passed", Json::Bool(o.passed()));
        rows.push(o.name, entry);
        if !o.passed() {
            failures.push(format!("{} ({:.3e} >= {:.0e})", o.name, o.max_rel_err, o.threshold));
        }
    }

    let mut j = super::config_echo(cfg);
    j.push("checks", rows);
    j.push("passed", Json::Bool(failures.is_empty()));
    write_text(&cfg.out.join("report.json"), &j.render())?;

    if failures.is_empty() {
        Ok(())
    } else {
        Err(CmdError::Threshold(format!("gradient checks failed: {}", failures.join(", "))))
    }
}
