use matchest_core::io::write_json;
use matchest_core::oracle::suite::{run_tiny_suite, TinySuiteSettings};
use matchest_core::Error;
use serde_json::json;

use crate::artifacts::RunRecord;
use crate::{CliResult, Failure, ValidateArgs};

pub fn run(args: &ValidateArgs) -> CliResult<()> {
    if !args.tiny {
        return Err(Error::Config("choose a suite: only --tiny is available".into()).into());
    }
    let settings = TinySuiteSettings::default();
    let report = run_tiny_suite(&settings, args.seed.seed)?;
    for c in &report.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    if let Some(path) = &args.out {
        let run = RunRecord::new(
            "validate",
            Some(args.seed.seed),
            json!({ "suite": "tiny", "settings": settings }),
        );
        write_json(path, &json!({ "run": run, "report": report }), args.force)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Validation(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
