//! Finite-difference check of every parameter group on the tiny model.

use std::process::ExitCode;

use mcinet::config::{ModelConfig, RunConfig};
use mcinet::gradcheck::{gradcheck, GradcheckOptions};

fn main() -> ExitCode {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    let report = gradcheck(&cfg, &GradcheckOptions::default()).expect("gradcheck runs");
    print!("{}", report);
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    }
}
