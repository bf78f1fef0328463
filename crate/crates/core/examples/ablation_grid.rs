//! The 8-row module ablation grid on the desk-scale configuration.
//!
//! `cargo run --example ablation_grid -- [steps]` (a full-length grid takes
//! a CPU on the order of twenty minutes; the default is a short demo).

use mcinet::ablation::{ablate, ablation_config};

fn main() -> mcinet::Result<()> {
    let mut cfg = ablation_config();
    cfg.train.steps = std::env::args().nth(1).map_or(100, |s| s.parse().expect("steps"));
    cfg.train.eval_episodes = 40;
    let table = ablate(&cfg, &[0, 1, 2])?;
    print!("{}", table.to_text());
    Ok(())
}
