//! Episodic training on the tiny model followed by held-out evaluation.
//!
//! `cargo run --example train_and_evaluate -- [steps]`

use mcinet::config::ModelConfig;
use mcinet::evaluate::{evaluate, EvalSpec};
use mcinet::train::Trainer;
use mcinet::RunConfig;

fn main() -> mcinet::Result<()> {
    let steps = std::env::args().nth(1).map_or(200, |s| s.parse().expect("steps"));
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.train.steps = steps;
    cfg.train.eval_every = steps / 4;
    cfg.train.eval_episodes = 40;
    let mut t = Trainer::new(&cfg)?;
    t.run()?;
    for e in &t.history.evals {
        println!("step {:>5}  mIoU {:.4}  FB-IoU {:.4}", e.step, e.miou, e.fb_iou);
    }
    let spec = EvalSpec {
        fold: cfg.train.fold,
        shots: 5,
        episodes: 100,
        seed: 1,
    };
    let (report, results) = evaluate(&t.model, &t.store, &cfg.hash(), cfg.train.fold, spec)?;
    print!("{}", report.to_table());
    println!("{}", serde_json::to_string_pretty(&results).expect("serialisable"));
    Ok(())
}
