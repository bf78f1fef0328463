//! Memorises a single episode: the quickest end-to-end sanity check of the
//! forward pass, gradients and optimiser.

use std::time::Instant;

use mcinet::generate_episode;
use mcinet::train::{overfit_config, overfit_episode, OVERFIT_STEPS};

fn main() -> mcinet::Result<()> {
    let cfg = overfit_config();
    let ep = generate_episode(5, 1, 7, cfg.model.backbone.input_size)?;
    let start = Instant::now();
    let (trainer, score) = overfit_episode(&cfg, &ep, OVERFIT_STEPS)?;
    for r in trainer.history.steps.iter().step_by(50) {
        println!("step {:>4}  loss {:.4}", r.step, r.loss.total);
    }
    println!("IoU after {} steps: {:.4} ({:.0}s)", OVERFIT_STEPS, score, start.elapsed().as_secs_f64());
    Ok(())
}
