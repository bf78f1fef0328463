//! Predicts the query mask of one episode and writes the query, predicted
//! and true masks (1-bit) and overlays (8-bit RGB) as PNGs.
//!
//! `cargo run --example predict_masks -- [out_dir]`

use std::path::PathBuf;

use mcinet::generate_episode;
use mcinet::predict::{predict_episode, write_prediction};
use mcinet::train::{overfit_config, overfit_episode};

fn main() -> mcinet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/predict".into()));
    std::fs::create_dir_all(&out)?;
    let cfg = overfit_config();
    let ep = generate_episode(2, 1, 3, cfg.model.backbone.input_size)?;
    let (trainer, _) = overfit_episode(&cfg, &ep, 100)?;
    let pred = predict_episode(&trainer.model, &trainer.store, &ep)?;
    let files = write_prediction(&out, "episode", &ep, &pred)?;
    println!("IoU {:.4}", pred.iou);
    for p in [&files.query, &files.mask, &files.ground_truth, &files.overlay, &files.ground_truth_overlay] {
        println!("wrote {}", p.display());
    }
    Ok(())
}
