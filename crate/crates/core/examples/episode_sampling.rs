//! Class-disjoint folds, synthetic episodes and PNG export.
//!
//! `cargo run --example episode_sampling -- [out_dir]`

use std::path::PathBuf;

use mcinet::data::export::{export_episodes, load_episodes, manifest_hash};
use mcinet::data::{sample_eval_suite, training_episode, FoldSpec, NUM_FOLDS};

fn main() -> mcinet::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/episodes".into()));
    let folds = FoldSpec::default();
    for fold in 0..NUM_FOLDS {
        println!("fold {}: train {:?} test {:?}", fold, folds.train_classes(fold), folds.test_classes(fold));
    }

    let ep = training_episode(0, 1, 42, 0, 0, 64)?;
    let fg = ep.query.mask.data().iter().sum::<f64>() / (64.0 * 64.0);
    println!("training episode: class {} with {} shot(s), query foreground {:.1}%", ep.class_id, ep.shots(), 100.0 * fg);

    let suite = sample_eval_suite(0, 8, 5, 1, 64)?;
    let manifest = export_episodes(&out, &suite)?;
    println!("wrote {} 5-shot test episodes to {}", suite.len(), out.display());
    println!("manifest hash {}", manifest_hash(&manifest)?);
    let back = load_episodes(&out)?;
    let same = suite.iter().zip(&back).all(|(a, b)| a.query.image == b.query.image && a.support_masks() == b.support_masks());
    println!("reloaded {} episodes, pixel-identical: {}", back.len(), same);
    Ok(())
}
