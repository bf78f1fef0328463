//! Saving mid-run and resuming reproduces the uninterrupted run exactly.

use mcinet::checkpoint;
use mcinet::config::ModelConfig;
use mcinet::train::Trainer;
use mcinet::RunConfig;

fn main() -> mcinet::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::tiny();
    cfg.train.batch_size = 2;
    let dir = std::env::temp_dir().join("mcinet-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("run.mcin");

    let mut straight = Trainer::new(&cfg)?;
    for _ in 0..3 {
        straight.train_step()?;
    }
    checkpoint::save(&straight, &path)?;
    println!("saved step {} to {} ({} bytes)", straight.step, path.display(), std::fs::metadata(&path)?.len());

    let mut resumed = checkpoint::load(&path)?;
    for _ in 0..3 {
        let a = straight.train_step()?;
        let b = resumed.train_step()?;
        println!("step {}: uninterrupted {:.12}  resumed {:.12}", straight.step, a.total, b.total);
    }
    println!("parameters identical: {}", straight.store == resumed.store);
    Ok(())
}
