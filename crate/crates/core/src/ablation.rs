//! Module ablation grid: every on/off combination of fusion, adjacent-scale
//! interaction and small→large feedback, trained and evaluated per seed.

use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_suite, ModelPredictor};
use crate::train::Trainer;

/// Row order: baseline, single modules, pairs, full model.
pub const ABLATION_ROWS: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (true, false, true),
    (false, true, true),
    (true, true, true),
];

pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mcfm: bool,
    pub mlim: bool,
    pub msmp: bool,
    /// One held-out mIoU per seed, in seed order.
    pub miou: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }

    /// Sample standard deviation (n − 1).
    pub fn sd(&self) -> f64 {
        let n = self.miou.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.miou.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn baseline(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn full(&self) -> &AblationRow {
        &self.rows[self.rows.len() - 1]
    }

    pub fn to_text(&self) -> String {
        let mark = |b: bool| if b { "✓" } else { " " };
        let mut s = format!("MCFM  MLIM  MSMP  mIoU % (mean ± sd over {} seeds)\n", self.seeds.len());
        for r in &self.rows {
            s.push_str(&format!(
                " {}     {}     {}    {:.2} ± {:.2}\n",
                mark(r.mcfm),
                mark(r.mlim),
                mark(r.msmp),
                100.0 * r.mean(),
                100.0 * r.sd()
            ));
        }
        s
    }
}

/// Desk-scale setting used for the ablation grid: 32×32 inputs, slimmer
/// channels and 2000 single-episode steps so 24 runs fit a CPU budget.
pub fn ablation_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    let m = &mut cfg.model;
    m.backbone.input_size = 32;
    m.backbone.channels_per_scale = vec![16, 32, 64];
    m.mcfm.d = 32;
    m.mlim.refiner_widths = vec![8, 8];
    m.msmp.width = 32;
    cfg.optim.lr = 0.01;
    cfg.optim.clip_norm = Some(1.0);
    cfg.train.steps = 2000;
    cfg.train.batch_size = 1;
    cfg.train.eval_episodes = 100;
    cfg
}

/// Trains one configuration with `seed` and returns its held-out mIoU.
pub fn run_cell(base: &RunConfig, modules: (bool, bool, bool), seed: u64) -> Result<f64> {
    let mut cfg = base.clone();
    cfg.model = cfg.model.with_modules(modules.0, modules.1, modules.2);
    cfg.train.seed = seed;
    let mut t = Trainer::new(&cfg)?;
    t.run()?;
    let tc = &cfg.train;
    let report = evaluate_suite(
        &ModelPredictor::new(&t.model, &t.store),
        tc.fold,
        tc.shots,
        tc.eval_episodes,
        seed,
        t.model.input_size(),
    )?;
    Ok(report.miou)
}

/// Runs the full grid. All rows of one seed share their initial training
/// stream and evaluation suite, so differences come from the modules.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::config(format!("ablation needs at least {} seeds, got {}", MIN_SEEDS, seeds.len())));
    }
    base.validate()?;
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for &(mcfm, mlim, msmp) in &ABLATION_ROWS {
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let start = Instant::now();
            let v = run_cell(base, (mcfm, mlim, msmp), seed)?;
            info!(
                "mcfm={} mlim={} msmp={} seed={} mIoU {:.4} ({:.1}s)",
                mcfm,
                mlim,
                msmp,
                seed,
                v,
                start.elapsed().as_secs_f64()
            );
            miou.push(v);
        }
        rows.push(AblationRow { mcfm, mlim, msmp, miou });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}
