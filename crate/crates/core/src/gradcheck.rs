//! Central finite differences against reverse-mode gradients, reported
//! per parameter group.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, GRADCHECK_STEP};
use crate::data::{generate_episode, Episode, FoldSpec};
use crate::error::Result;
use crate::model::MciNet;
use crate::objective::total_loss;
use crate::params::{ParamGroup, ParamStore, Session};
use crate::train::episode_gradients;

/// Default relative-error tolerance.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
/// Denominator floor so near-zero gradients are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    /// Entries sampled per parameter tensor (all entries if the tensor is smaller).
    pub samples_per_tensor: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            samples_per_tensor: 4,
            step: GRADCHECK_STEP,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: ParamGroup,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub groups: Vec<GroupResult>,
}

impl GradcheckReport {
    pub fn offenders(&self) -> Vec<&GroupResult> {
        self.groups.iter().filter(|g| !(g.max_rel_error <= self.tolerance)).collect()
    }

    pub fn passed(&self) -> bool {
        self.offenders().is_empty()
    }

    pub fn group(&self, g: ParamGroup) -> Option<&GroupResult> {
        self.groups.iter().find(|r| r.group == g)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8} {:>12} {:>12}", "group", "entries", "max rel err", "max |grad|")?;
        for g in &self.groups {
            let flag = if g.max_rel_error <= self.tolerance { "" } else { "  FAIL" };
            writeln!(
                f,
                "{:<16} {:>8} {:>12.3e} {:>12.3e}{}",
                g.group.name(),
                g.entries_checked,
                g.max_rel_error,
                g.max_abs_grad,
                flag
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Scalar training objective of one episode.
pub fn episode_loss(model: &MciNet, store: &ParamStore, episode: &Episode, lambda: f64) -> Result<f64> {
    let mut s = Session::new(store);
    let out = model.forward(&mut s, &episode.support_images(), &episode.support_masks(), &episode.query.image)?;
    let (_, loss) = total_loss(&mut s.g, out.small_logits, out.large_logits, &episode.query.mask, lambda)?;
    Ok(loss.total)
}

/// Checks sampled entries of every trainable tensor on one episode.
/// Frozen parameters are skipped, so their group is absent from the report.
pub fn gradcheck_episode(model: &MciNet, store: &ParamStore, episode: &Episode, lambda: f64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let analytic = episode_gradients(model, store, episode, lambda)?.grads;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut groups: BTreeMap<ParamGroup, GroupResult> = BTreeMap::new();
    let h = opts.step;
    for id in store.ids() {
        let e = store.entry(id);
        if e.frozen {
            continue;
        }
        let len = e.value.len();
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            (0..opts.samples_per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        let r = groups.entry(e.group).or_insert(GroupResult {
            group: e.group,
            entries_checked: 0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        });
        for j in picks {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + h;
            let up = episode_loss(model, &work, episode, lambda)?;
            work.get_mut(id).data_mut()[j] = orig - h;
            let down = episode_loss(model, &work, episode, lambda)?;
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.index()].data()[j];
            r.entries_checked += 1;
            r.max_rel_error = r.max_rel_error.max(relative_error(a, numeric));
            r.max_abs_grad = r.max_abs_grad.max(a.abs());
        }
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        groups: groups.into_values().collect(),
    })
}

/// Builds the model of `cfg` and checks it on one generated episode.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    cfg.validate()?;
    let (model, store) = MciNet::new(&cfg.model, cfg.train.seed)?;
    let class_id = FoldSpec::default().train_classes(cfg.train.fold)[0];
    let ep = generate_episode(class_id, cfg.train.shots, cfg.train.seed, model.input_size())?;
    gradcheck_episode(&model, &store, &ep, cfg.train.lambda(), opts)
}
