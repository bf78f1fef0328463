//! Evaluation on held-out fold classes.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{sample_eval_suite, Episode, FoldSpec};
use crate::error::Result;
use crate::model::MciNet;
use crate::objective::{binary, threshold, EvalReport, MetricAccumulator};
use crate::params::ParamStore;

/// Anything that maps an episode to a binary query mask (row-major).
pub trait Predictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>>;
}

pub struct ModelPredictor<'a> {
    model: &'a MciNet,
    store: &'a ParamStore,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(model: &'a MciNet, store: &'a ParamStore) -> Self {
        Self { model, store }
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>> {
        let logits = self.model.predict_logits(
            self.store,
            &episode.support_images(),
            &episode.support_masks(),
            &episode.query.image,
        )?;
        Ok(threshold(&logits.large))
    }
}

/// Returns the ground truth; a perfect reference for harness tests.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<bool>> {
        Ok(binary(&episode.query.mask))
    }
}

pub fn evaluate_episodes(predictor: &impl Predictor, episodes: &[Episode], class_ids: &[usize]) -> Result<EvalReport> {
    let mut acc = MetricAccumulator::new();
    for e in episodes {
        let pred = predictor.predict(e)?;
        acc.add(e.class_id, &pred, &binary(&e.query.mask))?;
    }
    acc.report(class_ids)
}

/// Evaluates `n_episodes` episodes of `fold`'s held-out classes.
pub fn evaluate_suite(predictor: &impl Predictor, fold: usize, k: usize, n_episodes: usize, seed: u64, size: usize) -> Result<EvalReport> {
    let episodes = sample_eval_suite(fold, n_episodes, k, seed, size)?;
    evaluate_episodes(predictor, &episodes, &FoldSpec::default().test_classes(fold))
}

/// Text listing of a suite (index, class, fold, seed, shots) whose hash
/// identifies the episodes without storing pixels.
pub fn suite_manifest(episodes: &[Episode]) -> String {
    let mut s = String::from("episode\tclass\tfold\tseed\tshots\n");
    for (i, e) in episodes.iter().enumerate() {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", i, e.class_id, e.fold_id, e.seed, e.shots()));
    }
    s
}

pub fn manifest_digest(manifest: &str) -> String {
    hex::encode(Sha256::digest(manifest.as_bytes()))
}

/// The structured results document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub config_hash: String,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub seed: u64,
    pub episode_manifest_hash: String,
    pub fold: usize,
    pub shots: usize,
    pub episodes: usize,
}

/// Which suite to evaluate on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSpec {
    pub fold: usize,
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Evaluation of a trained model with a results document.
pub fn evaluate(
    model: &MciNet,
    store: &ParamStore,
    config_hash: &str,
    train_fold: usize,
    spec: EvalSpec,
) -> Result<(EvalReport, ResultsFile)> {
    let EvalSpec {
        fold,
        shots: k,
        episodes: n_episodes,
        seed,
    } = spec;
    if fold != train_fold {
        warn!(
            "evaluating fold {} with a model trained with fold {} held out; its classes were seen in training",
            fold, train_fold
        );
    }
    let episodes = sample_eval_suite(fold, n_episodes, k, seed, model.input_size())?;
    let report = evaluate_episodes(&ModelPredictor::new(model, store), &episodes, &FoldSpec::default().test_classes(fold))?;
    let results = ResultsFile {
        config_hash: config_hash.to_string(),
        per_class_iou: report.per_class_iou.clone(),
        miou: report.miou,
        fb_iou: report.fb_iou,
        seed,
        episode_manifest_hash: manifest_digest(&suite_manifest(&episodes)),
        fold,
        shots: k,
        episodes: n_episodes,
    };
    Ok((report, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_predictor_scores_one() {
        let r = evaluate_suite(&OraclePredictor, 2, 1, 8, 0, 16).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.fb_iou, 1.0);
    }
}
