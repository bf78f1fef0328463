//! Single-episode prediction with image outputs.

use std::fs;
use std::path::{Path, PathBuf};

use mcinet_autodiff::Tensor;

use crate::data::export::{overlay, write_mask_png, write_rgb_bytes, write_rgb_png};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::model::{MaskLogits, MciNet};
use crate::objective::{binary, iou, threshold};
use crate::params::ParamStore;

/// Overlay colours for prediction and ground truth.
pub const PREDICTION_COLOR: [u8; 3] = [255, 0, 0];
pub const GROUND_TRUTH_COLOR: [u8; 3] = [0, 255, 0];

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: MaskLogits,
    /// Row-major `[H, W]` foreground decisions.
    pub mask: Vec<bool>,
    pub iou: f64,
}

impl Prediction {
    pub fn mask_tensor(&self) -> Tensor {
        let n = self.logits.large.shape()[0];
        Tensor::from_fn(vec![n, n], |i| f64::from(u8::from(self.mask[i])))
    }
}

pub fn predict_episode(model: &MciNet, store: &ParamStore, episode: &Episode) -> Result<Prediction> {
    let (n, m) = (episode.size(), model.input_size());
    if n != m {
        return Err(Error::shape(format!(
            "episode resolution {}×{} does not match the model's {}×{}",
            n, n, m, m
        )));
    }
    let logits = model.predict_logits(store, &episode.support_images(), &episode.support_masks(), &episode.query.image)?;
    let mask = threshold(&logits.large);
    let iou = iou(&mask, &binary(&episode.query.mask));
    Ok(Prediction { logits, mask, iou })
}

/// Files written for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFiles {
    pub query: PathBuf,
    pub mask: PathBuf,
    pub ground_truth: PathBuf,
    pub overlay: PathBuf,
    pub ground_truth_overlay: PathBuf,
}

/// Writes `{stem}_query.png`, `{stem}_pred.png` and `{stem}_gt.png` (1-bit),
/// and the two RGB overlays into `dir`.
pub fn write_prediction(dir: &Path, stem: &str, episode: &Episode, pred: &Prediction) -> Result<PredictionFiles> {
    fs::create_dir_all(dir)?;
    let files = PredictionFiles {
        query: dir.join(format!("{}_query.png", stem)),
        mask: dir.join(format!("{}_pred.png", stem)),
        ground_truth: dir.join(format!("{}_gt.png", stem)),
        overlay: dir.join(format!("{}_overlay.png", stem)),
        ground_truth_overlay: dir.join(format!("{}_gt_overlay.png", stem)),
    };
    let img = &episode.query.image;
    let n = episode.size();
    write_rgb_png(&files.query, img)?;
    write_mask_png(&files.mask, &pred.mask_tensor())?;
    write_mask_png(&files.ground_truth, &episode.query.mask)?;
    write_rgb_bytes(&files.overlay, n, n, &overlay(img, &pred.mask, PREDICTION_COLOR)?)?;
    let gt = binary(&episode.query.mask);
    write_rgb_bytes(&files.ground_truth_overlay, n, n, &overlay(img, &gt, GROUND_TRUTH_COLOR)?)?;
    Ok(files)
}
