//! Two-scale BCE objective and the mIoU / FB-IoU metrics.

use std::collections::BTreeMap;

use mcinet_autodiff::{bce_term, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlim::downsample_mask;

/// Mean per-pixel binary cross-entropy of `logits` against `target`.
pub fn bce(logits: &Tensor, target: &Tensor) -> Result<f64> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(format!("bce logits {:?} vs target {:?}", logits.shape(), target.shape())));
    }
    let n = logits.len().max(1) as f64;
    Ok(logits.data().iter().zip(target.data()).map(|(&z, &m)| bce_term(z, m)).sum::<f64>() / n)
}

/// Loss terms of one episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub large_bce: f64,
    pub small_bce: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [("large_bce", self.large_bce), ("small_bce", self.small_bce), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub large: Var,
    pub small: Var,
}

/// `BCE(large, M) + λ·BCE(small, M_small)` with `M_small` the area-averaged
/// mask at the small logits' resolution.
pub fn total_loss(g: &mut Graph, small: Var, large: Var, mask: &Tensor, lambda: f64) -> Result<(LossVars, LossBreakdown)> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!("λ must be ≥ 0, got {}", lambda)));
    }
    let ls = g.shape(large).to_vec();
    let ss = g.shape(small).to_vec();
    let n = mask.shape().first().copied().unwrap_or(0);
    if mask.rank() != 2 || ls != [1, 1, n, n] {
        return Err(Error::shape(format!("mask {:?} vs large logits {:?}", mask.shape(), ls)));
    }
    let large_target = mask.reshape(vec![1, 1, n, n])?;
    let small_target = downsample_mask(mask, ss[2])?.into_reshape(ss.clone())?;
    let large_v = g.bce_with_logits(large, &large_target)?;
    let small_v = g.bce_with_logits(small, &small_target)?;
    let weighted = g.scale(small_v, lambda);
    let total = g.add(large_v, weighted)?;
    let breakdown = LossBreakdown {
        total: g.value(total).item(),
        large_bce: g.value(large_v).item(),
        small_bce: g.value(small_v).item(),
        lambda,
    };
    Ok((
        LossVars {
            total,
            large: large_v,
            small: small_v,
        },
        breakdown,
    ))
}

/// Foreground decision `σ(z) ≥ 0.5`, i.e. `z ≥ 0`.
pub fn threshold(logits: &Tensor) -> Vec<bool> {
    logits.data().iter().map(|&z| z >= 0.0).collect()
}

pub fn binary(mask: &Tensor) -> Vec<bool> {
    mask.data().iter().map(|&v| v >= 0.5).collect()
}

/// Intersection and union pixel counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn of(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(gt) {
            c.intersection += u64::from(p && t);
            c.union += u64::from(p || t);
        }
        c
    }

    pub fn merge(&mut self, other: IouCounts) {
        self.intersection += other.intersection;
        self.union += other.union;
    }

    /// `I / U`; an empty union (both masks empty) scores 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// IoU of one prediction; 1 if both are empty, 0 if exactly one is.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    IouCounts::of(pred, gt).iou()
}

/// Associative accumulator of per-class and foreground/background counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub per_class: BTreeMap<usize, IouCounts>,
    pub foreground: IouCounts,
    pub background: IouCounts,
    pub episodes: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: usize, pred: &[bool], gt: &[bool]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let fg = IouCounts::of(pred, gt);
        let inv_p: Vec<bool> = pred.iter().map(|p| !p).collect();
        let inv_g: Vec<bool> = gt.iter().map(|g| !g).collect();
        let bg = IouCounts::of(&inv_p, &inv_g);
        self.per_class.entry(class_id).or_default().merge(fg);
        self.foreground.merge(fg);
        self.background.merge(bg);
        self.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (&c, &counts) in &other.per_class {
            self.per_class.entry(c).or_default().merge(counts);
        }
        self.foreground.merge(other.foreground);
        self.background.merge(other.background);
        self.episodes += other.episodes;
    }

    /// Mean of pooled per-class IoU over the listed classes that were seen.
    pub fn miou(&self, class_ids: &[usize]) -> Result<f64> {
        if let Some(c) = self.per_class.keys().find(|c| !class_ids.contains(c)) {
            return Err(Error::validation(format!("unknown class id {}", c)));
        }
        let seen: Vec<f64> = class_ids
            .iter()
            .filter_map(|c| self.per_class.get(c).map(IouCounts::iou))
            .collect();
        if seen.is_empty() {
            return Err(Error::validation("no evaluated episodes"));
        }
        Ok(seen.iter().sum::<f64>() / seen.len() as f64)
    }

    /// Mean of globally pooled foreground and background IoU.
    pub fn fb_iou(&self) -> Result<f64> {
        if self.episodes == 0 {
            return Err(Error::validation("empty episode set"));
        }
        Ok(0.5 * (self.foreground.iou() + self.background.iou()))
    }

    pub fn report(&self, class_ids: &[usize]) -> Result<EvalReport> {
        Ok(EvalReport {
            per_class_iou: self.per_class.iter().map(|(&c, k)| (c, k.iou())).collect(),
            miou: self.miou(class_ids)?,
            fb_iou: self.fb_iou()?,
            episodes: self.episodes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    pub episodes: usize,
}

impl EvalReport {
    /// Line-oriented text table.
    pub fn to_table(&self) -> String {
        let mut s = String::from("class\tIoU\n");
        for (c, v) in &self.per_class_iou {
            s.push_str(&format!("{}\t{:.4}\n", c, v));
        }
        s.push_str(&format!("mIoU\t{:.4}\nFB-IoU\t{:.4}\nepisodes\t{}\n", self.miou, self.fb_iou, self.episodes));
        s
    }
}

/// mIoU of a list of `(class, prediction, ground truth)` episodes.
pub fn miou(preds: &[Vec<bool>], gts: &[Vec<bool>], classes: &[usize], class_ids: &[usize]) -> Result<f64> {
    let mut acc = MetricAccumulator::new();
    for ((p, g), &c) in preds.iter().zip(gts).zip(classes) {
        acc.add(c, p, g)?;
    }
    acc.miou(class_ids)
}

pub fn fb_iou(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<f64> {
    let mut acc = MetricAccumulator::new();
    for (p, g) in preds.iter().zip(gts) {
        acc.add(0, p, g)?;
    }
    acc.fb_iou()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_analytic_values() {
        let z = Tensor::new(vec![1], vec![0.0]).unwrap();
        let one = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!((bce(&z, &one).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let big = Tensor::new(vec![1], vec![50.0]).unwrap();
        let v = bce(&big, &one).unwrap();
        assert!(v.is_finite() && v < 1e-20);
        for z in [-1e4, -50.0, 50.0, 1e4] {
            let t = Tensor::new(vec![1], vec![z]).unwrap();
            assert!(bce(&t, &one).unwrap().is_finite());
            assert!(bce(&t, &Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap().is_finite());
        }
    }

    #[test]
    fn total_loss_rejects_negative_lambda() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let l = g.constant(Tensor::zeros(vec![1, 1, 8, 8]));
        let m = Tensor::zeros(vec![8, 8]);
        assert!(matches!(total_loss(&mut g, s, l, &m, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn iou_conventions() {
        assert_eq!(iou(&[false; 4], &[false; 4]), 1.0);
        assert_eq!(iou(&[true, false], &[false, false]), 0.0);
        // 2×2: top row vs left column
        let pred = [true, true, false, false];
        let gt = [true, false, true, false];
        assert_eq!(iou(&pred, &gt), 1.0 / 3.0);
    }

    #[test]
    fn unknown_class_and_empty_set_are_errors() {
        let mut acc = MetricAccumulator::new();
        assert!(acc.fb_iou().is_err());
        acc.add(7, &[true], &[true]).unwrap();
        assert!(acc.miou(&[0, 1]).is_err());
        assert_eq!(acc.miou(&[7]).unwrap(), 1.0);
    }
}
