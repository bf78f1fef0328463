//! Episodic training loop.

use log::info;
use mcinet_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{training_episode, Episode};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_suite, ModelPredictor};
use crate::model::MciNet;
use crate::objective::{binary, iou, threshold, total_loss, LossBreakdown};
use crate::optim::Optimizer;
use crate::params::{ParamStore, Session};

/// Loss, gradients and large-scale logits of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
    /// `[H, W]`.
    pub large_logits: Tensor,
}

pub fn episode_gradients(model: &MciNet, store: &ParamStore, episode: &Episode, lambda: f64) -> Result<EpisodeResult> {
    let mut s = Session::new(store);
    let out = model.forward(&mut s, &episode.support_images(), &episode.support_masks(), &episode.query.image)?;
    let (vars, loss) = total_loss(&mut s.g, out.small_logits, out.large_logits, &episode.query.mask, lambda)?;
    let n = model.input_size();
    let large_logits = s.g.value(out.large_logits).reshape(vec![n, n])?;
    let mut grads = s.g.backward(vars.total)?;
    Ok(EpisodeResult {
        loss,
        grads: s.param_grads(&mut grads),
        large_logits,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
    pub fb_iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

/// Model, parameters, optimizer state and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: MciNet,
    pub store: ParamStore,
    pub opt: Optimizer,
    pub step: usize,
    pub history: MetricHistory,
}

impl Trainer {
    /// Fresh run; parameters are initialised from `cfg.train.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = MciNet::new(&cfg.model, cfg.train.seed)?;
        let opt = Optimizer::new(&cfg.optim, &store);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            opt,
            step: 0,
            history: MetricHistory::default(),
        })
    }

    /// The training episodes of optimisation step `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<Episode>> {
        let t = &self.cfg.train;
        (0..t.batch_size)
            .map(|b| training_episode(t.fold, t.shots, t.seed, step, b, self.model.input_size()))
            .collect()
    }

    /// Batch-mean loss and gradients without touching the parameters.
    pub fn batch_gradients(&self, episodes: &[Episode]) -> Result<(LossBreakdown, Vec<Tensor>)> {
        if episodes.is_empty() {
            return Err(Error::validation("empty training batch"));
        }
        let lambda = self.cfg.train.lambda();
        let mut grads: Option<Vec<Tensor>> = None;
        let (mut large, mut small) = (0.0, 0.0);
        for e in episodes {
            let r = episode_gradients(&self.model, &self.store, e, lambda)?;
            if let Some((term, value)) = r.loss.non_finite_term() {
                return Err(Error::NonFinite {
                    step: self.step,
                    term,
                    value,
                });
            }
            large += r.loss.large_bce;
            small += r.loss.small_bce;
            match grads.as_mut() {
                None => grads = Some(r.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&r.grads) {
                        a.add_assign(g);
                    }
                }
            }
        }
        let n = episodes.len() as f64;
        let mut grads = grads.expect("non-empty batch");
        if episodes.len() > 1 {
            for g in &mut grads {
                g.scale_assign(1.0 / n);
            }
        }
        let (large_bce, small_bce) = (large / n, small / n);
        let loss = LossBreakdown {
            total: large_bce + lambda * small_bce,
            large_bce,
            small_bce,
            lambda,
        };
        if let Some((term, value)) = loss.non_finite_term() {
            return Err(Error::NonFinite {
                step: self.step,
                term,
                value,
            });
        }
        if !grads.iter().all(Tensor::all_finite) {
            return Err(Error::NonFinite {
                step: self.step,
                term: "gradient",
                value: f64::NAN,
            });
        }
        Ok((loss, grads))
    }

    /// One optimizer step on `episodes`.
    pub fn train_on(&mut self, episodes: &[Episode]) -> Result<LossBreakdown> {
        let (loss, grads) = self.batch_gradients(episodes)?;
        let grad_norm = Optimizer::grad_norm(&self.store, &grads);
        self.opt.step(&mut self.store, &grads)?;
        self.history.steps.push(StepRecord {
            step: self.step,
            loss,
            grad_norm,
        });
        self.step += 1;
        Ok(loss)
    }

    /// One optimizer step on the run's own episode stream.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let batch = self.batch(self.step)?;
        let loss = self.train_on(&batch)?;
        info!(
            "step {} total {:.5} large {:.5} small {:.5} λ {}",
            self.step, loss.total, loss.large_bce, loss.small_bce, loss.lambda
        );
        Ok(loss)
    }

    /// Evaluates on held-out classes of the training fold.
    pub fn evaluate_now(&mut self) -> Result<EvalRecord> {
        let t = &self.cfg.train;
        let report = evaluate_suite(
            &ModelPredictor::new(&self.model, &self.store),
            t.fold,
            t.shots,
            t.eval_episodes,
            t.seed,
            self.model.input_size(),
        )?;
        let rec = EvalRecord {
            step: self.step,
            miou: report.miou,
            fb_iou: report.fb_iou,
        };
        info!("eval at step {}: mIoU {:.4} FB-IoU {:.4}", rec.step, rec.miou, rec.fb_iou);
        self.history.evals.push(rec);
        Ok(rec)
    }

    /// Trains until `cfg.train.steps`, evaluating every `eval_every` steps.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.train.steps {
            self.train_step()?;
            let every = self.cfg.train.eval_every;
            if every > 0 && self.step.is_multiple_of(every) {
                self.evaluate_now()?;
            }
        }
        Ok(())
    }
}

/// Optimizer steps of the single-episode overfitting check.
pub const OVERFIT_STEPS: usize = 300;

/// Default model and optimizer with gradient clipping at norm 1, one
/// episode per step.
pub fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.optim.clip_norm = Some(1.0);
    cfg.train.batch_size = 1;
    cfg
}

/// Trains on one fixed episode for `steps` steps; returns the trainer and
/// the final large-scale IoU on that episode.
pub fn overfit_episode(cfg: &RunConfig, episode: &Episode, steps: usize) -> Result<(Trainer, f64)> {
    let mut t = Trainer::new(cfg)?;
    let batch = std::slice::from_ref(episode);
    for _ in 0..steps {
        t.train_on(batch)?;
    }
    let logits = t.model.predict_logits(&t.store, &episode.support_images(), &episode.support_masks(), &episode.query.image)?;
    let score = iou(&threshold(&logits.large), &binary(&episode.query.mask));
    Ok((t, score))
}
