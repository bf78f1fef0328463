//! Full network: backbone → fusion (query only) → interaction → decoding.

use mcinet_autodiff::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{image_input, Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mcfm::Mcfm;
use crate::mlim::{Mlim, MlimOutput};
use crate::msmp::{build_skips, Msmp, SkipBundle};
use crate::params::{ParamGroup, ParamStore, Session};

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, 1, H/4, W/4]`.
    pub small_logits: Var,
    /// `[1, 1, H, W]`.
    pub large_logits: Var,
    pub small_features: Var,
    pub evidence: MlimOutput,
    pub skips: SkipBundle,
    pub query_pyramid: FeaturePyramid,
}

/// Pre-sigmoid mask predictions at both scales.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    /// `[H/4, W/4]`.
    pub small: Tensor,
    /// `[H, W]`.
    pub large: Tensor,
}

#[derive(Clone, Debug)]
pub struct MciNet {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub mcfm: Mcfm,
    pub mlim: Mlim,
    pub msmp: Msmp,
}

impl MciNet {
    /// Builds the network and its parameters from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb = &cfg.backbone;
        let backbone = Backbone::new(bb, &mut store, &mut rng)?;
        let mcfm = Mcfm::new(&cfg.mcfm, bb, &mut store, &mut rng);
        let mlim = Mlim::new(&cfg.mlim, bb, &mut store, &mut rng);
        let msmp = Msmp::new(&cfg.msmp, bb, cfg.mlim.evidence_channels(), &mut store, &mut rng);
        if bb.freeze_backbone {
            store.freeze_group(ParamGroup::Backbone);
        }
        Ok((
            Self {
                cfg: cfg.clone(),
                backbone,
                mcfm,
                mlim,
                msmp,
            },
            store,
        ))
    }

    pub fn input_size(&self) -> usize {
        self.cfg.backbone.input_size
    }

    fn check_inputs(&self, support_images: &[Tensor], support_masks: &[Tensor], query: &Tensor) -> Result<()> {
        let n = self.input_size();
        if support_images.is_empty() {
            return Err(Error::validation("at least one support image is required"));
        }
        if support_images.len() != support_masks.len() {
            return Err(Error::validation(format!(
                "{} support images with {} masks",
                support_images.len(),
                support_masks.len()
            )));
        }
        for img in support_images.iter().chain(std::iter::once(query)) {
            if img.shape() != [3, n, n] {
                return Err(Error::shape(format!("image {:?} does not match input size {}", img.shape(), n)));
            }
        }
        for m in support_masks {
            if m.shape() != [n, n] {
                return Err(Error::shape(format!("mask {:?} does not match input size {}", m.shape(), n)));
            }
        }
        Ok(())
    }

    /// Records the forward pass of one episode on `s`.
    pub fn forward(&self, s: &mut Session, support_images: &[Tensor], support_masks: &[Tensor], query: &Tensor) -> Result<ForwardOutput> {
        self.check_inputs(support_images, support_masks, query)?;
        let q_img = image_input(s, query)?;
        let pyr_q = self.backbone.extract_pyramid(s, q_img)?;
        let pyr_q = self.mcfm.apply_mcfm(s, &pyr_q, q_img)?;
        let mut pyr_s = Vec::with_capacity(support_images.len());
        for img in support_images {
            let x = image_input(s, img)?;
            pyr_s.push(self.backbone.extract_pyramid(s, x)?);
        }
        let evidence = self.mlim.mlim_forward(s, &pyr_s, &pyr_q, support_masks)?;
        let skips = build_skips(&mut s.g, &pyr_s, &pyr_q, support_masks, self.cfg.msmp.skip_support)?;
        let (small_features, small_logits) = self.msmp.decode_small(s, evidence.last, evidence.penultimate, &skips)?;
        let large_logits = self.msmp.decode_large(s, evidence.penultimate, small_features, small_logits, &skips)?;
        Ok(ForwardOutput {
            small_logits,
            large_logits,
            small_features,
            evidence,
            skips,
            query_pyramid: pyr_q,
        })
    }

    /// Forward pass returning plain logit tensors.
    pub fn predict_logits(&self, store: &ParamStore, support_images: &[Tensor], support_masks: &[Tensor], query: &Tensor) -> Result<MaskLogits> {
        let mut s = Session::new(store);
        let out = self.forward(&mut s, support_images, support_masks, query)?;
        let n = self.input_size();
        let q = self.cfg.backbone.scale_size(0);
        Ok(MaskLogits {
            small: s.g.value(out.small_logits).reshape(vec![q, q])?,
            large: s.g.value(out.large_logits).reshape(vec![n, n])?,
        })
    }
}
