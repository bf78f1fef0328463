//! Multi-scale mask prediction: a ¼-resolution branch and a full-resolution
//! branch with bidirectional fusion, foreground-only support skips and an
//! atrous pyramid pooling block in the large branch.

use mcinet_autodiff::{Conv2dOptions, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeaturePyramid;
use crate::config::{BackboneConfig, MsmpConfig, SkipSupport};
use crate::error::{Error, Result};
use crate::mlim::downsample_mask;
use crate::nn::{Conv, ConvBlock};
use crate::params::{ParamGroup, ParamStore, Session};

/// Per-scale skip features, shallow scale first.
#[derive(Clone, Debug)]
pub struct SkipBundle {
    /// Unmasked query features `F[i][L_i]`.
    pub query: Vec<Var>,
    /// Support features `F[i][L_i]`, multiplied by the area-downsampled
    /// support mask (foreground mode) and averaged over shots.
    pub support: Vec<Var>,
}

pub fn build_skips(
    g: &mut Graph,
    pyr_s: &[FeaturePyramid],
    pyr_q: &FeaturePyramid,
    masks: &[Tensor],
    mode: SkipSupport,
) -> Result<SkipBundle> {
    if pyr_s.is_empty() || pyr_s.len() != masks.len() {
        return Err(Error::validation(format!(
            "{} support pyramids with {} masks",
            pyr_s.len(),
            masks.len()
        )));
    }
    let mut query = Vec::with_capacity(pyr_q.num_scales());
    let mut support = Vec::with_capacity(pyr_q.num_scales());
    for i in 0..pyr_q.num_scales() {
        let q = pyr_q.last_layer(i);
        let qs = g.shape(q).to_vec();
        let mut acc: Option<Var> = None;
        for (ps, mask) in pyr_s.iter().zip(masks) {
            let f = ps.last_layer(i);
            if g.shape(f) != qs.as_slice() {
                return Err(Error::shape(format!(
                    "support scale {} is {:?}, query {:?}",
                    i,
                    g.shape(f),
                    qs
                )));
            }
            let f = match mode {
                SkipSupport::WholeImage => f,
                SkipSupport::Foreground => {
                    let m = downsample_mask(mask, qs[2])?.into_reshape(vec![1, 1, qs[2], qs[3]])?;
                    let m = g.constant(m);
                    g.mul_channel(f, m)?
                }
            };
            acc = Some(match acc {
                None => f,
                Some(a) => g.add(a, f)?,
            });
        }
        let sum = acc.expect("non-empty");
        let s = if pyr_s.len() == 1 {
            sum
        } else {
            g.scale(sum, 1.0 / pyr_s.len() as f64)
        };
        query.push(q);
        support.push(s);
    }
    Ok(SkipBundle { query, support })
}

/// Atrous rate actually used on a feature map of side `size`.
pub fn effective_rate(rate: usize, size: usize) -> usize {
    rate.min(((size.saturating_sub(1)) / 2).max(1))
}

/// Parallel 3×3 atrous branches plus an image-pooling branch, concatenated
/// and projected back to the input width.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub rates: Vec<usize>,
    pub branches: Vec<Conv>,
    pub pool: Conv,
    pub project: Conv,
}

impl Aspp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, width: usize, rates: &[usize]) -> Self {
        let g = ParamGroup::Aspp;
        let branches = rates
            .iter()
            .enumerate()
            .map(|(j, &r)| Conv::new(store, rng, &format!("aspp.rate{}", j), g, width, width, 3, Conv2dOptions::same(3, r)))
            .collect();
        let p = Conv2dOptions::default();
        Self {
            rates: rates.to_vec(),
            branches,
            pool: Conv::new(store, rng, "aspp.pool", g, width, width, 1, p),
            project: Conv::new(store, rng, "aspp.project", g, width * (rates.len() + 1), width, 1, p),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let sh = s.g.shape(x).to_vec();
        let (h, w) = (sh[2], sh[3]);
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for (conv, &rate) in self.branches.iter().zip(&self.rates) {
            let r = effective_rate(rate, h.min(w));
            let y = conv.forward_with(s, x, Conv2dOptions::same(3, r))?;
            parts.push(s.g.relu(y));
        }
        let pooled = s.g.global_avg_pool(x)?;
        let pooled = self.pool.forward(s, pooled)?;
        let pooled = s.g.relu(pooled);
        parts.push(s.g.resize_bilinear(pooled, h, w)?);
        let cat = s.g.concat(&parts, 1)?;
        let y = self.project.forward(s, cat)?;
        Ok(s.g.relu(y))
    }
}

/// Conv(3×3), ReLU, Conv(1×1) → one logit channel.
#[derive(Clone, Debug)]
pub struct SmallHead {
    pub hidden: Conv,
    pub out: Conv,
}

impl SmallHead {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.hidden.forward(s, x)?;
        let h = s.g.relu(h);
        self.out.forward(s, h)
    }
}

#[derive(Clone, Debug)]
pub struct Msmp {
    pub cfg: MsmpConfig,
    /// Blocks at the deepest and penultimate scales.
    pub small_blocks: Vec<ConvBlock>,
    pub small_head: SmallHead,
    pub large_in: ConvBlock,
    pub aspp: Aspp,
    pub large_out: ConvBlock,
    pub classifier: Conv,
    num_scales: usize,
    input_size: usize,
    quarter: usize,
}

impl Msmp {
    pub fn new(
        cfg: &MsmpConfig,
        bb: &BackboneConfig,
        evidence_channels: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = bb.num_scales;
        let w = cfg.width;
        let ch = &bb.channels_per_scale;
        let e = evidence_channels;
        let small_blocks = vec![
            ConvBlock::new(store, rng, "msmp.small.deep", ParamGroup::MsmpSmall, 2 * e + 2 * ch[n - 1], w),
            ConvBlock::new(store, rng, "msmp.small.penult", ParamGroup::MsmpSmall, w + 2 * ch[n - 2], w),
        ];
        let small_head = SmallHead {
            hidden: Conv::same(store, rng, "head.small.0", ParamGroup::SmallHead, w, w, 3),
            out: Conv::same(store, rng, "head.small.1", ParamGroup::SmallHead, w, 1, 1),
        };
        let feedback = if cfg.feedback { w + 1 } else { 0 };
        let large_in = ConvBlock::new(store, rng, "msmp.large.in", ParamGroup::MsmpLarge, e + feedback + 2 * ch[0], w);
        let aspp = Aspp::new(store, rng, w, &cfg.aspp_rates);
        let large_out = ConvBlock::new(store, rng, "msmp.large.out", ParamGroup::MsmpLarge, w, w);
        let classifier = Conv::same(store, rng, "head.large", ParamGroup::LargeHead, w, 1, 1);
        Self {
            cfg: cfg.clone(),
            small_blocks,
            small_head,
            large_in,
            aspp,
            large_out,
            classifier,
            num_scales: n,
            input_size: bb.input_size,
            quarter: bb.scale_size(0),
        }
    }

    /// Small branch: returns pre-classifier features and logits, both at
    /// ¼ input size.
    pub fn decode_small(&self, s: &mut Session, ev_small: Var, ev_large: Var, skips: &SkipBundle) -> Result<(Var, Var)> {
        let n = self.num_scales;
        let es = s.g.shape(ev_small).to_vec();
        let el = s.g.shape(ev_large).to_vec();
        if es.len() != 4 || el.len() != 4 || el[2] != 2 * es[2] || el[3] != 2 * es[3] {
            return Err(Error::shape(format!(
                "small-scale evidence {:?} must be half the size of large-scale evidence {:?}",
                es, el
            )));
        }
        let down = s.g.avg_pool(ev_large, 2)?;
        let x = s.g.concat(&[ev_small, down, skips.query[n - 1], skips.support[n - 1]], 1)?;
        let x = self.small_blocks[0].forward(s, x)?;
        let x = s.g.resize_bilinear(x, el[2], el[3])?;
        let x = s.g.concat(&[x, skips.query[n - 2], skips.support[n - 2]], 1)?;
        let x = self.small_blocks[1].forward(s, x)?;
        let feat = s.g.resize_bilinear(x, self.quarter, self.quarter)?;
        let logits = self.small_head.forward(s, feat)?;
        Ok((feat, logits))
    }

    /// Large branch: conv block → ×2 → ASPP → ×2 → conv block → classifier.
    pub fn decode_large(&self, s: &mut Session, ev_large: Var, small_feat: Var, small_logits: Var, skips: &SkipBundle) -> Result<Var> {
        let q = self.quarter;
        let ev = s.g.resize_bilinear(ev_large, q, q)?;
        let mut parts = vec![ev];
        if self.cfg.feedback {
            for v in [small_feat, small_logits] {
                let sh = s.g.shape(v);
                parts.push(if sh[2] == q && sh[3] == q { v } else { s.g.resize_bilinear(v, q, q)? });
            }
        }
        parts.push(skips.query[0]);
        parts.push(skips.support[0]);
        let x = s.g.concat(&parts, 1)?;
        let x = self.large_in.forward(s, x)?;
        let x = s.g.resize_bilinear(x, 2 * q, 2 * q)?;
        let x = self.aspp.forward(s, x)?;
        let x = s.g.resize_bilinear(x, self.input_size, self.input_size)?;
        let x = self.large_out.forward(s, x)?;
        self.classifier.forward(s, x)
    }
}
