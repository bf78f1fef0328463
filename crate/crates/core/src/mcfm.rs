//! Multi-content fusion: residual cross-attention from a low-level query
//! branch into the high-level query features of the last two scales.

use mcinet_autodiff::{Conv2dOptions, Graph, Var};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{FeaturePyramid, ScaleBlock};
use crate::config::{BackboneConfig, LowLevelSource, McfmConfig, LOW_LEVEL_CHANNELS};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{ParamGroup, ParamStore, Session};

/// Bilinear downsample followed by conv(3→128), ReLU, conv(128→128).
#[derive(Clone, Debug)]
pub struct LowLevelBranch {
    first: Conv,
    second: Conv,
}

impl LowLevelBranch {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let g = ParamGroup::McfmBranch;
        Self {
            first: Conv::same(store, rng, "mcfm.branch.0", g, 3, LOW_LEVEL_CHANNELS, 3),
            second: Conv::same(store, rng, "mcfm.branch.1", g, LOW_LEVEL_CHANNELS, LOW_LEVEL_CHANNELS, 3),
        }
    }

    /// Low-level map `[1, 128, h, w]` for a `[1, 3, H, W]` image.
    pub fn encode_low_level(&self, s: &mut Session, img: Var, target_hw: (usize, usize)) -> Result<Var> {
        let sh = s.g.shape(img).to_vec();
        if sh.len() != 4 || sh[1] != 3 {
            return Err(Error::shape(format!("expected [1, 3, H, W] image, got {:?}", sh)));
        }
        let (h, w) = target_hw;
        if h == 0 || w == 0 || h > sh[2] || w > sh[3] {
            return Err(Error::shape(format!(
                "low-level target {}x{} exceeds input {}x{}; the raw image is never upsampled",
                h, w, sh[2], sh[3]
            )));
        }
        let x = s.g.resize_bilinear(img, h, w)?;
        let x = self.first.forward(s, x)?;
        let x = s.g.relu(x);
        self.second.forward(s, x)
    }
}

/// Tape handles of one cross-attention's projection weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    /// `[d, C1, 1, 1]` and `[d]`.
    pub wq: Var,
    pub bq: Var,
    /// `[d, C2, 1, 1]` and `[d]`.
    pub wk: Var,
    pub bk: Var,
    /// `[C1, C2, 1, 1]` and `[C1]`.
    pub wv: Var,
    pub bv: Var,
}

/// Output of [`cross_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[1, C1, H, W]`, same shape as the query map.
    pub out: Var,
    /// Row-stochastic `[1, HW, HW]`; row = query position, column = key.
    pub weights: Var,
}

/// `Q + softmax(proj_q(Q)ᵀ proj_k(K) / √d) · proj_v(V)` with spatial
/// positions as tokens and `K = V = kv`.
pub fn cross_attention(
    g: &mut Graph,
    q: Var,
    kv: Var,
    w: &AttentionWeights,
    d: usize,
) -> Result<AttentionOutput> {
    let (qs, ks) = (g.shape(q).to_vec(), g.shape(kv).to_vec());
    if qs.len() != 4 || ks.len() != 4 || qs[0] != 1 || ks[0] != 1 || qs[2..] != ks[2..] {
        return Err(Error::shape(format!(
            "cross-attention query {:?} and key/value {:?} must share spatial size",
            qs, ks
        )));
    }
    let (c1, h, wd) = (qs[1], qs[2], qs[3]);
    let hw = h * wd;
    let pointwise = Conv2dOptions::default();
    let pq = g.conv2d(q, w.wq, Some(w.bq), pointwise)?;
    let pk = g.conv2d(kv, w.wk, Some(w.bk), pointwise)?;
    let pv = g.conv2d(kv, w.wv, Some(w.bv), pointwise)?;
    let pq = g.reshape(pq, &[1, d, hw])?;
    let pk = g.reshape(pk, &[1, d, hw])?;
    let pv = g.reshape(pv, &[1, c1, hw])?;
    let scores = g.bmm(pq, pk, true, false)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scores)?;
    let mixed = g.bmm(pv, weights, false, true)?;
    let mixed = g.reshape(mixed, &[1, c1, h, wd])?;
    let out = g.add(q, mixed)?;
    Ok(AttentionOutput { out, weights })
}

/// Learned projections for one fused feature layer.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub proj_q: Conv,
    pub proj_k: Conv,
    pub proj_v: Conv,
    pub d: usize,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c1: usize,
        c2: usize,
        d: usize,
    ) -> Self {
        let g = ParamGroup::McfmAttention;
        let p = Conv2dOptions::default();
        Self {
            proj_q: Conv::new(store, rng, &format!("{}.q", name), g, c1, d, 1, p),
            proj_k: Conv::new(store, rng, &format!("{}.k", name), g, c2, d, 1, p),
            proj_v: Conv::new(store, rng, &format!("{}.v", name), g, c2, c1, 1, p),
            d,
        }
    }

    pub fn bind(&self, s: &mut Session) -> AttentionWeights {
        AttentionWeights {
            wq: s.param(self.proj_q.weight),
            bq: s.param(self.proj_q.bias),
            wk: s.param(self.proj_k.weight),
            bk: s.param(self.proj_k.bias),
            wv: s.param(self.proj_v.weight),
            bv: s.param(self.proj_v.bias),
        }
    }

    pub fn forward(&self, s: &mut Session, q: Var, kv: Var) -> Result<AttentionOutput> {
        let w = self.bind(s);
        cross_attention(&mut s.g, q, kv, &w, self.d)
    }
}

#[derive(Clone, Debug)]
pub struct Mcfm {
    pub cfg: McfmConfig,
    pub branch: Option<LowLevelBranch>,
    /// Indexed `[fused scale][layer]`, fused scales being the last two.
    pub attention: Vec<Vec<CrossAttention>>,
    fused_scales: Vec<usize>,
}

impl Mcfm {
    pub fn new(
        cfg: &McfmConfig,
        bb: &BackboneConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let n = bb.num_scales;
        let fused_scales = vec![n - 2, n - 1];
        if !cfg.active() {
            return Self {
                cfg: cfg.clone(),
                branch: None,
                attention: Vec::new(),
                fused_scales,
            };
        }
        let branch = (cfg.low_level_source == LowLevelSource::Branch).then(|| LowLevelBranch::new(store, rng));
        let kv_channels = match cfg.low_level_source {
            LowLevelSource::Branch => LOW_LEVEL_CHANNELS,
            LowLevelSource::BackboneBlock1 => bb.channels_per_scale[0],
            LowLevelSource::BackboneBlock2 => bb.channels_per_scale[1],
            LowLevelSource::None => unreachable!("inactive"),
        };
        let attention = fused_scales
            .iter()
            .map(|&i| {
                (0..bb.layers_per_scale[i])
                    .map(|l| {
                        CrossAttention::new(
                            store,
                            rng,
                            &format!("mcfm.scale{}.layer{}", i, l),
                            bb.channels_per_scale[i],
                            kv_channels,
                            cfg.d,
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            branch,
            attention,
            fused_scales,
        }
    }

    pub fn fused_scales(&self) -> &[usize] {
        &self.fused_scales
    }

    /// Key/value map for fusing into a scale of side `(h, w)`.
    pub fn key_value(&self, s: &mut Session, pyr_q: &FeaturePyramid, img: Var, hw: (usize, usize)) -> Result<Var> {
        match self.cfg.low_level_source {
            LowLevelSource::Branch => self
                .branch
                .as_ref()
                .expect("branch built for branch source")
                .encode_low_level(s, img, hw),
            LowLevelSource::BackboneBlock1 => Ok(s.g.resize_bilinear(pyr_q.last_layer(0), hw.0, hw.1)?),
            LowLevelSource::BackboneBlock2 => Ok(s.g.resize_bilinear(pyr_q.last_layer(1), hw.0, hw.1)?),
            LowLevelSource::None => Err(Error::config("fusion disabled")),
        }
    }

    /// Fuses every layer of the last two query scales; other scales and
    /// all shapes are unchanged. Identity when the module is disabled.
    pub fn apply_mcfm(&self, s: &mut Session, pyr_q: &FeaturePyramid, img: Var) -> Result<FeaturePyramid> {
        if !self.cfg.active() {
            return Ok(pyr_q.clone());
        }
        let mut out = pyr_q.clone();
        for (slot, &i) in self.fused_scales.iter().enumerate() {
            let sh = s.g.shape(pyr_q.last_layer(i)).to_vec();
            let kv = self.key_value(s, pyr_q, img, (sh[2], sh[3]))?;
            let layers = pyr_q.scales[i]
                .layers
                .iter()
                .zip(&self.attention[slot])
                .map(|(&f, attn)| attn.forward(s, f, kv).map(|o| o.out))
                .collect::<Result<Vec<_>>>()?;
            out.scales[i] = ScaleBlock { layers };
        }
        Ok(out)
    }
}
