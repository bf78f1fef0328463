//! Multi-layer interaction: same-layer and adjacent-scale multi-head
//! support↔query correlations, separable 4D refinement, and
//! support-mask-weighted evidence aggregation.
//!
//! Correlation volumes are laid out `[channels, Hq, Wq, Hs, Ws]`.

use mcinet_autodiff::{area_pool, Conv2dOptions, Graph, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::backbone::FeaturePyramid;
use crate::config::{Aggregate, BackboneConfig, MlimConfig, FEATURE_NORM_EPS};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{ParamGroup, ParamStore, Session};

/// Tape handles of a multi-head projector: `weight [n·dh, C, 1, 1]`,
/// `bias [n·dh]`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectorWeights {
    pub weight: Var,
    pub bias: Var,
    pub heads: usize,
}

/// Per-head inner products between projected query and support positions.
/// Inputs are `[1, C, H, W]` maps of equal shape; the output is
/// `[heads, Hq, Wq, Hs, Ws]`.
pub fn multihead_correlation(g: &mut Graph, fs: Var, fq: Var, proj: &ProjectorWeights) -> Result<Var> {
    let (ss, qs) = (g.shape(fs).to_vec(), g.shape(fq).to_vec());
    if ss.len() != 4 || ss != qs || ss[0] != 1 {
        return Err(Error::shape(format!(
            "correlation inputs must be equal [1, C, H, W] maps, got support {:?} query {:?}",
            ss, qs
        )));
    }
    let ws = g.shape(proj.weight).to_vec();
    if ws[1] != ss[1] || proj.heads == 0 || !ws[0].is_multiple_of(proj.heads) {
        return Err(Error::shape(format!(
            "projector {:?} with {} heads does not fit {} channels",
            ws, proj.heads, ss[1]
        )));
    }
    let (n, dh) = (proj.heads, ws[0] / proj.heads);
    let (h, w) = (ss[2], ss[3]);
    let opts = Conv2dOptions::default();
    let pq = g.conv2d(fq, proj.weight, Some(proj.bias), opts)?;
    let ps = g.conv2d(fs, proj.weight, Some(proj.bias), opts)?;
    let pq = g.reshape(pq, &[n, dh, h * w])?;
    let ps = g.reshape(ps, &[n, dh, h * w])?;
    let corr = g.bmm(pq, ps, true, false)?;
    Ok(g.reshape(corr, &[n, h, w, h, w])?)
}

/// Strided 3×3 convolution bringing a shallower-scale query map to the
/// next scale's size and width. The input must be exactly twice the
/// target side in each dimension.
pub fn adjacent_rescale(g: &mut Graph, x: Var, weight: Var, bias: Var, target_hw: (usize, usize)) -> Result<Var> {
    let sh = g.shape(x).to_vec();
    if sh.len() != 4 || sh[2] != 2 * target_hw.0 || sh[3] != 2 * target_hw.1 {
        return Err(Error::shape(format!(
            "adjacent rescale needs a map exactly 2x of {}x{}, got {:?}",
            target_hw.0, target_hw.1, sh
        )));
    }
    Ok(g.conv2d(x, weight, Some(bias), Conv2dOptions::strided(2, 1))?)
}

/// Handles of one refiner alternation: a conv over support dims, then one
/// over query dims.
#[derive(Clone, Copy, Debug)]
pub struct RefinerStageWeights {
    pub support_w: Var,
    pub support_b: Var,
    pub query_w: Var,
    pub query_b: Var,
}

/// Separable 4D refinement. Each alternation convolves over the support
/// dims with every query position as an independent item, then over the
/// query dims with every support position as an item. A ReLU follows every
/// alternation but the last. Spatial dims are preserved.
pub fn refine_correlation(g: &mut Graph, vol: Var, stages: &[RefinerStageWeights], expected_channels: usize) -> Result<Var> {
    let sh = g.shape(vol).to_vec();
    if sh.len() != 5 {
        return Err(Error::shape(format!("correlation volume must be rank 5, got {:?}", sh)));
    }
    if sh[0] != expected_channels {
        return Err(Error::config(format!(
            "refiner expects {} stacked channels, volume has {}",
            expected_channels, sh[0]
        )));
    }
    let (p, hq, wq, hs, wsp) = (sh[0], sh[1], sh[2], sh[3], sh[4]);
    let (nq, ns) = (hq * wq, hs * wsp);
    let x = g.permute(vol, &[1, 2, 0, 3, 4])?;
    let mut x = g.reshape(x, &[nq, p, hs, wsp])?;
    for (k, st) in stages.iter().enumerate() {
        let kern = g.shape(st.support_w)[2];
        let opts = Conv2dOptions::same(kern, 1);
        let y = g.conv2d(x, st.support_w, Some(st.support_b), opts)?;
        let ch = g.shape(y)[1];
        let y = g.reshape(y, &[nq, ch, ns])?;
        let y = g.permute(y, &[2, 1, 0])?;
        let y = g.reshape(y, &[ns, ch, hq, wq])?;
        let kern = g.shape(st.query_w)[2];
        let y = g.conv2d(y, st.query_w, Some(st.query_b), Conv2dOptions::same(kern, 1))?;
        if k + 1 == stages.len() {
            let y = g.reshape(y, &[hs, wsp, ch, hq, wq])?;
            return Ok(g.permute(y, &[2, 3, 4, 0, 1])?);
        }
        let y = g.relu(y);
        let y = g.reshape(y, &[ns, ch, nq])?;
        let y = g.permute(y, &[2, 1, 0])?;
        x = g.reshape(y, &[nq, ch, hs, wsp])?;
    }
    Ok(vol)
}

/// Support positions of all shots concatenated along one axis.
#[derive(Clone, Copy, Debug)]
pub struct MergedSupport {
    /// `[C, Hq·Wq, K·Hs·Ws]`.
    pub volume: Var,
    pub query_hw: (usize, usize),
    pub shots: usize,
}

/// Concatenates per-shot refined volumes `[C, Hq, Wq, Hs, Ws]` along the
/// support axis so normalization runs over all `K·Hs·Ws` positions.
pub fn kshot_merge(g: &mut Graph, per_shot: &[Var]) -> Result<MergedSupport> {
    let Some(&first) = per_shot.first() else {
        return Err(Error::validation("K-shot merge needs at least one support"));
    };
    let s0 = g.shape(first).to_vec();
    if s0.len() != 5 {
        return Err(Error::shape(format!("refined volume must be rank 5, got {:?}", s0)));
    }
    let mut flat = Vec::with_capacity(per_shot.len());
    for &v in per_shot {
        let s = g.shape(v).to_vec();
        if s.len() != 5 || s[..3] != s0[..3] {
            return Err(Error::shape(format!("shot volumes disagree: {:?} vs {:?}", s, s0)));
        }
        flat.push(g.reshape(v, &[s[0], s[1] * s[2], s[3] * s[4]])?);
    }
    let volume = if flat.len() == 1 { flat[0] } else { g.concat(&flat, 2)? };
    Ok(MergedSupport {
        volume,
        query_hw: (s0[1], s0[2]),
        shots: per_shot.len(),
    })
}

fn check_mask(mask: &Tensor) -> Result<()> {
    if mask.rank() != 2 {
        return Err(Error::shape(format!("support mask must be [H, W], got {:?}", mask.shape())));
    }
    if let Some(v) = mask.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("support mask value {} outside [0, 1]", v)));
    }
    Ok(())
}

/// Evidence `[1, C, Hq, Wq]` from merged support correlations and the
/// per-shot masks (each `[Hs, Ws]`, in shot order).
pub fn aggregate_merged(g: &mut Graph, merged: &MergedSupport, masks: &[Tensor], mode: Aggregate) -> Result<Var> {
    if masks.len() != merged.shots {
        return Err(Error::validation(format!(
            "{} masks for {} shots",
            masks.len(),
            merged.shots
        )));
    }
    let mut column = Vec::new();
    for m in masks {
        check_mask(m)?;
        column.extend_from_slice(m.data());
    }
    let sh = g.shape(merged.volume).to_vec();
    let (c, ns) = (sh[0], sh[2]);
    if column.len() != ns {
        return Err(Error::shape(format!(
            "masks cover {} support positions, volume has {}",
            column.len(),
            ns
        )));
    }
    let mut rep = Vec::with_capacity(c * ns);
    for _ in 0..c {
        rep.extend_from_slice(&column);
    }
    let mask_col = g.constant(Tensor::new(vec![c, ns, 1], rep)?);
    let ev = match mode {
        Aggregate::Softmax => {
            let w = g.softmax(merged.volume)?;
            g.bmm(w, mask_col, false, false)?
        }
        Aggregate::Raw => {
            let e = g.bmm(merged.volume, mask_col, false, false)?;
            g.scale(e, 1.0 / ns as f64)
        }
    };
    let (hq, wq) = merged.query_hw;
    Ok(g.reshape(ev, &[1, c, hq, wq])?)
}

/// Single-support aggregation.
pub fn mask_aggregate(g: &mut Graph, refined: Var, mask: &Tensor, mode: Aggregate) -> Result<Var> {
    let merged = kshot_merge(g, &[refined])?;
    aggregate_merged(g, &merged, std::slice::from_ref(mask), mode)
}

/// Area-averaged downsample of an `[H, W]` mask to `side × side`.
pub fn downsample_mask(mask: &Tensor, side: usize) -> Result<Tensor> {
    let sh = mask.shape();
    if sh.len() != 2 || sh[0] != sh[1] || side == 0 || !sh[0].is_multiple_of(side) {
        return Err(Error::shape(format!("cannot area-downsample {:?} to {}", sh, side)));
    }
    let f = sh[0] / side;
    Ok(Tensor::new(vec![side, side], area_pool(mask.data(), sh, f))?)
}

#[derive(Clone, Debug)]
pub struct HeadProjector {
    pub conv: Conv,
    pub heads: usize,
}

impl HeadProjector {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize, cfg: &MlimConfig) -> Self {
        let dh = cfg.head_dim_for(channels);
        Self {
            conv: Conv::new(
                store,
                rng,
                name,
                ParamGroup::MlimProjector,
                channels,
                cfg.heads * dh,
                1,
                Conv2dOptions::default(),
            ),
            heads: cfg.heads,
        }
    }

    pub fn bind(&self, s: &mut Session) -> ProjectorWeights {
        ProjectorWeights {
            weight: s.param(self.conv.weight),
            bias: s.param(self.conv.bias),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub stages: Vec<(Conv, Conv)>,
    pub in_channels: usize,
}

impl Refiner {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_channels: usize, cfg: &MlimConfig) -> Self {
        let g = ParamGroup::MlimRefiner;
        let k = cfg.refiner_kernel;
        let mut cin = in_channels;
        let stages = cfg
            .refiner_widths
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let sup = Conv::same(store, rng, &format!("{}.{}.support", name, j), g, cin, w, k);
                let qry = Conv::same(store, rng, &format!("{}.{}.query", name, j), g, w, w, k);
                cin = w;
                (sup, qry)
            })
            .collect();
        Self { stages, in_channels }
    }

    pub fn bind(&self, s: &mut Session) -> Vec<RefinerStageWeights> {
        self.stages
            .iter()
            .map(|(a, b)| RefinerStageWeights {
                support_w: s.param(a.weight),
                support_b: s.param(a.bias),
                query_w: s.param(b.weight),
                query_b: s.param(b.bias),
            })
            .collect()
    }

    pub fn forward(&self, s: &mut Session, vol: Var) -> Result<Var> {
        let w = self.bind(s);
        refine_correlation(&mut s.g, vol, &w, self.in_channels)
    }
}

/// Learned pieces for one interacting scale.
#[derive(Clone, Debug)]
pub struct ScaleInteraction {
    pub scale: usize,
    pub same_layer: Vec<HeadProjector>,
    pub adjacent: Option<(HeadProjector, Conv)>,
    pub refiner: Refiner,
}

/// Evidence maps at the two interacting scales.
#[derive(Clone, Copy, Debug)]
pub struct MlimOutput {
    /// `[1, C, H_{n-2}, W_{n-2}]`.
    pub penultimate: Var,
    /// `[1, C, H_{n-1}, W_{n-1}]`.
    pub last: Var,
}

#[derive(Clone, Debug)]
pub struct Mlim {
    pub cfg: MlimConfig,
    pub scales: Vec<ScaleInteraction>,
}

impl Mlim {
    pub fn new(cfg: &MlimConfig, bb: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let n = bb.num_scales;
        let scales = [n - 2, n - 1]
            .iter()
            .map(|&i| {
                let c = bb.channels_per_scale[i];
                let same_layer = (0..bb.layers_per_scale[i])
                    .map(|l| HeadProjector::new(store, rng, &format!("mlim.scale{}.proj{}", i, l), c, cfg))
                    .collect();
                let adjacent = cfg.adjacent.then(|| {
                    let proj = HeadProjector::new(store, rng, &format!("mlim.scale{}.proj_adj", i), c, cfg);
                    let rescale = Conv::new(
                        store,
                        rng,
                        &format!("mlim.scale{}.rescale", i),
                        ParamGroup::MlimRescale,
                        bb.channels_per_scale[i - 1],
                        c,
                        3,
                        Conv2dOptions::strided(2, 1),
                    );
                    (proj, rescale)
                });
                let stacked = cfg.heads * cfg.pairings(bb.layers_per_scale[i]);
                let refiner = Refiner::new(store, rng, &format!("mlim.scale{}.refiner", i), stacked, cfg);
                ScaleInteraction {
                    scale: i,
                    same_layer,
                    adjacent,
                    refiner,
                }
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            scales,
        }
    }

    /// Rescaled shallower query map for the adjacent pairing of `si`.
    pub fn adjacent_query(&self, s: &mut Session, si: &ScaleInteraction, pyr_q: &FeaturePyramid) -> Result<Option<Var>> {
        let Some((_, rescale)) = &si.adjacent else {
            return Ok(None);
        };
        let target = s.g.shape(pyr_q.last_layer(si.scale)).to_vec();
        let (w, b) = (s.param(rescale.weight), s.param(rescale.bias));
        let x = pyr_q.last_layer(si.scale - 1);
        adjacent_rescale(&mut s.g, x, w, b, (target[2], target[3])).map(Some)
    }

    /// Feature map as fed to a projector.
    fn prepare(&self, s: &mut Session, f: Var) -> Result<Var> {
        if self.cfg.standardize {
            Ok(s.g.channel_norm(f, FEATURE_NORM_EPS)?)
        } else {
            Ok(f)
        }
    }

    /// Raw stacked correlations `[n·pairings, H, W, H, W]` for one shot.
    pub fn correlation_stack(
        &self,
        s: &mut Session,
        si: &ScaleInteraction,
        pyr_s: &FeaturePyramid,
        pyr_q: &FeaturePyramid,
        adjacent_q: Option<Var>,
    ) -> Result<Var> {
        let i = si.scale;
        let mut parts = Vec::with_capacity(si.same_layer.len() + 1);
        for (l, proj) in si.same_layer.iter().enumerate() {
            let w = proj.bind(s);
            let fs = self.prepare(s, pyr_s.scales[i].layers[l])?;
            let fq = self.prepare(s, pyr_q.scales[i].layers[l])?;
            parts.push(multihead_correlation(&mut s.g, fs, fq, &w)?);
        }
        if let (Some((proj, _)), Some(aq)) = (&si.adjacent, adjacent_q) {
            let w = proj.bind(s);
            let fs = self.prepare(s, pyr_s.last_layer(i))?;
            let fq = self.prepare(s, aq)?;
            parts.push(multihead_correlation(&mut s.g, fs, fq, &w)?);
        }
        Ok(s.g.concat(&parts, 0)?)
    }

    /// Evidence at the penultimate and last scales. `masks` are the support
    /// masks at input resolution, one per pyramid in `pyr_s`.
    pub fn mlim_forward(
        &self,
        s: &mut Session,
        pyr_s: &[FeaturePyramid],
        pyr_q: &FeaturePyramid,
        masks: &[Tensor],
    ) -> Result<MlimOutput> {
        if pyr_s.is_empty() || pyr_s.len() != masks.len() {
            return Err(Error::validation(format!(
                "{} support pyramids with {} masks",
                pyr_s.len(),
                masks.len()
            )));
        }
        let mut evidence = Vec::with_capacity(2);
        for si in &self.scales {
            let aq = self.adjacent_query(s, si, pyr_q)?;
            let mut refined = Vec::with_capacity(pyr_s.len());
            for ps in pyr_s {
                let stack = self.correlation_stack(s, si, ps, pyr_q, aq)?;
                refined.push(si.refiner.forward(s, stack)?);
            }
            let side = s.g.shape(pyr_q.last_layer(si.scale))[2];
            let small_masks = masks
                .iter()
                .map(|m| downsample_mask(m, side))
                .collect::<Result<Vec<_>>>()?;
            let merged = kshot_merge(&mut s.g, &refined)?;
            evidence.push(aggregate_merged(&mut s.g, &merged, &small_masks, self.cfg.aggregate)?);
        }
        Ok(MlimOutput {
            penultimate: evidence[0],
            last: evidence[1],
        })
    }
}
