//! Trainable convolutional feature pyramid.
//!
//! A stride-4 patchifying stem feeds `num_scales` blocks of 3×3 conv + ReLU.
//! Every block after the first opens with a stride-2 convolution, so scale
//! `i` has side `input / (4 · 2^i)`. Each layer's activation is one
//! pyramid entry `F[i][l]`.

use mcinet_autodiff::{Conv2dOptions, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneConfig, STEM_STRIDE};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::params::{ParamGroup, ParamStore, Session};

/// All layers of one scale; they share spatial size and channel count.
#[derive(Clone, Debug)]
pub struct ScaleBlock {
    pub layers: Vec<Var>,
}

impl ScaleBlock {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("L_i ≥ 1")
    }
}

/// Multi-scale, multi-layer features of one image, shallow scale first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub scales: Vec<ScaleBlock>,
}

impl FeaturePyramid {
    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn last_layer(&self, scale: usize) -> Var {
        self.scales[scale].last()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: Conv,
    blocks: Vec<Vec<Conv>>,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Backbone;
        let c0 = cfg.channels_per_scale[0];
        let stem = Conv::new(
            store,
            rng,
            "backbone.stem",
            g,
            3,
            c0,
            STEM_STRIDE,
            Conv2dOptions::strided(STEM_STRIDE, 0),
        );
        let mut blocks = Vec::with_capacity(cfg.num_scales);
        let mut cin = c0;
        for (i, (&layers, &cout)) in cfg
            .layers_per_scale
            .iter()
            .zip(&cfg.channels_per_scale)
            .enumerate()
        {
            let mut convs = Vec::with_capacity(layers);
            for l in 0..layers {
                let stride = if i > 0 && l == 0 { 2 } else { 1 };
                convs.push(Conv::new(
                    store,
                    rng,
                    &format!("backbone.scale{}.layer{}", i, l),
                    g,
                    cin,
                    cout,
                    3,
                    Conv2dOptions::strided(stride, 1),
                ));
                cin = cout;
            }
            blocks.push(convs);
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
        })
    }

    pub fn extract_pyramid(&self, s: &mut Session, img: Var) -> Result<FeaturePyramid> {
        let shape = s.g.shape(img).to_vec();
        let n = self.cfg.input_size;
        if shape != [1, 3, n, n] {
            return Err(Error::shape(format!(
                "backbone expects image [1, 3, {n}, {n}], got {:?}",
                shape
            )));
        }
        let h = self.stem.forward(s, img)?;
        let mut h = s.g.relu(h);
        let mut scales = Vec::with_capacity(self.blocks.len());
        for (i, convs) in self.blocks.iter().enumerate() {
            let mut layers = Vec::with_capacity(convs.len());
            for conv in convs {
                let z = conv.forward(s, h)?;
                h = s.g.relu(z);
                layers.push(h);
            }
            let side = self.cfg.scale_size(i);
            let expect = [1, self.cfg.channels_per_scale[i], side, side];
            if s.g.shape(h) != expect {
                return Err(Error::shape(format!(
                    "scale {} produced {:?}, expected {:?}",
                    i,
                    s.g.shape(h),
                    expect
                )));
            }
            scales.push(ScaleBlock { layers });
        }
        Ok(FeaturePyramid { scales })
    }
}

/// Builds a backbone into a fresh store seeded with `seed`.
pub fn build_backbone(cfg: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(cfg, &mut store, &mut rng)?;
    if cfg.freeze_backbone {
        store.freeze_group(ParamGroup::Backbone);
    }
    Ok((bb, store))
}

/// `[1, 3, H, W]` graph input from an `[3, H, W]` image.
pub fn image_input(s: &mut Session, img: &Tensor) -> Result<Var> {
    let sh = img.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::shape(format!("image must be [3, H, W], got {:?}", sh)));
    }
    let t = img.reshape(vec![1, sh[0], sh[1], sh[2]])?;
    Ok(s.g.constant(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    fn image(n: usize, f: impl Fn(usize) -> f64) -> Tensor {
        Tensor::from_fn(vec![3, n, n], f)
    }

    #[test]
    fn default_config_gives_three_halving_scales() {
        let (bb, store) = build_backbone(&BackboneConfig::default(), 7).unwrap();
        let mut s = Session::new(&store);
        let img = image_input(&mut s, &image(64, |i| (i % 17) as f64 / 16.0)).unwrap();
        let pyr = bb.extract_pyramid(&mut s, img).unwrap();
        assert_eq!(pyr.num_scales(), 3);
        let sides: Vec<usize> = pyr.scales.iter().map(|b| s.g.shape(b.last())[2]).collect();
        assert_eq!(sides, vec![16, 8, 4]);
        for (i, block) in pyr.scales.iter().enumerate() {
            assert_eq!(block.layers.len(), 2);
            for &l in &block.layers {
                assert_eq!(s.g.shape(l)[1], [32, 64, 128][i]);
                assert!(s.g.value(l).all_finite());
            }
        }
    }

    #[test]
    fn rejects_two_scales_and_wrong_image_size() {
        let cfg = BackboneConfig {
            num_scales: 2,
            layers_per_scale: vec![2, 2],
            channels_per_scale: vec![32, 64],
            ..Default::default()
        };
        assert!(matches!(build_backbone(&cfg, 0), Err(Error::Config(_))));
        let (bb, store) = build_backbone(&BackboneConfig::default(), 0).unwrap();
        let mut s = Session::new(&store);
        let img = image_input(&mut s, &image(32, |_| 0.5)).unwrap();
        assert!(matches!(bb.extract_pyramid(&mut s, img), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_checksum_is_reproducible() {
        let digest = |seed| {
            let (_, store) = build_backbone(&BackboneConfig::default(), seed).unwrap();
            hex::encode(Sha256::digest(store.to_bytes()))
        };
        assert_eq!(digest(7), digest(7));
        assert_ne!(digest(7), digest(8));
    }

    #[test]
    fn zero_image_yields_finite_nonzero_features() {
        let (bb, store) = build_backbone(&BackboneConfig::default(), 3).unwrap();
        let mut s = Session::new(&store);
        let img = image_input(&mut s, &Tensor::zeros(vec![3, 64, 64])).unwrap();
        let pyr = bb.extract_pyramid(&mut s, img).unwrap();
        for b in &pyr.scales {
            let v = s.g.value(b.last());
            assert!(v.all_finite());
            assert!(v.max_abs() > 0.0);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let (bb, store) = build_backbone(&BackboneConfig::default(), 5).unwrap();
        let img = image(64, |i| ((i * 31) % 255) as f64 / 255.0);
        let run = || {
            let mut s = Session::new(&store);
            let x = image_input(&mut s, &img).unwrap();
            let pyr = bb.extract_pyramid(&mut s, x).unwrap();
            pyr.scales
                .iter()
                .flat_map(|b| b.layers.iter().map(|&l| s.g.value(l).clone()).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
