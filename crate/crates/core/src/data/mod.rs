//! Synthetic episodic shape dataset with a class-disjoint fold protocol.

pub mod export;
pub mod shapes;

use mcinet_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use shapes::{random_angle, ShapeInstance};

pub const NUM_CLASSES: usize = 16;
pub const NUM_FOLDS: usize = 4;
/// Accepted foreground fraction of every generated mask.
pub const FOREGROUND_RANGE: (f64, f64) = (0.02, 0.6);
pub const DEFAULT_EVAL_EPISODES: usize = 200;
const MAX_ATTEMPTS: usize = 2000;

/// Class partition into folds; fold `f` holds classes `f·c/n .. (f+1)·c/n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub num_classes: usize,
    pub num_folds: usize,
}

impl Default for FoldSpec {
    fn default() -> Self {
        Self {
            num_classes: NUM_CLASSES,
            num_folds: NUM_FOLDS,
        }
    }
}

impl FoldSpec {
    fn per_fold(&self) -> usize {
        self.num_classes / self.num_folds
    }

    pub fn check_fold(&self, fold: usize) -> Result<()> {
        if fold >= self.num_folds {
            return Err(Error::config(format!("fold {} out of range 0..{}", fold, self.num_folds)));
        }
        Ok(())
    }

    pub fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.num_classes {
            return Err(Error::validation(format!("class {} out of range 0..{}", class_id, self.num_classes)));
        }
        Ok(())
    }

    pub fn fold_of(&self, class_id: usize) -> usize {
        class_id / self.per_fold()
    }

    /// Held-out classes of `fold`.
    pub fn test_classes(&self, fold: usize) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.fold_of(c) == fold).collect()
    }

    /// Base classes used for training when `fold` is held out.
    pub fn train_classes(&self, fold: usize) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.fold_of(c) != fold).collect()
    }
}

/// One image with its binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, n, n]`, values `k/255`.
    pub image: Tensor,
    /// `[n, n]` with values in `{0, 1}`.
    pub mask: Tensor,
    pub target: ShapeInstance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub supports: Vec<Sample>,
    pub query: Sample,
    pub class_id: usize,
    pub fold_id: usize,
    pub seed: u64,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn size(&self) -> usize {
        self.query.mask.shape()[0]
    }

    pub fn support_images(&self) -> Vec<Tensor> {
        self.supports.iter().map(|s| s.image.clone()).collect()
    }

    pub fn support_masks(&self) -> Vec<Tensor> {
        self.supports.iter().map(|s| s.mask.clone()).collect()
    }

    /// Feeds every pixel bit pattern and label into `hasher`.
    pub fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update((self.class_id as u64).to_le_bytes());
        hasher.update((self.fold_id as u64).to_le_bytes());
        hasher.update(self.seed.to_le_bytes());
        for s in self.supports.iter().chain(std::iter::once(&self.query)) {
            for v in s.image.data().iter().chain(s.mask.data()) {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }
}

/// SHA-256 over the full content of a list of episodes.
pub fn suite_checksum(episodes: &[Episode]) -> String {
    let mut h = Sha256::new();
    for e in episodes {
        e.hash_into(&mut h);
    }
    hex::encode(h.finalize())
}

/// SplitMix64-style mixing of several words into one seed.
pub fn mix_seed(words: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &w in words {
        x ^= w.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

type Rgb = [f64; 3];

fn random_color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: Rgb, b: Rgb) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn random_pose(rng: &mut ChaCha8Rng, family: usize) -> ShapeInstance {
    let radius = rng.random_range(0.16..0.36);
    let margin = 0.6 * radius;
    ShapeInstance {
        family,
        cx: rng.random_range(margin..1.0 - margin),
        cy: rng.random_range(margin..1.0 - margin),
        radius,
        angle: random_angle(rng.random()),
    }
}

fn render_sample(rng: &mut ChaCha8Rng, class_id: usize, target_color: Rgb, n: usize) -> Result<Sample> {
    let (lo, hi) = FOREGROUND_RANGE;
    let (target, coverage) = (0..MAX_ATTEMPTS)
        .map(|_| {
            let s = random_pose(rng, class_id);
            let cov = s.rasterize(n);
            (s, cov)
        })
        .find(|(_, cov)| {
            let frac = cov.iter().filter(|&&b| b).count() as f64 / (n * n) as f64;
            (lo..=hi).contains(&frac)
        })
        .ok_or_else(|| Error::validation(format!("could not place class {} on a {}×{} canvas", class_id, n, n)))?;

    // Textured background: two sinusoids plus uniform noise around a base colour.
    let base = random_color(rng).map(|c| 0.2 + 0.6 * c);
    let (fx, fy, phase) = (rng.random_range(1.0..6.0), rng.random_range(1.0..6.0), rng.random_range(0.0..6.3));
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64);
            let wave = 0.12 * (fx * u * 6.3 + phase).sin() + 0.08 * (fy * v * 6.3).cos();
            for (c, &b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.06..0.06);
                img[c * n * n + y * n + x] = b + wave + noise;
            }
        }
    }

    // Distractors of other classes are painted first so the target occludes them.
    let distractors = rng.random_range(1..=2);
    for _ in 0..distractors {
        let mut family = rng.random_range(0..NUM_CLASSES - 1);
        if family >= class_id {
            family += 1;
        }
        let d = random_pose(rng, family);
        let color = loop {
            let c = random_color(rng);
            if color_distance(c, target_color) > 0.6 {
                break c;
            }
        };
        paint(&mut img, n, &d.rasterize(n), color, rng);
    }
    let jitter = target_color.map(|c| (c + rng.random_range(-0.04..0.04)).clamp(0.0, 1.0));
    paint(&mut img, n, &coverage, jitter, rng);

    let image = Tensor::new(vec![3, n, n], img.into_iter().map(quantize).collect())?;
    let mask = Tensor::new(vec![n, n], coverage.iter().map(|&b| f64::from(u8::from(b))).collect())?;
    Ok(Sample { image, mask, target })
}

fn paint(img: &mut [f64], n: usize, coverage: &[bool], color: Rgb, rng: &mut ChaCha8Rng) {
    for (p, _) in coverage.iter().enumerate().filter(|(_, &b)| b) {
        for (c, &v) in color.iter().enumerate() {
            img[c * n * n + p] = v + rng.random_range(-0.03..0.03);
        }
    }
}

/// Deterministic episode of `class_id` with `k` supports on an `size × size` canvas.
pub fn generate_episode(class_id: usize, k: usize, seed: u64, size: usize) -> Result<Episode> {
    let folds = FoldSpec::default();
    folds.check_class(class_id)?;
    if k == 0 {
        return Err(Error::validation("an episode needs at least one support"));
    }
    if size < 8 {
        return Err(Error::validation(format!("canvas size {} is below 8", size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[class_id as u64, k as u64, seed, size as u64]));
    let target_color = random_color(&mut rng);
    let supports = (0..k)
        .map(|_| render_sample(&mut rng, class_id, target_color, size))
        .collect::<Result<Vec<_>>>()?;
    let query = render_sample(&mut rng, class_id, target_color, size)?;
    Ok(Episode {
        supports,
        query,
        class_id,
        fold_id: folds.fold_of(class_id),
        seed,
    })
}

/// `n_episodes` episodes over the held-out classes of `fold`.
pub fn sample_eval_suite(fold: usize, n_episodes: usize, k: usize, seed: u64, size: usize) -> Result<Vec<Episode>> {
    let folds = FoldSpec::default();
    folds.check_fold(fold)?;
    let classes = folds.test_classes(fold);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0xE7A1, fold as u64, k as u64, seed]));
    (0..n_episodes)
        .map(|_| {
            let c = classes[rng.random_range(0..classes.len())];
            generate_episode(c, k, rng.random(), size)
        })
        .collect()
}

/// Training episode `index` of optimisation step `step`, drawn from the
/// base classes of `fold`. Fully determined by its arguments, so a resumed
/// run sees the same episodes.
pub fn training_episode(fold: usize, k: usize, seed: u64, step: usize, index: usize, size: usize) -> Result<Episode> {
    let folds = FoldSpec::default();
    folds.check_fold(fold)?;
    let classes = folds.train_classes(fold);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[0x7EA1, fold as u64, seed, step as u64, index as u64]));
    let c = classes[rng.random_range(0..classes.len())];
    generate_episode(c, k, rng.random(), size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_episode(3, 2, 11, 32).unwrap();
        let b = generate_episode(3, 2, 11, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_episode(3, 2, 12, 32).unwrap());
    }

    #[test]
    fn five_shot_has_five_supports() {
        let e = generate_episode(9, 5, 0, 32).unwrap();
        assert_eq!(e.shots(), 5);
        assert_eq!(e.fold_id, 2);
    }

    #[test]
    fn invalid_class_rejected() {
        assert!(generate_episode(NUM_CLASSES, 1, 0, 32).is_err());
        assert!(generate_episode(0, 0, 0, 32).is_err());
    }

    #[test]
    fn masks_are_binary_and_bounded() {
        for c in 0..NUM_CLASSES {
            let e = generate_episode(c, 2, 5, 16).unwrap();
            for s in e.supports.iter().chain(std::iter::once(&e.query)) {
                assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
                let frac = s.mask.sum() / 256.0;
                assert!((0.02..=0.6).contains(&frac), "class {} fraction {}", c, frac);
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn folds_partition_classes() {
        let f = FoldSpec::default();
        let mut all: Vec<usize> = (0..NUM_FOLDS).flat_map(|k| f.test_classes(k)).collect();
        all.sort();
        assert_eq!(all, (0..NUM_CLASSES).collect::<Vec<_>>());
        for k in 0..NUM_FOLDS {
            let test = f.test_classes(k);
            assert!(f.train_classes(k).iter().all(|c| !test.contains(c)));
        }
        assert!(f.check_fold(4).is_err());
    }

    #[test]
    fn suite_classes_and_seeds() {
        let a = sample_eval_suite(1, 12, 1, 3, 16).unwrap();
        assert!(a.iter().all(|e| (4..8).contains(&e.class_id)));
        let b = sample_eval_suite(1, 12, 1, 4, 16).unwrap();
        assert_ne!(suite_checksum(&a), suite_checksum(&b));
        assert_eq!(suite_checksum(&a), suite_checksum(&sample_eval_suite(1, 12, 1, 3, 16).unwrap()));
    }
}
