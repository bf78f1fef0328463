//! Run configuration: every architectural constant, ablation switch and
//! optimizer setting, loadable from a TOML document with a published JSON
//! schema. Unknown keys are rejected.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Spatial stride of the backbone stem; scale 1 sits at `input / STEM_STRIDE`.
pub const STEM_STRIDE: usize = 4;
/// Channel count of the low-level query branch.
pub const LOW_LEVEL_CHANNELS: usize = 128;
/// Score dimension of the fusion cross-attention.
pub const DEFAULT_ATTENTION_DIM: usize = 64;
/// Number of correlation heads.
pub const DEFAULT_HEADS: usize = 4;
/// Atrous rates of the pyramid pooling block before size clamping.
pub const DEFAULT_ASPP_RATES: [usize; 4] = [1, 6, 12, 18];
/// Two-scale loss weight for 1-shot training.
pub const LAMBDA_ONE_SHOT: f64 = 0.6;
/// Two-scale loss weight for 5-shot training.
pub const LAMBDA_FIVE_SHOT: f64 = 1.0;
/// Variance floor of the per-position feature standardization.
pub const FEATURE_NORM_EPS: f64 = 1e-5;
/// Central finite-difference step used by the gradient checker.
pub const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Square input resolution in pixels.
    pub input_size: usize,
    pub num_scales: usize,
    pub layers_per_scale: Vec<usize>,
    pub channels_per_scale: Vec<usize>,
    /// Treat backbone weights as constants (no gradient, no update).
    pub freeze_backbone: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            num_scales: 3,
            layers_per_scale: vec![2, 2, 2],
            channels_per_scale: vec![32, 64, 128],
            freeze_backbone: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 3 {
            return Err(Error::config("num_scales ≥ 3 required"));
        }
        if self.layers_per_scale.len() != self.num_scales
            || self.channels_per_scale.len() != self.num_scales
        {
            return Err(Error::config(
                "layers_per_scale and channels_per_scale need one entry per scale",
            ));
        }
        if self.layers_per_scale.contains(&0) {
            return Err(Error::config("layers_per_scale entries must be ≥ 1"));
        }
        if self.channels_per_scale.contains(&0)
            || self.channels_per_scale.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::config("channels_per_scale must be strictly increasing"));
        }
        let deepest = STEM_STRIDE << (self.num_scales - 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(deepest) {
            return Err(Error::config(format!(
                "input_size {} must be a positive multiple of {}",
                self.input_size, deepest
            )));
        }
        Ok(())
    }

    /// Spatial side length of scale `i` (0-based).
    pub fn scale_size(&self, i: usize) -> usize {
        self.input_size / (STEM_STRIDE << i)
    }
}

/// Where the fusion module takes its key/value features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LowLevelSource {
    /// Separate two-conv branch on the downsampled query image.
    Branch,
    /// Last layer of the first backbone scale.
    BackboneBlock1,
    /// Last layer of the second backbone scale.
    BackboneBlock2,
    /// Fusion disabled.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct McfmConfig {
    pub enabled: bool,
    /// Attention score dimension.
    pub d: usize,
    pub low_level_source: LowLevelSource,
}

impl Default for McfmConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            d: DEFAULT_ATTENTION_DIM,
            low_level_source: LowLevelSource::Branch,
        }
    }
}

impl McfmConfig {
    pub fn active(&self) -> bool {
        self.enabled && self.low_level_source != LowLevelSource::None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    /// Softmax over support positions, then a convex combination of mask values.
    Softmax,
    /// Mean of correlation times mask over support positions (unnormalized).
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MlimConfig {
    /// Head count `n`.
    pub heads: usize,
    /// Per-head projection width; `None` means `channels / heads`.
    pub head_dim: Option<usize>,
    /// Output width of each refiner alternation (support-dim conv then
    /// query-dim conv).
    pub refiner_widths: Vec<usize>,
    pub refiner_kernel: usize,
    /// Include the adjacent-scale correlation.
    pub adjacent: bool,
    pub aggregate: Aggregate,
    /// Standardize each position's channel vector before projection.
    pub standardize: bool,
}

impl Default for MlimConfig {
    fn default() -> Self {
        Self {
            heads: DEFAULT_HEADS,
            head_dim: None,
            refiner_widths: vec![16, 16],
            refiner_kernel: 3,
            adjacent: true,
            aggregate: Aggregate::Softmax,
            standardize: true,
        }
    }
}

impl MlimConfig {
    pub fn head_dim_for(&self, channels: usize) -> usize {
        self.head_dim.unwrap_or((channels / self.heads).max(1))
    }

    pub fn pairings(&self, layers: usize) -> usize {
        layers + usize::from(self.adjacent)
    }

    pub fn evidence_channels(&self) -> usize {
        *self.refiner_widths.last().expect("validated non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SkipSupport {
    /// Support features multiplied by the downsampled support mask.
    Foreground,
    /// Raw support features.
    WholeImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct MsmpConfig {
    /// Channel width of every decoder conv block.
    pub width: usize,
    pub aspp_rates: Vec<usize>,
    /// Fuse small-branch features and logits back into the large branch.
    pub feedback: bool,
    pub skip_support: SkipSupport,
}

impl Default for MsmpConfig {
    fn default() -> Self {
        Self {
            width: 64,
            aspp_rates: DEFAULT_ASPP_RATES.to_vec(),
            feedback: true,
            skip_support: SkipSupport::Foreground,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub mcfm: McfmConfig,
    pub mlim: MlimConfig,
    pub msmp: MsmpConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.mcfm.d == 0 {
            return Err(Error::config("mcfm.d must be ≥ 1"));
        }
        if self.mlim.heads == 0 {
            return Err(Error::config("mlim.heads must be ≥ 1"));
        }
        if self.mlim.head_dim == Some(0) {
            return Err(Error::config("mlim.head_dim must be ≥ 1"));
        }
        if self.mlim.refiner_widths.is_empty() || self.mlim.refiner_widths.contains(&0) {
            return Err(Error::config("mlim.refiner_widths must be non-empty and ≥ 1"));
        }
        if self.mlim.refiner_kernel.is_multiple_of(2) {
            return Err(Error::config("mlim.refiner_kernel must be odd"));
        }
        if self.msmp.width == 0 {
            return Err(Error::config("msmp.width must be ≥ 1"));
        }
        if self.msmp.aspp_rates.is_empty() || self.msmp.aspp_rates.contains(&0) {
            return Err(Error::config("msmp.aspp_rates must be non-empty and ≥ 1"));
        }
        Ok(())
    }

    /// Tiny configuration for finite-difference checks (16×16 input,
    /// at most 8 channels in every learned feature map except the fixed
    /// 128-channel low-level branch).
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig {
                input_size: 16,
                num_scales: 3,
                layers_per_scale: vec![2, 2, 2],
                channels_per_scale: vec![4, 6, 8],
                freeze_backbone: false,
            },
            mcfm: McfmConfig {
                enabled: true,
                d: 4,
                low_level_source: LowLevelSource::Branch,
            },
            mlim: MlimConfig {
                heads: 2,
                head_dim: Some(2),
                refiner_widths: vec![4, 4],
                refiner_kernel: 3,
                adjacent: true,
                aggregate: Aggregate::Softmax,
                standardize: true,
            },
            msmp: MsmpConfig {
                width: 6,
                aspp_rates: DEFAULT_ASPP_RATES.to_vec(),
                feedback: true,
                skip_support: SkipSupport::Foreground,
            },
        }
    }

    /// The three module switches of the ablation grid.
    pub fn with_modules(mut self, mcfm: bool, mlim: bool, msmp: bool) -> Self {
        self.mcfm.enabled = mcfm;
        self.mlim.adjacent = mlim;
        self.msmp.feedback = msmp;
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum OptimMethod {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub method: OptimMethod,
    pub lr: f64,
    /// Heavy-ball momentum for SGD; first-moment decay for Adam.
    pub momentum: f64,
    /// Second-moment decay (Adam only).
    pub beta2: f64,
    /// Rescale the batch gradient to at most this global L2 norm; `None`
    /// disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            method: OptimMethod::Sgd,
            lr: 0.001,
            momentum: 0.9,
            beta2: 0.999,
            clip_norm: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps; each consumes `batch_size` episodes.
    pub steps: usize,
    pub batch_size: usize,
    /// Support shots per episode.
    pub shots: usize,
    /// Small-scale loss weight; `None` picks 0.6 for 1-shot and 1.0 otherwise.
    pub lambda: Option<f64>,
    /// Held-out fold (0..4); training uses the other folds' classes.
    pub fold: usize,
    pub seed: u64,
    /// Evaluate on held-out classes every this many steps (0 = never).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 250,
            batch_size: 8,
            shots: 1,
            lambda: None,
            fold: 0,
            seed: 0,
            eval_every: 0,
            eval_episodes: 200,
        }
    }
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(if self.shots == 1 {
            LAMBDA_ONE_SHOT
        } else {
            LAMBDA_FIVE_SHOT
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub num_folds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: crate::data::NUM_CLASSES,
            num_folds: crate::data::NUM_FOLDS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::config("optim.lr must be > 0 and momentum in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::config("optim.beta2 must be in [0, 1)"));
        }
        if self.optim.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("optim.clip_norm must be > 0"));
        }
        if self.train.batch_size == 0 || self.train.shots == 0 {
            return Err(Error::config("train.batch_size and train.shots must be ≥ 1"));
        }
        if self.train.lambda.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::config("λ must be ≥ 0"));
        }
        if self.data.num_classes != crate::data::NUM_CLASSES
            || self.data.num_folds != crate::data::NUM_FOLDS
        {
            return Err(Error::config(format!(
                "the synthetic benchmark has {} classes in {} folds",
                crate::data::NUM_CLASSES,
                crate::data::NUM_FOLDS
            )));
        }
        if self.train.fold >= self.data.num_folds {
            return Err(Error::config(format!("fold {} out of range", self.train.fold)));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// JSON schema of the configuration document.
    pub fn schema_json() -> String {
        let schema = schemars::schema_for!(RunConfig);
        serde_json::to_string_pretty(&schema).expect("schema serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn two_scales_rejected_with_named_invariant() {
        let mut cfg = BackboneConfig {
            num_scales: 2,
            layers_per_scale: vec![2, 2],
            channels_per_scale: vec![32, 64],
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("num_scales ≥ 3 required"), "{}", err);
        cfg.num_scales = 3;
        cfg.layers_per_scale = vec![2, 2, 2];
        cfg.channels_per_scale = vec![32, 32, 64];
        assert!(cfg.validate().unwrap_err().to_string().contains("strictly increasing"));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml_str("[train]\nstepz = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let ok = RunConfig::from_toml_str("[train]\nsteps = 3\n").unwrap();
        assert_eq!(ok.train.steps, 3);
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lambda = Some(0.25);
        cfg.model.mcfm.low_level_source = LowLevelSource::BackboneBlock2;
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn lambda_defaults_follow_shot_count() {
        let mut t = TrainConfig::default();
        assert_eq!(t.lambda(), 0.6);
        t.shots = 5;
        assert_eq!(t.lambda(), 1.0);
        t.lambda = Some(0.0);
        assert_eq!(t.lambda(), 0.0);
    }

    #[test]
    fn published_schema_is_current() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/config.schema.json");
        let published = std::fs::read_to_string(path).unwrap_or_default();
        if std::env::var_os("MCINET_WRITE_SCHEMA").is_some() {
            std::fs::write(path, RunConfig::schema_json()).unwrap();
            return;
        }
        assert_eq!(published, RunConfig::schema_json(), "run with MCINET_WRITE_SCHEMA=1 to refresh");
    }
}
