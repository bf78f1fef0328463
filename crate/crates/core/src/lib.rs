//! Few-shot segmentation network with multi-content fusion, multi-layer
//! correlation interaction and multi-scale mask prediction, plus a
//! synthetic episodic dataset and a training/evaluation harness.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod mcfm;
pub mod mlim;
pub mod model;
pub mod msmp;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod predict;
pub mod train;

pub use config::RunConfig;
pub use data::{generate_episode, sample_eval_suite, Episode, FoldSpec};
pub use error::{Error, Result};
pub use model::{MaskLogits, MciNet};
pub use objective::{EvalReport, LossBreakdown};
pub use params::{ParamGroup, ParamStore, Session};
