//! Desk-scale one-stage detector with optional decoupled self attention
//! between the feature pyramid and the task heads.

pub mod anchors;
pub mod assign;
pub mod boxcode;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nms;
pub mod params;
pub mod train;

pub use anchors::{generate_anchors, AnchorSet};
pub use assign::{assign_targets, Assignment};
pub use config::{DetectorConfig, GammaMode, LevelSet, LossConfig, NmsConfig, Placement, ScoreMode, TrainConfig};
pub use error::{Error, Result};
pub use eval::{coco_eval, evaluate_ap, Metrics};
pub use loss::{build_targets, ImageTargets, LossBreakdown};
pub use model::{apply_dsa, build_toy_fpn, head_forward, Detector, FeaturePyramid, HeadParams, HeadTask};
pub use nms::{final_score, nms, Detection};
pub use params::ParamStore;
pub use train::{train, LossTrace, Trainer};
