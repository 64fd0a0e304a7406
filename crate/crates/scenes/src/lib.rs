//! Synthetic detection scenes.
//!
//! Each scene is a 3-channel image holding 1–4 axis-aligned rectangles. Every
//! rectangle has the same 1-px border; the class is carried only by the
//! interior fill (solid, horizontal stripes, vertical stripes, checker).

pub mod boxes;
pub mod dataset;
pub mod error;
pub mod scene;

pub use boxes::{iou, BBox};
pub use dataset::{load_dataset, make_dataset, Dataset, Split};
pub use error::{Error, Result};
pub use scene::{generate_scene, GroundTruth, Pattern, Scene, SceneConfig, SceneMeta};
