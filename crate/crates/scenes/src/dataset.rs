//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.json     format tag, scene config, split index ranges
//! DIR/images/NNNN.fmap  one FMAP v1 file per scene (global index, zero-padded)
//! DIR/annotations.json  [{index, split, objects: [{box, class}], meta}]
//! ```
//!
//! Train scenes use indices `0..n_train`, validation `n_train..n_train+n_val`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{generate_scene, GroundTruth, Scene, SceneConfig, SceneMeta};

pub const FORMAT: &str = "dsa-scenes/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRange {
    pub start: usize,
    pub count: usize,
}

impl IndexRange {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: SceneConfig,
    pub train: IndexRange,
    pub val: IndexRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Annotation {
    index: usize,
    split: Split,
    objects: Vec<GroundTruth>,
    meta: SceneMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SceneConfig,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    /// Generates both splits in memory.
    pub fn generate(cfg: &SceneConfig, n_train: usize, n_val: usize) -> Result<Self> {
        check_counts(n_train, n_val)?;
        let train = (0..n_train).map(|i| generate_scene(cfg, i)).collect::<Result<_>>()?;
        let val = (n_train..n_train + n_val).map(|i| generate_scene(cfg, i)).collect::<Result<_>>()?;
        Ok(Self {
            config: cfg.clone(),
            train,
            val,
        })
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.to_string(),
            config: self.config.clone(),
            train: IndexRange {
                start: 0,
                count: self.train.len(),
            },
            val: IndexRange {
                start: self.train.len(),
                count: self.val.len(),
            },
        }
    }

    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn check_counts(n_train: usize, n_val: usize) -> Result<()> {
    if n_train == 0 || n_val == 0 {
        return Err(Error::Config(format!(
            "both splits need at least one scene (train {n_train}, val {n_val})"
        )));
    }
    Ok(())
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join("images").join(format!("{index:04}.fmap"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::io(path, e))
}

/// Generates and writes a dataset under `dir`, returning it.
pub fn make_dataset(cfg: &SceneConfig, n_train: usize, n_val: usize, dir: &Path) -> Result<Dataset> {
    let ds = Dataset::generate(cfg, n_train, n_val)?;
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut annotations = Vec::with_capacity(n_train + n_val);
    for (split, scenes) in [(Split::Train, &ds.train), (Split::Val, &ds.val)] {
        for s in scenes {
            let path = image_path(dir, s.index);
            dsa_core::fmap::write(&path, &s.image)?;
            annotations.push(Annotation {
                index: s.index,
                split,
                objects: s.gts.clone(),
                meta: s.meta,
            });
        }
    }
    write_json(&dir.join("annotations.json"), &annotations)?;
    write_json(&dir.join("manifest.json"), &ds.manifest())?;
    Ok(ds)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = read_json(&manifest_path)?;
    if manifest.format != FORMAT {
        return Err(Error::io(
            &manifest_path,
            format!("unsupported format `{}` (expected `{FORMAT}`)", manifest.format),
        ));
    }
    let annotations: Vec<Annotation> = read_json(&dir.join("annotations.json"))?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for a in annotations {
        let image = dsa_core::fmap::read(&image_path(dir, a.index))?;
        let scene = Scene {
            index: a.index,
            image,
            gts: a.objects,
            meta: a.meta,
        };
        match a.split {
            Split::Train => train.push(scene),
            Split::Val => val.push(scene),
        }
    }
    train.sort_by_key(|s| s.index);
    val.sort_by_key(|s| s.index);
    let want_train: Vec<usize> = manifest.train.indices().collect();
    let want_val: Vec<usize> = manifest.val.indices().collect();
    if train.iter().map(|s| s.index).ne(want_train) || val.iter().map(|s| s.index).ne(want_val) {
        return Err(Error::io(&manifest_path, "annotation indices do not match manifest ranges"));
    }
    Ok(Dataset {
        config: manifest.config,
        train,
        val,
    })
}
