//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Every key has a
//! default, so an empty file is a complete configuration. Overrides given as
//! `key=value` are applied after the file, in order. A run report's
//! `report.json` is also accepted as a config file: its `config` object is
//! read back key by key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dsa_detect::config::{parse_stride_kernel, parse_variant, stride_kernel_name, variant_name};
use dsa_detect::{DetectorConfig, LossConfig, TrainConfig};
use dsa_scenes::SceneConfig;
use sha2::{Digest, Sha256};

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Model initialisation and shuffling.
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            n_train: 500,
            n_val: 100,
            scene: SceneConfig::default(),
            detector: DetectorConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: [&str; 41] = [
    "name",
    "seed",
    "data_seed",
    "n_train",
    "n_val",
    "image_size",
    "classes",
    "min_objects",
    "max_objects",
    "min_size",
    "max_size",
    "scene_max_iou",
    "noise",
    "channels",
    "anchors_per_location",
    "head_depth",
    "placement",
    "dsa_levels",
    "variant",
    "shared",
    "strided_levels",
    "stride_kernel",
    "gamma_mode",
    "with_confidence",
    "nms_iou",
    "score_mode",
    "score_floor",
    "max_detections",
    "focal_alpha",
    "focal_gamma",
    "smooth_l1_beta",
    "pos_iou",
    "neg_iou",
    "cls_weight",
    "box_weight",
    "conf_weight",
    "epochs",
    "lr",
    "batch_size",
    "momentum",
    "weight_decay",
];

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn keyword<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// Sets one key. `Ok(false)` means the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        let v = value.trim();
        let d = &mut self.detector;
        let s = &mut self.scene;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "name" => {
                if v.is_empty() || v.contains([',', '/', '\\']) {
                    return Err("name must be non-empty without `,`, `/` or `\\`".into());
                }
                self.name = v.to_string();
            }
            "seed" => {
                self.seed = num(v)?;
                t.seed = self.seed;
            }
            "data_seed" => s.seed = num(v)?,
            "n_train" => self.n_train = num(v)?,
            "n_val" => self.n_val = num(v)?,
            "image_size" => {
                d.image_size = num(v)?;
                s.image_size = d.image_size;
            }
            "classes" => {
                d.classes = num(v)?;
                s.classes = d.classes;
            }
            "min_objects" => s.min_objects = num(v)?,
            "max_objects" => s.max_objects = num(v)?,
            "min_size" => s.min_size = num(v)?,
            "max_size" => s.max_size = num(v)?,
            "scene_max_iou" => s.max_iou = num(v)?,
            "noise" => s.noise = num(v)?,
            "channels" => d.channels = num(v)?,
            "anchors_per_location" => d.anchors_per_location = num(v)?,
            "head_depth" => d.head_depth = num(v)?,
            "placement" => d.placement = keyword(v)?,
            "dsa_levels" => d.dsa_levels = keyword(v)?,
            "variant" => d.variant = parse_variant(v).map_err(|e| e.to_string())?,
            "shared" => d.shared = boolean(v)?,
            "strided_levels" => d.strided_levels = keyword(v)?,
            "stride_kernel" => d.stride_kernel = parse_stride_kernel(v).map_err(|e| e.to_string())?,
            "gamma_mode" => d.gamma_mode = keyword(v)?,
            "with_confidence" => d.with_confidence = boolean(v)?,
            "nms_iou" => d.nms.iou_threshold = num(v)?,
            "score_mode" => d.nms.score_mode = keyword(v)?,
            "score_floor" => d.nms.score_floor = num(v)?,
            "max_detections" => d.nms.max_detections = num(v)?,
            "focal_alpha" => l.focal_alpha = num(v)?,
            "focal_gamma" => l.focal_gamma = num(v)?,
            "smooth_l1_beta" => l.smooth_l1_beta = num(v)?,
            "pos_iou" => l.pos_iou = num(v)?,
            "neg_iou" => l.neg_iou = num(v)?,
            "cls_weight" => l.cls_weight = num(v)?,
            "box_weight" => l.box_weight = num(v)?,
            "conf_weight" => l.conf_weight = num(v)?,
            "epochs" => t.epochs = num(v)?,
            "lr" => t.lr = num(v)?,
            "batch_size" => t.batch_size = num(v)?,
            "momentum" => t.momentum = num(v)?,
            "weight_decay" => t.weight_decay = num(v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (d, s, l, t) = (&self.detector, &self.scene, &self.loss, &self.train);
        let values = [
            self.name.clone(),
            self.seed.to_string(),
            s.seed.to_string(),
            self.n_train.to_string(),
            self.n_val.to_string(),
            d.image_size.to_string(),
            d.classes.to_string(),
            s.min_objects.to_string(),
            s.max_objects.to_string(),
            s.min_size.to_string(),
            s.max_size.to_string(),
            s.max_iou.to_string(),
            s.noise.to_string(),
            d.channels.to_string(),
            d.anchors_per_location.to_string(),
            d.head_depth.to_string(),
            d.placement.to_string(),
            d.dsa_levels.to_string(),
            variant_name(d.variant).to_string(),
            d.shared.to_string(),
            d.strided_levels.to_string(),
            stride_kernel_name(d.stride_kernel).to_string(),
            d.gamma_mode.to_string(),
            d.with_confidence.to_string(),
            d.nms.iou_threshold.to_string(),
            d.nms.score_mode.to_string(),
            d.nms.score_floor.to_string(),
            d.nms.max_detections.to_string(),
            l.focal_alpha.to_string(),
            l.focal_gamma.to_string(),
            l.smooth_l1_beta.to_string(),
            l.pos_iou.to_string(),
            l.neg_iou.to_string(),
            l.cls_weight.to_string(),
            l.box_weight.to_string(),
            l.conf_weight.to_string(),
            t.epochs.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
        ];
        KEYS.into_iter().zip(values).collect()
    }

    pub fn echo(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// `key = value` lines for every key except `name`.
    pub fn canonical_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| *k != "name")
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| Error::Config(format!("invalid config: {e}"));
        self.scene.validate().map_err(|e| cfg(e.to_string()))?;
        self.detector.validate().map_err(|e| cfg(e.to_string()))?;
        self.loss.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        if self.n_train == 0 || self.n_val == 0 {
            return Err(cfg(format!("n_train ({}) and n_val ({}) must be at least 1", self.n_train, self.n_val)));
        }
        if self.train.epochs == 0 {
            return Err(cfg("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Parsed configuration plus any warnings raised along the way.
#[derive(Debug, Clone)]
pub struct Parsed {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

fn split_override(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("override `{s}`: expected key=value")))
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str, at: &str) -> Result<()> {
    match cfg.set(key, value) {
        Ok(true) => Ok(()),
        Ok(false) => Err(Error::Config(format!("{at}: unknown key `{key}`"))),
        Err(e) => Err(Error::Config(format!("{at}: bad value `{value}` for `{key}`: {e}"))),
    }
}

/// Parses config text; `origin` names the source in diagnostics.
pub fn parse_text(text: &str, origin: &str, overrides: &[String]) -> Result<Parsed> {
    let mut config = RunConfig::default();
    let mut warnings = Vec::new();
    if text.trim_start().starts_with('{') {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        let map = value
            .get("config")
            .and_then(|c| c.as_object())
            .ok_or_else(|| Error::Config(format!("{origin}: JSON config needs a `config` object")))?;
        for (k, v) in map {
            let v = v
                .as_str()
                .ok_or_else(|| Error::Config(format!("{origin}: value for `{k}` must be a string")))?;
            apply(&mut config, k, v, origin)?;
        }
    } else {
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("{at}: expected `key = value`, got `{line}`")))?;
            apply(&mut config, k, v, &at)?;
            if let Some(prev) = seen.insert(k.to_string(), i + 1) {
                warnings.push(format!("{at}: duplicate key `{k}` (first set on line {prev}); last value wins"));
            }
        }
    }
    for o in overrides {
        let (k, v) = split_override(o)?;
        apply(&mut config, k, v, &format!("override `{o}`"))?;
    }
    config.validate()?;
    Ok(Parsed { config, warnings })
}

/// Reads `path` (or starts from defaults when `None`) and applies `overrides`.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<Parsed> {
    match path {
        None => parse_text("", "defaults", overrides),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io(p, e))?;
            parse_text(&text, &p.display().to_string(), overrides)
        }
    }
}
