use std::fmt;
use std::str::FromStr;

use dsa_core::attention::{AttentionVariant, StrideKernel};

use crate::error::{Error, Result};

/// Pyramid levels produced by the toy FPN (stride `2^level`).
pub const PYRAMID_LEVELS: [u8; 5] = [3, 4, 5, 6, 7];

/// Sorted set of pyramid levels, written `4-7`, `3,5` or `none`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LevelSet(Vec<u8>);

impl LevelSet {
    pub fn new(levels: impl IntoIterator<Item = u8>) -> Result<Self> {
        let mut v: Vec<u8> = levels.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        if let Some(bad) = v.iter().find(|l| !PYRAMID_LEVELS.contains(l)) {
            return Err(Error::config(format!("level {bad} is not a pyramid level (3..=7)")));
        }
        Ok(Self(v))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn range(lo: u8, hi: u8) -> Result<Self> {
        Self::new(lo..=hi)
    }

    pub fn contains(&self, level: u8) -> bool {
        self.0.contains(&level)
    }

    pub fn levels(&self) -> &[u8] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromStr for LevelSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::empty());
        }
        let bad = || Error::config(format!("cannot parse level set `{s}` (use e.g. `4-7`, `3,5` or `none`)"));
        let mut levels = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if let Some((a, b)) = part.split_once('-') {
                let a: u8 = a.trim().parse().map_err(|_| bad())?;
                let b: u8 = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                levels.extend(a..=b);
            } else {
                levels.push(part.parse().map_err(|_| bad())?);
            }
        }
        Self::new(levels)
    }
}

impl fmt::Display for LevelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0.as_slice() {
            [] => write!(f, "none"),
            [one] => write!(f, "{one}"),
            v if v.windows(2).all(|w| w[1] == w[0] + 1) => write!(f, "{}-{}", v[0], v[v.len() - 1]),
            v => {
                let parts: Vec<String> = v.iter().map(u8::to_string).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

macro_rules! keyword_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text,)+
                })
            }
        }
    };
}

/// Where the DSA module sits relative to the heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Placement {
    /// Between the pyramid and the heads; both heads read DSA output.
    BeforeHead,
    /// On each task head's trunk output, before its prediction layer.
    AfterHead,
    None,
}

keyword_enum!(Placement {
    BeforeHead => "before" | "before-head",
    AfterHead => "after" | "after-head",
    None => "none",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GammaMode {
    /// Starts at 0 and is trained.
    Learned,
    /// Held at 1.
    Fixed,
}

keyword_enum!(GammaMode {
    Learned => "learned",
    Fixed => "fixed",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMode {
    ClsOnly,
    /// Class score times objectness.
    ClsTimesConf,
}

keyword_enum!(ScoreMode {
    ClsOnly => "cls" | "cls-only",
    ClsTimesConf => "cls-x-conf" | "product",
});

pub fn parse_variant(s: &str) -> Result<AttentionVariant> {
    match s.trim() {
        "self-attention" | "self" => Ok(AttentionVariant::SelfAttention),
        "cbam" => Ok(AttentionVariant::Cbam),
        other => Err(Error::config(format!(
            "unknown attention variant `{other}` (expected self-attention or cbam)"
        ))),
    }
}

pub fn variant_name(v: AttentionVariant) -> &'static str {
    match v {
        AttentionVariant::SelfAttention => "self-attention",
        AttentionVariant::Cbam => "cbam",
    }
}

pub fn parse_stride_kernel(s: &str) -> Result<StrideKernel> {
    match s.trim() {
        "1x1" | "1" => Ok(StrideKernel::K1),
        "3x3" | "3" => Ok(StrideKernel::K3),
        other => Err(Error::config(format!("unknown stride kernel `{other}` (expected 1x1 or 3x3)"))),
    }
}

pub fn stride_kernel_name(k: StrideKernel) -> &'static str {
    match k {
        StrideKernel::K1 => "1x1",
        StrideKernel::K3 => "3x3",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub score_mode: ScoreMode,
    pub score_floor: f64,
    pub max_detections: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_mode: ScoreMode::ClsOnly,
            score_floor: 0.05,
            max_detections: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
    pub anchors_per_location: usize,
    pub head_depth: usize,
    pub placement: Placement,
    pub dsa_levels: LevelSet,
    pub variant: AttentionVariant,
    pub shared: bool,
    /// DSA levels that use the stride-2 projection variant.
    pub strided_levels: LevelSet,
    pub stride_kernel: StrideKernel,
    pub gamma_mode: GammaMode,
    pub with_confidence: bool,
    pub nms: NmsConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 16,
            classes: 4,
            anchors_per_location: 3,
            head_depth: 4,
            placement: Placement::None,
            dsa_levels: LevelSet::range(4, 7).expect("valid levels"),
            variant: AttentionVariant::SelfAttention,
            shared: false,
            strided_levels: LevelSet::new([3]).expect("valid levels"),
            stride_kernel: StrideKernel::K1,
            gamma_mode: GammaMode::Learned,
            with_confidence: false,
            nms: NmsConfig::default(),
        }
    }
}

impl DetectorConfig {
    /// The published model: decoupled self attention on levels 4–7 before the heads.
    pub fn dsa() -> Self {
        Self {
            placement: Placement::BeforeHead,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return fail(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        for (name, v) in [
            ("channels", self.channels),
            ("classes", self.classes),
            ("anchors_per_location", self.anchors_per_location),
            ("head_depth", self.head_depth),
            ("max_detections", self.nms.max_detections),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.nms.iou_threshold) {
            return fail(format!("nms iou threshold {} outside [0, 1]", self.nms.iou_threshold));
        }
        if !(0.0..=1.0).contains(&self.nms.score_floor) {
            return fail(format!("score floor {} outside [0, 1]", self.nms.score_floor));
        }
        if self.nms.score_mode == ScoreMode::ClsTimesConf && !self.with_confidence {
            return fail("score mode cls-x-conf needs with_confidence = true".into());
        }
        Ok(())
    }

    /// Levels that actually carry a DSA module.
    pub fn active_dsa_levels(&self) -> &[u8] {
        match self.placement {
            Placement::None => &[],
            _ => self.dsa_levels.levels(),
        }
    }

    pub fn is_strided(&self, level: u8) -> bool {
        self.variant == AttentionVariant::SelfAttention && self.strided_levels.contains(level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub cls_weight: f64,
    pub box_weight: f64,
    pub conf_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0,
            pos_iou: 0.5,
            neg_iou: 0.4,
            cls_weight: 1.0,
            box_weight: 1.0,
            conf_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= neg_iou ({}) <= pos_iou ({}) <= 1",
                self.neg_iou, self.pos_iou
            )));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::config("smooth_l1_beta must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 0.01,
            batch_size: 1,
            momentum: 0.0,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }
}
