use dsa_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 0.0;
pub const BORDER: f64 = 1.0;
pub const FILL_ON: f64 = 0.7;
pub const FILL_OFF: f64 = 0.3;
/// Placement attempts per scene before giving up on the remaining objects.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pattern {
    Solid,
    HorizontalStripes,
    VerticalStripes,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Solid,
        Pattern::HorizontalStripes,
        Pattern::VerticalStripes,
        Pattern::Checker,
    ];

    pub fn for_class(class: usize) -> Pattern {
        Self::ALL[class % Self::ALL.len()]
    }

    /// Fill value at interior offset `(u, v)`; stripes and checker cells are 2 px wide.
    pub fn value(self, u: usize, v: usize) -> f64 {
        let on = match self {
            Pattern::Solid => true,
            Pattern::HorizontalStripes => (v / 2) % 2 == 0,
            Pattern::VerticalStripes => (u / 2) % 2 == 0,
            Pattern::Checker => (u / 2 + v / 2) % 2 == 0,
        };
        if on {
            FILL_ON
        } else {
            FILL_OFF
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub classes: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_iou: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            classes: 4,
            min_size: 8,
            max_size: 40,
            max_iou: 0.3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!("object range {}..={} is empty or zero", self.min_objects, self.max_objects));
        }
        if self.classes == 0 || self.classes > Pattern::ALL.len() {
            return fail(format!("classes must be in 1..={}, got {}", Pattern::ALL.len(), self.classes));
        }
        if self.min_size < 3 || self.min_size > self.max_size {
            return fail(format!("size range {}..={} is invalid (minimum 3)", self.min_size, self.max_size));
        }
        if self.max_size > self.image_size {
            return fail(format!("max size {} exceeds image size {}", self.max_size, self.image_size));
        }
        if !(0.0..=1.0).contains(&self.max_iou) {
            return fail(format!("max_iou {} outside [0, 1]", self.max_iou));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub requested: usize,
    pub placed: usize,
    pub attempts: usize,
    /// Fewer objects than requested because the attempt budget ran out.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: usize,
    pub image: FeatureMap,
    pub gts: Vec<GroundTruth>,
    pub meta: SceneMeta,
}

/// Generator for scene `index`: the config seed selects the key and the index
/// selects an independent stream.
pub fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Paints one object (border plus class fill) into every channel.
pub fn paint_object(image: &mut FeatureMap, x0: usize, y0: usize, w: usize, h: usize, pattern: Pattern) {
    for c in 0..image.channels() {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let edge = y == y0 || x == x0 || y == y0 + h - 1 || x == x0 + w - 1;
                let v = if edge { BORDER } else { pattern.value(x - x0 - 1, y - y0 - 1) };
                image.set(c, y, x, v);
            }
        }
    }
}

pub fn generate_scene(cfg: &SceneConfig, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = scene_rng(cfg.seed, index);
    let s = cfg.image_size;
    let requested = rng.random_range(cfg.min_objects..=cfg.max_objects);

    let mut placed: Vec<(usize, usize, usize, usize, usize)> = Vec::new();
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut attempts = 0;
    while gts.len() < requested && attempts < MAX_ATTEMPTS {
        attempts += 1;
        let class = rng.random_range(0..cfg.classes);
        let w = rng.random_range(cfg.min_size..=cfg.max_size);
        let h = rng.random_range(cfg.min_size..=cfg.max_size);
        let x0 = rng.random_range(0..=s - w);
        let y0 = rng.random_range(0..=s - h);
        let bbox = BBox::new(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
        if gts.iter().any(|g| iou_unchecked(&g.bbox, &bbox) > cfg.max_iou) {
            continue;
        }
        placed.push((x0, y0, w, h, class));
        gts.push(GroundTruth { bbox, class });
    }

    let mut image = FeatureMap::filled(3, s, s, BACKGROUND);
    for &(x0, y0, w, h, class) in &placed {
        paint_object(&mut image, x0, y0, w, h, Pattern::for_class(class));
    }
    if cfg.noise > 0.0 {
        for v in image.data_mut() {
            *v += rng.random_range(-cfg.noise..=cfg.noise);
        }
    }
    let meta = SceneMeta {
        requested,
        placed: gts.len(),
        attempts,
        truncated: gts.len() < requested,
    };
    Ok(Scene {
        index,
        image,
        gts,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_object_matches_template() {
        let cfg = SceneConfig {
            min_objects: 1,
            max_objects: 1,
            noise: 0.0,
            ..SceneConfig::default()
        };
        for index in 0..20 {
            let scene = generate_scene(&cfg, index).unwrap();
            assert_eq!(scene.gts.len(), 1);
            let g = scene.gts[0];
            let pattern = Pattern::for_class(g.class);
            let (x0, y0) = (g.bbox.x1 as usize, g.bbox.y1 as usize);
            let (x1, y1) = (g.bbox.x2 as usize, g.bbox.y2 as usize);
            for c in 0..3 {
                for y in 0..64 {
                    for x in 0..64 {
                        let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
                        let edge = inside && (x == x0 || y == y0 || x == x1 - 1 || y == y1 - 1);
                        let want = if !inside {
                            BACKGROUND
                        } else if edge {
                            BORDER
                        } else {
                            pattern.value(x - x0 - 1, y - y0 - 1)
                        };
                        assert_eq!(scene.image.get(c, y, x), want);
                    }
                }
            }
        }
    }

    #[test]
    fn same_index_is_bitwise_stable() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.gts, b.gts);
        let c = generate_scene(&cfg, 8).unwrap();
        assert!(!a.image.bitwise_eq(&c.image));
    }

    #[test]
    fn impossible_overlap_truncates() {
        let cfg = SceneConfig {
            min_objects: 4,
            max_objects: 4,
            min_size: 40,
            max_size: 40,
            max_iou: 0.0,
            image_size: 48,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, 0).unwrap();
        assert_eq!(s.gts.len(), 1);
        assert!(s.meta.truncated);
        assert_eq!(s.meta.attempts, MAX_ATTEMPTS);
        assert_eq!(s.meta.requested, 4);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SceneConfig { min_objects: 0, ..SceneConfig::default() },
            SceneConfig { min_objects: 5, ..SceneConfig::default() },
            SceneConfig { classes: 5, ..SceneConfig::default() },
            SceneConfig { max_size: 65, ..SceneConfig::default() },
            SceneConfig { min_size: 2, ..SceneConfig::default() },
            SceneConfig { noise: -1.0, ..SceneConfig::default() },
        ];
        for cfg in bad {
            assert!(generate_scene(&cfg, 0).is_err(), "{cfg:?}");
        }
    }
}
