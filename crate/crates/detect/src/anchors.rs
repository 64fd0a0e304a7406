use dsa_scenes::BBox;

/// Spatial size of a pyramid level for a given image size (stride `2^level`).
pub fn level_dims(image_h: usize, image_w: usize, level: u8) -> (usize, usize) {
    let stride = 1usize << level;
    (image_h.div_ceil(stride).max(1), image_w.div_ceil(stride).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_box(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelAnchors {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    /// Index of this level's first anchor in the flattened set.
    pub offset: usize,
    /// Ordered by position `(y, x)` then scale index.
    pub anchors: Vec<Anchor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub per_location: usize,
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.levels.iter().flat_map(|l| l.anchors.iter())
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.iter().map(Anchor::to_box).collect()
    }

    pub fn level(&self, level: u8) -> Option<&LevelAnchors> {
        self.levels.iter().find(|l| l.level == level)
    }
}

/// `a` square anchors per position with side `stride·4·2^{i/a}`, centered on
/// the stride grid.
pub fn generate_anchors(shapes: &[(u8, usize, usize)], a: usize) -> AnchorSet {
    let mut levels = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for &(level, h, w) in shapes {
        let stride = (1u64 << level) as f64;
        let mut anchors = Vec::with_capacity(a * h * w);
        for y in 0..h {
            for x in 0..w {
                for i in 0..a {
                    let side = stride * 4.0 * 2f64.powf(i as f64 / a as f64);
                    anchors.push(Anchor {
                        cx: (x as f64 + 0.5) * stride,
                        cy: (y as f64 + 0.5) * stride,
                        w: side,
                        h: side,
                    });
                }
            }
        }
        let n = anchors.len();
        levels.push(LevelAnchors {
            level,
            height: h,
            width: w,
            offset,
            anchors,
        });
        offset += n;
    }
    AnchorSet {
        per_location: a,
        levels,
    }
}
