//! Training targets and the detection loss.

use dsa_core::{BinaryTarget, CompGraph, NodeId};
use dsa_scenes::GroundTruth;
use serde::Serialize;

use crate::anchors::AnchorSet;
use crate::assign::{assign_targets, Assignment};
use crate::boxcode::encode;
use crate::config::LossConfig;
use crate::error::Result;
use crate::model::LevelNodes;

/// Targets for one level, laid out like the head outputs: cls index
/// `((a·K + k)·H + y)·W + x`, loc `((a·4 + j)·H + y)·W + x`, conf `(a·H + y)·W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelTargets {
    pub level: u8,
    pub cls: Vec<BinaryTarget>,
    pub boxes: Vec<Option<f64>>,
    pub conf: Vec<BinaryTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: usize,
}

impl ImageTargets {
    /// Loss normalizer: positive count, at least 1.
    pub fn norm(&self) -> f64 {
        self.num_pos.max(1) as f64
    }
}

pub fn build_targets(anchors: &AnchorSet, gts: &[GroundTruth], classes: usize, cfg: &LossConfig) -> Result<ImageTargets> {
    let gt_boxes: Vec<_> = gts.iter().map(|g| g.bbox).collect();
    let assign = assign_targets(&anchors.boxes(), &gt_boxes, cfg.pos_iou, cfg.neg_iou)?;
    let a_per = anchors.per_location;
    let mut num_pos = 0;
    let mut levels = Vec::with_capacity(anchors.levels.len());
    for la in &anchors.levels {
        let hw = la.height * la.width;
        let mut cls = vec![BinaryTarget::Negative; a_per * classes * hw];
        let mut boxes = vec![None; a_per * 4 * hw];
        let mut conf = vec![BinaryTarget::Negative; a_per * hw];
        for pos in 0..hw {
            for a in 0..a_per {
                let local = pos * a_per + a;
                match assign[la.offset + local] {
                    Assignment::Negative => {}
                    Assignment::Ignore => {
                        for k in 0..classes {
                            cls[(a * classes + k) * hw + pos] = BinaryTarget::Ignore;
                        }
                        conf[a * hw + pos] = BinaryTarget::Ignore;
                    }
                    Assignment::Positive(gi) => {
                        num_pos += 1;
                        cls[(a * classes + gts[gi].class) * hw + pos] = BinaryTarget::Positive;
                        let d = encode(&la.anchors[local], &gts[gi].bbox);
                        for (j, v) in d.into_iter().enumerate() {
                            boxes[(a * 4 + j) * hw + pos] = Some(v);
                        }
                        conf[a * hw + pos] = BinaryTarget::Positive;
                    }
                }
            }
        }
        levels.push(LevelTargets {
            level: la.level,
            cls,
            boxes,
            conf,
        });
    }
    Ok(ImageTargets { levels, num_pos })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub focal: f64,
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub confidence: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.focal, self.box_loss, self.confidence, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.focal += b.focal;
            m.box_loss += b.box_loss;
            m.confidence += b.confidence;
            m.total += b.total;
        }
        LossBreakdown {
            focal: m.focal / n,
            box_loss: m.box_loss / n,
            confidence: m.confidence / n,
            total: m.total / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossNodes {
    pub total: NodeId,
    pub focal: NodeId,
    pub box_loss: NodeId,
    pub confidence: Option<NodeId>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &CompGraph) -> LossBreakdown {
        LossBreakdown {
            focal: g.scalar(self.focal),
            box_loss: g.scalar(self.box_loss),
            confidence: self.confidence.map_or(0.0, |c| g.scalar(c)),
            total: g.scalar(self.total),
        }
    }
}

fn sum_nodes(g: &mut CompGraph, nodes: &[NodeId]) -> Result<NodeId> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = g.add(acc, n)?;
    }
    Ok(acc)
}

/// Adds the loss to a forward graph:
/// `total = w_cls·focal + w_box·smooth_l1 + w_conf·bce`, each normalized by
/// the positive count.
pub fn loss_nodes(g: &mut CompGraph, levels: &[LevelNodes], t: &ImageTargets, cfg: &LossConfig) -> Result<LossNodes> {
    let norm = t.norm();
    let mut focal = Vec::new();
    let mut boxes = Vec::new();
    let mut conf = Vec::new();
    for (l, lt) in levels.iter().zip(&t.levels) {
        focal.push(g.focal_loss(l.cls, lt.cls.clone(), cfg.focal_alpha, cfg.focal_gamma, norm)?);
        boxes.push(g.smooth_l1(l.loc, lt.boxes.clone(), cfg.smooth_l1_beta, norm)?);
        if let Some(c) = l.conf {
            conf.push(g.bce_with_logits(c, lt.conf.clone(), norm)?);
        }
    }
    let focal = sum_nodes(g, &focal)?;
    let box_loss = sum_nodes(g, &boxes)?;
    let confidence = if conf.is_empty() { None } else { Some(sum_nodes(g, &conf)?) };
    let wf = g.scale(focal, cfg.cls_weight);
    let wb = g.scale(box_loss, cfg.box_weight);
    let mut total = g.add(wf, wb)?;
    if let Some(c) = confidence {
        let wc = g.scale(c, cfg.conf_weight);
        total = g.add(total, wc)?;
    }
    Ok(LossNodes {
        total,
        focal,
        box_loss,
        confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::generate_anchors;
    use dsa_scenes::BBox;

    #[test]
    fn positive_anchor_targets() {
        let anchors = generate_anchors(&[(3, 2, 2)], 1);
        // The (0, 0) anchor is centered at (4, 4) with side 32.
        let gt = GroundTruth {
            bbox: BBox::from_center(4.0, 4.0, 32.0, 32.0),
            class: 2,
        };
        let t = build_targets(&anchors, &[gt], 3, &LossConfig::default()).unwrap();
        // Neighbours at one-stride offsets overlap 0.6; the diagonal one 0.39.
        assert_eq!(t.num_pos, 3);
        assert_eq!(t.levels[0].cls[2 * 4 + 3], BinaryTarget::Negative);
        let l = &t.levels[0];
        assert_eq!(l.cls[2 * 4], BinaryTarget::Positive);
        assert_eq!(l.cls[0], BinaryTarget::Negative);
        assert_eq!(l.boxes[0], Some(0.0));
        assert_eq!(l.conf[0], BinaryTarget::Positive);
    }

    #[test]
    fn no_gts_means_all_negative() {
        let anchors = generate_anchors(&[(3, 2, 2), (4, 1, 1)], 2);
        let t = build_targets(&anchors, &[], 4, &LossConfig::default()).unwrap();
        assert_eq!(t.num_pos, 0);
        assert_eq!(t.norm(), 1.0);
        assert!(t.levels.iter().all(|l| l.boxes.iter().all(Option::is_none)));
    }
}
