use dsa_scenes::boxes::iou_unchecked;
use dsa_scenes::BBox;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    /// Matched to the ground truth with this index.
    Positive(usize),
    Negative,
    Ignore,
}

impl Assignment {
    pub fn gt(self) -> Option<usize> {
        match self {
            Assignment::Positive(g) => Some(g),
            _ => None,
        }
    }
}

/// Labels each anchor by its best overlap with the ground truths.
///
/// An anchor is positive at `max IoU >= pos_thr` (ties go to the lower gt
/// index), negative below `neg_thr`, ignored in between. Afterwards every gt
/// claims its single best anchor (ties go to the lower anchor index) unless an
/// earlier gt already claimed it.
pub fn assign_targets(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Result<Vec<Assignment>> {
    if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
        return Err(Error::config(format!(
            "need 0 <= neg_thr ({neg_thr}) <= pos_thr ({pos_thr}) <= 1"
        )));
    }
    if let Some(bad) = gts.iter().find(|g| !g.is_valid()) {
        return Err(Error::invalid(format!("degenerate ground-truth box {bad:?}")));
    }
    let mut out = vec![Assignment::Negative; anchors.len()];
    if gts.is_empty() {
        return Ok(out);
    }
    let mut best_anchor = vec![(0usize, 0.0f64); gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (gi, g) in gts.iter().enumerate() {
            let v = iou_unchecked(a, g);
            if v > best.1 {
                best = (gi, v);
            }
            if v > best_anchor[gi].1 {
                best_anchor[gi] = (ai, v);
            }
        }
        out[ai] = if best.1 >= pos_thr {
            Assignment::Positive(best.0)
        } else if best.1 < neg_thr {
            Assignment::Negative
        } else {
            Assignment::Ignore
        };
    }
    let mut claimed = vec![false; anchors.len()];
    for (gi, &(ai, v)) in best_anchor.iter().enumerate() {
        if v > 0.0 && !claimed[ai] {
            out[ai] = Assignment::Positive(gi);
            claimed[ai] = true;
        }
    }
    Ok(out)
}
