//! COCO-style average precision and recall.
//!
//! Follows the reference evaluator: per class and per image, detections are
//! greedily matched in score order to the unmatched ground truth of highest
//! IoU (at least the threshold), preferring in-bucket ground truths. Ground
//! truths outside the size bucket are ignored, as are unmatched detections
//! outside it. Precision is made monotone and sampled at 101 recall points.

use dsa_scenes::boxes::iou_unchecked;
use dsa_scenes::{GroundTruth, Scene};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Detector;
use crate::nms::Detection;

pub const MAX_DETS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    All,
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 4] = [SizeBucket::All, SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn contains(self, area: f64) -> bool {
        match self {
            SizeBucket::All => true,
            SizeBucket::Small => area < SMALL_AREA,
            SizeBucket::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            SizeBucket::Large => area >= MEDIUM_AREA,
        }
    }
}

/// Metrics in reporting order. Empty buckets report −1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_s: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar: f64,
    pub ar_s: f64,
    pub ar_m: f64,
    pub ar_l: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 10] = ["AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L", "AR", "AR_S", "AR_M", "AR_L"];

    pub fn values(&self) -> [f64; 10] {
        [
            self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m, self.ap_l, self.ar, self.ar_s, self.ar_m, self.ar_l,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        Self {
            ap: v[0],
            ap50: v[1],
            ap75: v[2],
            ap_s: v[3],
            ap_m: v[4],
            ap_l: v[5],
            ar: v[6],
            ar_s: v[7],
            ar_m: v[8],
            ar_l: v[9],
        }
    }
}

/// One evaluated (class, bucket, threshold) cell: `None` when no ground truth counts.
fn evaluate_cell(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    class: usize,
    bucket: SizeBucket,
    thr: f64,
) -> Option<(f64, f64)> {
    // (score, is_tp) over all images, in image order then score order.
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (dets, gts) in images {
        let mut gt: Vec<(&GroundTruth, bool)> = gts
            .iter()
            .filter(|g| g.class == class)
            .map(|g| (g, !bucket.contains(g.bbox.area())))
            .collect();
        // In-bucket ground truths first; stable to keep annotation order.
        gt.sort_by_key(|&(_, ignored)| ignored);
        n_gt += gt.iter().filter(|(_, ig)| !ig).count();
        let mut d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        d.sort_by(|a, b| b.final_score.total_cmp(&a.final_score));
        d.truncate(MAX_DETS);
        let mut taken = vec![false; gt.len()];
        for det in d {
            let mut best = thr.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (gi, (g, ignored)) in gt.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                if let Some(mi) = m {
                    if !gt[mi].1 && *ignored {
                        break;
                    }
                }
                let v = iou_unchecked(&det.bbox, &g.bbox);
                if v < best {
                    continue;
                }
                best = v;
                m = Some(gi);
            }
            match m {
                Some(mi) => {
                    taken[mi] = true;
                    if !gt[mi].1 {
                        scored.push((det.final_score, true));
                    }
                }
                None => {
                    if bucket.contains(det.bbox.area()) {
                        scored.push((det.final_score, false));
                    }
                }
            }
        }
    }
    if n_gt == 0 {
        return None;
    }
    // Stable sort keeps image order among equal scores.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut recall = Vec::with_capacity(scored.len());
    let mut precision = Vec::with_capacity(scored.len());
    for &(_, is_tp) in &scored {
        if is_tp {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < rt);
        if idx < precision.len() {
            ap += precision[idx];
        }
    }
    Some((ap / 101.0, recall.last().copied().unwrap_or(0.0)))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        -1.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Evaluates `(detections, ground truths)` pairs over `classes` classes.
pub fn coco_eval(images: &[(Vec<Detection>, Vec<GroundTruth>)], classes: usize) -> Result<Metrics> {
    if images.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let thresholds = iou_thresholds();
    let mut out = [0.0; 10];
    for (bi, bucket) in SizeBucket::ALL.into_iter().enumerate() {
        let mut ap_all = Vec::new();
        let mut ap50 = Vec::new();
        let mut ap75 = Vec::new();
        let mut ar = Vec::new();
        for (ti, &thr) in thresholds.iter().enumerate() {
            for class in 0..classes {
                if let Some((p, r)) = evaluate_cell(images, class, bucket, thr) {
                    ap_all.push(p);
                    ar.push(r);
                    if ti == 0 {
                        ap50.push(p);
                    }
                    if ti == 5 {
                        ap75.push(p);
                    }
                }
            }
        }
        match bucket {
            SizeBucket::All => {
                out[0] = mean(&ap_all);
                out[1] = mean(&ap50);
                out[2] = mean(&ap75);
                out[6] = mean(&ar);
            }
            _ => {
                out[2 + bi] = mean(&ap_all);
                out[6 + bi] = mean(&ar);
            }
        }
    }
    Ok(Metrics::from_values(out))
}

/// Runs the detector over `scenes` and evaluates.
pub fn evaluate_ap(model: &Detector, scenes: &[Scene]) -> Result<Metrics> {
    Ok(evaluate_with_detections(model, scenes)?.0)
}

pub fn evaluate_with_detections(model: &Detector, scenes: &[Scene]) -> Result<(Metrics, Vec<Vec<Detection>>)> {
    if scenes.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut pairs = Vec::with_capacity(scenes.len());
    for s in scenes {
        pairs.push((model.detect(&s.image)?, s.gts.clone()));
    }
    let metrics = coco_eval(&pairs, model.config().classes)?;
    Ok((metrics, pairs.into_iter().map(|(d, _)| d).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsa_scenes::BBox;

    fn gt(x: f64, class: usize) -> GroundTruth {
        GroundTruth {
            bbox: BBox::new(x, 0.0, x + 20.0, 20.0),
            class,
        }
    }

    fn det_of(g: &GroundTruth, score: f64) -> Detection {
        Detection {
            bbox: g.bbox,
            class: g.class,
            cls_score: score,
            conf_score: None,
            final_score: score,
        }
    }

    #[test]
    fn thresholds_cover_half_to_ninety_five() {
        let t = iou_thresholds();
        assert_eq!(t[0], 0.5);
        assert!((t[9] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn perfect_detector_scores_one() {
        let gts = vec![gt(0.0, 0), gt(30.0, 1)];
        let dets = gts.iter().map(|g| det_of(g, 1.0)).collect();
        let m = coco_eval(&[(dets, gts)], 2).unwrap();
        assert_eq!(m.ap, 1.0);
        assert_eq!(m.ap50, 1.0);
        assert_eq!(m.ar, 1.0);
        assert_eq!(m.ap_s, 1.0);
        assert_eq!(m.ap_m, -1.0);
        assert_eq!(m.ap_l, -1.0);
    }

    #[test]
    fn no_detections_score_zero() {
        let m = coco_eval(&[(vec![], vec![gt(0.0, 0)])], 1).unwrap();
        assert_eq!(m.ap, 0.0);
        assert_eq!(m.ar, 0.0);
    }

    #[test]
    fn bucket_boundaries() {
        assert!(SizeBucket::Small.contains(1023.0));
        assert!(SizeBucket::Medium.contains(1024.0));
        assert!(SizeBucket::Large.contains(9216.0));
        assert!(!SizeBucket::Medium.contains(9216.0));
    }

    #[test]
    fn empty_rejected() {
        assert!(coco_eval(&[], 1).is_err());
    }
}
