use dsa_scenes::boxes::iou_unchecked;
use dsa_scenes::BBox;

use crate::config::ScoreMode;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub cls_score: f64,
    pub conf_score: Option<f64>,
    pub final_score: f64,
}

/// Ranking score: the class probability alone or times the confidence.
pub fn final_score(cls: f64, conf: Option<f64>, mode: ScoreMode) -> f64 {
    match (mode, conf) {
        (ScoreMode::ClsTimesConf, Some(c)) => cls * c,
        _ => cls,
    }
}

/// Greedy per-class NMS. Candidates are visited by descending `final_score`
/// (earlier index first on ties); a candidate is dropped when its IoU with an
/// already kept box of the same class exceeds `iou_threshold`. The result is in
/// visiting order.
pub fn nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].final_score.total_cmp(&dets[a].final_score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.class == d.class && iou_unchecked(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Re-scores detections under another mode, keeping boxes and raw scores.
pub fn rescore(dets: &[Detection], mode: ScoreMode) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            final_score: final_score(d.cls_score, d.conf_score, mode),
            ..*d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x: f64, class: usize, cls: f64, conf: f64, mode: ScoreMode) -> Detection {
        Detection {
            bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
            class,
            cls_score: cls,
            conf_score: Some(conf),
            final_score: final_score(cls, Some(conf), mode),
        }
    }

    #[test]
    fn overlapping_same_class_suppressed() {
        let d = vec![det(0.0, 0, 0.6, 1.0, ScoreMode::ClsOnly), det(1.0, 0, 0.9, 1.0, ScoreMode::ClsOnly)];
        let kept = nms(d, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].cls_score, 0.9);
    }

    #[test]
    fn other_class_survives() {
        let d = vec![det(0.0, 0, 0.6, 1.0, ScoreMode::ClsOnly), det(1.0, 1, 0.9, 1.0, ScoreMode::ClsOnly)];
        assert_eq!(nms(d, 0.5).len(), 2);
    }

    #[test]
    fn ties_keep_lower_index() {
        let d = vec![det(0.0, 0, 0.5, 1.0, ScoreMode::ClsOnly), det(1.0, 0, 0.5, 1.0, ScoreMode::ClsOnly)];
        let kept = nms(d, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].bbox.x1, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU of these two boxes is exactly 1/3.
        let a = det(0.0, 0, 0.9, 1.0, ScoreMode::ClsOnly);
        let b = det(5.0, 0, 0.8, 1.0, ScoreMode::ClsOnly);
        assert_eq!(iou_unchecked(&a.bbox, &b.bbox), 1.0 / 3.0);
        assert_eq!(nms(vec![a, b], 1.0 / 3.0).len(), 2);
        assert_eq!(nms(vec![a, b], 0.3).len(), 1);
    }
}
