//! Anchor-relative box parameterization `(dx, dy, dw, dh)`.

use dsa_scenes::BBox;

use crate::anchors::Anchor;

/// Upper clamp for `dw` and `dh` before exponentiation.
pub fn max_log_scale() -> f64 {
    (1000.0f64 / 16.0).ln()
}

pub fn encode(anchor: &Anchor, gt: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    [
        (gx - anchor.cx) / anchor.w,
        (gy - anchor.cy) / anchor.h,
        (gt.width() / anchor.w).ln(),
        (gt.height() / anchor.h).ln(),
    ]
}

/// Decoded box before clipping.
pub fn decode_unclipped(anchor: &Anchor, d: &[f64; 4]) -> BBox {
    let clamp = max_log_scale();
    let cx = anchor.cx + d[0] * anchor.w;
    let cy = anchor.cy + d[1] * anchor.h;
    let w = anchor.w * d[2].min(clamp).exp();
    let h = anchor.h * d[3].min(clamp).exp();
    BBox::from_center(cx, cy, w, h)
}

pub fn decode(anchor: &Anchor, d: &[f64; 4], image_w: f64, image_h: f64) -> BBox {
    decode_unclipped(anchor, d).clip(image_w, image_h)
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Anchor = Anchor {
        cx: 20.0,
        cy: 24.0,
        w: 32.0,
        h: 32.0,
    };

    #[test]
    fn zero_deltas_give_anchor() {
        assert_eq!(decode_unclipped(&A, &[0.0; 4]), A.to_box());
    }

    #[test]
    fn ln2_doubles_width() {
        let b = decode_unclipped(&A, &[0.0, 0.0, std::f64::consts::LN_2, 0.0]);
        assert!((b.width() - 64.0).abs() < 1e-12);
        assert_eq!(b.height(), 32.0);
    }

    #[test]
    fn large_scale_is_clamped() {
        let b = decode_unclipped(&A, &[0.0, 0.0, 50.0, 50.0]);
        assert!((b.width() - 32.0 * 1000.0 / 16.0).abs() < 1e-9);
    }

    #[test]
    fn clipped_to_image() {
        let b = decode(&A, &[0.0; 4], 64.0, 64.0);
        assert_eq!(b, BBox::new(4.0, 8.0, 36.0, 40.0));
        let c = decode(&A, &[-1.0, -1.0, 0.0, 0.0], 64.0, 64.0);
        assert_eq!((c.x1, c.y1), (0.0, 0.0));
    }
}
