//! Scalar loss terms. The graph's loss nodes and the detector both use these.

use crate::kernels::sigmoid;

pub const PROB_CLAMP: f64 = 1e-7;

/// Focal loss for one probability: `−α(1−p)^γ ln p` for positives and
/// `−(1−α)p^γ ln(1−p)` for negatives, with `p` clamped to `[1e-7, 1−1e-7]`.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_term`]`(sigmoid(z))` with respect to the logit `z`.
/// Zero inside the clamped region.
pub fn focal_term_grad_logit(z: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(z);
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    if positive {
        alpha * q.powf(gamma) * (gamma * p * p.ln() - q)
    } else {
        (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * q.ln())
    }
}

/// `0.5·x²/β` inside `|x| < β`, `|x| − 0.5·β` outside.
pub fn smooth_l1_term(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * x * x / beta
    } else {
        a - 0.5 * beta
    }
}

pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Numerically stable `BCE(sigmoid(z), t)`.
pub fn bce_logit_term(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_known_values() {
        assert!(focal_term(1.0, true, 0.25, 2.0) < 1e-20);
        let v = focal_term(0.5, true, 0.25, 2.0);
        assert!((v - 0.0625 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_reduces_to_half_cross_entropy() {
        for &p in &[0.1, 0.37, 0.5, 0.93] {
            let ce_pos = -f64::ln(p);
            let ce_neg = -f64::ln(1.0 - p);
            assert!((focal_term(p, true, 0.5, 0.0) - 0.5 * ce_pos).abs() < 1e-15);
            assert!((focal_term(p, false, 0.5, 0.0) - 0.5 * ce_neg).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_term(0.0, 1.0), 0.0);
        assert_eq!(smooth_l1_term(0.5, 1.0), 0.125);
        assert_eq!(smooth_l1_term(2.0, 1.0), 1.5);
        assert_eq!(smooth_l1_term(-2.0, 1.0), 1.5);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        assert!((bce_logit_term(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_logit_term(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_logit_term(40.0, 1.0) < 1e-17);
        assert!(bce_logit_term(-40.0, 0.0) < 1e-17);
    }
}
