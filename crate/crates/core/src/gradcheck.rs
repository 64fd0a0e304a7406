//! Central-difference verification of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{CompGraph, NodeId};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            probes: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub probe_count: usize,
    pub pass: bool,
    /// Set when a forward evaluation at some probe was non-finite; such a
    /// report is neither passed nor failed.
    pub invalid: bool,
}

impl GradCheckReport {
    fn empty(op: &str) -> Self {
        Self {
            op: op.to_string(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            probe_count: 0,
            pass: true,
            invalid: false,
        }
    }

    /// Folds another report for the same op into this one (worst case wins).
    pub fn merge(&mut self, other: &GradCheckReport, tolerance: f64) {
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.probe_count += other.probe_count;
        self.invalid |= other.invalid;
        self.pass = !self.invalid && self.max_rel_err < tolerance;
    }

    pub fn status(&self) -> &'static str {
        match (self.invalid, self.pass) {
            (true, _) => "INVALID",
            (false, true) => "pass",
            (false, false) => "FAIL",
        }
    }
}

/// Finite-difference step for a coordinate currently at `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-5 * v.abs().max(1.0)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks the analytic gradient of `build` with respect to every input.
///
/// `build` receives one leaf per input and returns the output node. Outputs
/// with more than one element are reduced to a scalar by a fixed random
/// projection, so every output element contributes to the checked gradient.
pub fn gradient_check<F>(op: &str, inputs: &[Tensor], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut CompGraph, &[NodeId]) -> Result<NodeId>,
{
    gradient_check_subset(op, inputs, &vec![true; inputs.len()], build, cfg)
}

/// Like [`gradient_check`], but probes only inputs whose `probe` flag is set.
pub fn gradient_check_subset<F>(
    op: &str,
    inputs: &[Tensor],
    probe: &[bool],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut CompGraph, &[NodeId]) -> Result<NodeId>,
{
    if probe.len() != inputs.len() {
        return Err(crate::Error::invalid("gradient_check", "probe mask length differs from inputs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let run = |vals: &[Tensor]| -> Result<(CompGraph, Vec<NodeId>, NodeId)> {
        let mut g = CompGraph::new();
        let leaves: Vec<NodeId> = vals.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok((g, leaves, out))
    };

    let (g, leaves, out) = run(inputs)?;
    let out_shape = g.value(out).shape().to_vec();
    let n = g.value(out).numel();
    let projection = if n == 1 {
        Tensor::new(out_shape, vec![1.0])?
    } else {
        Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?
    };
    let objective = |g: &CompGraph, out: NodeId| -> f64 {
        g.value(out)
            .data()
            .iter()
            .zip(projection.data())
            .map(|(a, b)| a * b)
            .sum()
    };

    let mut report = GradCheckReport::empty(op);
    if !objective(&g, out).is_finite() {
        report.invalid = true;
        report.pass = false;
        return Ok(report);
    }
    let grads = g.backprop(out, &projection)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&l| grads.get(l).clone()).collect();

    let sizes: Vec<usize> = inputs.iter().zip(probe).map(|(t, &p)| if p { t.numel() } else { 0 }).collect();
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Ok(report);
    }
    let mut perturbed = inputs.to_vec();
    for _ in 0..cfg.probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let v = inputs[which].data()[flat];
        let h = fd_step(v);
        perturbed[which].data_mut()[flat] = v + h;
        let (gp, _, op_) = run(&perturbed)?;
        let fp = objective(&gp, op_);
        perturbed[which].data_mut()[flat] = v - h;
        let (gm, _, om) = run(&perturbed)?;
        let fm = objective(&gm, om);
        perturbed[which].data_mut()[flat] = v;

        report.probe_count += 1;
        if !fp.is_finite() || !fm.is_finite() {
            report.invalid = true;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[which].data()[flat];
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
    }
    report.pass = !report.invalid && report.max_rel_err < cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7]).unwrap();
        let r = gradient_check("identity", &[x], |g, l| Ok(g.scale(l[0], 1.0)), &GradCheckConfig::default()).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err < 1e-10, "{}", r.max_rel_err);
        assert_eq!(r.probe_count, 20);
    }

    #[test]
    fn wrong_gradient_fails() {
        // The central difference straddles the relu kink.
        let x = Tensor::new(vec![1], vec![1e-6]).unwrap();
        let r = gradient_check("relu-kink", &[x], |g, l| Ok(g.relu(l[0])), &GradCheckConfig::default()).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn non_finite_forward_is_invalid() {
        let x = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let r = gradient_check("inf", &[x], |g, l| Ok(g.scale(l[0], 1.0)), &GradCheckConfig::default()).unwrap();
        assert!(r.invalid);
        assert!(!r.pass);
        assert_eq!(r.status(), "INVALID");
    }
}
