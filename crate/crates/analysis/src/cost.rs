//! Operation and memory counts for one attention branch.
//!
//! A branch is `f + γ·att(f)`. Multiply-accumulates are counted for the
//! projection convolutions (at in-bounds taps only), `QKᵀ`, the weighted sum
//! `AV`, and the `γ` scaling. Softmax exponentials are a separate column.

use dsa_core::attention::{self, BranchParams, CbamParams, SelfAttentionParams, StrideKernel};
use dsa_core::kernels::counter;
use dsa_core::{CompGraph, FeatureMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const BYTES_PER_REAL: u64 = 8;

/// Largest analytic madd count that [`flops_self_attention`] will also measure.
pub const MEASURE_BUDGET: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostVariant {
    Plain,
    StridedK1,
    StridedK3,
    Cbam,
}

impl CostVariant {
    pub fn stride_kernel(self) -> Option<StrideKernel> {
        match self {
            CostVariant::StridedK1 => Some(StrideKernel::K1),
            CostVariant::StridedK3 => Some(StrideKernel::K3),
            _ => None,
        }
    }

    pub fn from_stride(kernel: Option<StrideKernel>) -> Self {
        match kernel {
            None => CostVariant::Plain,
            Some(StrideKernel::K1) => CostVariant::StridedK1,
            Some(StrideKernel::K3) => CostVariant::StridedK3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostVariant::Plain => "plain",
            CostVariant::StridedK1 => "strided-k1",
            CostVariant::StridedK3 => "strided-k3",
            CostVariant::Cbam => "cbam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub level: Option<u8>,
    pub variant: CostVariant,
    pub channels: u64,
    pub height: u64,
    pub width: u64,
    /// `H·W`.
    pub n: u64,
    /// Positions attended over (`N` plain, `⌈H/2⌉·⌈W/2⌉` strided).
    pub n_reduced: u64,
    pub d_k: u64,
    pub projection_madds: u64,
    pub score_madds: u64,
    pub mix_madds: u64,
    pub residual_madds: u64,
    pub analytic_madds: u64,
    pub measured_madds: Option<u64>,
    pub analytic_exps: u64,
    pub measured_exps: Option<u64>,
    /// `N²`, `N'²`, or `N` for the CBAM mask.
    pub attn_matrix_entries: u64,
    pub attn_matrix_bytes: u64,
    /// Attention matrix plus `Q`, `K`, `V`.
    pub peak_memory_bytes: u64,
    /// `C·N³`, the expression printed alongside the kernel's actual cost.
    pub paper_formula_value: u128,
}

impl CostReport {
    pub fn attention_core_madds(&self) -> u64 {
        self.score_madds + self.mix_madds
    }

    pub fn matches(&self) -> Option<bool> {
        Some(self.measured_madds? == self.analytic_madds && self.measured_exps? == self.analytic_exps)
    }
}

/// In-bounds taps along one axis, summed over kernel offsets and outputs.
pub fn axis_taps(len: u64, kernel: u64, stride: u64, pad: u64) -> u64 {
    let out = (len + 2 * pad - kernel) / stride + 1;
    let mut taps = 0;
    for k in 0..kernel {
        taps += (0..out).filter(|o| (o * stride + k).checked_sub(pad).is_some_and(|i| i < len)).count() as u64;
    }
    taps
}

fn check_dims(c: usize, h: usize, w: usize) -> Result<()> {
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("C, H, W must be at least 1, got {c}x{h}x{w}")));
    }
    Ok(())
}

/// Analytic counts only.
pub fn analytic_cost(c: usize, h: usize, w: usize, variant: CostVariant) -> Result<CostReport> {
    check_dims(c, h, w)?;
    let (cu, hu, wu) = (c as u64, h as u64, w as u64);
    let n = hu * wu;
    let (projection, score, mix, n_red, entries, exps, buffers) = match variant {
        CostVariant::Cbam => {
            let taps = axis_taps(hu, 7, 1, 3) * axis_taps(wu, 7, 1, 3);
            (2 * taps, 0, 0, n, n, 0, 0)
        }
        _ => {
            let (stride, k) = match variant.stride_kernel() {
                None => (1, 1),
                Some(sk) => (2, sk.size() as u64),
            };
            if stride == 2 && (h < 2 || w < 2) {
                return Err(Error::Invalid(format!("strided attention needs H, W >= 2, got {h}x{w}")));
            }
            let pad = k / 2;
            let taps = axis_taps(hu, k, stride, pad) * axis_taps(wu, k, stride, pad);
            let nr = if stride == 2 { hu.div_ceil(2) * wu.div_ceil(2) } else { n };
            (3 * cu * cu * taps, nr * cu * nr, nr * nr * cu, nr, nr * nr, nr * nr, 3 * nr * cu)
        }
    };
    let residual = cu * n;
    Ok(CostReport {
        level: None,
        variant,
        channels: cu,
        height: hu,
        width: wu,
        n,
        n_reduced: n_red,
        d_k: cu,
        projection_madds: projection,
        score_madds: score,
        mix_madds: mix,
        residual_madds: residual,
        analytic_madds: projection + score + mix + residual,
        measured_madds: None,
        analytic_exps: exps,
        measured_exps: None,
        attn_matrix_entries: entries,
        attn_matrix_bytes: entries * BYTES_PER_REAL,
        peak_memory_bytes: (entries + buffers) * BYTES_PER_REAL,
        paper_formula_value: u128::from(cu) * u128::from(n).pow(3),
    })
}

/// Runs one branch on a random `C×H×W` input and returns the counted operations.
pub fn measure(c: usize, h: usize, w: usize, variant: CostVariant) -> Result<counter::Counts> {
    check_dims(c, h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x00c0_57);
    let f = FeatureMap::random_uniform(c, h, w, -1.0, 1.0, &mut rng);
    let params = match variant {
        CostVariant::Cbam => BranchParams::Cbam(CbamParams::init(&mut rng)),
        _ => BranchParams::SelfAttention(SelfAttentionParams::init(c, variant.stride_kernel(), &mut rng)),
    };
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f);
    let nodes = params.register(&mut g);
    let (res, counts) = counter::measure(|| attention::branch_nodes(&mut g, x, &nodes));
    res?;
    Ok(counts)
}

/// Analytic counts, plus measured counts when the shape is within [`MEASURE_BUDGET`].
pub fn flops_self_attention(c: usize, h: usize, w: usize, strided: Option<StrideKernel>) -> Result<CostReport> {
    cost_report(c, h, w, CostVariant::from_stride(strided))
}

pub fn cost_report(c: usize, h: usize, w: usize, variant: CostVariant) -> Result<CostReport> {
    let mut r = analytic_cost(c, h, w, variant)?;
    if r.analytic_madds <= MEASURE_BUDGET {
        let m = measure(c, h, w, variant)?;
        r.measured_madds = Some(m.madds);
        r.measured_exps = Some(m.exps);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_taps_small_cases() {
        assert_eq!(axis_taps(5, 1, 1, 0), 5);
        assert_eq!(axis_taps(5, 1, 2, 0), 3);
        // Outputs 0,1,2 at inputs -1..1, 1..3, 3..5: 2 + 3 + 2 in-bounds taps.
        assert_eq!(axis_taps(5, 3, 2, 1), 7);
        assert_eq!(axis_taps(4, 3, 2, 1), 5);
        assert_eq!(axis_taps(1, 7, 1, 3), 1);
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(analytic_cost(0, 3, 3, CostVariant::Plain).is_err());
        assert!(analytic_cost(4, 1, 3, CostVariant::StridedK1).is_err());
    }
}
