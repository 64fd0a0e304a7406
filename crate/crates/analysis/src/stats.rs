use dsa_core::attention::{AttentionRecord, AttentionWeights, Task};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionStats {
    pub level: u8,
    pub task: &'static str,
    /// Per-query entropy in nats.
    pub row_entropy: Vec<f64>,
    pub mean_entropy: f64,
    pub max_entropy: f64,
    /// `ln N`, the entropy of a uniform row.
    pub uniform_entropy: f64,
    pub gamma: f64,
}

/// `−Σ w ln w` with `0·ln 0 = 0`.
pub fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&w| w > 0.0).map(|&w| w * w.ln()).sum::<f64>()
}

pub fn attention_entropy(record: &AttentionRecord) -> Result<AttentionStats> {
    let AttentionWeights::SelfAttention(m) = &record.weights else {
        return Err(Error::Invalid(
            "entropy needs row-stochastic self-attention weights, got a CBAM mask".into(),
        ));
    };
    let row_entropy: Vec<f64> = (0..m.rows()).map(|r| entropy(m.row(r))).collect();
    let mean_entropy = row_entropy.iter().sum::<f64>() / row_entropy.len().max(1) as f64;
    let max_entropy = row_entropy.iter().copied().fold(0.0, f64::max);
    Ok(AttentionStats {
        level: record.level,
        task: match record.task {
            Task::Cls => "cls",
            Task::Loc => "loc",
        },
        row_entropy,
        mean_entropy,
        max_entropy,
        uniform_entropy: (m.cols() as f64).ln(),
        gamma: record.gamma,
    })
}
