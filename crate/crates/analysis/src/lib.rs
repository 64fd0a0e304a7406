//! Cost accounting, attention statistics and ablation tables.

pub mod cost;
pub mod error;
pub mod heatmap;
pub mod report;
pub mod stats;

pub use cost::{analytic_cost, cost_report, flops_self_attention, CostReport, CostVariant};
pub use error::{Error, Result};
pub use heatmap::{export_heatmap, HeatmapFormat};
pub use report::{ablation_report, RunReport};
pub use stats::{attention_entropy, AttentionStats};
