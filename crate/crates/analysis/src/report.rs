//! Run reports and the ablation table built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use dsa_detect::Metrics;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Summary of one training run, as written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub config: BTreeMap<String, String>,
    pub config_digest: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub loss: LossSummary,
    pub loss_trace_digest: String,
    pub dsa_params: usize,
    pub total_params: usize,
    pub cost: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub drop: f64,
    pub steps: usize,
}

pub fn metrics_map(m: &Metrics) -> BTreeMap<String, f64> {
    Metrics::NAMES.iter().map(|n| n.to_string()).zip(m.values()).collect()
}

/// CSV with one row per run, sorted by name: `config`, the ten metric
/// columns, then `config_digest`.
pub fn ablation_report(runs: &[RunReport]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Invalid("ablation report needs at least one run".into()));
    }
    let mut names: Vec<&str> = Metrics::NAMES.to_vec();
    names.sort_unstable();
    for r in runs {
        let keys: Vec<&str> = r.metrics.keys().map(String::as_str).collect();
        if keys != names {
            return Err(Error::Invalid(format!(
                "run `{}` has metrics {keys:?}, expected {:?}",
                r.name,
                Metrics::NAMES
            )));
        }
    }
    let mut sorted: Vec<&RunReport> = runs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut out = format!("config,{},config_digest\n", Metrics::NAMES.join(","));
    for r in sorted {
        let vals: Vec<String> = Metrics::NAMES.iter().map(|n| format!("{:.4}", r.metrics[*n])).collect();
        writeln!(out, "{},{},{}", r.name, vals.join(","), r.config_digest).expect("write to string");
    }
    Ok(out)
}
