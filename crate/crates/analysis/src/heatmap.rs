use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use dsa_core::attention::{AttentionRecord, AttentionWeights};

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl std::str::FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgm" => Ok(HeatmapFormat::Pgm),
            "csv" => Ok(HeatmapFormat::Csv),
            other => Err(Error::Invalid(format!("unknown heatmap format `{other}` (pgm or csv)"))),
        }
    }
}

/// The `H×W` map to draw: one query's attention row, or the CBAM mask.
pub fn heatmap_values(record: &AttentionRecord, query: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = (record.height, record.width);
    let values = match &record.weights {
        AttentionWeights::SelfAttention(m) => {
            if query >= m.rows() {
                return Err(Error::Invalid(format!("query {query} out of range for {} positions", m.rows())));
            }
            m.row(query).to_vec()
        }
        AttentionWeights::CbamMask(f) => f.data().to_vec(),
    };
    Ok((h, w, values))
}

/// ASCII PGM scaled so the largest value maps to 255.
pub fn to_pgm(h: usize, w: usize, values: &[f64]) -> String {
    let max = values.iter().copied().fold(0.0, f64::max);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in values.chunks(w) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if max > 0.0 { (v / max * 255.0).round() } else { 0.0 };
                (g.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

/// One line per row, shortest round-trip decimal form.
pub fn to_csv(w: usize, values: &[f64]) -> String {
    let mut s = String::new();
    for row in values.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", line.join(",")).expect("write to string");
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Invalid(format!("line {}: `{v}`: {e}", i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn export_heatmap(record: &AttentionRecord, query: usize, path: &Path, format: HeatmapFormat) -> Result<()> {
    let (h, w, values) = heatmap_values(record, query)?;
    let text = match format {
        HeatmapFormat::Pgm => to_pgm(h, w, &values),
        HeatmapFormat::Csv => to_csv(w, &values),
    };
    fs::write(path, text).map_err(|e| io(path, e))
}
