//! Training, evaluation and ablation runs, each writing into its own directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dsa_analysis::report::{metrics_map, LossSummary};
use dsa_analysis::{cost_report, CostReport, CostVariant, RunReport};
use dsa_core::attention::AttentionVariant;
use dsa_detect::{checkpoint, evaluate_ap, train, Detector, LossTrace, Metrics, Placement};
use dsa_scenes::{load_dataset, Dataset};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io, Error, Result};

/// Steps averaged for the initial loss.
pub const INITIAL_WINDOW: usize = 10;

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const LOSS_CSV: &str = "loss_trace.csv";
pub const REPORT_JSON: &str = "report.json";
pub const CONFIG_TXT: &str = "config.txt";

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io(path, e))?;
    write(path, &(text + "\n"))
}

/// Loads `dir` when given, checking it was generated from this config;
/// otherwise generates the scenes in memory.
pub fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let Some(dir) = dir else {
        return Ok(Dataset::generate(&cfg.scene, cfg.n_train, cfg.n_val)?);
    };
    let ds = load_dataset(dir)?;
    if ds.config != cfg.scene || ds.train.len() != cfg.n_train || ds.val.len() != cfg.n_val {
        return Err(Error::Config(format!(
            "{}: dataset does not match the scene keys and split sizes of this config",
            dir.display()
        )));
    }
    Ok(ds)
}

fn cost_variant(cfg: &RunConfig, level: u8) -> CostVariant {
    let d = &cfg.detector;
    match d.variant {
        AttentionVariant::Cbam => CostVariant::Cbam,
        AttentionVariant::SelfAttention if d.is_strided(level) => CostVariant::from_stride(Some(d.stride_kernel)),
        AttentionVariant::SelfAttention => CostVariant::Plain,
    }
}

/// Cost of one DSA branch at every active level for the configured image size.
pub fn level_costs(cfg: &RunConfig) -> Result<Vec<CostReport>> {
    let size = cfg.detector.image_size;
    cfg.detector
        .active_dsa_levels()
        .iter()
        .map(|&l| {
            let side = size.div_ceil(1 << l);
            let mut r = cost_report(cfg.detector.channels, side, side, cost_variant(cfg, l))?;
            r.level = Some(l);
            Ok(r)
        })
        .collect()
}

fn metrics_header() -> String {
    format!("epoch,lr,loss_focal,loss_box,loss_conf,loss_total,{}\n", Metrics::NAMES.join(","))
}

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn loss_csv(trace: &LossTrace) -> String {
    let mut s = String::from("epoch,step,lr,loss_focal,loss_box,loss_conf,loss_total\n");
    for r in &trace.steps {
        let l = &r.loss;
        writeln!(s, "{},{},{},{}", r.epoch, r.step, r.lr, join([l.focal, l.box_loss, l.confidence, l.total]))
            .expect("write to string");
    }
    s
}

/// Trains one configuration and writes its artifacts under `dir`.
pub fn train_run(cfg: &RunConfig, data: &Dataset, dir: &Path, log: &(dyn Fn(&str) + Sync)) -> Result<RunReport> {
    cfg.validate()?;
    let mut model = Detector::new(cfg.detector.clone(), cfg.seed)?;
    let cost = serde_json::to_value(level_costs(cfg)?).map_err(|e| Error::Failed(e.to_string()))?;
    let mut csv = metrics_header();
    let mut last = None;
    let epochs = cfg.train.epochs;
    let trace = train(&mut model, &data.train, &cfg.train, &cfg.loss, |epoch, m, loss| {
        let metrics = evaluate_ap(m, &data.val)?;
        let lr = dsa_detect::train::lr_at(&cfg.train, epoch);
        writeln!(
            csv,
            "{},{},{},{}",
            epoch + 1,
            lr,
            join([loss.focal, loss.box_loss, loss.confidence, loss.total]),
            join(metrics.values())
        )
        .expect("write to string");
        log(&format!(
            "[{}] epoch {}/{epochs} loss {:.4} AP {:.4} AP50 {:.4}",
            cfg.name,
            epoch + 1,
            loss.total,
            metrics.ap,
            metrics.ap50
        ));
        last = Some(metrics);
        Ok(())
    })?;
    let metrics = last.expect("at least one epoch");
    let initial = trace.initial_total(INITIAL_WINDOW);
    let fin = trace.final_total();
    let report = RunReport {
        name: cfg.name.clone(),
        config: cfg.echo(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        metrics: metrics_map(&metrics),
        loss: LossSummary {
            initial,
            last: fin,
            drop: 1.0 - fin / initial,
            steps: trace.steps.len(),
        },
        loss_trace_digest: trace.digest(),
        dsa_params: model.dsa_param_count(),
        total_params: model.params().total_count(),
        cost,
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    checkpoint::save(&dir.join(CHECKPOINT), &model)?;
    write(&dir.join(METRICS_CSV), &csv)?;
    write(&dir.join(LOSS_CSV), &loss_csv(&trace))?;
    write(&dir.join(CONFIG_TXT), &format!("name = {}\n{}", cfg.name, cfg.canonical_text()))?;
    write_json(&dir.join(REPORT_JSON), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub name: String,
    pub config: std::collections::BTreeMap<String, String>,
    pub config_digest: String,
    pub seed: u64,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub split: &'static str,
    pub images: usize,
    pub metrics: std::collections::BTreeMap<String, f64>,
}

/// Evaluates a checkpoint on the validation split and writes
/// `eval_metrics.csv` and `eval_report.json` under `dir`.
pub fn eval_run(cfg: &RunConfig, ckpt: &Path, data: &Dataset, dir: &Path) -> Result<EvalReport> {
    let bytes = fs::read(ckpt).map_err(|e| io(ckpt, e))?;
    let model = checkpoint::load(ckpt, cfg.detector.clone(), cfg.seed)?;
    let metrics = evaluate_ap(&model, &data.val)?;
    let report = EvalReport {
        name: cfg.name.clone(),
        config: cfg.echo(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        checkpoint: ckpt.display().to_string(),
        checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
        split: "val",
        images: data.val.len(),
        metrics: metrics_map(&metrics),
    };
    write(
        &dir.join("eval_metrics.csv"),
        &format!("split,{}\nval,{}\n", Metrics::NAMES.join(","), join(metrics.values())),
    )?;
    write_json(&dir.join("eval_report.json"), &report)?;
    Ok(report)
}

/// One grid point: a run name and the overrides that define it.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

fn point(name: &str, kv: &[(&str, &str)]) -> GridPoint {
    GridPoint {
        name: name.into(),
        overrides: kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
    }
}

pub const PRESETS: [&str; 3] = ["main", "levels", "variant"];

/// Named ablation sets. `main` compares the baseline with the DSA choices:
/// decoupled vs shared, before vs after the heads, learned vs fixed gamma,
/// and the confidence-weighted score.
pub fn preset(name: &str) -> Result<Vec<GridPoint>> {
    let before = ("placement", "before");
    Ok(match name {
        "main" => vec![
            point("baseline", &[("placement", "none")]),
            point("dsa-decoupled", &[before, ("shared", "false")]),
            point("dsa-shared", &[before, ("shared", "true")]),
            point("dsa-after", &[("placement", "after")]),
            point("dsa-gamma-fixed", &[before, ("gamma_mode", "fixed")]),
            point(
                "dsa-confidence",
                &[before, ("with_confidence", "true"), ("score_mode", "cls-x-conf")],
            ),
        ],
        "levels" => vec![
            point("dsa-4-7", &[before, ("dsa_levels", "4-7")]),
            point("dsa-3-7-k1", &[before, ("dsa_levels", "3-7"), ("strided_levels", "3"), ("stride_kernel", "1x1")]),
            point("dsa-3-7-k3", &[before, ("dsa_levels", "3-7"), ("strided_levels", "3"), ("stride_kernel", "3x3")]),
        ],
        "variant" => vec![
            point("dsa-self-attention", &[before, ("variant", "self-attention")]),
            point("dsa-cbam", &[before, ("variant", "cbam")]),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of: {})",
                PRESETS.join(", ")
            )))
        }
    })
}

/// Cartesian product of `key=v1,v2,...` axes, first axis slowest.
pub fn grid(axes: &[String]) -> Result<Vec<GridPoint>> {
    let mut points = vec![GridPoint {
        name: String::new(),
        overrides: vec![],
    }];
    for axis in axes {
        let (k, vs) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{axis}`: expected key=v1,v2,...")))?;
        let values: Vec<&str> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{axis}` has no values")));
        }
        let k = k.trim();
        points = points
            .iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let part = format!("{k}-{v}");
                    GridPoint {
                        name: if p.name.is_empty() { part } else { format!("{}_{part}", p.name) },
                        overrides: p.overrides.iter().cloned().chain([(k.to_string(), v.to_string())]).collect(),
                    }
                })
            })
            .collect();
    }
    Ok(points)
}

/// Applies a grid point to `base`, validating the result.
pub fn configure(base: &RunConfig, p: &GridPoint) -> Result<RunConfig> {
    let mut cfg = base.clone();
    for (k, v) in &p.overrides {
        match cfg.set(k, v) {
            Ok(true) => {}
            Ok(false) => return Err(Error::Config(format!("run `{}`: unknown key `{k}`", p.name))),
            Err(e) => return Err(Error::Config(format!("run `{}`: bad value `{v}` for `{k}`: {e}", p.name))),
        }
    }
    let name = p.name.replace(['/', '\\', ','], "-");
    cfg.set("name", &name).map_err(Error::Config)?;
    cfg.validate().map_err(|e| Error::Config(format!("run `{}`: {e}", p.name)))?;
    Ok(cfg)
}

pub fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

/// Runs every grid point (in order, or on one thread each when `parallel`),
/// writing `runs/<name>/` and `ablation.csv` under `out`.
pub fn ablate(
    base: &RunConfig,
    points: &[GridPoint],
    data: &Dataset,
    out: &Path,
    parallel: bool,
    log: &(dyn Fn(&str) + Sync),
) -> Result<Vec<RunReport>> {
    let configs = points.iter().map(|p| configure(base, p)).collect::<Result<Vec<_>>>()?;
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("duplicate run name `{}`", w[0])));
    }
    let dirs = runs_dir(out);
    let reports: Vec<RunReport> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs
                .iter()
                .map(|c| {
                    let dir = dirs.join(&c.name);
                    s.spawn(move || train_run(c, data, &dir, log))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Failed("run thread panicked".into()))))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        configs
            .iter()
            .map(|c| train_run(c, data, &dirs.join(&c.name), log))
            .collect::<Result<Vec<_>>>()?
    };
    write(&out.join("ablation.csv"), &dsa_analysis::ablation_report(&reports)?)?;
    Ok(reports)
}

/// One line per DSA run comparing its AP with the `baseline` run, if present.
pub fn direction_summary(reports: &[RunReport]) -> Vec<String> {
    let Some(base) = reports.iter().find(|r| r.config.get("placement").map(String::as_str) == Some("none")) else {
        return vec![];
    };
    let b = base.metrics["AP"];
    reports
        .iter()
        .filter(|r| r.name != base.name)
        .map(|r| {
            let ap = r.metrics["AP"];
            let rel = if ap >= b { ">=" } else { "<" };
            format!("{}: AP {ap:.4} {rel} {} AP {b:.4} (delta {:+.4})", r.name, base.name, ap - b)
        })
        .collect()
}

pub fn has_dsa(cfg: &RunConfig) -> bool {
    cfg.detector.placement != Placement::None && !cfg.detector.dsa_levels.is_empty()
}
