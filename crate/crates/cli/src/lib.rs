//! `dsanet`: gradient checks, synthetic data, training, evaluation, ablations,
//! cost reports and attention heatmaps.
//!
//! Output layout under `--out DIR`:
//!
//! ```text
//! gradcheck.csv                 one row per checked operation
//! data/                         gen-data: manifest.json, annotations.json, images/
//! checkpoint.ckpt               train
//! metrics.csv                   train: one row per epoch, loss columns and ten AP/AR metrics
//! loss_trace.csv                train: one row per optimizer step
//! config.txt                    train: the effective configuration
//! report.json                   train: run report (config echo, digest, metrics, cost)
//! eval_metrics.csv              eval
//! eval_report.json              eval
//! runs/<name>/                  ablate: one train layout per grid point
//! ablation.csv                  ablate: one row per run
//! cost.json                     cost
//! attnmap/p<level>_<task>.<ext> attnmap: one heatmap per attention record
//! attnmap/stats.csv             attnmap: row-entropy summary
//! ```

pub mod config;
pub mod error;
pub mod run;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dsa_analysis::{attention_entropy, cost_report, export_heatmap, CostReport, CostVariant, HeatmapFormat};
use dsa_core::attention::AttentionWeights;
use dsa_core::gradcheck::GradCheckConfig;
use dsa_core::gradsuite::{run_primitive_suite, SuiteConfig};
use dsa_detect::checkpoint;

pub use config::{parse_config, RunConfig};
pub use error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dsanet", version, about = "Decoupled self-attention detector toolkit")]
pub struct Cli {
    /// Root directory for every output file.
    #[arg(long, global = true, default_value = "dsanet-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` file, or a `report.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// `key=value` override applied after the file; repeatable, later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes the configured synthetic dataset to `OUT/data`.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Trains one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset written by gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluates a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Trains a set of configurations and tabulates them.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Named set of runs: main, levels or variant.
        #[arg(long, default_value = "main")]
        preset: String,
        /// `key=v1,v2,...` axis; repeatable. Replaces the preset.
        #[arg(long = "grid", value_name = "KEY=V1,V2")]
        grid: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run grid points on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Operation and memory counts of one attention branch.
    Cost {
        #[arg(long = "C", value_delimiter = ',', required = true)]
        c: Vec<usize>,
        #[arg(long = "H", value_delimiter = ',', required = true)]
        h: Vec<usize>,
        #[arg(long = "W", value_delimiter = ',', required = true)]
        w: Vec<usize>,
        /// plain, strided-k1, strided-k3, cbam or all.
        #[arg(long, default_value = "plain")]
        variant: String,
    },
    /// Attention heatmaps for one image.
    Attnmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// FMAP image; when absent, validation scene `--scene` is generated.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Query position (row-major); defaults to the grid centre.
        #[arg(long)]
        query: Option<usize>,
        #[arg(long, default_value = "pgm")]
        format: String,
    },
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let parsed = parse_config(a.config.as_deref(), &a.overrides)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    Ok(parsed.config)
}

fn log(line: &str) {
    eprintln!("{line}");
}

/// Runs one command. `Ok(false)` means it completed but a check failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    let out = cli.out.as_path();
    match &cli.command {
        Command::Gradcheck {
            instances,
            tolerance,
            seed,
        } => gradcheck(out, *instances, *tolerance, *seed),
        Command::GenData { cfg } => {
            let cfg = load_config(cfg)?;
            let dir = out.join("data");
            let ds = dsa_scenes::make_dataset(&cfg.scene, cfg.n_train, cfg.n_val, &dir)?;
            println!("wrote {} train and {} val scenes to {}", ds.train.len(), ds.val.len(), dir.display());
            Ok(true)
        }
        Command::Train { cfg, data } => {
            let cfg = load_config(cfg)?;
            let ds = run::dataset(&cfg, data.as_deref())?;
            let start = Instant::now();
            let r = run::train_run(&cfg, &ds, out, &log)?;
            println!(
                "{}: loss {:.4} -> {:.4} ({:.1}% drop), AP {:.4}, AP50 {:.4}, {:.1}s",
                r.name,
                r.loss.initial,
                r.loss.last,
                100.0 * r.loss.drop,
                r.metrics["AP"],
                r.metrics["AP50"],
                start.elapsed().as_secs_f64()
            );
            Ok(r.loss.initial.is_finite() && r.loss.last.is_finite())
        }
        Command::Eval { cfg, checkpoint, data } => {
            let cfg = load_config(cfg)?;
            let ds = run::dataset(&cfg, data.as_deref())?;
            let r = run::eval_run(&cfg, checkpoint, &ds, out)?;
            println!("{}: AP {:.4}, AP50 {:.4} on {} val images", r.name, r.metrics["AP"], r.metrics["AP50"], r.images);
            Ok(true)
        }
        Command::Ablate {
            cfg,
            preset,
            grid,
            data,
            parallel,
        } => {
            let base = load_config(cfg)?;
            let points = if grid.is_empty() { run::preset(preset)? } else { run::grid(grid)? };
            for p in &points {
                run::configure(&base, p)?;
            }
            let ds = run::dataset(&base, data.as_deref())?;
            let reports = run::ablate(&base, &points, &ds, out, *parallel, &log)?;
            print!("{}", dsa_analysis::ablation_report(&reports)?);
            for line in run::direction_summary(&reports) {
                println!("{line}");
            }
            Ok(reports.iter().all(|r| r.loss.last.is_finite()))
        }
        Command::Cost { c, h, w, variant } => cost(out, c, h, w, variant),
        Command::Attnmap {
            cfg,
            checkpoint,
            image,
            scene,
            query,
            format,
        } => attnmap(out, cfg, checkpoint, image.as_deref(), *scene, *query, format),
    }
}

fn gradcheck(out: &Path, instances: usize, tolerance: f64, seed: u64) -> Result<bool> {
    let cfg = SuiteConfig {
        instances,
        check: GradCheckConfig {
            tolerance,
            ..GradCheckConfig::default()
        },
    };
    let start = Instant::now();
    let reports = run_primitive_suite(&cfg, seed)?;
    let secs = start.elapsed().as_secs_f64();
    let mut csv = String::from("op,instances,probes,max_abs_err,max_rel_err,status\n");
    println!("{:<28} {:>7} {:>12} {:>12}  status", "op", "probes", "max abs", "max rel");
    for r in &reports {
        println!(
            "{:<28} {:>7} {:>12.3e} {:>12.3e}  {}",
            r.op,
            r.probe_count,
            r.max_abs_err,
            r.max_rel_err,
            r.status()
        );
        writeln!(
            csv,
            "{},{instances},{},{:e},{:e},{}",
            r.op,
            r.probe_count,
            r.max_abs_err,
            r.max_rel_err,
            r.status()
        )
        .expect("write to string");
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!(
        "{} ops, {instances} instances each, tolerance {tolerance:e}: {} passed, {failed} failed in {secs:.1}s",
        reports.len(),
        reports.len() - failed
    );
    run::write(&out.join("gradcheck.csv"), &csv)?;
    Ok(failed == 0)
}

fn cost_variants(v: &str) -> Result<Vec<CostVariant>> {
    Ok(match v {
        "plain" => vec![CostVariant::Plain],
        "strided-k1" => vec![CostVariant::StridedK1],
        "strided-k3" => vec![CostVariant::StridedK3],
        "cbam" => vec![CostVariant::Cbam],
        "all" => vec![CostVariant::Plain, CostVariant::StridedK1, CostVariant::StridedK3, CostVariant::Cbam],
        other => {
            return Err(Error::Config(format!(
                "unknown cost variant `{other}` (plain, strided-k1, strided-k3, cbam or all)"
            )))
        }
    })
}

/// Every report for the `C × H × W × variant` grid.
pub fn cost_grid(c: &[usize], h: &[usize], w: &[usize], variant: &str) -> Result<Vec<CostReport>> {
    let variants = cost_variants(variant)?;
    let mut out = Vec::new();
    for &cc in c {
        for &hh in h {
            for &ww in w {
                for &v in &variants {
                    out.push(cost_report(cc, hh, ww, v)?);
                }
            }
        }
    }
    Ok(out)
}

fn cost(out: &Path, c: &[usize], h: &[usize], w: &[usize], variant: &str) -> Result<bool> {
    let reports = cost_grid(c, h, w, variant)?;
    println!(
        "{:>5} {:>5} {:>5} {:<11} {:>8} {:>8} {:>16} {:>9} {:>14} {:>16} {:>9}",
        "C", "H", "W", "variant", "N", "N'", "madds", "measured", "attn entries", "attn bytes", "GB"
    );
    let mut ok = true;
    for r in &reports {
        let measured = match r.matches() {
            None => "skipped",
            Some(true) => "equal",
            Some(false) => {
                ok = false;
                "MISMATCH"
            }
        };
        println!(
            "{:>5} {:>5} {:>5} {:<11} {:>8} {:>8} {:>16} {:>9} {:>14} {:>16} {:>9.2}",
            r.channels,
            r.height,
            r.width,
            r.variant.name(),
            r.n,
            r.n_reduced,
            r.analytic_madds,
            measured,
            r.attn_matrix_entries,
            r.attn_matrix_bytes,
            r.attn_matrix_bytes as f64 / 1e9
        );
    }
    let path = out.join("cost.json");
    let text = serde_json::to_string_pretty(&reports).map_err(|e| error::io(&path, e))?;
    run::write(&path, &(text + "\n"))?;
    Ok(ok)
}

fn attnmap(
    out: &Path,
    args: &ConfigArgs,
    ckpt: &Path,
    image: Option<&Path>,
    scene: usize,
    query: Option<usize>,
    format: &str,
) -> Result<bool> {
    let cfg = load_config(args)?;
    if !run::has_dsa(&cfg) {
        return Err(Error::Config("attnmap needs a config with DSA levels (placement before or after)".into()));
    }
    let fmt: HeatmapFormat = format.parse()?;
    let model = checkpoint::load(ckpt, cfg.detector.clone(), cfg.seed)?;
    let img = match image {
        Some(p) => dsa_core::fmap::read(p)?,
        None => dsa_scenes::generate_scene(&cfg.scene, cfg.n_train + scene)?.image,
    };
    let records = model.attention_records(&img)?;
    let dir = out.join("attnmap");
    std::fs::create_dir_all(&dir).map_err(|e| error::io(&dir, e))?;
    let ext = match fmt {
        HeatmapFormat::Pgm => "pgm",
        HeatmapFormat::Csv => "csv",
    };
    let mut stats = String::from("level,task,positions,query,gamma,mean_entropy,max_entropy,uniform_entropy\n");
    for r in &records {
        let q = query.unwrap_or((r.height / 2) * r.width + r.width / 2);
        let path = dir.join(format!("p{}_{}.{ext}", r.level, r.task.name()));
        export_heatmap(r, q, &path, fmt)?;
        if let AttentionWeights::SelfAttention(_) = r.weights {
            let s = attention_entropy(r)?;
            writeln!(
                stats,
                "{},{},{},{q},{},{},{},{}",
                s.level,
                s.task,
                r.height * r.width,
                s.gamma,
                s.mean_entropy,
                s.max_entropy,
                s.uniform_entropy
            )
            .expect("write to string");
        }
        println!("wrote {}", path.display());
    }
    run::write(&dir.join("stats.csv"), &stats)?;
    Ok(true)
}
