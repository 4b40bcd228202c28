//! Command-line front end.
//!
//! ```text
//! glae gen-data  [--config F] [--seed N] [--set K=V]... --out DIR
//! glae train     [--config F] [--seed N] [--set K=V]... --stage 1|2 --data DIR --out DIR [--init CKPT]
//! glae evaluate  [--config F] [--set K=V]... --checkpoint CKPT --data DIR --out DIR
//! glae score     [--config F] [--set K=V]... --predictions CSV [--out JSON]
//! glae plot      [--config F] (--report JSON... | --routing CSV) --out SVG
//! ```
//!
//! Each command writes `resolved.cfg` (or `<output>.resolved.cfg` for file
//! outputs) holding the complete configuration it ran with. Failures print a
//! single line `error: <category>: <message>` to stderr and exit with 1;
//! malformed command lines exit with 2.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochStats};
use crate::config::RunConfig;
use crate::error::{bail, Error, Result};
use crate::metrics::{build_report, read_predictions, MetricsReport};
use crate::pipeline::{evaluate, Evaluation};
use crate::plot::{class_plot, usage_plot};
use crate::routing::{read_routing_csv, write_routing_csv, RoutedSample, RoutingReport};
use crate::synth::{generate_dataset, load_dataset, DatasetSummary};
use crate::trainer::{train_stage1_with, train_stage2_with, Stage};

#[derive(Debug, Parser)]
#[command(name = "glae", version, about = "Long-tailed age estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic benchmark.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        /// Run directory; receives `stage<N>.ckpt` and `loss_stage<N>.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint for stage 2 (default: `<out>/stage1.ckpt`).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score every head/routing variant on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics for a prediction CSV.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Writes the JSON report here as well as printing the text report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw an SVG figure.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Metrics report(s); draws counts, per-class MAE and CMAE lines.
        #[arg(long, conflicts_with = "routing", required_unless_present = "routing")]
        report: Vec<PathBuf>,
        /// Routing CSV; draws head usage per age group.
        #[arg(long)]
        routing: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Resolves the run configuration: defaults, then `base`, then the file,
/// then `--seed` and `--set` overrides.
pub fn resolve_config(common: &Common, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let mut cfg = base.unwrap_or_default();
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in crate::config::parse_kv(&text)? {
                cfg.set(&k, &v)?;
            }
            cfg
        }
        None => base.unwrap_or_default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!(Config, "--set expects KEY=VALUE, got '{kv}'");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sidecar(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".resolved.cfg");
    file.with_file_name(name)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<DatasetSummary> {
    let summary = generate_dataset(&cfg.synth_config(), out)?;
    cfg.save(&out.join("resolved.cfg"))?;
    Ok(summary)
}

const RUN_PREFIX: &str = "run.";

fn embed_config(ckpt: &mut Checkpoint<f32>, cfg: &RunConfig) {
    ckpt.manifest = cfg
        .entries()
        .into_iter()
        .map(|(k, v)| (format!("{RUN_PREFIX}{k}"), v))
        .collect();
}

/// The run configuration stored inside a checkpoint, if any.
pub fn embedded_config<T>(ckpt: &Checkpoint<T>) -> Result<Option<RunConfig>> {
    let mut cfg = RunConfig::default();
    let mut any = false;
    for (k, v) in &ckpt.manifest {
        if let Some(key) = k.strip_prefix(RUN_PREFIX) {
            cfg.set(key, v)?;
            any = true;
        }
    }
    Ok(any.then_some(cfg))
}

fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("stage,epoch,l_sum,l_loc,l_hol,lr\n");
    for e in history {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.stage, e.epoch, e.l_sum, e.l_loc, e.l_hol, e.lr
        ));
    }
    s
}

/// Trains one stage; returns the checkpoint path.
pub fn cmd_train(
    cfg: &RunConfig,
    stage: Stage,
    data_dir: &Path,
    out: &Path,
    init: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<PathBuf> {
    let data = load_dataset(data_dir)?;
    mkdir(out)?;
    let mut ckpt = match stage {
        Stage::One => train_stage1_with::<f32>(&cfg.train_config(stage), &cfg.model_config(), &data, on_epoch)?,
        Stage::Two => {
            let default_init = out.join("stage1.ckpt");
            let init = init.unwrap_or(&default_init);
            if !init.exists() {
                bail!(
                    InvalidInput,
                    "stage 2 needs a stage-1 checkpoint; {} does not exist",
                    init.display()
                );
            }
            let s1 = load_checkpoint::<f32>(init)?;
            train_stage2_with(&cfg.train_config(stage), &data, &s1, on_epoch)?
        }
    };
    embed_config(&mut ckpt, cfg);
    let n = stage.number();
    let path = out.join(format!("stage{n}.ckpt"));
    save_checkpoint(&ckpt, &path)?;
    write(&out.join(format!("loss_stage{n}.csv")), &history_csv(&ckpt.history))?;
    cfg.save(&out.join("resolved.cfg"))?;
    Ok(path)
}

fn write_variant(out: &Path, ev: &Evaluation) -> Result<()> {
    for v in &ev.variants {
        let name = v.policy.name();
        crate::metrics::write_predictions(&out.join(format!("predictions_{name}.csv")), &v.records)?;
        v.report.save_json(&out.join(format!("report_{name}.json")))?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<Evaluation> {
    let ckpt = load_checkpoint::<f32>(checkpoint)?;
    let data = load_dataset(data_dir)?;
    if data.test.is_empty() {
        bail!(Dataset, "{} has no test split", data_dir.display());
    }
    mkdir(out)?;
    let ev = evaluate(&ckpt.model, &data, &data.test, &cfg.protocol(), cfg.routing_kl)?;
    write_variant(out, &ev)?;
    let mut text = ev.summary();
    if let Some(r) = &ev.routing {
        write_routing_csv(&out.join("routing.csv"), &r.samples)?;
        text.push('\n');
        text.push_str(&r.to_text());
    }
    write(&out.join("report.txt"), &text)?;
    cfg.save(&out.join("resolved.cfg"))?;
    Ok(ev)
}

/// Reads only the CSV; never touches checkpoints or datasets.
pub fn cmd_score(cfg: &RunConfig, predictions: &Path, out: Option<&Path>) -> Result<MetricsReport> {
    let records = read_predictions(predictions)?;
    let report = build_report(&records, &cfg.protocol())?;
    if let Some(out) = out {
        report.save_json(out)?;
        cfg.save(&sidecar(out))?;
    }
    Ok(report)
}

pub fn cmd_plot_reports(reports: &[PathBuf], out: &Path) -> Result<()> {
    let loaded = reports
        .iter()
        .map(|p| MetricsReport::load_json(p))
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = reports
        .iter()
        .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let series: Vec<(&str, &MetricsReport)> = names.iter().map(String::as_str).zip(&loaded).collect();
    write(out, &class_plot(&series)?)
}

pub fn cmd_plot_routing(cfg: &RunConfig, routing: &Path, out: &Path) -> Result<RoutingReport> {
    let samples: Vec<RoutedSample> = read_routing_csv(routing)?;
    let report = RoutingReport::build(samples, &cfg.protocol());
    write(out, &usage_plot(&report.groups)?)?;
    Ok(report)
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = resolve_config(&common, None)?;
            let s = cmd_gen_data(&cfg, &out)?;
            println!(
                "wrote {} samples ({} train, {} test) to {}",
                s.counts.iter().sum::<usize>(),
                s.n_train,
                s.n_test,
                out.display()
            );
        }
        Command::Train {
            common,
            stage,
            data,
            out,
            init,
        } => {
            let stage = Stage::from_number(stage)?;
            let cfg = resolve_config(&common, None)?;
            let path = cmd_train(&cfg, stage, &data, &out, init.as_deref(), &mut |e| {
                eprintln!(
                    "stage {} epoch {:>3}  loss {:.4}  local {:.4}  holistic {:.4}  lr {:.5}",
                    e.stage, e.epoch, e.l_sum, e.l_loc, e.l_hol, e.lr
                )
            })?;
            println!("wrote {}", path.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            out,
        } => {
            let base = embedded_config(&load_checkpoint::<f32>(&checkpoint)?)?;
            let cfg = resolve_config(&common, base)?;
            let ev = cmd_evaluate(&cfg, &checkpoint, &data, &out)?;
            print!("{}", ev.summary());
            if let Some(r) = &ev.routing {
                print!("{}", r.to_text());
            }
        }
        Command::Score {
            common,
            predictions,
            out,
        } => {
            let cfg = resolve_config(&common, None)?;
            print!("{}", cmd_score(&cfg, &predictions, out.as_deref())?.to_text());
        }
        Command::Plot {
            common,
            report,
            routing,
            out,
        } => match routing {
            Some(r) => {
                cmd_plot_routing(&resolve_config(&common, None)?, &r, &out)?;
            }
            None => cmd_plot_reports(&report, &out)?,
        },
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return 2;
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}: {}", e.category(), e.to_string().replace('\n', " "));
            1
        }
    }
}
