//! The pipeline commands behind the `edgenav` binary.
//!
//! Every command derives all of its randomness from one root seed, so
//! repeated runs with the same configuration write identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{data, structural, Error, Result};
use crate::model::{ModelMode, MultiExitModel, Prepared};
use crate::navsim::{evaluate, generate_map, sample_episodes, sweep_tau, EpisodeSpec, GridMap, Metrics, SweepTable, METRICS_CSV_HEADER};
use crate::numerics::Rng;
use crate::quantizer::QuantError;
use crate::training::{calibrate_tau, finetune_qlora, generate_dataset, pretrain_backbone, training_csv, EpochLog, Sample};
use crate::weightfile::{base_payloads, encode, read_model};

pub fn map_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("map_{index:03}.txt"))
}

/// Generates the configured maps into `dir` and returns the written paths.
pub fn cmd_genmaps(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let m = &cfg.maps;
    (0..m.count)
        .map(|i| {
            let seed = crate::numerics::derive_seed(cfg.seed, &format!("map-{i}"));
            let map = generate_map(seed, m.width, m.height, m.density)?;
            let path = map_path(dir, i);
            std::fs::write(&path, map.to_text())?;
            Ok(path)
        })
        .collect()
}

pub fn load_maps(cfg: &RunConfig) -> Result<Vec<GridMap>> {
    let dir = &cfg.maps.dir;
    (0..cfg.maps.count)
        .map(|i| {
            let path = map_path(dir, i);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| data(format!("cannot read map {} ({e}); run `edgenav genmaps` first", path.display())))?;
            GridMap::parse(&text).map_err(|e| data(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Training and validation samples for `seed`.
pub fn datasets(cfg: &RunConfig, maps: &[GridMap], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let splits = cfg.maps.splits();
    let nav = cfg.nav();
    let p = cfg.train.explore_prob;
    let train = generate_dataset(maps, &splits.train, cfg.train.samples, &nav, p, &mut Rng::derived(seed, "train-data"))?;
    let val = generate_dataset(maps, &splits.val, cfg.train.val_samples, &nav, p, &mut Rng::derived(seed, "val-data"))?;
    Ok((train, val))
}

/// Freshly initialized and pretrained full-precision model.
pub fn pretrain_model(cfg: &RunConfig, maps: &[GridMap], seed: u64) -> Result<(MultiExitModel<f32>, Vec<EpochLog>)> {
    let (train, val) = datasets(cfg, maps, seed)?;
    let mut model = MultiExitModel::new(cfg.model.clone(), &mut Rng::derived(seed, "init"))?;
    let logs = pretrain_backbone(&mut model, &train, &val, &cfg.train, &mut Rng::derived(seed, "pretrain"))?;
    Ok((model, logs))
}

pub fn quantize_model(cfg: &RunConfig, model: &MultiExitModel<f32>, seed: u64) -> Result<(MultiExitModel<f32>, Vec<(String, QuantError)>)> {
    model.quantize(cfg.quantize_options()?, &mut Rng::derived(seed, "lora-init"))
}

pub fn finetune_model(cfg: &RunConfig, maps: &[GridMap], model: &mut MultiExitModel<f32>, seed: u64) -> Result<Vec<EpochLog>> {
    let (train, val) = datasets(cfg, maps, seed)?;
    finetune_qlora(model, &train, &val, &cfg.train, &mut Rng::derived(seed, "finetune"))
}

fn write_training_log(cfg: &RunConfig, out: &Path, logs: &[EpochLog]) -> Result<PathBuf> {
    let path = out.with_extension("train.csv");
    std::fs::write(&path, training_csv(&cfg.model.exit_layers, logs))?;
    Ok(path)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Pretrains and writes the dense weight file plus its training CSV.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<Vec<EpochLog>> {
    let maps = load_maps(cfg)?;
    let (model, logs) = pretrain_model(cfg, &maps, cfg.seed)?;
    write_bytes(out, &encode(&model)?)?;
    write_training_log(cfg, out, &logs)?;
    Ok(logs)
}

/// Quantizes a dense weight file and reports the per-tensor error.
pub fn cmd_quantize(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<(String, QuantError)>> {
    let model = read_model(input)?;
    if model.mode != ModelMode::FullPrecision {
        return Err(structural(format!("{} is already quantized", input.display())));
    }
    if model.config.block_size != cfg.model.block_size {
        return Err(structural("weight file and config disagree on block_size"));
    }
    let (q, report) = quantize_model(cfg, &model, cfg.seed)?;
    write_bytes(out, &encode(&q)?)?;
    Ok(report)
}

/// Fine-tunes adapters and heads of a quantized weight file; the frozen
/// base payloads are copied through unchanged.
pub fn cmd_finetune(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<EpochLog>> {
    let bytes = std::fs::read(input).map_err(|e| data(format!("cannot read {}: {e}", input.display())))?;
    let mut model = crate::weightfile::decode(&bytes)?;
    if model.mode != ModelMode::Quantized {
        return Err(structural(format!("{} is not quantized; run `edgenav quantize` first", input.display())));
    }
    let maps = load_maps(cfg)?;
    let logs = finetune_model(cfg, &maps, &mut model, cfg.seed)?;
    let encoded = encode(&model)?;
    if base_payloads(&encoded)? != base_payloads(&bytes)? {
        return Err(Error::Numerical("frozen base weights changed during fine-tuning".into()));
    }
    write_bytes(out, &encoded)?;
    write_training_log(cfg, out, &logs)?;
    Ok(logs)
}

/// How `eval` picks its threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauChoice {
    Fixed(f64),
    FullDepth,
    /// Calibrate on the validation maps for each seed.
    Calibrate,
}

pub const FULL_DEPTH_TAU: f64 = -1.0;

pub fn calibration_episodes(cfg: &RunConfig, maps: &[GridMap], seed: u64) -> Result<Vec<EpisodeSpec>> {
    let rng = &mut Rng::derived(seed, "calibration-episodes");
    sample_episodes(maps, &cfg.maps.splits().val, cfg.eval.calibration_episodes, cfg.eval.success_radius, rng)
}

pub fn test_episodes(cfg: &RunConfig, maps: &[GridMap], seed: u64) -> Result<Vec<EpisodeSpec>> {
    let rng = &mut Rng::derived(seed, "eval-episodes");
    sample_episodes(maps, &cfg.maps.splits().test, cfg.eval.episodes, cfg.eval.success_radius, rng)
}

/// Calibrated threshold for a prepared model on `seed`'s validation episodes.
pub fn calibrated_tau(cfg: &RunConfig, maps: &[GridMap], prepared: &Prepared<f32>, seed: u64) -> Result<f64> {
    let eps = calibration_episodes(cfg, maps, seed)?;
    Ok(calibrate_tau(prepared, maps, &eps, &cfg.eval.tau_grid, &cfg.nav())?.tau)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub seed: u64,
    pub tau: f64,
    pub metrics: Metrics,
}

/// Held-out evaluation repeated over `cfg.seeds`.
pub fn eval_model(cfg: &RunConfig, maps: &[GridMap], model: &MultiExitModel<f32>, choice: TauChoice) -> Result<Vec<EvalRow>> {
    let prepared = model.prepare()?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let tau = match choice {
                TauChoice::Fixed(t) => t,
                TauChoice::FullDepth => FULL_DEPTH_TAU,
                TauChoice::Calibrate => calibrated_tau(cfg, maps, &prepared, seed)?,
            };
            let eps = test_episodes(cfg, maps, seed)?;
            let metrics = evaluate(&prepared, maps, &eps, tau, &cfg.nav())?;
            Ok(EvalRow { seed, tau, metrics })
        })
        .collect()
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.metrics.csv_row(r.tau));
    }
    out
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-seed lines followed by mean ± standard deviation of each metric.
pub fn eval_summary(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "seed {:>3}  tau {:>7.4}  sr {:.4}  spl {:.4}  exit_ratio {:.4}  latency_proxy {:.4}  entropy {:.4}  episodes {}",
            r.seed, r.tau, m.sr, m.spl, m.exit_ratio, m.latency_proxy, m.mean_entropy_at_exit, m.n_episodes
        );
    }
    let fields: [(&str, fn(&Metrics) -> f64); 5] = [
        ("sr", |m| m.sr),
        ("spl", |m| m.spl),
        ("exit_ratio", |m| m.exit_ratio),
        ("latency_proxy", |m| m.latency_proxy),
        ("mean_entropy_at_exit", |m| m.mean_entropy_at_exit),
    ];
    for (name, f) in fields {
        let v: Vec<f64> = rows.iter().map(|r| f(&r.metrics)).collect();
        let (mean, std) = mean_std(&v);
        let _ = writeln!(out, "{name:<22} {mean:.4} ± {std:.4}");
    }
    out
}

pub fn cmd_eval(cfg: &RunConfig, weights: &Path, choice: TauChoice, out: Option<&Path>) -> Result<Vec<EvalRow>> {
    let model = read_model(weights)?;
    let maps = load_maps(cfg)?;
    let rows = eval_model(cfg, &maps, &model, choice)?;
    if let Some(out) = out {
        write_bytes(out, eval_csv(&rows).as_bytes())?;
    }
    Ok(rows)
}

/// One configuration of the component ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub tau: f64,
    pub metrics: Metrics,
    pub weight_bytes: usize,
}

pub const ABLATION_CSV_HEADER: &str = "config,tau,sr,spl,exit_ratio,latency_proxy,mean_entropy_at_exit,n_episodes,weight_bytes";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.name, r.metrics.csv_row(r.tau), r.weight_bytes);
    }
    out
}

/// Baseline, quantization only, early exit only and both, on the held-out
/// episodes of `cfg.seed`. Both early-exit rows use the threshold
/// calibrated for the quantized model.
pub fn ablation(cfg: &RunConfig, maps: &[GridMap], dense: &MultiExitModel<f32>, quantized: &MultiExitModel<f32>) -> Result<Vec<AblationRow>> {
    if dense.mode != ModelMode::FullPrecision || quantized.mode != ModelMode::Quantized {
        return Err(structural("ablation needs one full-precision and one quantized model"));
    }
    let pd = dense.prepare()?;
    let pq = quantized.prepare()?;
    let tau = calibrated_tau(cfg, maps, &pq, cfg.seed)?;
    let eps = test_episodes(cfg, maps, cfg.seed)?;
    let nav = cfg.nav();
    let (bd, bq) = (encode(dense)?.len(), encode(quantized)?.len());
    let rows = [
        ("baseline", &pd, FULL_DEPTH_TAU, bd),
        ("quant_only", &pq, FULL_DEPTH_TAU, bq),
        ("dee_only", &pd, tau, bd),
        ("quant_dee", &pq, tau, bq),
    ];
    rows.into_iter()
        .map(|(name, p, tau, weight_bytes)| {
            Ok(AblationRow {
                name,
                tau,
                metrics: evaluate(p, maps, &eps, tau, &nav)?,
                weight_bytes,
            })
        })
        .collect()
}

/// Closed-loop sweep over the configured grid on the held-out episodes of
/// `cfg.seed`.
pub fn sweep_model(cfg: &RunConfig, maps: &[GridMap], model: &MultiExitModel<f32>) -> Result<SweepTable> {
    let eps = test_episodes(cfg, maps, cfg.seed)?;
    sweep_tau(&model.prepare()?, maps, &eps, &cfg.eval.tau_grid, &cfg.nav())
}

/// Writes the sweep CSV to `out` and, with a dense model, the ablation
/// table next to it.
pub fn cmd_sweep(cfg: &RunConfig, weights: &Path, dense: Option<&Path>, out: &Path) -> Result<(SweepTable, Option<Vec<AblationRow>>)> {
    let model = read_model(weights)?;
    let maps = load_maps(cfg)?;
    let table = sweep_model(cfg, &maps, &model)?;
    write_bytes(out, table.to_csv().as_bytes())?;
    let rows = match dense {
        None => None,
        Some(path) => {
            let dense = read_model(path)?;
            let rows = ablation(cfg, &maps, &dense, &model)?;
            write_bytes(&out.with_extension("ablation.csv"), ablation_csv(&rows).as_bytes())?;
            Some(rows)
        }
    };
    Ok((table, rows))
}

#[derive(Debug, Parser)]
#[command(name = "edgenav", version, about = "Quantized early-exit action models for grid-world navigation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the map directory.
    #[arg(long)]
    pub maps: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate connected random grid maps.
    Genmaps {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured map directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full-precision multi-exit model by behaviour cloning.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a dense weight file and attach fresh adapters.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune adapters and heads on a quantized weight file.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate on held-out maps, repeated over the configured seeds.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        /// Entropy threshold in nats; calibrated on validation maps when omitted.
        #[arg(long, conflicts_with = "full_depth", allow_negative_numbers = true)]
        tau: Option<f64>,
        /// Disable early exit.
        #[arg(long)]
        full_depth: bool,
        /// CSV report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the threshold grid; with --dense also write the ablation table.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = &common.maps {
        cfg.maps.dir = m.clone();
    }
    Ok(cfg)
}

fn print_logs(logs: &[EpochLog]) {
    for l in logs {
        let accs: Vec<String> = l.acc_exits.iter().map(|a| format!("{a:.3}")).collect();
        println!(
            "epoch {:>3} {:<5} loss {:.4}  acc_exits [{}]  acc_final {:.3}",
            l.epoch,
            l.split.name(),
            l.loss,
            accs.join(", "),
            l.acc_final
        );
    }
}

/// Runs one parsed command, printing its report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Genmaps { common, out } => {
            let cfg = load_config(&common)?;
            let dir = out.unwrap_or_else(|| cfg.maps.dir.clone());
            let paths = cmd_genmaps(&cfg, &dir)?;
            println!("wrote {} maps to {}", paths.len(), dir.display());
        }
        Command::Pretrain { common, out } => {
            let cfg = load_config(&common)?;
            let logs = cmd_pretrain(&cfg, &out)?;
            print_logs(&logs);
            println!("wrote {}", out.display());
        }
        Command::Quantize { common, input, out } => {
            let cfg = load_config(&common)?;
            let report = cmd_quantize(&cfg, &input, &out)?;
            println!("{:<16} {:>14} {:>12}", "tensor", "rel_frobenius", "max_abs");
            for (name, e) in &report {
                println!("{name:<16} {:>14.6} {:>12.6}", e.rel_frobenius, e.max_abs);
            }
            println!("wrote {}", out.display());
        }
        Command::Finetune { common, input, out } => {
            let cfg = load_config(&common)?;
            let logs = cmd_finetune(&cfg, &input, &out)?;
            print_logs(&logs);
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            weights,
            tau,
            full_depth,
            out,
        } => {
            let cfg = load_config(&common)?;
            let choice = match (tau, full_depth) {
                (_, true) => TauChoice::FullDepth,
                (Some(t), false) => TauChoice::Fixed(t),
                (None, false) => TauChoice::Calibrate,
            };
            let rows = cmd_eval(&cfg, &weights, choice, out.as_deref())?;
            print!("{}", eval_summary(&rows));
        }
        Command::Sweep {
            common,
            weights,
            dense,
            out,
        } => {
            let cfg = load_config(&common)?;
            let (table, ablation) = cmd_sweep(&cfg, &weights, dense.as_deref(), &out)?;
            print!("{}", table.to_csv());
            if let Some(rows) = ablation {
                print!("{}", ablation_csv(&rows));
            }
        }
    }
    Ok(())
}
