//! Experiment driver: reproducible commands over the `grat` library that
//! leave self-describing artifacts on disk.
//!
//! Every command resolves one [`ExperimentConfig`] (defaults → config
//! file → `key=value` overrides → output-root fallback), writes into
//! `<out_dir>/<tag>/`, and embeds the full resolved configuration and
//! seed in every file it produces, so any artifact can be traced back to
//! the exact run that made it and regenerated byte for byte.
//!
//! Exit codes: 0 success, 1 check failure (gradient tolerance exceeded,
//! training diverged), 2 configuration error (unknown keys, bad values,
//! unusable files, refusing to clobber an existing run directory).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use grat::checkpoint::Checkpoint;
use grat::error::{Error, Result};
use grat::experiment::{
    ablate_masks, ablate_placements, ablation_csv, evaluate, eval_dataset, generate_dataset,
    grad_suite, run_training, EvalSummary, ExperimentConfig,
};
use grat::propagation::{MetricRow, Model};
use grat::synthworld::{write_clip_jsonl, VideoClip};

/// Environment variable naming the default output root, used when the
/// config leaves `run.out_dir` empty.
pub const OUT_ROOT_ENV: &str = "GRAT_OUT_ROOT";

/// Output root used when neither the config nor the environment names one.
pub const DEFAULT_OUT_ROOT: &str = "runs";

/// `gradcheck` passes iff the suite's max relative error is below this.
pub const GRADCHECK_TOL: f64 = 1e-4;

// ── command line ───────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(name = "grat", version, about = "Gated residual attention tracker: experiment driver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training and held-out clip sets as JSONL
    GenData(RunArgs),
    /// Train a model; writes a checkpoint and the step-metric CSV
    Train(RunArgs),
    /// Evaluate a trained checkpoint on the held-out set
    Eval(EvalArgs),
    /// Train and evaluate all four attention masks over shared seeds
    AblateMask(SweepArgs),
    /// Train and evaluate all three gate placements over shared seeds
    AblatePlacement(SweepArgs),
    /// Count gated vs ungated FLOPs on the held-out set
    Flops(FlopsArgs),
    /// Run the finite-difference gradient suite
    Gradcheck(RunArgs),
}

/// Arguments shared by every subcommand.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file: flat `key = value` lines, '#' comments
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace the run directory if it already exists
    #[arg(long)]
    pub overwrite: bool,
    /// Overrides applied after the config file, e.g. `run.seed=3`
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate (its embedded model section wins)
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Optional checkpoint; defaults to a freshly initialized model
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of shared seeds per variant, starting at run.seed
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

/// What a successfully executed command concluded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The command ran, but a numeric check failed (exit 1).
    CheckFailure,
}

/// Maps an error to the process exit code: bad inputs and unusable files
/// are configuration errors (2); everything else is a failed check (1).
pub fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::BadConfig(_) | Error::BadScenario(_) | Error::BadFile(_) | Error::Io(_) => 2,
        _ => 1,
    }
}

// ── config resolution and run directories ──────────────────────────────

/// Builds the resolved config: file (or defaults), then overrides, then
/// the output-root fallback, then validation.
pub fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::BadConfig(format!("cannot read config '{}': {e}", path.display()))
            })?;
            ExperimentConfig::from_text(&text)?
        }
        None => ExperimentConfig::default(),
    };
    for pair in &args.overrides {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::BadConfig(format!("override '{pair}': expected key=value"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if cfg.out_dir.is_empty() {
        cfg.out_dir =
            std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| DEFAULT_OUT_ROOT.to_string());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out_dir>/<tag>/`. An existing run directory is never touched
/// unless `overwrite` is set, in which case it is replaced wholesale so
/// reruns cannot inherit stale artifacts.
pub fn prepare_run_dir(cfg: &ExperimentConfig, overwrite: bool) -> Result<PathBuf> {
    let dir = Path::new(&cfg.out_dir).join(&cfg.tag);
    if dir.exists() {
        if !overwrite {
            return Err(Error::BadConfig(format!(
                "run directory '{}' already exists; choose a new run.tag or pass --overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir).map_err(|e| Error::Io(e.to_string()))?;
    }
    fs::create_dir_all(&dir).map_err(|e| Error::Io(e.to_string()))?;
    Ok(dir)
}

// ── artifact helpers ───────────────────────────────────────────────────

/// The resolved config as CSV comment lines, so every artifact names the
/// run that produced it.
fn config_comment(cfg: &ExperimentConfig) -> String {
    let mut out = String::from("# resolved configuration:\n");
    for line in cfg.to_text().lines() {
        if line.starts_with('#') {
            continue;
        }
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)
        .map_err(|e| Error::Io(format!("writing '{}': {e}", path.display())))
}

fn write_csv(path: &Path, cfg: &ExperimentConfig, header: &str, rows: &[String]) -> Result<()> {
    let mut text = config_comment(cfg);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    write_file(path, &text)
}

/// One JSONL dataset file: a header record carrying the resolved config
/// and seed, then each clip's own records.
fn write_dataset(path: &Path, cfg: &ExperimentConfig, split: &str, clips: &[VideoClip]) -> Result<()> {
    let header = serde_json::json!({
        "split": split,
        "seed": cfg.seed,
        "clips": clips.len(),
        "config": cfg.to_text(),
    });
    let mut buf: Vec<u8> = Vec::new();
    {
        use std::io::Write;
        writeln!(&mut buf, "{header}").map_err(|e| Error::Io(e.to_string()))?;
    }
    for clip in clips {
        write_clip_jsonl(clip, &mut buf)?;
    }
    fs::write(path, buf).map_err(|e| Error::Io(format!("writing '{}': {e}", path.display())))
}

/// Loads a checkpoint and rebuilds its model. The checkpoint's embedded
/// model section overrides the run config's, since the arrays were shaped
/// by it; the caller's data/eval settings stay in force.
fn load_checkpoint_model(path: &Path, cfg: &mut ExperimentConfig) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    let ckpt_cfg = ExperimentConfig::from_text(&ckpt.config_text)?;
    cfg.model = ckpt_cfg.model;
    cfg.validate()?;
    let arrays: HashMap<String, (Vec<usize>, Vec<f64>)> = ckpt.array_map();
    Model::from_named(&cfg.model, &arrays)
}

// ── subcommands ────────────────────────────────────────────────────────

fn cmd_gen_data(args: &RunArgs) -> Result<Outcome> {
    let cfg = resolve_config(args)?;
    let dir = prepare_run_dir(&cfg, args.overwrite)?;
    let train_clips = generate_dataset(&cfg)?;
    let eval_clips = eval_dataset(&cfg)?;
    write_dataset(&dir.join("train_clips.jsonl"), &cfg, "train", &train_clips)?;
    write_dataset(&dir.join("eval_clips.jsonl"), &cfg, "eval", &eval_clips)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "gen-data: {} train + {} eval clips ({}) -> {}",
        train_clips.len(),
        eval_clips.len(),
        cfg.data.scenario.name(),
        dir.display()
    );
    Ok(Outcome::Success)
}

fn cmd_train(args: &RunArgs) -> Result<Outcome> {
    let cfg = resolve_config(args)?;
    let dir = prepare_run_dir(&cfg, args.overwrite)?;
    let trained = run_training(&cfg)?;
    Checkpoint::from_model(&cfg.to_text(), &trained.model).save(&dir.join("checkpoint.json"))?;
    let rows: Vec<String> = trained.metrics.iter().map(MetricRow::csv_row).collect();
    write_csv(&dir.join("metrics.csv"), &cfg, MetricRow::CSV_HEADER, &rows)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let last = trained.metrics.last();
    println!(
        "train: {} steps, final loss {:.4}, gate rate {:.3} -> {}",
        trained.metrics.len(),
        last.map_or(f64::NAN, |m| m.loss),
        last.map_or(f64::NAN, |m| m.gate_rate),
        dir.display()
    );
    Ok(Outcome::Success)
}

fn cmd_eval(args: &EvalArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&args.run)?;
    let model = load_checkpoint_model(&args.checkpoint, &mut cfg)?;
    let dir = prepare_run_dir(&cfg, args.run.overwrite)?;
    let summary = evaluate(&cfg, &model)?;
    write_csv(
        &dir.join("eval_metrics.csv"),
        &cfg,
        EvalSummary::CSV_HEADER,
        &[summary.csv_row()],
    )?;
    let series: Vec<String> = summary
        .gate_stats
        .per_frame
        .iter()
        .map(|f| format!("{},{}", f.frame, f.fraction))
        .collect();
    write_csv(&dir.join("gate_series.csv"), &cfg, "frame,mean_gate", &series)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "eval: recall {:.3} precision {:.3} id-switches {:.2} gate rate {:.3} flops ratio {:.3} -> {}",
        summary.mean_recall,
        summary.mean_precision,
        summary.mean_id_switches,
        summary.gate_rate,
        summary.flops.ratio,
        dir.display()
    );
    Ok(Outcome::Success)
}

fn sweep_seeds(cfg: &ExperimentConfig, count: u64) -> Result<Vec<u64>> {
    if count == 0 {
        return Err(Error::BadConfig("--seeds must be at least 1".into()));
    }
    Ok((cfg.seed..cfg.seed + count).collect())
}

fn cmd_ablate_mask(args: &SweepArgs) -> Result<Outcome> {
    let cfg = resolve_config(&args.run)?;
    let dir = prepare_run_dir(&cfg, args.run.overwrite)?;
    let seeds = sweep_seeds(&cfg, args.seeds)?;
    let rows = ablate_masks(&cfg, &seeds)?;
    let body = ablation_csv("mask_config", &rows);
    write_file(&dir.join("ablate_mask.csv"), &format!("{}{body}", config_comment(&cfg)))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    println!("ablate-mask: {} cells (4 masks x {} seeds) -> {}", rows.len(), seeds.len(), dir.display());
    Ok(Outcome::Success)
}

fn cmd_ablate_placement(args: &SweepArgs) -> Result<Outcome> {
    let cfg = resolve_config(&args.run)?;
    let dir = prepare_run_dir(&cfg, args.run.overwrite)?;
    let seeds = sweep_seeds(&cfg, args.seeds)?;
    let rows = ablate_placements(&cfg, &seeds)?;
    let body = ablation_csv("placement", &rows);
    write_file(&dir.join("ablate_placement.csv"), &format!("{}{body}", config_comment(&cfg)))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "ablate-placement: {} cells (3 placements x {} seeds) -> {}",
        rows.len(),
        seeds.len(),
        dir.display()
    );
    Ok(Outcome::Success)
}

fn cmd_flops(args: &FlopsArgs) -> Result<Outcome> {
    let mut cfg = resolve_config(&args.run)?;
    let model = match &args.checkpoint {
        Some(path) => load_checkpoint_model(path, &mut cfg)?,
        None => Model::init(&cfg.model, cfg.seed)?,
    };
    let dir = prepare_run_dir(&cfg, args.run.overwrite)?;
    let summary = evaluate(&cfg, &model)?;
    let report = serde_json::json!({
        "seed": cfg.seed,
        "config": cfg.to_text(),
        "gate_rate": summary.gate_rate,
        "report": summary.flops,
    });
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?;
    write_file(&dir.join("flops.json"), &text)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    println!(
        "flops: gated {} vs ungated {} (ratio {:.4}) -> {}",
        summary.flops.total,
        summary.flops.ungated_total,
        summary.flops.ratio,
        dir.display()
    );
    Ok(Outcome::Success)
}

fn cmd_gradcheck(args: &RunArgs) -> Result<Outcome> {
    let cfg = resolve_config(args)?;
    let dir = prepare_run_dir(&cfg, args.overwrite)?;
    let report = grad_suite(cfg.seed)?;
    let doc = serde_json::json!({
        "seed": cfg.seed,
        "config": cfg.to_text(),
        "tolerance": GRADCHECK_TOL,
        "max_rel_err": report.max_rel_err,
        "cases": report.cases,
    });
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Io(e.to_string()))?;
    write_file(&dir.join("gradcheck.json"), &text)?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    for case in &report.cases {
        println!("  {:<40} {:.3e}", case.name, case.max_rel_err);
    }
    println!("gradcheck: max relative error {:.6e} (tolerance {GRADCHECK_TOL:e})", report.max_rel_err);
    if report.max_rel_err < GRADCHECK_TOL {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::CheckFailure)
    }
}

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<Outcome> {
    match &cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::AblateMask(args) => cmd_ablate_mask(args),
        Command::AblatePlacement(args) => cmd_ablate_placement(args),
        Command::Flops(args) => cmd_flops(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}
