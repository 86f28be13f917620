//! `mmsel`: coreset selection over precomputed image/text embeddings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmsel_core::adapter::{fit_adapters, load_adapters, save_adapters, AdaptConfig, AdapterPair};
use mmsel_core::pipeline::{run_pipeline, PipelineConfig, SelectionSummary};
use mmsel_core::scoring::{load_scores, save_scores, score_all, score_report, scores_csv, ScoreConfig};
use mmsel_core::selector::{emit_manifest, optimize_selection, SelectConfig};
use mmsel_core::store::{inspect_store, load_store, save_store};
use mmsel_core::synth::{generate, truth_path_for, write_truth_csv, SynthSpec};
use mmsel_core::{Error, Result};

#[derive(Parser)]
#[command(name = "mmsel", version, about = "Multimodal coreset selection over embedding stores")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic embedding store plus its ground-truth CSV.
    Synth(SynthCmd),
    /// Validate an embedding store and print its header as JSON.
    Inspect {
        store: PathBuf,
    },
    /// Fit the image and text adapters.
    Adapt(AdaptCmd),
    /// Compute alignment and diversity scores.
    Score(ScoreCmd),
    /// Choose a subset of the requested size from a score file.
    Select(SelectCmd),
    /// Run adapt, score and select end to end.
    Pipeline(PipelineCmd),
}

#[derive(Args)]
struct SynthCmd {
    /// JSON file with generator settings; missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct AdaptFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    blend: Option<f64>,
}

impl AdaptFlags {
    fn apply(&self, cfg: &mut AdaptConfig) {
        set(&mut cfg.epochs, self.epochs);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.momentum, self.momentum);
        set(&mut cfg.temperature, self.temperature);
        set(&mut cfg.blend, self.blend);
    }
}

#[derive(Args, Default)]
struct ScoreFlags {
    /// Fraction of each class used as neighbours for diversity.
    #[arg(long)]
    k_fraction: Option<f64>,
    /// Measure diversity on unit-normalized adapted features.
    #[arg(long)]
    normalized_sds: bool,
}

impl ScoreFlags {
    fn apply(&self, cfg: &mut ScoreConfig) {
        set(&mut cfg.k_fraction, self.k_fraction);
        if self.normalized_sds {
            cfg.normalize_sds_features = true;
        }
    }
}

#[derive(Args, Default)]
struct SelectFlags {
    /// Diversity weight; defaults to the target ratio.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

impl SelectFlags {
    fn apply(&self, cfg: &mut SelectConfig) {
        if self.alpha.is_some() {
            cfg.alpha = self.alpha;
        }
        set(&mut cfg.beta, self.beta);
        set(&mut cfg.theta, self.theta);
        set(&mut cfg.max_iterations, self.max_iters);
    }
}

#[derive(Args)]
struct AdaptCmd {
    #[arg(long)]
    store: PathBuf,
    /// Adapter checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch JSONL log; defaults to the checkpoint path with a .jsonl extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: AdaptFlags,
}

#[derive(Args)]
struct ScoreCmd {
    #[arg(long)]
    store: PathBuf,
    /// Adapter checkpoint; without it raw embeddings are scored.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Binary score file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-sample CSV; defaults to the score path with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Optional JSON summary with per-class statistics and histograms.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    flags: ScoreFlags,
}

#[derive(Args)]
struct SelectCmd {
    /// Store the scores were computed from; supplies sample ids.
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    ratio: f64,
    /// Manifest JSON to write; a CSV twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lr: Option<f64>,
    /// Recorded only; the descent is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: SelectFlags,
}

#[derive(Args)]
struct PipelineCmd {
    /// JSON config; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Ground-truth CSV from `synth`; adds selection metrics to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Zero all wall-clock fields so reruns are byte-identical.
    #[arg(long)]
    no_timings: bool,
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    adapt_seed: Option<u64>,
    #[arg(long)]
    select_lr: Option<f64>,
    #[arg(long)]
    select_seed: Option<u64>,
    #[command(flatten)]
    adapt: AdaptFlags,
    #[command(flatten)]
    score: ScoreFlags,
    #[command(flatten)]
    select: SelectFlags,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn cmd_synth(cmd: SynthCmd) -> Result<()> {
    let mut spec: SynthSpec = match &cmd.spec {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Error::SpecInvalid(format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    set(&mut spec.seed, cmd.seed);
    spec.validate()?;
    let world = generate(&spec)?;
    save_store(&world.table, &world.bank, &cmd.out)?;
    let truth = truth_path_for(&cmd.out);
    write_truth_csv(&world, &truth)?;
    eprintln!(
        "wrote {} samples, {} classes to {} (truth: {})",
        world.table.n(),
        world.bank.k(),
        cmd.out.display(),
        truth.display()
    );
    Ok(())
}

fn cmd_inspect(store: PathBuf) -> Result<()> {
    let header = inspect_store(&store)?;
    load_store(&store)?;
    println!("{}", serde_json::to_string_pretty(&header)?);
    Ok(())
}

fn cmd_adapt(cmd: AdaptCmd) -> Result<()> {
    let mut cfg = AdaptConfig::default();
    cmd.flags.apply(&mut cfg);
    set(&mut cfg.learning_rate, cmd.lr);
    set(&mut cfg.seed, cmd.seed);
    cfg.validate()?;
    let (table, bank) = load_store(&cmd.store)?;
    let (pair, log) = fit_adapters(&table, &bank, &cfg)?;
    save_adapters(&pair, &cmd.out)?;
    let log_path = cmd.log.unwrap_or_else(|| cmd.out.with_extension("jsonl"));
    log.write_jsonl(&log_path)?;
    if let (Some(first), Some(last)) = (log.epochs.first(), log.epochs.last()) {
        eprintln!("epochs {}: loss {:.6} -> {:.6}", log.epochs.len(), first.mean_loss, last.mean_loss);
    }
    Ok(())
}

fn cmd_score(cmd: ScoreCmd) -> Result<()> {
    let mut cfg = ScoreConfig::default();
    cmd.flags.apply(&mut cfg);
    cfg.validate()?;
    let (table, bank) = load_store(&cmd.store)?;
    let pair = match &cmd.adapters {
        Some(p) => load_adapters(p)?,
        None => AdapterPair::passthrough(table.dim()),
    };
    let scores = score_all(&table, &bank, &pair, &cfg)?;
    save_scores(&scores, &cmd.out)?;
    let csv_path = cmd.csv.unwrap_or_else(|| cmd.out.with_extension("csv"));
    fs::write(&csv_path, scores_csv(&scores, &table)?)?;
    if let Some(p) = &cmd.report {
        fs::write(p, score_report(&scores, &table)?.to_json()? + "\n")?;
    }
    eprintln!("scored {} samples", scores.len());
    Ok(())
}

fn cmd_select(cmd: SelectCmd) -> Result<()> {
    let mut cfg = SelectConfig::default();
    cmd.flags.apply(&mut cfg);
    set(&mut cfg.learning_rate, cmd.lr);
    set(&mut cfg.seed, cmd.seed);
    cfg.validate()?;
    if !(cmd.ratio > 0.0 && cmd.ratio < 1.0) {
        return Err(Error::RatioOutOfRange(cmd.ratio));
    }
    let (table, _) = load_store(&cmd.store)?;
    let scores = load_scores(&cmd.scores)?;
    if scores.len() != table.n() {
        return Err(Error::LengthMismatch {
            expected: table.n(),
            found: scores.len(),
        });
    }
    let state = optimize_selection(&scores, cmd.ratio, &cfg)?;
    emit_manifest(&state, &table, &cmd.out)?;
    let summary = SelectionSummary::of(&state);
    eprintln!(
        "selected {}/{} (ratio {:.6}, iterations {}, fallback {})",
        summary.n_selected,
        table.n(),
        summary.achieved_ratio,
        summary.iterations_run,
        summary.fallback_used
    );
    Ok(())
}

fn cmd_pipeline(cmd: PipelineCmd) -> Result<()> {
    let mut cfg = match &cmd.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    set(&mut cfg.store_path, cmd.store);
    set(&mut cfg.output_dir, cmd.out_dir);
    set(&mut cfg.ratio, cmd.ratio);
    if cmd.truth.is_some() {
        cfg.truth_path = cmd.truth;
    }
    if cmd.no_timings {
        cfg.record_timings = false;
    }
    cmd.adapt.apply(&mut cfg.adapt);
    cmd.score.apply(&mut cfg.score);
    cmd.select.apply(&mut cfg.select);
    set(&mut cfg.adapt.learning_rate, cmd.adapt_lr);
    set(&mut cfg.adapt.seed, cmd.adapt_seed);
    set(&mut cfg.select.learning_rate, cmd.select_lr);
    set(&mut cfg.select.seed, cmd.select_seed);
    if cfg.store_path.as_os_str().is_empty() {
        return Err(Error::ConfigInvalid("no store given (--store or store_path)".into()));
    }
    let outcome = run_pipeline(&cfg)?;
    let sel = &outcome.report.selection;
    let t = &outcome.report.stage_wall_ms;
    eprintln!(
        "selected {}/{} in {} (adapt {} ms, score {} ms, select {} ms)",
        sel.n_selected,
        outcome.report.n,
        cfg.output_dir.display(),
        t.adapt_ms,
        t.score_ms,
        t.select_ms
    );
    if let Some(m) = &outcome.report.metrics {
        write_json(m, &cfg.output_dir.join("metrics.json"))?;
        eprintln!("noisy fraction {:.4}, corrupted fraction {:.4}", m.noisy_fraction, m.corrupted_fraction);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => cmd_synth(c),
        Command::Inspect { store } => cmd_inspect(store),
        Command::Adapt(c) => cmd_adapt(c),
        Command::Score(c) => cmd_score(c),
        Command::Select(c) => cmd_select(c),
        Command::Pipeline(c) => cmd_pipeline(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
