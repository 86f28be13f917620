//! adapt -> score -> select, with on-disk outputs and a run report.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{fit_adapters, save_adapters, AdaptConfig, AdapterPair, TrainingLog};
use crate::error::{Error, Result};
use crate::scoring::{score_all, score_report, save_scores, scores_csv, ScoreConfig, ScoreVector, Summary};
use crate::selector::{emit_manifest, optimize_selection, LossBreakdown, Manifest, SelectConfig, SelectionState};
use crate::store::{load_store, ClassTextBank, EmbeddingTable};
use crate::synth::{read_truth_csv, selection_metrics, SelectionMetrics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub store_path: PathBuf,
    pub output_dir: PathBuf,
    pub ratio: f64,
    pub score: ScoreConfig,
    pub adapt: AdaptConfig,
    pub select: SelectConfig,
    /// Optional ground-truth CSV; when present the report carries selection metrics.
    pub truth_path: Option<PathBuf>,
    /// Write wall-clock fields. Off makes every output byte-reproducible.
    pub record_timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            store_path: PathBuf::new(),
            output_dir: PathBuf::from("out"),
            ratio: 0.3,
            score: ScoreConfig::default(),
            adapt: AdaptConfig::default(),
            select: SelectConfig::default(),
            truth_path: None,
            record_timings: true,
        }
    }
}

impl PipelineConfig {
    /// Parses a JSON config. Missing keys take defaults, unknown keys are
    /// rejected as [`Error::ConfigInvalid`].
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::RatioOutOfRange(self.ratio));
        }
        self.score.validate()?;
        self.adapt.validate()?;
        self.select.validate()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub adapt_ms: u64,
    pub score_ms: u64,
    pub select_ms: u64,
}

/// Everything a pipeline run produces, in memory.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub adapters: AdapterPair,
    pub log: TrainingLog,
    pub scores: ScoreVector,
    pub state: SelectionState,
    pub timings: StageTimings,
}

fn ms(since: Instant) -> u64 {
    since.elapsed().as_millis() as u64
}

/// Runs the three stages on an in-memory dataset.
pub fn run_stages(table: &EmbeddingTable, bank: &ClassTextBank, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let t = Instant::now();
    let (adapters, log) = fit_adapters(table, bank, &cfg.adapt)?;
    let adapt_ms = ms(t);
    let t = Instant::now();
    let scores = score_all(table, bank, &adapters, &cfg.score)?;
    let score_ms = ms(t);
    let t = Instant::now();
    let state = optimize_selection(&scores, cfg.ratio, &cfg.select)?;
    let select_ms = ms(t);
    Ok(PipelineRun {
        adapters,
        log,
        scores,
        state,
        timings: StageTimings {
            adapt_ms,
            score_ms,
            select_ms,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionSummary {
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub ratio_deviation: f64,
    pub n_selected: usize,
    pub target_count: usize,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub iterations_run: usize,
    pub converged: bool,
    pub fallback_used: bool,
    pub final_loss: LossBreakdown,
}

impl SelectionSummary {
    pub fn of(state: &SelectionState) -> Self {
        Self {
            target_ratio: state.target_ratio,
            achieved_ratio: state.achieved_ratio(),
            ratio_deviation: state.ratio_deviation(),
            n_selected: state.selected_count(),
            target_count: state.target_count,
            alpha: state.alpha,
            beta: state.beta,
            theta: state.theta,
            iterations_run: state.iterations_run,
            converged: state.converged,
            fallback_used: state.fallback_used,
            final_loss: state.final_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSummary {
    pub sas: Summary,
    pub sds: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub stage_wall_ms: StageTimings,
    pub adapt: AdaptSummary,
    pub scores: ScoreSummary,
    pub selection: SelectionSummary,
    pub metrics: Option<SelectionMetrics>,
}

impl PipelineReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Files written by [`run_pipeline`], relative to the output directory.
pub mod files {
    pub const ADAPTERS: &str = "adapters.adp";
    pub const ADAPT_LOG: &str = "adapt_log.jsonl";
    pub const SCORES: &str = "scores.scr";
    pub const SCORES_CSV: &str = "scores.csv";
    pub const SCORE_REPORT: &str = "score_report.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const MANIFEST_CSV: &str = "manifest.csv";
    pub const REPORT: &str = "report.json";
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub run: PipelineRun,
    pub manifest: Manifest,
    pub report: PipelineReport,
}

/// Loads the store, runs every stage and writes all outputs to `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let (table, bank) = load_store(&cfg.store_path)?;
    let truth = cfg.truth_path.as_ref().map(read_truth_csv).transpose()?;
    let mut run = run_stages(&table, &bank, cfg)?;
    if !cfg.record_timings {
        run.timings = StageTimings::default();
        run.log = run.log.without_timings();
    }

    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    save_adapters(&run.adapters, out.join(files::ADAPTERS))?;
    run.log.write_jsonl(out.join(files::ADAPT_LOG))?;
    save_scores(&run.scores, out.join(files::SCORES))?;
    fs::write(out.join(files::SCORES_CSV), scores_csv(&run.scores, &table)?)?;
    let score_rep = score_report(&run.scores, &table)?;
    fs::write(out.join(files::SCORE_REPORT), score_rep.to_json()? + "\n")?;
    emit_manifest(&run.state, &table, out.join(files::MANIFEST))?;

    let metrics = truth
        .map(|t| selection_metrics(&run.state, &t, &run.scores, table.labels()))
        .transpose()?;
    let first = run.log.epochs.first().map_or(f64::NAN, |e| e.mean_loss);
    let last = run.log.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    let report = PipelineReport {
        config: cfg.clone(),
        n: table.n(),
        k: bank.k(),
        dim: table.dim(),
        stage_wall_ms: run.timings,
        adapt: AdaptSummary {
            epochs: run.log.epochs.len(),
            first_epoch_loss: first,
            final_epoch_loss: last,
        },
        scores: ScoreSummary {
            sas: score_rep.sas.clone(),
            sds: score_rep.sds.clone(),
        },
        selection: SelectionSummary::of(&run.state),
        metrics,
    };
    fs::write(out.join(files::REPORT), report.to_json()?)?;
    let manifest = Manifest::new(&run.state, &table)?;
    Ok(PipelineOutcome { run, manifest, report })
}
