//! Ratio-constrained sample selection by gradient descent.
//!
//! Every sample owns a real decision parameter `d_i`, started at 1. The
//! objective is
//!
//! ```text
//! L = L_sa + alpha * L_sd + beta * L_s
//! L_sa = -(1/N) sum sigmoid(d_i) * sas_i
//! L_sd = -(1/N) sum sigmoid(d_i) * sds_i        (sds min-max scaled to [0, 1])
//! L_s  = | (1/N) sum 1[sigmoid(d_i) > 0.5] - s_r |
//! ```
//!
//! The indicator in `L_s` is differentiated straight through, as if it were
//! `sigmoid(d_i)`. After descent the parameters are binarized at
//! `sigmoid(d_i) > 0.5`. If the resulting count misses the target, the top
//! `d` values are taken instead and the result is flagged.
//!
//! With a shared start point and full-batch steps the update of `d_i`
//! depends only on `d_i` and the combined score `sas_i + alpha * sds_i`, and it
//! is increasing in both, so the ranking of `d` never contradicts the ranking
//! of the combined score.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreVector;
use crate::store::EmbeddingTable;

pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_THETA: f64 = 5e-4;
pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_MAX_ITERATIONS: usize = 2_000;
/// Window (in iterations) and tolerance of the loss-plateau stopping test.
pub const PLATEAU_WINDOW: usize = 20;
pub const PLATEAU_TOLERANCE: f64 = 1e-7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// The binarization rule.
pub fn is_selected(d: f64) -> bool {
    sigmoid(d) > 0.5
}

pub fn binarize(d: &[f64]) -> Vec<bool> {
    d.iter().map(|&v| is_selected(v)).collect()
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { expected: a, found: b });
    }
    Ok(())
}

fn check_ratio(s_r: f64) -> Result<()> {
    if !(s_r > 0.0 && s_r < 1.0) {
        return Err(Error::RatioOutOfRange(s_r));
    }
    Ok(())
}

fn weighted_mean_loss(d: &[f64], score: &[f64]) -> Result<f64> {
    check_len(d.len(), score.len())?;
    if d.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = d.iter().zip(score).map(|(&di, &si)| sigmoid(di) * si).sum();
    Ok(-s / d.len() as f64)
}

/// Alignment term `-(1/N) sum sigmoid(d_i) * sas_i`.
pub fn loss_sa(d: &[f64], sas: &[f64]) -> Result<f64> {
    weighted_mean_loss(d, sas)
}

/// Diversity term, same form as [`loss_sa`].
pub fn loss_sd(d: &[f64], sds: &[f64]) -> Result<f64> {
    weighted_mean_loss(d, sds)
}

/// Ratio term and its straight-through gradient `sign(m - s_r) * sigmoid'(d_i) / N`.
pub fn loss_ratio(d: &[f64], s_r: f64) -> Result<(f64, Vec<f64>)> {
    check_ratio(s_r)?;
    let n = d.len() as f64;
    let count = d.iter().filter(|&&v| is_selected(v)).count();
    let dev = count as f64 / n - s_r;
    let sign = if dev > 0.0 {
        1.0
    } else if dev < 0.0 {
        -1.0
    } else {
        0.0
    };
    let grad = d.iter().map(|&v| sign * sigmoid_grad(v) / n).collect();
    Ok((dev.abs(), grad))
}

/// Min-max scales `sds` to `[0, 1]`; a constant vector maps to zeros.
pub fn normalize_sds(sds: &[f64]) -> Vec<f64> {
    let lo = sds.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; sds.len()];
    }
    sds.iter().map(|&v| (v - lo) / span).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Recorded for provenance. Full-batch descent draws no random numbers.
    pub seed: u64,
    pub theta: f64,
    /// Weight of the diversity term; `None` means "equal to the target ratio".
    pub alpha: Option<f64>,
    pub beta: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            seed: 0,
            theta: DEFAULT_THETA,
            alpha: None,
            beta: DEFAULT_BETA,
        }
    }
}

impl SelectConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.theta >= 0.0 && self.theta.is_finite()) {
            return bad(format!("theta must be finite and >= 0, got {}", self.theta));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("alpha must be finite and >= 0, got {a}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        Ok(())
    }

    pub fn alpha_for(&self, s_r: f64) -> f64 {
        self.alpha.unwrap_or(s_r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub sa: f64,
    pub sd: f64,
    pub ratio: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionState {
    pub d: Vec<f64>,
    pub target_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub mask: Vec<bool>,
    pub iterations_run: usize,
    /// Stopping rule met before `max_iterations`.
    pub converged: bool,
    pub fallback_used: bool,
    /// Popcount the mask must have when the fallback cut is applied.
    pub target_count: usize,
    pub final_loss: LossBreakdown,
}

impl SelectionState {
    pub fn n(&self) -> usize {
        self.mask.len()
    }

    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn achieved_ratio(&self) -> f64 {
        self.selected_count() as f64 / self.n() as f64
    }

    pub fn ratio_deviation(&self) -> f64 {
        self.achieved_ratio() - self.target_ratio
    }

    pub fn selected_indices(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.mask[i]).collect()
    }
}

/// Selection counts accepted without the fallback cut, and the count the
/// fallback uses.
///
/// Accepted counts are `floor(s_r N)` and `ceil(s_r N)` when they lie within
/// `theta` of the target; if neither does, only the closest count is accepted.
pub fn admissible_counts(n: usize, s_r: f64, theta: f64) -> (Vec<usize>, usize) {
    let exact = s_r * n as f64;
    let lo = (exact + 1e-9).floor() as usize;
    let hi = ((exact - 1e-9).ceil() as usize).max(lo);
    let closest = if exact - lo as f64 <= hi as f64 - exact { lo } else { hi };
    let closest = closest.max(1).min(n);
    let within = |c: usize| (c as f64 / n as f64 - s_r).abs() <= theta + 1e-12;
    let mut ok: Vec<usize> = [lo, hi].into_iter().filter(|&c| c >= 1 && within(c)).collect();
    ok.dedup();
    if ok.is_empty() {
        ok.push(closest);
    }
    let target = if ok.contains(&closest) { closest } else { ok[0] };
    (ok, target)
}

/// Indices of the `count` largest values, ties by ascending index.
pub fn top_by_value(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn breakdown(d: &[f64], sas: &[f64], sds: &[f64], s_r: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let sa = loss_sa(d, sas)?;
    let sd = loss_sd(d, sds)?;
    let (ratio, _) = loss_ratio(d, s_r)?;
    let total = sa + alpha * sd + beta * ratio;
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss(format!("selection loss evaluated to {total}")));
    }
    Ok(LossBreakdown { sa, sd, ratio, total })
}

/// Runs the descent and binarizes.
///
/// Steps are taken on the per-sample gradient `N * dL/dd`, so the learning
/// rate means the same thing for every dataset size. Stops once `L_s <= theta`
/// and the total loss moved less than [`PLATEAU_TOLERANCE`] over the last
/// [`PLATEAU_WINDOW`] iterations, or after `max_iterations` updates.
pub fn optimize_selection(scores: &ScoreVector, s_r: f64, cfg: &SelectConfig) -> Result<SelectionState> {
    cfg.validate()?;
    check_ratio(s_r)?;
    scores.validate()?;
    let n = scores.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let alpha = cfg.alpha_for(s_r);
    let beta = cfg.beta;
    let sas = &scores.sas;
    let sds = normalize_sds(&scores.sds);
    let (admissible, target_count) = admissible_counts(n, s_r, cfg.theta);

    let mut d = vec![1.0; n];
    let mut history: Vec<f64> = Vec::with_capacity(cfg.max_iterations + 1);
    let mut iterations_run = 0;
    let mut converged = false;
    let nf = n as f64;
    // Running sums at the current d: selected count, sum sigmoid*sas, sum sigmoid*sds.
    let mut sums = (0usize, 0.0f64, 0.0f64);
    for i in 0..n {
        let s = sigmoid(d[i]);
        sums.0 += (s > 0.5) as usize;
        sums.1 += s * sas[i];
        sums.2 += s * sds[i];
    }
    loop {
        let dev = sums.0 as f64 / nf - s_r;
        let ratio = dev.abs();
        let total = -sums.1 / nf + alpha * (-sums.2 / nf) + beta * ratio;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(format!("selection loss evaluated to {total}")));
        }
        history.push(total);
        let t = history.len() - 1;
        if ratio <= cfg.theta && t >= PLATEAU_WINDOW && (total - history[t - PLATEAU_WINDOW]).abs() < PLATEAU_TOLERANCE {
            converged = true;
            break;
        }
        if iterations_run == cfg.max_iterations {
            break;
        }
        // Straight-through ratio gradient, scaled by N like the other terms.
        let sign = if dev > 0.0 {
            1.0
        } else if dev < 0.0 {
            -1.0
        } else {
            0.0
        };
        sums = (0, 0.0, 0.0);
        for i in 0..n {
            let sg = sigmoid_grad(d[i]);
            let grad = -sg * sas[i] + alpha * (-sg * sds[i]) + beta * sign * sg;
            d[i] -= cfg.learning_rate * grad;
            if !d[i].is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "decision parameter {i} diverged at iteration {iterations_run}"
                )));
            }
            let s = sigmoid(d[i]);
            sums.0 += (s > 0.5) as usize;
            sums.1 += s * sas[i];
            sums.2 += s * sds[i];
        }
        iterations_run += 1;
    }

    let mut mask = binarize(&d);
    let count = mask.iter().filter(|&&m| m).count();
    let fallback_used = !admissible.contains(&count);
    if fallback_used {
        mask = vec![false; n];
        for i in top_by_value(&d, target_count) {
            mask[i] = true;
        }
    }
    let final_loss = breakdown(&d, sas, &sds, s_r, alpha, beta)?;
    Ok(SelectionState {
        d,
        target_ratio: s_r,
        alpha,
        beta,
        theta: cfg.theta,
        mask,
        iterations_run,
        converged,
        fallback_used,
        target_count,
        final_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub target_ratio: f64,
    pub achieved_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
    pub fallback_used: bool,
    pub n_total: usize,
    pub n_selected: usize,
    pub selected: Vec<String>,
}

impl Manifest {
    pub fn new(state: &SelectionState, table: &EmbeddingTable) -> Result<Self> {
        check_len(table.n(), state.n())?;
        let selected: Vec<String> = state
            .selected_indices()
            .into_iter()
            .map(|i| table.sample_ids()[i].clone())
            .collect();
        Ok(Self {
            target_ratio: state.target_ratio,
            achieved_ratio: state.achieved_ratio(),
            alpha: state.alpha,
            beta: state.beta,
            theta: state.theta,
            fallback_used: state.fallback_used,
            n_total: state.n(),
            n_selected: selected.len(),
            selected,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// `index,sample_id` rows of the selected samples, in index order.
pub fn manifest_csv(state: &SelectionState, table: &EmbeddingTable) -> Result<String> {
    check_len(table.n(), state.n())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "sample_id"])?;
    for i in state.selected_indices() {
        w.write_record([i.to_string().as_str(), table.sample_ids()[i].as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes the JSON manifest to `path` and its CSV twin next to it.
/// Returns the CSV path.
pub fn emit_manifest(state: &SelectionState, table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let manifest = Manifest::new(state, table)?;
    fs::write(path, manifest.to_json()?)?;
    let csv_path = path.with_extension("csv");
    fs::write(&csv_path, manifest_csv(state, table)?)?;
    Ok(csv_path)
}
