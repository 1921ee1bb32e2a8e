//! Accuracy metrics and grid-search recalibration of the power exponent.
//!
//! A calibration cycle re-simulates a span of recent history once per grid
//! candidate, scores each candidate by MAPE against the measured power, and
//! hands the best exponent to the next simulation run.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CalibrationResult, CandidateScore, TelemetrySample, Timestamp, Window, WorkloadTask,
    MAPE_EPSILON_W, R_MAX, R_MIN,
};
use crate::simengine::{simulate_window, SimConfig, SimError, SimState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CalibrationError {
    #[error("no matched samples between measured and simulated series")]
    NoOverlap,
    #[error("history holds {found} usable samples, {required} required")]
    InsufficientHistory { found: usize, required: usize },
    #[error("history has no sample with utilization strictly inside (0, 1)")]
    DegenerateHistory,
    #[error("every calibration candidate failed")]
    AllCandidatesFailed,
    #[error("invalid calibration config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Candidate exponents, strictly increasing.
    pub grid: Vec<f64>,
    /// Seconds of trailing history each cycle re-simulates.
    pub history_span: i64,
    pub min_history_samples: usize,
    pub enabled: bool,
}

impl CalibrationConfig {
    /// Default configuration for a given window duration: the full grid and
    /// four windows of history.
    pub fn for_window(window_duration: i64) -> Self {
        Self {
            grid: default_grid(),
            history_span: 4 * window_duration,
            min_history_samples: 6,
            enabled: true,
        }
    }

    pub fn validate(&self, window_duration: i64) -> Result<(), CalibrationError> {
        if self.grid.is_empty() {
            return Err(CalibrationError::InvalidConfig("grid is empty"));
        }
        if self.grid.windows(2).any(|p| p[1] <= p[0]) {
            return Err(CalibrationError::InvalidConfig("grid not strictly increasing"));
        }
        if self.grid.iter().any(|r| !(R_MIN..=R_MAX).contains(r)) {
            return Err(CalibrationError::InvalidConfig("grid outside exponent bounds"));
        }
        if self.history_span <= 0 || self.history_span % window_duration != 0 {
            return Err(CalibrationError::InvalidConfig(
                "history_span must be a positive multiple of the window duration",
            ));
        }
        if self.min_history_samples == 0 {
            return Err(CalibrationError::InvalidConfig("min_history_samples"));
        }
        Ok(())
    }

    pub fn history_windows(&self, window_duration: i64) -> usize {
        (self.history_span / window_duration) as usize
    }
}

/// `0.5, 0.75, ..., 4.0`.
pub fn default_grid() -> Vec<f64> {
    (0..=14).map(|i| 0.5 + 0.25 * f64::from(i)).collect()
}

/// Measured/simulated power pairs matched on timestamp, skipping measured
/// values under [`MAPE_EPSILON_W`].
fn matched_pairs<'a>(
    real: &'a [TelemetrySample],
    sim: &'a [TelemetrySample],
) -> impl Iterator<Item = (Timestamp, f64, f64)> + 'a {
    let by_ts: BTreeMap<Timestamp, f64> = sim.iter().map(|s| (s.timestamp, s.power_draw)).collect();
    real.iter()
        .filter(|r| r.power_draw >= MAPE_EPSILON_W)
        .filter_map(move |r| by_ts.get(&r.timestamp).map(|&s| (r.timestamp, r.power_draw, s)))
}

/// Mean absolute percentage error of `sim_series` against `real_series`.
pub fn mape(
    real_series: &[TelemetrySample],
    sim_series: &[TelemetrySample],
) -> Result<f64, CalibrationError> {
    let (sum, n) = matched_pairs(real_series, sim_series)
        .fold((0.0, 0usize), |(sum, n), (_, r, s)| (sum + ((r - s) / r).abs(), n + 1));
    if n == 0 {
        return Err(CalibrationError::NoOverlap);
    }
    Ok(sum / n as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bias {
    Over,
    Under,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub per_sample: Vec<(Timestamp, Bias)>,
    pub underestimated_fraction: f64,
    pub overestimated_fraction: f64,
}

/// Classifies each matched prediction as over-, under- or exact.
pub fn estimation_bias(
    real_series: &[TelemetrySample],
    sim_series: &[TelemetrySample],
) -> Result<BiasReport, CalibrationError> {
    let per_sample: Vec<(Timestamp, Bias)> = matched_pairs(real_series, sim_series)
        .map(|(ts, r, s)| {
            let bias = if s < r {
                Bias::Under
            } else if s > r {
                Bias::Over
            } else {
                Bias::Exact
            };
            (ts, bias)
        })
        .collect();
    if per_sample.is_empty() {
        return Err(CalibrationError::NoOverlap);
    }
    let n = per_sample.len() as f64;
    let count = |b: Bias| per_sample.iter().filter(|(_, x)| *x == b).count() as f64;
    Ok(BiasReport {
        underestimated_fraction: count(Bias::Under) / n,
        overestimated_fraction: count(Bias::Over) / n,
        per_sample,
    })
}

/// Fraction of windows whose MAPE is strictly below `threshold` percent.
/// `None` for an empty series.
pub fn threshold_compliance(mape_series: &[(u64, f64)], threshold: f64) -> Option<f64> {
    if mape_series.is_empty() {
        return None;
    }
    let below = mape_series.iter().filter(|(_, m)| *m < threshold).count();
    Some(below as f64 / mape_series.len() as f64)
}

/// Re-simulates a fixed stretch of history under a candidate exponent.
pub trait CandidateSimulator: Sync {
    fn simulate(&self, r: f64) -> Result<Vec<TelemetrySample>, SimError>;
}

impl<F> CandidateSimulator for F
where
    F: Fn(f64) -> Result<Vec<TelemetrySample>, SimError> + Sync,
{
    fn simulate(&self, r: f64) -> Result<Vec<TelemetrySample>, SimError> {
        self(r)
    }
}

/// Recorded inputs of a run of consecutive windows: the simulator state at
/// the first window's start and the tasks that arrived in each window.
#[derive(Debug, Clone)]
pub struct HistoryReplay {
    pub config: Arc<SimConfig>,
    pub start_state: SimState,
    pub windows: Vec<(Window, Vec<WorkloadTask>)>,
}

impl HistoryReplay {
    pub fn span(&self) -> Option<(Timestamp, Timestamp)> {
        Some((self.windows.first()?.0.start, self.windows.last()?.0.end))
    }
}

impl CandidateSimulator for HistoryReplay {
    fn simulate(&self, r: f64) -> Result<Vec<TelemetrySample>, SimError> {
        let mut state = self.start_state.clone();
        let mut out = Vec::new();
        for (window, tasks) in &self.windows {
            let (sim, next) = simulate_window(&self.config, *window, state, tasks, r)?;
            out.extend(sim.predictions());
            state = next;
        }
        Ok(out)
    }
}

/// One grid-search cycle over `config.grid`.
///
/// Candidates are probed in parallel; a candidate whose simulation fails or
/// whose output has no overlap with the history is dropped. The minimal-MAPE
/// candidate wins, the smallest exponent on ties.
pub fn calibrate(
    config: &CalibrationConfig,
    history_truth: &[TelemetrySample],
    history: &dyn CandidateSimulator,
    history_window: (Timestamp, Timestamp),
    produced_in_window: u64,
) -> Result<CalibrationResult, CalibrationError> {
    let usable = history_truth
        .iter()
        .filter(|s| s.power_draw >= MAPE_EPSILON_W)
        .count();
    if usable < config.min_history_samples {
        return Err(CalibrationError::InsufficientHistory {
            found: usable,
            required: config.min_history_samples,
        });
    }
    if !history_truth
        .iter()
        .any(|s| s.cpu_utilization > 0.0 && s.cpu_utilization < 1.0)
    {
        return Err(CalibrationError::DegenerateHistory);
    }

    let scores: Vec<Option<CandidateScore>> = config
        .grid
        .par_iter()
        .map(|&r| {
            let simulated = history.simulate(r).ok()?;
            let mape_percent = mape(history_truth, &simulated).ok()?;
            Some(CandidateScore { r, mape_percent })
        })
        .collect();
    let evaluated: Vec<CandidateScore> = scores.into_iter().flatten().collect();

    let best = evaluated
        .iter()
        .fold(None::<&CandidateScore>, |best, c| match best {
            Some(b) if b.mape_percent <= c.mape_percent => Some(b),
            _ => Some(c),
        })
        .ok_or(CalibrationError::AllCandidatesFailed)?;

    Ok(CalibrationResult {
        selected_r: best.r,
        evaluated: evaluated.clone(),
        history_window,
        produced_in_window,
        applies_from_window: produced_in_window + 1,
    })
}
