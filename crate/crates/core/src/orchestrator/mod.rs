//! The twin's run loop.
//!
//! Each window: collect ground truth (waiting up to the acceleration
//! deadline), simulate with the current exponent, join the calibration
//! started one window earlier, score, persist the report, derive
//! recommendations, and start the next calibration over the trailing history.
//!
//! A calibration started at the end of window `k` runs while window `k+1` is
//! simulated, is joined in window `k+1`, and its exponent applies from window
//! `k+2`.

mod control;
mod recommend;
mod status;

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use control::ControlHandle;
pub use recommend::{evaluate as evaluate_recommendations, RecommendationConfig};
pub use status::{snapshot, BiasSummary, MapePoint, ReportSummary, TwinSnapshot};

use crate::calibrator::{self, CalibrationConfig, CalibrationError, HistoryReplay};
use crate::clock::{Clock, SystemClock};
use crate::model::{
    check_window_granularity, record_metadata, validate_topology, validate_workload,
    AccelerationMode, CalibrationResult, SampleSource, TelemetrySample, Timestamp, Window,
    WindowReport, WorkloadTask, DEFAULT_INITIAL_R, R_MAX, R_MIN,
};
use crate::power::{hour_bucket, hourly_efficiency, PowerError};
use crate::simengine::{simulate_window, SimConfig, SimError, SimState};
use crate::telemetry::{
    self, FeedItem, FeedPoll, SharedAcceleration, TelemetryError, TelemetryFeed, TelemetryLog,
    TelemetrySource,
};
use crate::workspace::{RecommendationLog, Workspace, WorkspaceError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("maximum acceleration cannot pace a live telemetry source")]
    LiveSourceWithMaxAcceleration,
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Power(#[from] PowerError),
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
}

impl OrchestratorError {
    /// Errors caused by the configuration rather than the data source.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            OrchestratorError::Config(_) | OrchestratorError::LiveSourceWithMaxAcceleration
        )
    }
}

fn config_err(message: impl ToString) -> OrchestratorError {
    OrchestratorError::Config(message.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    /// Seconds per window.
    pub window_duration: i64,
    /// Seconds to run; `None` runs until the telemetry source is exhausted.
    pub horizon: Option<i64>,
    pub acceleration: AccelerationMode,
    pub sim: SimConfig,
    pub calibration: CalibrationConfig,
    pub workspace: PathBuf,
    pub initial_r: f64,
    pub recommendations: RecommendationConfig,
}

impl TwinConfig {
    pub fn new(sim: SimConfig, workspace: impl Into<PathBuf>) -> Self {
        let window_duration = 3600;
        Self {
            window_duration,
            horizon: None,
            acceleration: AccelerationMode::Maximum,
            sim,
            calibration: CalibrationConfig::for_window(window_duration),
            workspace: workspace.into(),
            initial_r: DEFAULT_INITIAL_R,
            recommendations: RecommendationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        check_window_granularity(self.window_duration, self.sim.sampling_granularity)
            .map_err(config_err)?;
        if let Some(h) = self.horizon {
            if h <= 0 || h % self.window_duration != 0 {
                return Err(config_err("horizon must be a positive multiple of the window duration"));
            }
        }
        if let AccelerationMode::Fixed(f) = self.acceleration {
            if !(f.is_finite() && f > 0.0) {
                return Err(config_err("acceleration factor must be positive"));
            }
        }
        self.sim.validate().map_err(config_err)?;
        validate_topology(self.sim.topology.clone()).map_err(config_err)?;
        for (id, params) in &self.sim.power_params_override {
            if !self.sim.topology.hosts.iter().any(|h| &h.id == id) {
                return Err(config_err(format!("power override for unknown host {id}")));
            }
            params.validate().map_err(config_err)?;
        }
        self.calibration
            .validate(self.window_duration)
            .map_err(config_err)?;
        if !(R_MIN..=R_MAX).contains(&self.initial_r) {
            return Err(config_err("initial_r outside exponent bounds"));
        }
        let rec = &self.recommendations;
        if !(0.0..=1.0).contains(&rec.underutilization_threshold)
            || !(0.0..=1.0).contains(&rec.accuracy_fraction)
        {
            return Err(config_err("recommendation thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Wall-clock budget for collecting one window's ground truth, `None` when
/// the run is unpaced.
pub fn select_acceleration_deadline(
    mode: AccelerationMode,
    window: Window,
    live_source: bool,
) -> Result<Option<Duration>, OrchestratorError> {
    match mode.factor() {
        None if live_source => Err(OrchestratorError::LiveSourceWithMaxAcceleration),
        None => Ok(None),
        Some(f) => Ok(Some(Duration::from_secs_f64(window.duration() as f64 / f))),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub windows: u64,
    pub stalled_windows: u64,
    pub calibrations_applied: u64,
    pub recommendations: u64,
}

/// Ground truth buffered ahead of the window being collected.
struct Inbox {
    feed: TelemetryFeed,
    buffered: BTreeMap<Timestamp, TelemetrySample>,
    exhausted: bool,
}

struct Collected {
    truth: Vec<TelemetrySample>,
    stalled: bool,
    source_done: bool,
}

impl Inbox {
    fn accept(
        &mut self,
        item: FeedItem,
        window_start: Timestamp,
        log: &mut TelemetryLog,
    ) -> Result<(), TelemetryError> {
        let sample = match item {
            FeedItem::Sample(s) => s,
            FeedItem::Failed(e) => return Err(e),
        };
        if !log.append(&sample)? || sample.source != SampleSource::GroundTruth {
            return Ok(());
        }
        if sample.timestamp < window_start {
            log::warn!("ground truth at t={} arrived after its window closed", sample.timestamp);
        } else {
            self.buffered.entry(sample.timestamp).or_insert(sample);
        }
        Ok(())
    }

    fn drain(&mut self, window_start: Timestamp, log: &mut TelemetryLog) -> Result<(), TelemetryError> {
        loop {
            match self.feed.try_poll() {
                FeedPoll::Item(item) => self.accept(item, window_start, log)?,
                FeedPoll::Timeout => return Ok(()),
                FeedPoll::Exhausted => {
                    self.exhausted = true;
                    return Ok(());
                }
            }
        }
    }

    /// Waits until the window's truth is complete, the source moves past the
    /// window or ends, or the deadline passes (the window is then stalled).
    fn collect(
        &mut self,
        window: Window,
        granularity: i64,
        deadline: Option<Duration>,
        clock: &dyn Clock,
        log: &mut TelemetryLog,
    ) -> Result<Collected, TelemetryError> {
        let expected = window.ticks(granularity).count();
        let stalled = loop {
            // Sample the clock before draining: anything sent before the
            // deadline is then already queued.
            let past_deadline = deadline.is_some_and(|d| clock.elapsed() >= d);
            self.drain(window.start, log)?;
            let have = self.buffered.range(window.start..window.end).count();
            if have >= expected
                || self.exhausted
                || self.buffered.range(window.end..).next().is_some()
            {
                break false;
            }
            if past_deadline {
                break true;
            }
            let budget = deadline.map_or(Duration::from_secs(1), |d| clock.poll_budget(d));
            match self.feed.poll(budget) {
                FeedPoll::Item(item) => self.accept(item, window.start, log)?,
                FeedPoll::Timeout => {}
                FeedPoll::Exhausted => self.exhausted = true,
            }
        };
        let later = self.buffered.split_off(&window.end);
        let truth = std::mem::replace(&mut self.buffered, later)
            .into_values()
            .collect();
        Ok(Collected {
            truth,
            stalled,
            source_done: self.exhausted && self.buffered.is_empty(),
        })
    }
}

/// Inputs of one past window, kept for re-simulation.
struct HistoryEntry {
    window: Window,
    start_state: SimState,
    tasks: Vec<WorkloadTask>,
    truth: Vec<TelemetrySample>,
}

struct PendingCalibration {
    produced_in: u64,
    handle: JoinHandle<Result<CalibrationResult, CalibrationError>>,
}

impl PendingCalibration {
    fn launch(
        config: &CalibrationConfig,
        sim: &Arc<SimConfig>,
        history: &VecDeque<HistoryEntry>,
        produced_in: u64,
    ) -> Self {
        let replay = HistoryReplay {
            config: Arc::clone(sim),
            start_state: history[0].start_state.clone(),
            windows: history.iter().map(|h| (h.window, h.tasks.clone())).collect(),
        };
        let truth: Vec<TelemetrySample> = history.iter().flat_map(|h| h.truth.iter().copied()).collect();
        let span = replay.span().expect("history is non-empty");
        let config = config.clone();
        let handle = std::thread::spawn(move || {
            calibrator::calibrate(&config, &truth, &replay, span, produced_in)
        });
        Self {
            produced_in,
            handle,
        }
    }

    fn join(self) -> Option<CalibrationResult> {
        match self.handle.join() {
            Ok(Ok(result)) => Some(result),
            Ok(Err(e)) => {
                log::info!("calibration in window {} skipped: {e}", self.produced_in);
                None
            }
            Err(_) => {
                log::error!("calibration in window {} panicked", self.produced_in);
                None
            }
        }
    }
}

/// Buffers per-tick throughput and power until whole hours are available.
#[derive(Default)]
struct HourTracker {
    tflops: Vec<(Timestamp, f64)>,
    power: Vec<(Timestamp, f64)>,
}

impl HourTracker {
    fn push(
        &mut self,
        tflops: &[(Timestamp, f64)],
        predictions: &[TelemetrySample],
        window_end: Timestamp,
        granularity: i64,
    ) -> Result<Vec<(i64, f64)>, PowerError> {
        self.tflops.extend_from_slice(tflops);
        self.power
            .extend(predictions.iter().map(|s| (s.timestamp, s.power_draw)));
        let open_hour = window_end.div_euclid(3600);
        let n = self
            .power
            .iter()
            .take_while(|(ts, _)| hour_bucket(*ts) < open_hour)
            .count();
        if n == 0 {
            return Ok(Vec::new());
        }
        let tflops: Vec<_> = self.tflops.drain(..n).collect();
        let power: Vec<_> = self.power.drain(..n).collect();
        hourly_efficiency(&tflops, &power, granularity)
    }
}

pub struct Twin {
    config: TwinConfig,
    clock: Arc<dyn Clock>,
    control: Arc<ControlHandle>,
    run_id: String,
}

impl Twin {
    pub fn new(config: TwinConfig) -> Result<Self, OrchestratorError> {
        config.validate()?;
        Ok(Self {
            config,
            clock: Arc::new(SystemClock::new()),
            control: Arc::new(ControlHandle::new()),
            run_id: uuid::Uuid::new_v4().to_string(),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_control(mut self, control: Arc<ControlHandle>) -> Self {
        self.control = control;
        self
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    pub fn control(&self) -> Arc<ControlHandle> {
        Arc::clone(&self.control)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    fn check_workload(&self, workload: Vec<WorkloadTask>) -> Result<Vec<WorkloadTask>, OrchestratorError> {
        let tasks = validate_workload(workload).map_err(config_err)?;
        let largest = self.config.sim.topology.max_core_count();
        if let Some(t) = tasks.iter().find(|t| t.core_request > largest) {
            return Err(config_err(format!(
                "task {} requests {} cores but the largest host has {largest}",
                t.id, t.core_request
            )));
        }
        Ok(tasks)
    }

    /// Runs the loop to the horizon (or until the source ends), calling
    /// `on_report` after each window is committed. The workspace is reset
    /// first: a run owns its workspace.
    pub fn run(
        &self,
        source: &TelemetrySource,
        workload: Vec<WorkloadTask>,
        mut on_report: impl FnMut(&WindowReport),
    ) -> Result<RunSummary, OrchestratorError> {
        let cfg = &self.config;
        let d = cfg.window_duration;
        let live = source.is_live();
        select_acceleration_deadline(cfg.acceleration, Window::nth(0, d), live)?;
        if source.granularity != cfg.sim.sampling_granularity {
            return Err(config_err(format!(
                "telemetry granularity {} s differs from the simulator's {} s",
                source.granularity, cfg.sim.sampling_granularity
            )));
        }
        let tasks = self.check_workload(workload)?;

        let workspace = Workspace::reset(&cfg.workspace)?;
        workspace.write_config(cfg)?;
        let recommendations = RecommendationLog::for_workspace(&workspace);
        let mut telemetry_log = TelemetryLog::open(workspace.root())?;

        let sim = Arc::new(cfg.sim.clone());
        let acceleration = SharedAcceleration::new(cfg.acceleration);
        let feed = telemetry::replay(source, acceleration.clone(), Arc::clone(&self.clock))?;
        let mut inbox = Inbox {
            feed,
            buffered: BTreeMap::new(),
            exhausted: false,
        };

        let max_windows = cfg.horizon.map(|h| (h / d) as u64);
        let history_len = cfg.calibration.history_windows(d);
        let mut state = SimState::new(&sim.topology, 0);
        let mut next_task = 0;
        let mut r = cfg.initial_r;
        let mut calibrated = false;
        let mut pending: Option<PendingCalibration> = None;
        let mut history: VecDeque<HistoryEntry> = VecDeque::with_capacity(history_len + 1);
        let mut trailing: VecDeque<WindowReport> = VecDeque::new();
        let mut hours = HourTracker::default();
        let mut summary = RunSummary {
            run_id: self.run_id.clone(),
            ..RunSummary::default()
        };
        let mut window_open = self.clock.elapsed();

        for k in 0.. {
            if max_windows.is_some_and(|n| k >= n) {
                break;
            }
            let was_paused = self.control.is_paused();
            if !self.control.wait_at_boundary() {
                break;
            }
            if was_paused {
                window_open = window_open.max(self.clock.elapsed());
            }
            if let Some(mode) = self.control.take_acceleration() {
                if mode.factor().is_none() && live {
                    log::warn!("ignoring maximum acceleration for a live source");
                } else {
                    acceleration.set(mode);
                }
            }
            let mode = acceleration.get();
            let window = Window::nth(k, d);
            let deadline = select_acceleration_deadline(mode, window, live)?.map(|b| window_open + b);

            let collected = inbox.collect(
                window,
                sim.sampling_granularity,
                deadline,
                self.clock.as_ref(),
                &mut telemetry_log,
            )?;
            if max_windows.is_none() && collected.truth.is_empty() && collected.source_done {
                break;
            }
            if collected.stalled {
                log::warn!("window {k}: ground truth missed its deadline");
            }

            let end = tasks[next_task..]
                .iter()
                .position(|t| t.submit_time >= window.end)
                .map_or(tasks.len(), |p| next_task + p);
            let window_tasks = tasks[next_task..end].to_vec();
            next_task = end;

            let start_state = state.clone();
            let started = self.clock.wall();
            let (simulated, next_state) = simulate_window(&sim, window, state, &window_tasks, r)?;
            let finished = self.clock.wall().max(started);
            state = next_state;

            let calibration = pending.take().and_then(PendingCalibration::join);

            let predictions = simulated.predictions();
            for p in &predictions {
                telemetry_log.append(p)?;
            }
            let tflops = simulated.tflops(&sim);
            let covered = predictions
                .iter()
                .all(|p| collected.truth.iter().any(|t| t.timestamp == p.timestamp));
            let mape_percent = if covered && !collected.stalled {
                calibrator::mape(&collected.truth, &predictions).ok()
            } else {
                None
            };
            let efficiency = hours.push(&tflops, &predictions, window.end, sim.sampling_granularity)?;
            let metadata = record_metadata(started, finished, mode, format!("{}/w{k}", self.run_id))
                .map_err(config_err)?;

            let report = WindowReport {
                window,
                predictions,
                ground_truth: collected.truth.clone(),
                mape_percent,
                params_used: sim.topology.aggregate_params(r),
                calibrated,
                calibration: calibration.clone(),
                performance_tflops: tflops,
                efficiency_tflops_per_kwh: efficiency,
                stalled: collected.stalled,
                metadata,
            };
            workspace.write_report(&report)?;
            if let Some(c) = &calibration {
                workspace.append_calibration(&report.metadata.correlation_id, c)?;
            }

            trailing.push_back(report.clone());
            while trailing.len() > cfg.recommendations.trailing_windows.max(1) {
                trailing.pop_front();
            }
            let pending_kinds = recommendations.pending_kinds()?;
            for rec in evaluate_recommendations(&cfg.recommendations, trailing.make_contiguous(), &pending_kinds) {
                if recommendations.add_if_new(&rec)? {
                    log::info!("recommendation {}: {}", rec.id, rec.summary);
                    summary.recommendations += 1;
                }
            }

            summary.windows += 1;
            summary.stalled_windows += u64::from(report.stalled);
            on_report(&report);

            if let Some(c) = calibration {
                r = c.selected_r;
                calibrated = true;
                summary.calibrations_applied += 1;
            }
            history.push_back(HistoryEntry {
                window,
                start_state,
                tasks: window_tasks,
                truth: collected.truth,
            });
            while history.len() > history_len {
                history.pop_front();
            }
            let more_windows = max_windows.is_none_or(|n| k + 1 < n);
            if cfg.calibration.enabled && more_windows {
                pending = Some(PendingCalibration::launch(&cfg.calibration, &sim, &history, k + 1));
            }
            window_open = deadline.unwrap_or_else(|| self.clock.elapsed());
        }
        if let Some(p) = pending {
            // produced after the last window; nothing left to apply it to
            let _ = p.join();
        }
        Ok(summary)
    }
}

/// Runs a twin to completion with the system clock and returns its reports.
pub fn run_loop(
    config: TwinConfig,
    source: &TelemetrySource,
    workload: Vec<WorkloadTask>,
) -> Result<Vec<WindowReport>, OrchestratorError> {
    let twin = Twin::new(config)?;
    let mut reports = Vec::new();
    twin.run(source, workload, |r| reports.push(r.clone()))?;
    Ok(reports)
}
