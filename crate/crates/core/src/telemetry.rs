//! Physical-twin stand-in and ingestion path.
//!
//! Ground truth comes either from a replayed file or from a live
//! line-delimited socket. Replay is paced by the acceleration mode and feeds a
//! bounded queue the orchestrator drains once per window. The synthetic
//! generator produces workload and telemetry files from a reference run of
//! the simulator under a known (optionally drifting) power exponent.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::formats::{self, FormatError};
use crate::model::{
    validate_topology, AccelerationMode, Fragment, HostSpec, PowerModelParams, SampleSource,
    TelemetrySample, Timestamp, Topology, Window, WorkloadTask, DEFAULT_SAMPLING_GRANULARITY,
};
use crate::power;
use crate::simengine::{self, SimConfig, SimError, SimState};

/// Bounded capacity of the replay queue.
pub const FEED_CAPACITY: usize = 1024;

const SYNTH_WINDOW: i64 = 3600;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("telemetry parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("sample at t={ts} does not match granularity {granularity} s")]
    GranularityMismatch { ts: Timestamp, granularity: i64 },
    #[error("telemetry file is not sorted by timestamp (line {line})")]
    Unsorted { line: usize },
    #[error("invalid sample at line {line}: {reason}")]
    InvalidSample { line: usize, reason: &'static str },
    #[error("workspace not writable: {0}")]
    WorkspaceUnwritable(String),
    #[error("cannot connect to telemetry stream {endpoint}: {message}")]
    Connect { endpoint: String, message: String },
    #[error("invalid ground-truth profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

impl TelemetryError {
    fn from_format(err: FormatError) -> Self {
        match err {
            FormatError::Parse { line, message } => TelemetryError::ParseError { line, message },
            other => TelemetryError::Format(other),
        }
    }
}

/// Samples with `window.start <= ts < window.end`, order preserved.
pub fn clip_to_window(samples: &[TelemetrySample], window: &Window) -> Vec<TelemetrySample> {
    samples
        .iter()
        .filter(|s| window.contains(s.timestamp))
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    FileReplay(PathBuf),
    /// `host:port` of a socket emitting newline-delimited telemetry records.
    Stream(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySource {
    pub kind: SourceKind,
    pub granularity: i64,
}

impl TelemetrySource {
    pub fn is_live(&self) -> bool {
        matches!(self.kind, SourceKind::Stream(_))
    }
}

/// Acceleration mode shared between the control loop and the replay pacer.
#[derive(Debug, Clone)]
pub struct SharedAcceleration(Arc<Mutex<AccelerationMode>>);

impl SharedAcceleration {
    pub fn new(mode: AccelerationMode) -> Self {
        Self(Arc::new(Mutex::new(mode)))
    }

    pub fn get(&self) -> AccelerationMode {
        *self.0.lock().expect("acceleration lock")
    }

    pub fn set(&self, mode: AccelerationMode) {
        *self.0.lock().expect("acceleration lock") = mode;
    }
}

fn check_sample(sample: &TelemetrySample, granularity: i64, line: usize) -> Result<(), TelemetryError> {
    if sample.timestamp.rem_euclid(granularity) != 0 {
        return Err(TelemetryError::GranularityMismatch {
            ts: sample.timestamp,
            granularity,
        });
    }
    sample
        .validate(granularity)
        .map_err(|reason| TelemetryError::InvalidSample { line, reason })
}

/// Loads and checks a replay file: parseable, sorted, aligned to `granularity`.
pub fn load_replay_file(path: &Path, granularity: i64) -> Result<Vec<TelemetrySample>, TelemetryError> {
    let file = File::open(path).map_err(|e| TelemetryError::Format(FormatError::io(path, e)))?;
    let samples = formats::read_telemetry(file).map_err(TelemetryError::from_format)?;
    for (i, sample) in samples.iter().enumerate() {
        check_sample(sample, granularity, i + 1)?;
        if i > 0 && sample.timestamp < samples[i - 1].timestamp {
            return Err(TelemetryError::Unsorted { line: i + 1 });
        }
    }
    Ok(samples)
}

#[derive(Debug)]
pub enum FeedItem {
    Sample(TelemetrySample),
    Failed(TelemetryError),
}

/// Receiving end of a replay or live stream.
///
/// The producer thread exits once the feed is dropped and its next send fails.
pub struct TelemetryFeed {
    rx: Receiver<FeedItem>,
}

#[derive(Debug)]
pub enum FeedPoll {
    Item(FeedItem),
    Timeout,
    Exhausted,
}

impl TelemetryFeed {
    pub fn poll(&self, timeout: Duration) -> FeedPoll {
        match self.rx.recv_timeout(timeout) {
            Ok(item) => FeedPoll::Item(item),
            Err(RecvTimeoutError::Timeout) => FeedPoll::Timeout,
            Err(RecvTimeoutError::Disconnected) => FeedPoll::Exhausted,
        }
    }

    pub fn try_poll(&self) -> FeedPoll {
        match self.rx.try_recv() {
            Ok(item) => FeedPoll::Item(item),
            Err(mpsc::TryRecvError::Empty) => FeedPoll::Timeout,
            Err(mpsc::TryRecvError::Disconnected) => FeedPoll::Exhausted,
        }
    }

    /// Blocks for every remaining item. Only meaningful for finite sources.
    pub fn collect_all(self) -> Result<Vec<TelemetrySample>, TelemetryError> {
        let mut out = Vec::new();
        for item in self.rx.iter() {
            match item {
                FeedItem::Sample(s) => out.push(s),
                FeedItem::Failed(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// Replays samples in order, pacing inter-sample gaps by the acceleration
/// factor current at each step. `Maximum` delivers without pauses; the
/// producer blocks when the bounded queue is full.
pub fn replay_samples(
    samples: Vec<TelemetrySample>,
    acceleration: SharedAcceleration,
    clock: Arc<dyn Clock>,
) -> TelemetryFeed {
    let (tx, rx) = mpsc::sync_channel(FEED_CAPACITY);
    std::thread::spawn(move || {
        let mut due = clock.elapsed();
        let mut prev: Option<Timestamp> = None;
        for sample in samples {
            if let (Some(prev_ts), Some(factor)) = (prev, acceleration.get().factor()) {
                let gap = (sample.timestamp - prev_ts) as f64 / factor;
                due += Duration::from_secs_f64(gap.max(0.0));
                clock.sleep_until(due);
            } else {
                due = clock.elapsed();
            }
            prev = Some(sample.timestamp);
            if tx.send(FeedItem::Sample(sample)).is_err() {
                return;
            }
        }
    });
    TelemetryFeed { rx }
}

fn stream_samples(endpoint: String, granularity: i64, tx: SyncSender<FeedItem>) {
    let stream = match TcpStream::connect(&endpoint) {
        Ok(s) => s,
        Err(e) => {
            let _ = tx.send(FeedItem::Failed(TelemetryError::Connect {
                endpoint,
                message: e.to_string(),
            }));
            return;
        }
    };
    for (i, line) in BufReader::new(stream).lines().enumerate() {
        let item = match line {
            Ok(text) if text.trim().is_empty() => continue,
            Ok(text) => formats::parse_telemetry_line(&text, i + 1)
                .map_err(TelemetryError::from_format)
                .and_then(|s| check_sample(&s, granularity, i + 1).map(|_| s)),
            Err(e) => Err(TelemetryError::ParseError {
                line: i + 1,
                message: e.to_string(),
            }),
        };
        let failed = item.is_err();
        let msg = match item {
            Ok(s) => FeedItem::Sample(s),
            Err(e) => FeedItem::Failed(e),
        };
        if tx.send(msg).is_err() || failed {
            return;
        }
    }
}

/// Opens a source: a file is validated up front and replayed with pacing; a
/// live stream is read as it arrives.
pub fn replay(
    source: &TelemetrySource,
    acceleration: SharedAcceleration,
    clock: Arc<dyn Clock>,
) -> Result<TelemetryFeed, TelemetryError> {
    match &source.kind {
        SourceKind::FileReplay(path) => {
            let samples = load_replay_file(path, source.granularity)?;
            Ok(replay_samples(samples, acceleration, clock))
        }
        SourceKind::Stream(endpoint) => {
            let (tx, rx) = mpsc::sync_channel(FEED_CAPACITY);
            let endpoint = endpoint.clone();
            let granularity = source.granularity;
            std::thread::spawn(move || stream_samples(endpoint, granularity, tx));
            Ok(TelemetryFeed { rx })
        }
    }
}

/// Append-only telemetry log in the workspace. Duplicate `(source, ts)`
/// records are dropped and counted.
#[derive(Debug)]
pub struct TelemetryLog {
    path: PathBuf,
    writer: BufWriter<File>,
    seen: HashSet<(SampleSource, Timestamp)>,
    duplicates: u64,
}

impl TelemetryLog {
    pub const FILE_NAME: &'static str = "telemetry.jsonl";

    pub fn open(workspace: &Path) -> Result<Self, TelemetryError> {
        let unwritable = |e: std::io::Error| {
            TelemetryError::WorkspaceUnwritable(format!("{}: {e}", workspace.display()))
        };
        std::fs::create_dir_all(workspace).map_err(unwritable)?;
        let path = workspace.join(Self::FILE_NAME);
        let mut seen = HashSet::new();
        if path.exists() {
            let existing = File::open(&path).map_err(unwritable)?;
            for sample in formats::read_telemetry(existing).map_err(TelemetryError::from_format)? {
                seen.insert((sample.source, sample.timestamp));
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(unwritable)?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            seen,
            duplicates: 0,
        })
    }

    /// Appends one sample; returns `false` if it was a duplicate.
    pub fn append(&mut self, sample: &TelemetrySample) -> Result<bool, TelemetryError> {
        if !self.seen.insert((sample.source, sample.timestamp)) {
            self.duplicates += 1;
            log::warn!(
                "dropping duplicate {:?} telemetry at t={}",
                sample.source,
                sample.timestamp
            );
            return Ok(false);
        }
        writeln!(self.writer, "{}", formats::telemetry_line(sample))
            .and_then(|_| self.writer.flush())
            .map_err(|e| TelemetryError::WorkspaceUnwritable(format!("{}: {e}", self.path.display())))?;
        Ok(true)
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Drains `samples` into the workspace log; returns how many were appended.
pub fn ingest_and_persist(
    samples: impl IntoIterator<Item = TelemetrySample>,
    log: &mut TelemetryLog,
) -> Result<usize, TelemetryError> {
    let mut appended = 0;
    for sample in samples {
        if log.append(&sample)? {
            appended += 1;
        }
    }
    Ok(appended)
}

/// Additive Gaussian noise on ground-truth power.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// Standard deviation in watts.
    Watts(f64),
    /// Standard deviation as a fraction of the noiseless mean power.
    FractionOfMean(f64),
}

/// Parameters of the synthetic workload generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProfile {
    pub tasks_per_hour: f64,
    /// Relative amplitude of a 24 h sinusoidal modulation of the arrival rate.
    pub diurnal_amplitude: f64,
    pub core_choices: Vec<u32>,
    pub fragments_per_task: (usize, usize),
    pub mean_fragment_duration_s: f64,
    /// Fraction of the allocated cores' capacity each fragment demands.
    pub demand_fraction: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthProfile {
    pub topology: Topology,
    /// `(from_ts, r)` steps, ascending; the first entry applies from t=0.
    pub true_r: Vec<(Timestamp, f64)>,
    pub noise: NoiseModel,
    pub task_arrival: ArrivalProfile,
    pub sampling_granularity: i64,
}

/// Host template for the built-in profiles.
fn uniform_topology(name: &str, hosts: usize, p_idle: f64, p_max: f64) -> Topology {
    Topology {
        name: name.to_string(),
        hosts: (0..hosts)
            .map(|i| HostSpec {
                id: format!("host-{i:03}"),
                core_count: 16,
                core_frequency: 2100.0,
                memory: 131_072,
                power: PowerModelParams {
                    p_idle,
                    p_max,
                    r: 2.0,
                },
            })
            .collect(),
    }
}

impl GroundTruthProfile {
    pub const NAMES: [&'static str; 4] = ["steady", "drift", "underutilized", "large"];

    /// Built-in profiles:
    /// - `steady`: 20 hosts, constant r = 2, 1% noise.
    /// - `drift`: 20 hosts, r steps 2 → 3 on day 3, noise 2% of mean power.
    /// - `underutilized`: 20 hosts at low load, constant r = 2, no noise.
    /// - `large`: 50 hosts, ~2000 tasks per week, r steps 2 → 3 on day 3.
    pub fn named(name: &str) -> Option<Self> {
        let busy = ArrivalProfile {
            tasks_per_hour: 4.5,
            diurnal_amplitude: 0.5,
            core_choices: vec![4, 8, 8, 16],
            fragments_per_task: (1, 4),
            mean_fragment_duration_s: 3.0 * 3600.0,
            demand_fraction: (0.4, 1.0),
        };
        let day = 24 * 3600;
        let profile = match name {
            "steady" => Self {
                topology: uniform_topology("steady-20", 20, 100.0, 400.0),
                true_r: vec![(0, 2.0)],
                noise: NoiseModel::FractionOfMean(0.01),
                task_arrival: busy,
                sampling_granularity: DEFAULT_SAMPLING_GRANULARITY,
            },
            "drift" => Self {
                topology: uniform_topology("drift-20", 20, 100.0, 400.0),
                true_r: vec![(0, 2.0), (3 * day, 3.0)],
                noise: NoiseModel::FractionOfMean(0.02),
                task_arrival: busy,
                sampling_granularity: DEFAULT_SAMPLING_GRANULARITY,
            },
            "underutilized" => Self {
                topology: uniform_topology("underutilized-20", 20, 100.0, 400.0),
                true_r: vec![(0, 2.0)],
                noise: NoiseModel::Watts(0.0),
                task_arrival: ArrivalProfile {
                    tasks_per_hour: 1.5,
                    ..busy
                },
                sampling_granularity: DEFAULT_SAMPLING_GRANULARITY,
            },
            "large" => Self {
                topology: uniform_topology("large-50", 50, 100.0, 400.0),
                true_r: vec![(0, 2.0), (3 * day, 3.0)],
                noise: NoiseModel::FractionOfMean(0.02),
                task_arrival: ArrivalProfile {
                    tasks_per_hour: 12.0,
                    ..busy
                },
                sampling_granularity: DEFAULT_SAMPLING_GRANULARITY,
            },
            _ => return None,
        };
        Some(profile)
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        let invalid = |m: &str| Err(TelemetryError::InvalidProfile(m.to_string()));
        validate_topology(self.topology.clone())
            .map_err(|e| TelemetryError::InvalidProfile(e.to_string()))?;
        if self.true_r.is_empty() || self.true_r[0].0 != 0 {
            return invalid("true_r schedule must start at t=0");
        }
        if self.true_r.windows(2).any(|p| p[1].0 <= p[0].0) {
            return invalid("true_r schedule timestamps must ascend");
        }
        if self
            .true_r
            .iter()
            .any(|&(_, r)| !(crate::model::R_MIN..=crate::model::R_MAX).contains(&r))
        {
            return invalid("true_r outside exponent bounds");
        }
        let noise_ok = match self.noise {
            NoiseModel::Watts(w) => w.is_finite() && w >= 0.0,
            NoiseModel::FractionOfMean(f) => f.is_finite() && f >= 0.0,
        };
        if !noise_ok {
            return invalid("noise must be non-negative");
        }
        if self.sampling_granularity <= 0 || SYNTH_WINDOW % self.sampling_granularity != 0 {
            return invalid("sampling granularity must divide one hour");
        }
        let a = &self.task_arrival;
        if !(a.tasks_per_hour >= 0.0 && a.tasks_per_hour.is_finite()) {
            return invalid("tasks_per_hour");
        }
        if !(0.0..=1.0).contains(&a.diurnal_amplitude) {
            return invalid("diurnal_amplitude");
        }
        if a.core_choices.is_empty() || a.core_choices.iter().any(|&c| c == 0 || c > self.topology.max_core_count()) {
            return invalid("core_choices must fit on a host");
        }
        if a.fragments_per_task.0 == 0 || a.fragments_per_task.1 < a.fragments_per_task.0 {
            return invalid("fragments_per_task");
        }
        if a.mean_fragment_duration_s.is_nan() || a.mean_fragment_duration_s <= 0.0 {
            return invalid("mean_fragment_duration_s");
        }
        if !(0.0 <= a.demand_fraction.0 && a.demand_fraction.0 <= a.demand_fraction.1) {
            return invalid("demand_fraction");
        }
        Ok(())
    }

    /// Exponent in force at `ts`.
    pub fn r_at(&self, ts: Timestamp) -> f64 {
        self.true_r
            .iter()
            .take_while(|(from, _)| *from <= ts)
            .last()
            .map_or(self.true_r[0].1, |&(_, r)| r)
    }
}

/// Synthetic workload plus its ground-truth telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub tasks: Vec<WorkloadTask>,
    pub telemetry: Vec<TelemetrySample>,
}

impl SyntheticTrace {
    pub fn write(&self, topology: &Topology, dir: &Path) -> Result<(), TelemetryError> {
        let io = |p: &Path, e| TelemetryError::Format(FormatError::io(p, e));
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let topo_path = dir.join("topology.json");
        std::fs::write(&topo_path, formats::topology_to_json(topology)).map_err(|e| io(&topo_path, e))?;
        let workload_path = dir.join("workload.csv");
        let file = File::create(&workload_path).map_err(|e| io(&workload_path, e))?;
        formats::write_workload(BufWriter::new(file), &self.tasks)?;
        let telemetry_path = dir.join("telemetry.jsonl");
        let file = File::create(&telemetry_path).map_err(|e| io(&telemetry_path, e))?;
        formats::write_telemetry(BufWriter::new(file), &self.telemetry).map_err(|e| io(&telemetry_path, e))?;
        Ok(())
    }
}

fn generate_workload(profile: &GroundTruthProfile, horizon: i64, rng: &mut ChaCha8Rng) -> Vec<WorkloadTask> {
    let a = &profile.task_arrival;
    let freq = profile
        .topology
        .hosts
        .iter()
        .map(|h| h.core_frequency)
        .fold(f64::INFINITY, f64::min);
    let duration = Exp::new(1.0 / a.mean_fragment_duration_s).expect("positive mean");
    let mut drafts: Vec<(Timestamp, WorkloadTask)> = Vec::new();
    for hour in 0..(horizon + 3599) / 3600 {
        let phase = 2.0 * std::f64::consts::PI * ((hour % 24) as f64 - 9.0) / 24.0;
        let rate = a.tasks_per_hour * (1.0 + a.diurnal_amplitude * phase.sin());
        let arrivals = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(rng) as usize
        } else {
            0
        };
        let hour_start = hour * 3600;
        let hour_end = (hour_start + 3600).min(horizon);
        for _ in 0..arrivals {
            let submit = rng.random_range(hour_start..hour_end);
            let cores = a.core_choices[rng.random_range(0..a.core_choices.len())];
            let n_frag = rng.random_range(a.fragments_per_task.0..=a.fragments_per_task.1);
            let fragments = (0..n_frag)
                .map(|_| {
                    let fraction = rng.random_range(a.demand_fraction.0..=a.demand_fraction.1);
                    Fragment {
                        duration: (duration.sample(rng).round() as i64).max(60),
                        cpu_demand: (f64::from(cores) * freq * fraction).round(),
                    }
                })
                .collect();
            drafts.push((
                submit,
                WorkloadTask {
                    id: String::new(),
                    submit_time: submit,
                    core_request: cores,
                    fragments,
                },
            ));
        }
    }
    drafts.sort_by_key(|(submit, _)| *submit);
    drafts
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut task))| {
            task.id = format!("task-{i:06}");
            task
        })
        .collect()
}

/// Per-tick per-host utilization from a reference run over `[0, horizon)`.
pub(crate) fn reference_utilization(
    config: &SimConfig,
    tasks: &[WorkloadTask],
    horizon: i64,
    window_duration: i64,
) -> Result<Vec<(Timestamp, Vec<f64>)>, SimError> {
    let mut state = SimState::new(&config.topology, 0);
    let mut out = Vec::new();
    let mut next_task = 0;
    for window in crate::model::windows(window_duration, horizon) {
        let end = tasks[next_task..]
            .iter()
            .position(|t| t.submit_time >= window.end)
            .map_or(tasks.len(), |p| next_task + p);
        let (sim, next) =
            simengine::simulate_window(config, window, state, &tasks[next_task..end], crate::model::DEFAULT_INITIAL_R)?;
        next_task = end;
        state = next;
        out.extend(
            sim.samples
                .into_iter()
                .map(|s| (s.sample.timestamp, s.host_utilization)),
        );
    }
    Ok(out)
}

/// Generates a workload and the telemetry a physical cluster running it
/// would report under the profile's exponent schedule, plus noise.
/// Deterministic for a given seed.
pub fn synthesize_ground_truth(
    profile: &GroundTruthProfile,
    horizon: i64,
    seed: u64,
) -> Result<SyntheticTrace, TelemetryError> {
    profile.validate()?;
    if horizon <= 0 || horizon % SYNTH_WINDOW != 0 {
        return Err(TelemetryError::InvalidProfile(
            "horizon must be a positive whole number of hours".into(),
        ));
    }
    let mut workload_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));

    let tasks = generate_workload(profile, horizon, &mut workload_rng);
    let mut config = SimConfig::new(profile.topology.clone());
    config.sampling_granularity = profile.sampling_granularity;
    let ticks = reference_utilization(&config, &tasks, horizon, SYNTH_WINDOW)?;

    let mut clean = Vec::with_capacity(ticks.len());
    for (ts, host_u) in &ticks {
        let params = config.host_params(profile.r_at(*ts));
        clean.push(power::cluster_power(&params, host_u).map_err(SimError::from)?);
    }
    let stddev = match profile.noise {
        NoiseModel::Watts(w) => w,
        NoiseModel::FractionOfMean(f) => {
            f * clean.iter().sum::<f64>() / clean.len().max(1) as f64
        }
    };
    let noise = (stddev > 0.0).then(|| Normal::new(0.0, stddev).expect("valid stddev"));

    let telemetry = ticks
        .iter()
        .zip(clean)
        .map(|((ts, host_u), watts)| {
            let noisy = match &noise {
                Some(n) => (watts + n.sample(&mut noise_rng)).max(0.0),
                None => watts,
            };
            TelemetrySample {
                timestamp: *ts,
                power_draw: noisy,
                cpu_utilization: simengine::cluster_mean_utilization(&config.topology, host_u),
                source: SampleSource::GroundTruth,
            }
        })
        .collect();
    Ok(SyntheticTrace { tasks, telemetry })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use chrono::{DateTime, Utc};

    fn sample(ts: i64) -> TelemetrySample {
        TelemetrySample {
            timestamp: ts,
            power_draw: 100.0,
            cpu_utilization: 0.5,
            source: SampleSource::GroundTruth,
        }
    }

    #[test]
    fn clip_examples() {
        let s: Vec<_> = [0, 300, 600, 900].into_iter().map(sample).collect();
        let w = Window {
            index: 1,
            start: 300,
            end: 600,
        };
        assert_eq!(clip_to_window(&s, &w), vec![sample(300)]);
        assert!(clip_to_window(&[], &w).is_empty());
        let all = Window {
            index: 0,
            start: 0,
            end: 1200,
        };
        assert_eq!(clip_to_window(&s, &all), s);
    }

    #[test]
    fn virtual_replay_paces_by_factor() {
        let clock = Arc::new(VirtualClock::new(DateTime::<Utc>::UNIX_EPOCH));
        let feed = replay_samples(
            vec![sample(0), sample(300), sample(600)],
            SharedAcceleration::new(AccelerationMode::Fixed(10.0)),
            clock.clone(),
        );
        let got = feed.collect_all().unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(clock.elapsed(), Duration::from_secs(60));
    }

    #[test]
    fn maximum_replay_never_sleeps() {
        let clock = Arc::new(VirtualClock::new(DateTime::<Utc>::UNIX_EPOCH));
        let samples: Vec<_> = (0..50).map(|i| sample(i * 300)).collect();
        let feed = replay_samples(
            samples.clone(),
            SharedAcceleration::new(AccelerationMode::Maximum),
            clock.clone(),
        );
        assert_eq!(feed.collect_all().unwrap(), samples);
        assert_eq!(clock.elapsed(), Duration::ZERO);
    }

    #[test]
    fn replay_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let good = formats::telemetry_line(&sample(0));
        let mut text = String::new();
        for _ in 0..6 {
            text.push_str(&good);
            text.push('\n');
        }
        text.push_str("{broken\n");
        std::fs::write(&path, &text).unwrap();
        assert!(matches!(
            load_replay_file(&path, 300),
            Err(TelemetryError::ParseError { line: 7, .. })
        ));

        std::fs::write(&path, formats::telemetry_line(&sample(450)) + "\n").unwrap();
        assert!(matches!(
            load_replay_file(&path, 300),
            Err(TelemetryError::GranularityMismatch { ts: 450, .. })
        ));

        let unsorted = [sample(300), sample(0)]
            .iter()
            .map(formats::telemetry_line)
            .collect::<Vec<_>>()
            .join("\n");
        std::fs::write(&path, unsorted).unwrap();
        assert!(matches!(
            load_replay_file(&path, 300),
            Err(TelemetryError::Unsorted { line: 2 })
        ));
    }

    #[test]
    fn telemetry_log_dedupes_and_appends() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = TelemetryLog::open(dir.path()).unwrap();
        let mut samples: Vec<_> = (0..9).map(|i| sample(i * 300)).collect();
        samples.push(sample(0));
        assert_eq!(ingest_and_persist(samples, &mut log).unwrap(), 9);
        assert_eq!(log.duplicates(), 1);
        drop(log);

        let mut log = TelemetryLog::open(dir.path()).unwrap();
        assert!(!log.append(&sample(300)).unwrap());
        assert!(log.append(&sample(9 * 300)).unwrap());
        let text = std::fs::read_to_string(dir.path().join(TelemetryLog::FILE_NAME)).unwrap();
        assert_eq!(text.lines().count(), 10);
        assert!(text.starts_with(&formats::telemetry_line(&sample(0))));
    }

    #[test]
    fn schedule_lookup() {
        let p = GroundTruthProfile::named("drift").unwrap();
        assert_eq!(p.r_at(0), 2.0);
        assert_eq!(p.r_at(3 * 86400 - 1), 2.0);
        assert_eq!(p.r_at(3 * 86400), 3.0);
        for name in GroundTruthProfile::NAMES {
            GroundTruthProfile::named(name).unwrap().validate().unwrap();
        }
        assert!(GroundTruthProfile::named("nope").is_none());
    }

    #[test]
    fn profile_validation_rejects_bad_schedule() {
        let mut p = GroundTruthProfile::named("steady").unwrap();
        p.true_r = vec![(0, 2.0), (0, 3.0)];
        assert!(matches!(p.validate(), Err(TelemetryError::InvalidProfile(_))));
        let mut p = GroundTruthProfile::named("steady").unwrap();
        p.noise = NoiseModel::Watts(-1.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn synthesis_is_deterministic() {
        let p = GroundTruthProfile::named("steady").unwrap();
        let a = synthesize_ground_truth(&p, 6 * 3600, 7).unwrap();
        let b = synthesize_ground_truth(&p, 6 * 3600, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.telemetry.len(), 6 * 12);
        assert!(crate::model::validate_workload(a.tasks.clone()).is_ok());
        let c = synthesize_ground_truth(&p, 6 * 3600, 8).unwrap();
        assert_ne!(a.tasks, c.tasks);
    }
}
