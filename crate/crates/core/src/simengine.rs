//! Deterministic discrete-event simulator.
//!
//! Tasks are admitted FIFO and placed first-fit in topology order, with
//! all-or-nothing core grants. A host whose aggregate fragment demand exceeds
//! its capacity runs every fragment at `capacity / demand` speed (processor
//! sharing), so utilization never exceeds 1 and work is conserved.
//!
//! Fragment completions land on integer seconds: a fragment completes at the
//! first whole second by which its remaining work is exhausted.
//!
//! At equal timestamps events run in rank order
//! `FragmentComplete < TaskArrival < SampleTick < WindowEnd`, ties broken by
//! task id, so samples observe a settled state.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    PowerModelParams, SampleSource, TelemetrySample, Timestamp, Topology, Window, WorkloadTask,
    DEFAULT_SAMPLING_GRANULARITY,
};
use crate::power::{self, PowerError};

/// Remaining nominal seconds at or below which a fragment counts as done.
pub const COMPLETION_TOLERANCE: f64 = 1e-6;

/// Default FLOPs per core cycle used for nominal throughput.
pub const DEFAULT_FLOPS_PER_CYCLE: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("task {task} requests {requested} cores but the largest host has {largest}")]
    TaskUnschedulable {
        task: String,
        requested: u32,
        largest: u32,
    },
    #[error("event at t={event} precedes clock t={clock}")]
    ClockRegression { clock: Timestamp, event: Timestamp },
    #[error("simulation state is at t={clock}, window starts at t={window_start}")]
    WindowMisaligned {
        clock: Timestamp,
        window_start: Timestamp,
    },
    #[error("task {task} submitted at t={submit} outside window [{start}, {end})")]
    TaskOutsideWindow {
        task: String,
        submit: Timestamp,
        start: Timestamp,
        end: Timestamp,
    },
    #[error("invalid simulator configuration: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Power(#[from] PowerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: Topology,
    pub sampling_granularity: i64,
    pub flops_per_cycle: f64,
    /// Per-host idle/max power overriding the topology. The exponent always
    /// comes from the run's calibration state.
    pub power_params_override: BTreeMap<String, PowerModelParams>,
    /// Record a per-event trace in [`WindowSimulation::trace`].
    pub trace_events: bool,
}

impl SimConfig {
    pub fn new(topology: Topology) -> Self {
        Self {
            topology,
            sampling_granularity: DEFAULT_SAMPLING_GRANULARITY,
            flops_per_cycle: DEFAULT_FLOPS_PER_CYCLE,
            power_params_override: BTreeMap::new(),
            trace_events: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.sampling_granularity <= 0 {
            return Err(SimError::InvalidConfig("sampling_granularity"));
        }
        if !(self.flops_per_cycle.is_finite() && self.flops_per_cycle > 0.0) {
            return Err(SimError::InvalidConfig("flops_per_cycle"));
        }
        Ok(())
    }

    /// Effective per-host power parameters under exponent `r`, in topology order.
    pub fn host_params(&self, r: f64) -> Vec<PowerModelParams> {
        self.topology
            .hosts
            .iter()
            .map(|h| {
                self.power_params_override
                    .get(&h.id)
                    .copied()
                    .unwrap_or(h.power)
                    .with_r(r)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventRank {
    FragmentComplete = 0,
    TaskArrival = 1,
    SampleTick = 2,
    WindowEnd = 3,
}

#[derive(Debug, Clone)]
enum EventKind {
    FragmentComplete { host: usize, generation: u64 },
    TaskArrival(Arc<WorkloadTask>),
    SampleTick,
    WindowEnd,
}

impl EventKind {
    fn rank(&self) -> EventRank {
        match self {
            EventKind::FragmentComplete { .. } => EventRank::FragmentComplete,
            EventKind::TaskArrival(_) => EventRank::TaskArrival,
            EventKind::SampleTick => EventRank::SampleTick,
            EventKind::WindowEnd => EventRank::WindowEnd,
        }
    }
}

#[derive(Debug, Clone)]
struct Event {
    time: Timestamp,
    task_id: Arc<str>,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (Timestamp, EventRank, &str, u64) {
        (self.time, self.kind.rank(), &self.task_id, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

/// Time-ordered event set keyed by `(time, rank, task id, insertion seq)`.
#[derive(Debug, Clone, Default)]
struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
    next_seq: u64,
}

impl EventQueue {
    fn push(&mut self, time: Timestamp, task_id: Arc<str>, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Event {
            time,
            task_id,
            seq,
            kind,
        }));
    }

    fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    fn len(&self) -> usize {
        self.heap.len()
    }
}

#[derive(Debug, Clone)]
struct RunningTask {
    task: Arc<WorkloadTask>,
    fragment_index: usize,
    /// Nominal (full-speed) seconds left in the current fragment.
    remaining: f64,
    /// MHz·s of capacity delivered so far.
    delivered_work: f64,
    started_at: Timestamp,
}

impl RunningTask {
    fn demand(&self) -> f64 {
        self.task.fragments[self.fragment_index].cpu_demand
    }

    fn fragment_duration(&self) -> i64 {
        self.task.fragments[self.fragment_index].duration
    }
}

#[derive(Debug, Clone)]
struct HostState {
    free_cores: u32,
    capacity: f64,
    generation: u64,
    tasks: Vec<RunningTask>,
}

impl HostState {
    fn demand(&self) -> f64 {
        self.tasks.iter().map(RunningTask::demand).sum()
    }

    fn utilization(&self) -> f64 {
        (self.demand() / self.capacity).min(1.0)
    }

    /// Fraction of nominal speed every fragment on the host runs at.
    fn speed(&self) -> f64 {
        let demand = self.demand();
        if demand > self.capacity {
            self.capacity / demand
        } else {
            1.0
        }
    }
}

/// Read-only view of one task running on a host.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunningView {
    pub task_id: String,
    pub fragment_index: usize,
    /// Nominal seconds of the current fragment already executed.
    pub fragment_elapsed: f64,
    pub allocated_cores: u32,
}

/// Mutable simulator state carried from one window to the next.
#[derive(Debug, Clone)]
pub struct SimState {
    clock: Timestamp,
    pending: VecDeque<Arc<WorkloadTask>>,
    hosts: Vec<HostState>,
    events: EventQueue,
}

impl SimState {
    pub fn new(topology: &Topology, clock: Timestamp) -> Self {
        Self {
            clock,
            pending: VecDeque::new(),
            hosts: topology
                .hosts
                .iter()
                .map(|h| HostState {
                    free_cores: h.core_count,
                    capacity: h.capacity_mhz(),
                    generation: 0,
                    tasks: Vec::new(),
                })
                .collect(),
            events: EventQueue::default(),
        }
    }

    pub fn clock(&self) -> Timestamp {
        self.clock
    }

    pub fn pending_ids(&self) -> Vec<&str> {
        self.pending.iter().map(|t| t.id.as_str()).collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn running_count(&self) -> usize {
        self.hosts.iter().map(|h| h.tasks.len()).sum()
    }

    pub fn event_count(&self) -> usize {
        self.events.len()
    }

    /// Tasks currently on each host, keyed by host id.
    pub fn running(&self, topology: &Topology) -> BTreeMap<String, Vec<RunningView>> {
        topology
            .hosts
            .iter()
            .zip(&self.hosts)
            .map(|(spec, host)| {
                let views = host
                    .tasks
                    .iter()
                    .map(|t| RunningView {
                        task_id: t.task.id.clone(),
                        fragment_index: t.fragment_index,
                        fragment_elapsed: t.fragment_duration() as f64 - t.remaining,
                        allocated_cores: t.task.core_request,
                    })
                    .collect();
                (spec.id.clone(), views)
            })
            .collect()
    }

    pub fn allocated_cores(&self, topology: &Topology) -> Vec<u32> {
        topology
            .hosts
            .iter()
            .zip(&self.hosts)
            .map(|(spec, host)| spec.core_count - host.free_cores)
            .collect()
    }

    /// Per-host utilization in topology order.
    pub fn host_utilization(&self) -> Vec<f64> {
        self.hosts.iter().map(HostState::utilization).collect()
    }

    /// Enqueues a task arrival at its submit time.
    pub fn enqueue_arrival(&mut self, task: WorkloadTask) {
        let task = Arc::new(task);
        let id: Arc<str> = Arc::from(task.id.as_str());
        self.events
            .push(task.submit_time, id, EventKind::TaskArrival(task));
    }

    pub fn enqueue_sample_tick(&mut self, at: Timestamp) {
        self.events.push(at, Arc::from(""), EventKind::SampleTick);
    }

    pub fn enqueue_window_end(&mut self, at: Timestamp) {
        self.events.push(at, Arc::from(""), EventKind::WindowEnd);
    }

    fn advance_to(&mut self, time: Timestamp) {
        let dt = (time - self.clock) as f64;
        if dt > 0.0 {
            for host in &mut self.hosts {
                if host.tasks.is_empty() {
                    continue;
                }
                let step = host.speed() * dt;
                for task in &mut host.tasks {
                    task.delivered_work += task.demand() * task.remaining.min(step).max(0.0);
                    task.remaining -= step;
                }
            }
        }
        self.clock = time;
    }

    /// Invalidates outstanding completion events of `host` and schedules fresh ones.
    fn reschedule(&mut self, host: usize) {
        let clock = self.clock;
        let state = &mut self.hosts[host];
        state.generation += 1;
        let generation = state.generation;
        let speed = state.speed();
        for task in &state.tasks {
            let offset = if task.remaining <= COMPLETION_TOLERANCE {
                0
            } else {
                ((task.remaining - COMPLETION_TOLERANCE) / speed).ceil() as i64
            };
            self.events.push(
                clock + offset,
                Arc::from(task.task.id.as_str()),
                EventKind::FragmentComplete { host, generation },
            );
        }
    }

    fn first_fit(&self, cores: u32) -> Option<usize> {
        self.hosts.iter().position(|h| h.free_cores >= cores)
    }

    fn place(&mut self, host: usize, task: Arc<WorkloadTask>) {
        let state = &mut self.hosts[host];
        state.free_cores -= task.core_request;
        let remaining = task.fragments[0].duration as f64;
        state.tasks.push(RunningTask {
            task,
            fragment_index: 0,
            remaining,
            delivered_work: 0.0,
            started_at: self.clock,
        });
    }

    /// Places pending tasks that now fit, scanning the queue in FIFO order.
    fn drain_pending(&mut self, touched: &mut Vec<usize>) {
        let mut still_waiting = VecDeque::with_capacity(self.pending.len());
        while let Some(task) = self.pending.pop_front() {
            match self.first_fit(task.core_request) {
                Some(host) => {
                    self.place(host, task);
                    touched.push(host);
                }
                None => still_waiting.push_back(task),
            }
        }
        self.pending = still_waiting;
    }
}

/// Task that finished during a window, with its work accounting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskCompletion {
    pub task_id: String,
    pub host: String,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub required_work: f64,
    pub delivered_work: f64,
}

/// One emitted prediction together with the per-host utilization behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub sample: TelemetrySample,
    pub host_utilization: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub time: Timestamp,
    pub rank: EventRank,
    pub task_id: String,
    pub stale: bool,
}

/// Outcome of processing one event.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Idle,
    Sample(SampleRecord),
    Completed(TaskCompletion),
    WindowEnd,
}

/// Processes the earliest event. Returns `None` when the queue is empty.
pub fn step_to_next_event(
    config: &SimConfig,
    params: &[PowerModelParams],
    state: &mut SimState,
    trace: Option<&mut Vec<TraceEntry>>,
) -> Result<Option<Vec<StepOutcome>>, SimError> {
    let Some(event) = state.events.pop() else {
        return Ok(None);
    };
    if event.time < state.clock {
        return Err(SimError::ClockRegression {
            clock: state.clock,
            event: event.time,
        });
    }
    state.advance_to(event.time);

    let stale = matches!(
        event.kind,
        EventKind::FragmentComplete { host, generation } if state.hosts[host].generation != generation
    );
    if let Some(trace) = trace {
        trace.push(TraceEntry {
            time: event.time,
            rank: event.kind.rank(),
            task_id: event.task_id.to_string(),
            stale,
        });
    }
    if stale {
        return Ok(Some(vec![StepOutcome::Idle]));
    }

    let mut outcomes = Vec::new();
    match event.kind {
        EventKind::FragmentComplete { host, .. } => {
            let mut touched = vec![host];
            let host_state = &mut state.hosts[host];
            let pos = host_state
                .tasks
                .iter()
                .position(|t| *t.task.id == *event.task_id)
                .expect("valid completion event refers to a running task");
            let running = &mut host_state.tasks[pos];
            if running.fragment_index + 1 < running.task.fragments.len() {
                running.fragment_index += 1;
                running.remaining = running.fragment_duration() as f64;
            } else {
                let done = host_state.tasks.remove(pos);
                host_state.free_cores += done.task.core_request;
                outcomes.push(StepOutcome::Completed(TaskCompletion {
                    task_id: done.task.id.clone(),
                    host: config.topology.hosts[host].id.clone(),
                    started_at: done.started_at,
                    finished_at: state.clock,
                    required_work: done.task.total_work(),
                    delivered_work: done.delivered_work,
                }));
                state.drain_pending(&mut touched);
            }
            touched.sort_unstable();
            touched.dedup();
            for h in touched {
                state.reschedule(h);
            }
        }
        EventKind::TaskArrival(task) => {
            schedule(config, state, task)?;
        }
        EventKind::SampleTick => {
            let host_utilization = state.host_utilization();
            let power_draw = power::cluster_power(params, &host_utilization)?;
            let cpu_utilization = cluster_mean_utilization(&config.topology, &host_utilization);
            outcomes.push(StepOutcome::Sample(SampleRecord {
                sample: TelemetrySample {
                    timestamp: state.clock,
                    power_draw,
                    cpu_utilization,
                    source: SampleSource::Prediction,
                },
                host_utilization,
            }));
        }
        EventKind::WindowEnd => outcomes.push(StepOutcome::WindowEnd),
    }
    if outcomes.is_empty() {
        outcomes.push(StepOutcome::Idle);
    }
    Ok(Some(outcomes))
}

/// Admits an arriving task: first host in topology order with enough free
/// cores, otherwise the back of the pending queue.
pub fn schedule(
    config: &SimConfig,
    state: &mut SimState,
    task: Arc<WorkloadTask>,
) -> Result<(), SimError> {
    let largest = config.topology.max_core_count();
    if task.core_request > largest {
        return Err(SimError::TaskUnschedulable {
            task: task.id.clone(),
            requested: task.core_request,
            largest,
        });
    }
    match state.first_fit(task.core_request) {
        Some(host) => {
            state.place(host, task);
            state.reschedule(host);
        }
        None => state.pending.push_back(task),
    }
    Ok(())
}

/// Utilization of one host given the fragment demands running on it.
pub fn host_utilization(capacity_mhz: f64, active_demands: &[f64]) -> f64 {
    // folded from +0.0: an empty float sum is -0.0
    let demand = active_demands.iter().fold(0.0, |acc, d| acc + d);
    (demand / capacity_mhz).min(1.0)
}

/// Capacity-weighted mean of per-host utilization.
pub fn cluster_mean_utilization(topology: &Topology, per_host_u: &[f64]) -> f64 {
    let capacity = topology.total_capacity_mhz();
    let used = topology
        .hosts
        .iter()
        .zip(per_host_u)
        .fold(0.0, |acc, (h, u)| acc + u * h.capacity_mhz());
    (used / capacity).clamp(0.0, 1.0)
}

/// Nominal cluster throughput in TFLOPs at the given per-host utilization.
pub fn cluster_tflops(topology: &Topology, per_host_u: &[f64], flops_per_cycle: f64) -> f64 {
    topology
        .hosts
        .iter()
        .zip(per_host_u)
        .map(|(h, u)| u * f64::from(h.core_count) * h.core_frequency * 1e6 * flops_per_cycle / 1e12)
        .sum()
}

/// Everything one window of simulation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSimulation {
    pub window: Window,
    pub samples: Vec<SampleRecord>,
    pub completions: Vec<TaskCompletion>,
    pub trace: Vec<TraceEntry>,
}

impl WindowSimulation {
    pub fn predictions(&self) -> Vec<TelemetrySample> {
        self.samples.iter().map(|s| s.sample).collect()
    }

    pub fn tflops(&self, config: &SimConfig) -> Vec<(Timestamp, f64)> {
        self.samples
            .iter()
            .map(|s| {
                (
                    s.sample.timestamp,
                    cluster_tflops(&config.topology, &s.host_utilization, config.flops_per_cycle),
                )
            })
            .collect()
    }
}

/// Simulates one window starting from `carryover` with power exponent `r`.
///
/// Returns a prediction for every sample tick in the window and the state at
/// the window end. Identical inputs give identical outputs.
pub fn simulate_window(
    config: &SimConfig,
    window: Window,
    mut carryover: SimState,
    tasks: &[WorkloadTask],
    r: f64,
) -> Result<(WindowSimulation, SimState), SimError> {
    config.validate()?;
    if carryover.clock != window.start {
        return Err(SimError::WindowMisaligned {
            clock: carryover.clock,
            window_start: window.start,
        });
    }
    for task in tasks {
        if !window.contains(task.submit_time) {
            return Err(SimError::TaskOutsideWindow {
                task: task.id.clone(),
                submit: task.submit_time,
                start: window.start,
                end: window.end,
            });
        }
        carryover.enqueue_arrival(task.clone());
    }
    for tick in window.ticks(config.sampling_granularity) {
        carryover.enqueue_sample_tick(tick);
    }
    carryover.enqueue_window_end(window.end);

    let params = config.host_params(r);
    let mut out = WindowSimulation {
        window,
        samples: Vec::new(),
        completions: Vec::new(),
        trace: Vec::new(),
    };
    'events: loop {
        let trace = config.trace_events.then_some(&mut out.trace);
        let outcomes = step_to_next_event(config, &params, &mut carryover, trace)?
            .expect("window end event is always queued");
        for outcome in outcomes {
            match outcome {
                StepOutcome::Idle => {}
                StepOutcome::Sample(record) => out.samples.push(record),
                StepOutcome::Completed(done) => out.completions.push(done),
                StepOutcome::WindowEnd => break 'events,
            }
        }
    }
    Ok((out, carryover))
}
