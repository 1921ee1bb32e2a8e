//! Shared domain types for the twin: topology, workload, telemetry, windows,
//! reports and operator recommendations.
//!
//! Time is integer seconds since the trace epoch. All types are plain values.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Seconds since the trace epoch.
pub type Timestamp = i64;

/// Default telemetry sampling granularity (five minutes).
pub const DEFAULT_SAMPLING_GRANULARITY: i64 = 300;

/// Ground-truth samples below this power (watts) are excluded from relative
/// error metrics, since the error divides by the measured value.
pub const MAPE_EPSILON_W: f64 = 1.0;

/// Lower bound of the admissible calibration exponent.
pub const R_MIN: f64 = 0.5;
/// Upper bound of the admissible calibration exponent.
pub const R_MAX: f64 = 4.0;

/// Initial calibration exponent used before any calibration has completed.
pub const DEFAULT_INITIAL_R: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid topology: {invariant} violated (host {host:?})")]
    InvalidTopology {
        invariant: &'static str,
        host: Option<String>,
    },
    #[error("invalid workload: {invariant} violated (task {task})")]
    InvalidWorkload { invariant: &'static str, task: String },
    #[error("invalid power model parameters: {0}")]
    InvalidPowerParams(&'static str),
    #[error("run metadata finishes before it starts")]
    MetadataOrder,
    #[error("invalid acceleration mode {0:?}")]
    InvalidAcceleration(String),
    #[error("window duration {duration} must be a positive multiple of granularity {granularity}")]
    WindowGranularity { duration: i64, granularity: i64 },
    #[error("recommendation {0} was already decided")]
    AlreadyDecided(String),
}

/// Parameters of the CPU power curve `P(u) = P_idle + (P_max - P_idle)(2u - u^r)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModelParams {
    pub p_idle: f64,
    pub p_max: f64,
    pub r: f64,
}

impl PowerModelParams {
    pub fn new(p_idle: f64, p_max: f64, r: f64) -> Result<Self, ModelError> {
        let params = Self { p_idle, p_max, r };
        params.validate()?;
        Ok(params)
    }

    pub fn with_r(self, r: f64) -> Self {
        Self { r, ..self }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.p_idle.is_finite() || self.p_idle < 0.0 {
            return Err(ModelError::InvalidPowerParams("p_idle"));
        }
        if !self.p_max.is_finite() || self.p_max < self.p_idle {
            return Err(ModelError::InvalidPowerParams("p_max"));
        }
        if !(R_MIN..=R_MAX).contains(&self.r) {
            return Err(ModelError::InvalidPowerParams("r"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub id: String,
    pub core_count: u32,
    /// MHz per core.
    pub core_frequency: f64,
    /// MiB, informational only.
    pub memory: u64,
    pub power: PowerModelParams,
}

impl HostSpec {
    /// Total processing capacity in MHz.
    pub fn capacity_mhz(&self) -> f64 {
        f64::from(self.core_count) * self.core_frequency
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub name: String,
    pub hosts: Vec<HostSpec>,
}

impl Topology {
    pub fn total_capacity_mhz(&self) -> f64 {
        self.hosts.iter().map(HostSpec::capacity_mhz).sum()
    }

    pub fn max_core_count(&self) -> u32 {
        self.hosts.iter().map(|h| h.core_count).max().unwrap_or(0)
    }

    /// Cluster-level envelope of the power curve: summed idle and max power
    /// under the given exponent.
    pub fn aggregate_params(&self, r: f64) -> PowerModelParams {
        PowerModelParams {
            p_idle: self.hosts.iter().map(|h| h.power.p_idle).sum(),
            p_max: self.hosts.iter().map(|h| h.power.p_max).sum(),
            r,
        }
    }
}

/// Returns the topology iff every host and topology invariant holds.
pub fn validate_topology(raw: Topology) -> Result<Topology, ModelError> {
    let fail = |invariant, host: &HostSpec| ModelError::InvalidTopology {
        invariant,
        host: Some(host.id.clone()),
    };
    if raw.hosts.is_empty() {
        return Err(ModelError::InvalidTopology {
            invariant: "non_empty",
            host: None,
        });
    }
    let mut seen = HashSet::new();
    for host in &raw.hosts {
        if !seen.insert(host.id.as_str()) {
            return Err(fail("duplicate_id", host));
        }
        if host.core_count < 1 {
            return Err(fail("core_count", host));
        }
        if !(host.core_frequency.is_finite() && host.core_frequency > 0.0) {
            return Err(fail("core_frequency", host));
        }
        let capacity = host.capacity_mhz();
        if !(capacity.is_finite() && capacity > 0.0) {
            return Err(fail("capacity", host));
        }
        if let Err(ModelError::InvalidPowerParams(which)) = host.power.validate() {
            return Err(fail(which, host));
        }
    }
    Ok(raw)
}

/// A phase of a task with constant CPU demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    /// Seconds at full speed.
    pub duration: i64,
    /// Aggregate MHz across the task's cores.
    pub cpu_demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadTask {
    pub id: String,
    pub submit_time: Timestamp,
    pub core_request: u32,
    pub fragments: Vec<Fragment>,
}

impl WorkloadTask {
    pub fn total_duration(&self) -> i64 {
        self.fragments.iter().map(|f| f.duration).sum()
    }

    /// Work in MHz·s the task needs to complete.
    pub fn total_work(&self) -> f64 {
        self.fragments
            .iter()
            .map(|f| f.cpu_demand * f.duration as f64)
            .sum()
    }
}

/// Validates every task and returns them sorted by `(submit_time, id)`.
pub fn validate_workload(mut tasks: Vec<WorkloadTask>) -> Result<Vec<WorkloadTask>, ModelError> {
    let mut seen = HashSet::new();
    for task in &tasks {
        let fail = |invariant| ModelError::InvalidWorkload {
            invariant,
            task: task.id.clone(),
        };
        if !seen.insert(task.id.as_str()) {
            return Err(fail("duplicate_id"));
        }
        if task.submit_time < 0 {
            return Err(fail("submit_time"));
        }
        if task.core_request < 1 {
            return Err(fail("core_request"));
        }
        if task.fragments.is_empty() {
            return Err(fail("empty_fragments"));
        }
        for fragment in &task.fragments {
            if fragment.duration <= 0 {
                return Err(fail("fragment_duration"));
            }
            if !(fragment.cpu_demand.is_finite() && fragment.cpu_demand >= 0.0) {
                return Err(fail("cpu_demand"));
            }
        }
    }
    tasks.sort_by(|a, b| (a.submit_time, &a.id).cmp(&(b.submit_time, &b.id)));
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSource {
    GroundTruth,
    Prediction,
}

/// One timestamped cluster-aggregate observation. Field names on the wire
/// follow the telemetry record format `{ts, power_w, cpu_util, source}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    #[serde(rename = "ts")]
    pub timestamp: Timestamp,
    #[serde(rename = "power_w")]
    pub power_draw: f64,
    #[serde(rename = "cpu_util")]
    pub cpu_utilization: f64,
    pub source: SampleSource,
}

impl TelemetrySample {
    pub fn validate(&self, granularity: i64) -> Result<(), &'static str> {
        if self.timestamp.rem_euclid(granularity) != 0 {
            return Err("timestamp not aligned to sampling granularity");
        }
        if !(0.0..=1.0).contains(&self.cpu_utilization) {
            return Err("cpu_util outside [0, 1]");
        }
        if !(self.power_draw.is_finite() && self.power_draw >= 0.0) {
            return Err("power_w negative or non-finite");
        }
        Ok(())
    }
}

/// Half-open interval `[start, end)` of one window of operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub index: u64,
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn nth(index: u64, duration: i64) -> Self {
        let start = index as i64 * duration;
        Self {
            index,
            start,
            end: start + duration,
        }
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.start <= ts && ts < self.end
    }

    pub fn duration(&self) -> i64 {
        self.end - self.start
    }

    /// Sample tick timestamps inside the window.
    pub fn ticks(&self, granularity: i64) -> impl Iterator<Item = Timestamp> {
        (self.start..self.end).step_by(granularity as usize)
    }
}

/// Contiguous windows partitioning `[0, horizon)`; a trailing partial window
/// is included so the whole horizon is covered.
pub fn windows(duration: i64, horizon: i64) -> Vec<Window> {
    assert!(duration > 0, "window duration must be positive");
    let count = (horizon.max(0) + duration - 1) / duration;
    (0..count as u64).map(|k| Window::nth(k, duration)).collect()
}

pub fn check_window_granularity(duration: i64, granularity: i64) -> Result<(), ModelError> {
    if granularity <= 0 || duration <= 0 || duration % granularity != 0 {
        return Err(ModelError::WindowGranularity {
            duration,
            granularity,
        });
    }
    Ok(())
}

/// Pace of simulated time relative to wall-clock time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "factor")]
pub enum AccelerationMode {
    RealTime,
    Fixed(f64),
    Maximum,
}

impl AccelerationMode {
    /// Simulated seconds per wall-clock second, `None` for unbounded.
    pub fn factor(&self) -> Option<f64> {
        match self {
            AccelerationMode::RealTime => Some(1.0),
            AccelerationMode::Fixed(f) => Some(*f),
            AccelerationMode::Maximum => None,
        }
    }
}

impl fmt::Display for AccelerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccelerationMode::RealTime => write!(f, "realtime"),
            AccelerationMode::Fixed(factor) => write!(f, "fixed:{factor}"),
            AccelerationMode::Maximum => write!(f, "max"),
        }
    }
}

impl FromStr for AccelerationMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || ModelError::InvalidAcceleration(s.to_string());
        match s.trim() {
            "realtime" => Ok(AccelerationMode::RealTime),
            "max" | "maximum" => Ok(AccelerationMode::Maximum),
            other => {
                let factor: f64 = other
                    .strip_prefix("fixed:")
                    .ok_or_else(invalid)?
                    .parse()
                    .map_err(|_| invalid())?;
                if factor.is_finite() && factor > 0.0 {
                    Ok(AccelerationMode::Fixed(factor))
                } else {
                    Err(invalid())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub simulation_started_at: DateTime<Utc>,
    pub simulation_finished_at: DateTime<Utc>,
    pub acceleration_mode: AccelerationMode,
    pub correlation_id: String,
}

/// Builds the metadata record for one simulation run.
pub fn record_metadata(
    started: DateTime<Utc>,
    finished: DateTime<Utc>,
    acceleration_mode: AccelerationMode,
    correlation_id: impl Into<String>,
) -> Result<RunMetadata, ModelError> {
    if finished < started {
        return Err(ModelError::MetadataOrder);
    }
    Ok(RunMetadata {
        simulation_started_at: started,
        simulation_finished_at: finished,
        acceleration_mode,
        correlation_id: correlation_id.into(),
    })
}

/// Groups reports by the correlation id of their run metadata.
pub fn group_by_correlation(reports: &[WindowReport]) -> BTreeMap<&str, Vec<&WindowReport>> {
    let mut groups: BTreeMap<&str, Vec<&WindowReport>> = BTreeMap::new();
    for report in reports {
        groups
            .entry(report.metadata.correlation_id.as_str())
            .or_default()
            .push(report);
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub r: f64,
    pub mape_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub evaluated: Vec<CandidateScore>,
    pub selected_r: f64,
    pub history_window: (Timestamp, Timestamp),
    pub produced_in_window: u64,
    pub applies_from_window: u64,
}

impl CalibrationResult {
    pub fn selected_mape(&self) -> Option<f64> {
        self.evaluated
            .iter()
            .find(|c| c.r == self.selected_r)
            .map(|c| c.mape_percent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub window: Window,
    pub predictions: Vec<TelemetrySample>,
    pub ground_truth: Vec<TelemetrySample>,
    pub mape_percent: Option<f64>,
    pub params_used: PowerModelParams,
    /// Whether `params_used` came from a completed calibration.
    pub calibrated: bool,
    pub calibration: Option<CalibrationResult>,
    pub performance_tflops: Vec<(Timestamp, f64)>,
    /// `(hour bucket, TFLOPs/kWh)` for hours completed in this window.
    pub efficiency_tflops_per_kwh: Vec<(i64, f64)>,
    /// Ground truth missed its deadline.
    pub stalled: bool,
    pub metadata: RunMetadata,
}

impl WindowReport {
    pub fn mean_utilization(&self) -> Option<f64> {
        if self.predictions.is_empty() {
            return None;
        }
        let sum: f64 = self.predictions.iter().map(|s| s.cpu_utilization).sum();
        Some(sum / self.predictions.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationKind {
    Underutilization,
    AccuracyDegraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationStatus {
    Pending,
    Approved,
    Rejected,
}

impl FromStr for RecommendationStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(Self::Pending),
            "approved" => Ok(Self::Approved),
            "rejected" => Ok(Self::Rejected),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approve,
    Reject,
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(Self::Approve),
            "reject" => Ok(Self::Reject),
            other => Err(format!("unknown decision {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub id: String,
    pub created_in_window: u64,
    pub kind: RecommendationKind,
    pub summary: String,
    pub evidence: BTreeMap<String, f64>,
    pub status: RecommendationStatus,
    pub decided_by: Option<String>,
    pub decided_at: Option<DateTime<Utc>>,
}

impl Recommendation {
    /// Applies an operator decision. Only a pending recommendation can be
    /// decided, and only once.
    pub fn decide(
        &mut self,
        decision: Decision,
        operator: impl Into<String>,
        at: DateTime<Utc>,
    ) -> Result<(), ModelError> {
        if self.status != RecommendationStatus::Pending {
            return Err(ModelError::AlreadyDecided(self.id.clone()));
        }
        self.status = match decision {
            Decision::Approve => RecommendationStatus::Approved,
            Decision::Reject => RecommendationStatus::Rejected,
        };
        self.decided_by = Some(operator.into());
        self.decided_at = Some(at);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn host(id: &str, cores: u32) -> HostSpec {
        HostSpec {
            id: id.into(),
            core_count: cores,
            core_frequency: 2100.0,
            memory: 131072,
            power: PowerModelParams::new(100.0, 350.0, 2.0).unwrap(),
        }
    }

    fn task(id: &str, submit: i64, fragments: Vec<Fragment>) -> WorkloadTask {
        WorkloadTask {
            id: id.into(),
            submit_time: submit,
            core_request: 1,
            fragments,
        }
    }

    #[test]
    fn single_valid_host_is_accepted() {
        let topo = Topology {
            name: "one".into(),
            hosts: vec![host("h1", 16)],
        };
        assert_eq!(validate_topology(topo.clone()).unwrap(), topo);
    }

    #[test]
    fn zero_cores_rejected() {
        let topo = Topology {
            name: "bad".into(),
            hosts: vec![host("h1", 0)],
        };
        assert_eq!(
            validate_topology(topo).unwrap_err(),
            ModelError::InvalidTopology {
                invariant: "core_count",
                host: Some("h1".into())
            }
        );
    }

    #[test]
    fn duplicate_host_ids_rejected() {
        let topo = Topology {
            name: "dup".into(),
            hosts: vec![host("h1", 16), host("h1", 8)],
        };
        assert!(matches!(
            validate_topology(topo),
            Err(ModelError::InvalidTopology {
                invariant: "duplicate_id",
                ..
            })
        ));
    }

    #[test]
    fn empty_topology_and_bad_power_rejected() {
        let empty = Topology {
            name: "e".into(),
            hosts: vec![],
        };
        assert!(validate_topology(empty).is_err());

        let mut h = host("h1", 4);
        h.power.p_max = 50.0;
        let topo = Topology {
            name: "p".into(),
            hosts: vec![h],
        };
        assert!(matches!(
            validate_topology(topo),
            Err(ModelError::InvalidTopology { invariant: "p_max", .. })
        ));
    }

    #[test]
    fn workload_validation() {
        assert!(validate_workload(vec![]).unwrap().is_empty());

        let err = validate_workload(vec![task("a", 0, vec![])]).unwrap_err();
        assert_eq!(
            err,
            ModelError::InvalidWorkload {
                invariant: "empty_fragments",
                task: "a".into()
            }
        );

        let frag = Fragment {
            duration: 60,
            cpu_demand: 10.0,
        };
        let sorted = validate_workload(vec![
            task("late", 600, vec![frag.clone()]),
            task("early", 0, vec![frag]),
        ])
        .unwrap();
        assert_eq!(sorted[0].id, "early");
        assert_eq!(sorted[1].id, "late");
    }

    #[test]
    fn windows_partition_horizon() {
        let ws = windows(3600, 3 * 3600);
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0].start, 0);
        assert_eq!(ws[2].end, 3 * 3600);
        assert!(ws.windows(2).all(|p| p[0].end == p[1].start));
        assert_eq!(ws[1].ticks(300).count(), 12);
    }

    #[test]
    fn acceleration_parsing() {
        assert_eq!("realtime".parse(), Ok(AccelerationMode::RealTime));
        assert_eq!("max".parse(), Ok(AccelerationMode::Maximum));
        assert_eq!("fixed:10".parse(), Ok(AccelerationMode::Fixed(10.0)));
        assert!("fixed:0".parse::<AccelerationMode>().is_err());
        assert!("warp".parse::<AccelerationMode>().is_err());
        assert_eq!(AccelerationMode::Fixed(10.0).to_string(), "fixed:10");
    }

    #[test]
    fn metadata_ordering() {
        let t = Utc::now();
        assert!(record_metadata(t, t, AccelerationMode::Maximum, "a").is_ok());
        let earlier = t - chrono::Duration::seconds(1);
        assert_eq!(
            record_metadata(t, earlier, AccelerationMode::Maximum, "a"),
            Err(ModelError::MetadataOrder)
        );
    }

    #[test]
    fn recommendation_decided_once() {
        let mut rec = Recommendation {
            id: "r1".into(),
            created_in_window: 3,
            kind: RecommendationKind::Underutilization,
            summary: "low".into(),
            evidence: BTreeMap::new(),
            status: RecommendationStatus::Pending,
            decided_by: None,
            decided_at: None,
        };
        rec.decide(Decision::Approve, "ops", Utc::now()).unwrap();
        assert_eq!(rec.status, RecommendationStatus::Approved);
        assert_eq!(rec.decided_by.as_deref(), Some("ops"));
        assert!(rec.decide(Decision::Reject, "ops", Utc::now()).is_err());
        assert_eq!(rec.status, RecommendationStatus::Approved);
    }

    #[test]
    fn telemetry_wire_names() {
        let s = TelemetrySample {
            timestamp: 300,
            power_draw: 175.5,
            cpu_utilization: 0.5,
            source: SampleSource::GroundTruth,
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"ts":300,"power_w":175.5,"cpu_util":0.5,"source":"ground_truth"}"#
        );
        assert!(s.validate(300).is_ok());
        assert!(s.validate(7).is_err());
    }
}
