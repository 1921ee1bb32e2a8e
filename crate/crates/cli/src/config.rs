//! Run configuration file. Relative paths resolve against the file's
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dctwin_core::calibrator::{default_grid, CalibrationConfig};
use dctwin_core::orchestrator::{RecommendationConfig, TwinConfig};
use dctwin_core::simengine::{SimConfig, DEFAULT_FLOPS_PER_CYCLE};
use dctwin_core::telemetry::{SourceKind, TelemetrySource};
use dctwin_core::{AccelerationMode, PowerModelParams, DEFAULT_INITIAL_R, DEFAULT_SAMPLING_GRANULARITY};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TelemetryRef {
    File(PathBuf),
    Stream { stream: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_grid")]
    pub grid: Vec<f64>,
    #[serde(default = "four")]
    pub history_windows: i64,
    #[serde(default = "six")]
    pub min_history_samples: usize,
}

fn yes() -> bool {
    true
}
fn four() -> i64 {
    4
}
fn six() -> usize {
    6
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            enabled: true,
            grid: default_grid(),
            history_windows: 4,
            min_history_samples: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerOverride {
    pub p_idle_w: f64,
    pub p_max_w: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiSection {
    #[serde(default)]
    pub addr: Option<String>,
    /// Allow `POST /api/v1/control`.
    #[serde(default)]
    pub control: bool,
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub topology: PathBuf,
    pub workload: PathBuf,
    pub telemetry: TelemetryRef,
    pub workspace: PathBuf,
    #[serde(default = "hour")]
    pub window_duration_s: i64,
    #[serde(default = "granularity")]
    pub sampling_granularity_s: i64,
    #[serde(default)]
    pub horizon_s: Option<i64>,
    #[serde(default = "max")]
    pub acceleration: String,
    #[serde(default = "initial_r")]
    pub initial_r: f64,
    #[serde(default = "flops")]
    pub flops_per_cycle: f64,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub power_overrides: BTreeMap<String, PowerOverride>,
    #[serde(default)]
    pub recommendations: Option<RecommendationConfig>,
    #[serde(default)]
    pub api: ApiSection,
}

fn hour() -> i64 {
    3600
}
fn granularity() -> i64 {
    DEFAULT_SAMPLING_GRANULARITY
}
fn max() -> String {
    "max".into()
}
fn initial_r() -> f64 {
    DEFAULT_INITIAL_R
}
fn flops() -> f64 {
    DEFAULT_FLOPS_PER_CYCLE
}

impl RunConfigFile {
    pub fn new(topology: &str, workload: &str, telemetry: &str, workspace: &str) -> Self {
        Self {
            topology: topology.into(),
            workload: workload.into(),
            telemetry: TelemetryRef::File(telemetry.into()),
            workspace: workspace.into(),
            window_duration_s: hour(),
            sampling_granularity_s: granularity(),
            horizon_s: None,
            acceleration: max(),
            initial_r: initial_r(),
            flops_per_cycle: flops(),
            calibration: CalibrationSection::default(),
            power_overrides: BTreeMap::new(),
            recommendations: None,
            api: ApiSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config: Self =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.topology);
        resolve(&mut config.workload);
        resolve(&mut config.workspace);
        if let TelemetryRef::File(p) = &mut config.telemetry {
            resolve(p);
        }
        Ok(config)
    }

    pub fn acceleration(&self) -> Result<AccelerationMode, String> {
        self.acceleration.parse().map_err(|e: dctwin_core::ModelError| e.to_string())
    }

    pub fn source(&self) -> TelemetrySource {
        let kind = match &self.telemetry {
            TelemetryRef::File(p) => SourceKind::FileReplay(p.clone()),
            TelemetryRef::Stream { stream } => SourceKind::Stream(stream.clone()),
        };
        TelemetrySource {
            kind,
            granularity: self.sampling_granularity_s,
        }
    }

    /// Builds the twin configuration around an already loaded topology.
    pub fn twin_config(&self, topology: dctwin_core::Topology) -> Result<TwinConfig, String> {
        let mut sim = SimConfig::new(topology);
        sim.sampling_granularity = self.sampling_granularity_s;
        sim.flops_per_cycle = self.flops_per_cycle;
        for (host, o) in &self.power_overrides {
            let params = PowerModelParams::new(o.p_idle_w, o.p_max_w, self.initial_r)
                .map_err(|e| format!("power override for {host}: {e}"))?;
            sim.power_params_override.insert(host.clone(), params);
        }
        let mut config = TwinConfig::new(sim, self.workspace.clone());
        config.window_duration = self.window_duration_s;
        config.horizon = self.horizon_s;
        config.acceleration = self.acceleration()?;
        config.initial_r = self.initial_r;
        config.calibration = CalibrationConfig {
            grid: self.calibration.grid.clone(),
            history_span: self.calibration.history_windows * self.window_duration_s,
            min_history_samples: self.calibration.min_history_samples,
            enabled: self.calibration.enabled,
        };
        if let Some(rec) = &self.recommendations {
            config.recommendations = rec.clone();
        }
        Ok(config)
    }
}
