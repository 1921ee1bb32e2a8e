//! File-based workspace shared by the orchestrator and the API.
//!
//! ```text
//! workspace/
//!   config.json
//!   telemetry.jsonl
//!   calibrations.jsonl
//!   recommendations.jsonl
//!   reports/window-<k>.json        deterministic report body
//!   reports/window-<k>.meta.json   wall-clock run metadata
//! ```
//!
//! A window is committed once its body file exists. Files are written to a
//! temporary name and renamed into place, so readers never see a torn file.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    CalibrationResult, Decision, ModelError, Recommendation, RecommendationKind,
    RecommendationStatus, WindowReport,
};

#[derive(Debug, Error)]
pub enum WorkspaceError {
    #[error("workspace i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt workspace file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("unknown recommendation {0}")]
    UnknownRecommendation(String),
    #[error(transparent)]
    Decision(#[from] ModelError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn corrupt(path: &Path, err: impl ToString) -> WorkspaceError {
    WorkspaceError::Corrupt {
        path: path.to_path_buf(),
        message: err.to_string(),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), WorkspaceError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, WorkspaceError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| corrupt(path, e)))
        .collect()
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), WorkspaceError> {
    let line = serde_json::to_string(value).expect("record serializes");
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(file, "{line}").map_err(io_err(path))
}

/// Calibration record as persisted in `calibrations.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub correlation_id: String,
    #[serde(flatten)]
    pub result: CalibrationResult,
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub const CONFIG: &'static str = "config.json";
    pub const CALIBRATIONS: &'static str = "calibrations.jsonl";
    pub const RECOMMENDATIONS: &'static str = "recommendations.jsonl";
    pub const TELEMETRY: &'static str = "telemetry.jsonl";

    /// Handle on an existing or future workspace directory; touches nothing.
    pub fn open(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Creates the directory layout if missing.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let ws = Self::open(root);
        fs::create_dir_all(ws.reports_dir()).map_err(io_err(&ws.root))?;
        Ok(ws)
    }

    /// Clears everything a previous run left behind and recreates the layout.
    pub fn reset(root: impl Into<PathBuf>) -> Result<Self, WorkspaceError> {
        let ws = Self::open(root);
        for name in [Self::CONFIG, Self::CALIBRATIONS, Self::RECOMMENDATIONS, Self::TELEMETRY] {
            let path = ws.root.join(name);
            match fs::remove_file(&path) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(io_err(&path)(e)),
                _ => {}
            }
        }
        let reports = ws.reports_dir();
        if reports.exists() {
            fs::remove_dir_all(&reports).map_err(io_err(&reports))?;
        }
        fs::create_dir_all(&reports).map_err(io_err(&reports))?;
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_readable(&self) -> bool {
        self.reports_dir().is_dir()
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report_path(&self, k: u64) -> PathBuf {
        self.reports_dir().join(format!("window-{k}.json"))
    }

    pub fn metadata_path(&self, k: u64) -> PathBuf {
        self.reports_dir().join(format!("window-{k}.meta.json"))
    }

    pub fn recommendations_path(&self) -> PathBuf {
        self.root.join(Self::RECOMMENDATIONS)
    }

    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<(), WorkspaceError> {
        let json = serde_json::to_vec_pretty(config).expect("config serializes");
        write_atomic(&self.root.join(Self::CONFIG), &json)
    }

    pub fn read_config<T: for<'de> Deserialize<'de>>(&self) -> Result<T, WorkspaceError> {
        let path = self.root.join(Self::CONFIG);
        let text = fs::read(&path).map_err(io_err(&path))?;
        serde_json::from_slice(&text).map_err(|e| corrupt(&path, e))
    }

    /// Persists a report: metadata sidecar first, then the body that marks
    /// the window committed.
    pub fn write_report(&self, report: &WindowReport) -> Result<(), WorkspaceError> {
        let k = report.window.index;
        let meta = serde_json::to_vec_pretty(&report.metadata).expect("metadata serializes");
        write_atomic(&self.metadata_path(k), &meta)?;
        write_atomic(&self.report_path(k), &report_body(report))
    }

    pub fn read_report(&self, k: u64) -> Result<Option<WindowReport>, WorkspaceError> {
        let body_path = self.report_path(k);
        let body = match fs::read(&body_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&body_path)(e)),
        };
        let meta_path = self.metadata_path(k);
        let meta = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let mut value: serde_json::Value =
            serde_json::from_slice(&body).map_err(|e| corrupt(&body_path, e))?;
        let metadata: serde_json::Value =
            serde_json::from_slice(&meta).map_err(|e| corrupt(&meta_path, e))?;
        value
            .as_object_mut()
            .ok_or_else(|| corrupt(&body_path, "report is not an object"))?
            .insert("metadata".into(), metadata);
        serde_json::from_value(value)
            .map(Some)
            .map_err(|e| corrupt(&body_path, e))
    }

    /// Number of committed windows, counting contiguously from window 0.
    pub fn committed_windows(&self) -> Result<u64, WorkspaceError> {
        let dir = self.reports_dir();
        let entries = fs::read_dir(&dir).map_err(io_err(&dir))?;
        let mut present = std::collections::BTreeSet::new();
        for entry in entries {
            let entry = entry.map_err(io_err(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(k) = name
                .strip_prefix("window-")
                .and_then(|rest| rest.strip_suffix(".json"))
                .and_then(|k| k.parse::<u64>().ok())
            {
                present.insert(k);
            }
        }
        Ok((0..).take_while(|k| present.contains(k)).count() as u64)
    }

    /// Committed reports with `from <= k <= to`, ordered by window.
    pub fn read_reports(&self, from: u64, to: u64) -> Result<Vec<WindowReport>, WorkspaceError> {
        let committed = self.committed_windows()?;
        let mut out = Vec::new();
        for k in from..=to.min(committed.saturating_sub(1)) {
            if committed == 0 {
                break;
            }
            if let Some(report) = self.read_report(k)? {
                out.push(report);
            }
        }
        Ok(out)
    }

    pub fn append_calibration(
        &self,
        correlation_id: &str,
        result: &CalibrationResult,
    ) -> Result<(), WorkspaceError> {
        append_jsonl(
            &self.root.join(Self::CALIBRATIONS),
            &CalibrationRecord {
                correlation_id: correlation_id.to_string(),
                result: result.clone(),
            },
        )
    }

    pub fn read_calibrations(&self) -> Result<Vec<CalibrationRecord>, WorkspaceError> {
        read_jsonl(&self.root.join(Self::CALIBRATIONS))
    }
}

/// Deterministic JSON body of a report: everything except the wall-clock
/// run metadata.
pub fn report_body(report: &WindowReport) -> Vec<u8> {
    let mut value = serde_json::to_value(report).expect("report serializes");
    value
        .as_object_mut()
        .expect("report is an object")
        .remove("metadata");
    serde_json::to_vec_pretty(&value).expect("report serializes")
}

/// Serializes recommendation writers across every handle in the process.
static RECOMMENDATION_LOCK: Mutex<()> = Mutex::new(());

/// Append-only recommendation log; the latest line per id is its state.
#[derive(Debug, Clone)]
pub struct RecommendationLog {
    path: PathBuf,
}

impl RecommendationLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn for_workspace(ws: &Workspace) -> Self {
        Self::new(ws.recommendations_path())
    }

    /// Current state of every recommendation, in creation order.
    pub fn load(&self) -> Result<Vec<Recommendation>, WorkspaceError> {
        let _guard = RECOMMENDATION_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        self.load_unlocked()
    }

    fn load_unlocked(&self) -> Result<Vec<Recommendation>, WorkspaceError> {
        let mut order = Vec::new();
        let mut latest: BTreeMap<String, Recommendation> = BTreeMap::new();
        for rec in read_jsonl::<Recommendation>(&self.path)? {
            if !latest.contains_key(&rec.id) {
                order.push(rec.id.clone());
            }
            latest.insert(rec.id.clone(), rec);
        }
        Ok(order
            .into_iter()
            .filter_map(|id| latest.remove(&id))
            .collect())
    }

    /// Appends `rec` unless a pending recommendation of the same kind exists.
    /// Returns whether it was appended.
    pub fn add_if_new(&self, rec: &Recommendation) -> Result<bool, WorkspaceError> {
        let _guard = RECOMMENDATION_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let existing = self.load_unlocked()?;
        if existing.iter().any(|r| {
            r.id == rec.id || (r.kind == rec.kind && r.status == RecommendationStatus::Pending)
        }) {
            return Ok(false);
        }
        append_jsonl(&self.path, rec)?;
        Ok(true)
    }

    pub fn pending_kinds(&self) -> Result<Vec<RecommendationKind>, WorkspaceError> {
        Ok(self
            .load()?
            .into_iter()
            .filter(|r| r.status == RecommendationStatus::Pending)
            .map(|r| r.kind)
            .collect())
    }

    /// Records an operator decision on a pending recommendation.
    pub fn decide(
        &self,
        id: &str,
        decision: Decision,
        operator: &str,
        at: DateTime<Utc>,
    ) -> Result<Recommendation, WorkspaceError> {
        let _guard = RECOMMENDATION_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let mut rec = self
            .load_unlocked()?
            .into_iter()
            .find(|r| r.id == id)
            .ok_or_else(|| WorkspaceError::UnknownRecommendation(id.to_string()))?;
        rec.decide(decision, operator, at)?;
        append_jsonl(&self.path, &rec)?;
        Ok(rec)
    }
}
