//! Run status derived from the workspace alone, so any reader process can
//! compute it. Only committed windows are visible.

use serde::{Deserialize, Serialize};

use crate::calibrator::{estimation_bias, threshold_compliance};
use crate::model::{PowerModelParams, RecommendationStatus, Window, WindowReport};
use crate::workspace::{RecommendationLog, Workspace, WorkspaceError};

use super::TwinConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub window: Window,
    pub mape_percent: Option<f64>,
    pub params_used: PowerModelParams,
    pub calibrated: bool,
    pub stalled: bool,
    pub mean_utilization: Option<f64>,
}

impl From<&WindowReport> for ReportSummary {
    fn from(r: &WindowReport) -> Self {
        Self {
            window: r.window,
            mape_percent: r.mape_percent,
            params_used: r.params_used,
            calibrated: r.calibrated,
            stalled: r.stalled,
            mean_utilization: r.mean_utilization(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapePoint {
    pub window: u64,
    pub mape_percent: f64,
    pub calibrated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasSummary {
    pub samples: usize,
    pub underestimated_fraction: f64,
    pub overestimated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinSnapshot {
    /// Index of the window in progress, i.e. the number of committed windows.
    pub current_window: u64,
    pub latest_report: Option<ReportSummary>,
    /// Parameters in force for the window in progress.
    pub current_params: Option<PowerModelParams>,
    pub mape_threshold_percent: f64,
    /// Fraction of scored windows with MAPE below the threshold.
    pub compliance_nfr1: Option<f64>,
    pub mape_series: Vec<MapePoint>,
    pub bias_summary: Option<BiasSummary>,
    pub stalled_windows: u64,
    pub pending_recommendations: usize,
}

pub fn snapshot(workspace: &Workspace) -> Result<TwinSnapshot, WorkspaceError> {
    let config = workspace.read_config::<TwinConfig>().ok();
    let threshold = config
        .as_ref()
        .map_or(10.0, |c| c.recommendations.accuracy_threshold);
    let committed = workspace.committed_windows()?;
    let reports = if committed == 0 {
        Vec::new()
    } else {
        workspace.read_reports(0, committed - 1)?
    };

    let mape_series: Vec<MapePoint> = reports
        .iter()
        .filter_map(|r| {
            r.mape_percent.map(|m| MapePoint {
                window: r.window.index,
                mape_percent: m,
                calibrated: r.calibrated,
            })
        })
        .collect();
    let scored: Vec<(u64, f64)> = mape_series.iter().map(|p| (p.window, p.mape_percent)).collect();

    let (mut under, mut over, mut n) = (0.0, 0.0, 0usize);
    for report in &reports {
        if let Ok(bias) = estimation_bias(&report.ground_truth, &report.predictions) {
            let k = bias.per_sample.len() as f64;
            under += bias.underestimated_fraction * k;
            over += bias.overestimated_fraction * k;
            n += bias.per_sample.len();
        }
    }

    let latest = reports.last();
    let current_params = match latest {
        Some(r) => Some(match &r.calibration {
            Some(c) => r.params_used.with_r(c.selected_r),
            None => r.params_used,
        }),
        None => config
            .as_ref()
            .map(|c| c.sim.topology.aggregate_params(c.initial_r)),
    };
    let pending = RecommendationLog::for_workspace(workspace)
        .load()?
        .iter()
        .filter(|r| r.status == RecommendationStatus::Pending)
        .count();

    Ok(TwinSnapshot {
        current_window: committed,
        latest_report: latest.map(ReportSummary::from),
        current_params,
        mape_threshold_percent: threshold,
        compliance_nfr1: threshold_compliance(&scored, threshold),
        mape_series,
        bias_summary: (n > 0).then(|| BiasSummary {
            samples: n,
            underestimated_fraction: under / n as f64,
            overestimated_fraction: over / n as f64,
        }),
        stalled_windows: reports.iter().filter(|r| r.stalled).count() as u64,
        pending_recommendations: pending,
    })
}
