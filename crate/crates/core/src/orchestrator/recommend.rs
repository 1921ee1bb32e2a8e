//! Rule-based operator recommendations derived from committed reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibrator::threshold_compliance;
use crate::model::{Recommendation, RecommendationKind, RecommendationStatus, WindowReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationConfig {
    /// Mean predicted utilization below which the cluster counts as idle.
    pub underutilization_threshold: f64,
    /// Number of trailing windows a rule looks at.
    pub trailing_windows: usize,
    /// MAPE threshold (percent) and the fraction of windows that must meet it.
    pub accuracy_threshold: f64,
    pub accuracy_fraction: f64,
}

impl Default for RecommendationConfig {
    fn default() -> Self {
        Self {
            underutilization_threshold: 0.30,
            trailing_windows: 24,
            accuracy_threshold: 10.0,
            accuracy_fraction: 0.9,
        }
    }
}

fn id_for(kind: RecommendationKind, window: u64) -> String {
    let tag = match kind {
        RecommendationKind::Underutilization => "underutilization",
        RecommendationKind::AccuracyDegraded => "accuracy",
    };
    format!("rec-{window:06}-{tag}")
}

/// Evaluates every rule over `trailing` (oldest first, current window last).
/// Rules only fire over a full trailing span, and never for a kind that
/// already has a pending recommendation.
pub fn evaluate(
    config: &RecommendationConfig,
    trailing: &[WindowReport],
    pending: &[RecommendationKind],
) -> Vec<Recommendation> {
    let Some(current) = trailing.last() else {
        return Vec::new();
    };
    if config.trailing_windows == 0 || trailing.len() < config.trailing_windows {
        return Vec::new();
    }
    let span = &trailing[trailing.len() - config.trailing_windows..];
    let window = current.window.index;
    let mut out = Vec::new();
    let mut make = |kind, summary: String, evidence: BTreeMap<String, f64>| {
        if !pending.contains(&kind) {
            out.push(Recommendation {
                id: id_for(kind, window),
                created_in_window: window,
                kind,
                summary,
                evidence,
                status: RecommendationStatus::Pending,
                decided_by: None,
                decided_at: None,
            });
        }
    };

    let utilizations: Vec<f64> = span.iter().filter_map(WindowReport::mean_utilization).collect();
    if utilizations.len() == span.len() {
        let mean = utilizations.iter().sum::<f64>() / utilizations.len() as f64;
        if mean < config.underutilization_threshold {
            make(
                RecommendationKind::Underutilization,
                format!(
                    "mean utilization {:.1}% over the last {} windows is below {:.0}%; consider consolidating hosts",
                    mean * 100.0,
                    span.len(),
                    config.underutilization_threshold * 100.0
                ),
                BTreeMap::from([
                    ("mean_utilization".to_string(), mean),
                    ("threshold".to_string(), config.underutilization_threshold),
                    ("windows".to_string(), span.len() as f64),
                ]),
            );
        }
    }

    let mapes: Vec<(u64, f64)> = span
        .iter()
        .filter_map(|r| r.mape_percent.map(|m| (r.window.index, m)))
        .collect();
    if let Some(compliance) = threshold_compliance(&mapes, config.accuracy_threshold) {
        if compliance < config.accuracy_fraction {
            make(
                RecommendationKind::AccuracyDegraded,
                format!(
                    "only {:.0}% of the last {} scored windows have MAPE below {}%; review the power model",
                    compliance * 100.0,
                    mapes.len(),
                    config.accuracy_threshold
                ),
                BTreeMap::from([
                    ("compliance".to_string(), compliance),
                    ("threshold_percent".to_string(), config.accuracy_threshold),
                    ("required_fraction".to_string(), config.accuracy_fraction),
                ]),
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        AccelerationMode, PowerModelParams, RunMetadata, SampleSource, TelemetrySample, Window,
    };
    use chrono::Utc;

    fn report(k: u64, u: f64, mape: Option<f64>) -> WindowReport {
        let window = Window::nth(k, 3600);
        WindowReport {
            window,
            predictions: window
                .ticks(300)
                .map(|ts| TelemetrySample {
                    timestamp: ts,
                    power_draw: 200.0,
                    cpu_utilization: u,
                    source: SampleSource::Prediction,
                })
                .collect(),
            ground_truth: vec![],
            mape_percent: mape,
            params_used: PowerModelParams {
                p_idle: 100.0,
                p_max: 400.0,
                r: 2.0,
            },
            calibrated: false,
            calibration: None,
            performance_tflops: vec![],
            efficiency_tflops_per_kwh: vec![],
            stalled: false,
            metadata: RunMetadata {
                simulation_started_at: Utc::now(),
                simulation_finished_at: Utc::now(),
                acceleration_mode: AccelerationMode::Maximum,
                correlation_id: String::new(),
            },
        }
    }

    fn config() -> RecommendationConfig {
        RecommendationConfig::default()
    }

    #[test]
    fn underutilization_needs_full_span() {
        let reports: Vec<_> = (0..23).map(|k| report(k, 0.1, Some(1.0))).collect();
        assert!(evaluate(&config(), &reports, &[]).is_empty());

        let reports: Vec<_> = (0..24).map(|k| report(k, 0.1, Some(1.0))).collect();
        let recs = evaluate(&config(), &reports, &[]);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].kind, RecommendationKind::Underutilization);
        assert_eq!(recs[0].id, "rec-000023-underutilization");
        assert!((recs[0].evidence["mean_utilization"] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_duplicate_while_pending() {
        let reports: Vec<_> = (0..24).map(|k| report(k, 0.1, Some(1.0))).collect();
        assert!(evaluate(&config(), &reports, &[RecommendationKind::Underutilization]).is_empty());
    }

    #[test]
    fn busy_cluster_is_quiet() {
        let reports: Vec<_> = (0..30).map(|k| report(k, 0.5, Some(5.0))).collect();
        assert!(evaluate(&config(), &reports, &[]).is_empty());
    }

    #[test]
    fn accuracy_rule() {
        let reports: Vec<_> = (0..24)
            .map(|k| report(k, 0.6, Some(if k % 5 == 0 { 15.0 } else { 3.0 })))
            .collect();
        let recs = evaluate(&config(), &reports, &[]);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].kind, RecommendationKind::AccuracyDegraded);
        assert!((recs[0].evidence["compliance"] - 19.0 / 24.0).abs() < 1e-12);
    }
}
