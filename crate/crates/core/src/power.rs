//! CPU power curve, energy integration and efficiency metrics.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{PowerModelParams, Timestamp, Topology, Window};

const JOULES_PER_KWH: f64 = 3.6e6;
const SECONDS_PER_HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PowerError {
    #[error("utilization {0} outside [0, 1]")]
    DomainError(f64),
    #[error("series not equally spaced by {granularity} s at t={at}")]
    IrregularSeries { granularity: i64, at: Timestamp },
    #[error("series misaligned at index {index}")]
    MisalignedSeries { index: usize },
}

/// Normalized shape `2u - u^r` of the power curve.
fn curve_shape(u: f64, r: f64) -> f64 {
    2.0 * u - u.powf(r)
}

/// Power draw of one host at utilization `u`.
///
/// Evaluated as a convex blend `P_idle·(1 - s) + P_max·s` of the endpoints,
/// which is algebraically the textbook form but returns `P_idle` and `P_max`
/// bit-exactly at `u = 0` and `u = 1`.
pub fn host_power(params: &PowerModelParams, u: f64) -> Result<f64, PowerError> {
    if !(0.0..=1.0).contains(&u) {
        return Err(PowerError::DomainError(u));
    }
    let s = curve_shape(u, params.r);
    Ok(params.p_idle * (1.0 - s) + params.p_max * s)
}

/// Peak of `2u - u^r` on `[0, 1]`. For `r >= 1` the curve stays within
/// `[P_idle, P_idle + (P_max - P_idle)·peak]`; below 1 it dips under `P_idle`
/// near zero utilization.
pub fn curve_peak(r: f64) -> f64 {
    if r <= 1.0 {
        return scan_peak(r);
    }
    // Stationary point u* = (2/r)^(1/(r-1)), clamped to the unit interval.
    let u_star = (2.0 / r).powf(1.0 / (r - 1.0)).min(1.0);
    curve_shape(u_star, r).max(curve_shape(1.0, r))
}

fn scan_peak(r: f64) -> f64 {
    (0..=10_000)
        .map(|i| curve_shape(i as f64 / 10_000.0, r))
        .fold(f64::MIN, f64::max)
}

/// Cluster power from per-host parameters and utilizations, summed in host order.
pub(crate) fn cluster_power(params: &[PowerModelParams], utilization: &[f64]) -> Result<f64, PowerError> {
    debug_assert_eq!(params.len(), utilization.len());
    let mut total = 0.0;
    for (p, &u) in params.iter().zip(utilization) {
        total += host_power(p, u)?;
    }
    Ok(total)
}

/// Sum of host power over the topology. Hosts missing from `per_host_u` are
/// idle; hosts missing from `params_by_host` use their own topology params.
pub fn predict_cluster_power(
    topology: &Topology,
    per_host_u: &BTreeMap<String, f64>,
    params_by_host: &BTreeMap<String, PowerModelParams>,
) -> Result<f64, PowerError> {
    let params: Vec<PowerModelParams> = topology
        .hosts
        .iter()
        .map(|h| params_by_host.get(&h.id).copied().unwrap_or(h.power))
        .collect();
    let utilization: Vec<f64> = topology
        .hosts
        .iter()
        .map(|h| per_host_u.get(&h.id).copied().unwrap_or(0.0))
        .collect();
    cluster_power(&params, &utilization)
}

fn check_spacing(samples: &[(Timestamp, f64)], granularity: i64) -> Result<(), PowerError> {
    for pair in samples.windows(2) {
        if pair[1].0 - pair[0].0 != granularity {
            return Err(PowerError::IrregularSeries {
                granularity,
                at: pair[1].0,
            });
        }
    }
    Ok(())
}

/// Left-Riemann energy of a sample-and-hold power series, in kWh.
pub fn energy_kwh(samples: &[(Timestamp, f64)], granularity: i64) -> Result<f64, PowerError> {
    check_spacing(samples, granularity)?;
    Ok(samples
        .iter()
        .map(|&(_, watts)| watts * granularity as f64 / JOULES_PER_KWH)
        .sum())
}

/// Running energy total for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyAccumulator {
    pub window: Window,
    granularity: i64,
    samples: Vec<(Timestamp, f64)>,
    kwh: f64,
}

impl EnergyAccumulator {
    pub fn new(window: Window, granularity: i64) -> Self {
        Self {
            window,
            granularity,
            samples: Vec::new(),
            kwh: 0.0,
        }
    }

    pub fn push(&mut self, ts: Timestamp, watts: f64) -> Result<(), PowerError> {
        let expected = self
            .samples
            .last()
            .map(|&(last, _)| last + self.granularity);
        if expected.is_some_and(|e| e != ts) || !self.window.contains(ts) {
            return Err(PowerError::IrregularSeries {
                granularity: self.granularity,
                at: ts,
            });
        }
        self.samples.push((ts, watts));
        self.kwh += watts * self.granularity as f64 / JOULES_PER_KWH;
        Ok(())
    }

    pub fn samples(&self) -> &[(Timestamp, f64)] {
        &self.samples
    }

    pub fn kwh(&self) -> f64 {
        self.kwh
    }
}

/// Hour bucket a timestamp falls in.
pub fn hour_bucket(ts: Timestamp) -> i64 {
    ts.div_euclid(SECONDS_PER_HOUR)
}

/// Per-hour efficiency: mean TFLOPs over the hour's samples divided by the
/// hour's energy. Hours with zero energy are omitted.
pub fn hourly_efficiency(
    tflops: &[(Timestamp, f64)],
    power: &[(Timestamp, f64)],
    granularity: i64,
) -> Result<Vec<(i64, f64)>, PowerError> {
    if tflops.len() != power.len() {
        return Err(PowerError::MisalignedSeries {
            index: tflops.len().min(power.len()),
        });
    }
    if let Some(index) = tflops.iter().zip(power).position(|(a, b)| a.0 != b.0) {
        return Err(PowerError::MisalignedSeries { index });
    }
    check_spacing(power, granularity)?;

    let mut out = Vec::new();
    let mut start = 0;
    while start < power.len() {
        let bucket = hour_bucket(power[start].0);
        let end = start
            + power[start..]
                .iter()
                .take_while(|(ts, _)| hour_bucket(*ts) == bucket)
                .count();
        let kwh = energy_kwh(&power[start..end], granularity)?;
        if kwh > 0.0 {
            let mean_tflops =
                tflops[start..end].iter().map(|&(_, v)| v).sum::<f64>() / (end - start) as f64;
            out.push((bucket, mean_tflops / kwh));
        }
        start = end;
    }
    Ok(out)
}
