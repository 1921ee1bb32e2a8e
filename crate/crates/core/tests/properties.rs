use std::sync::Arc;

use chrono::{DateTime, Utc};
use proptest::prelude::*;

use dctwin_core::calibrator::{calibrate, mape, CalibrationConfig};
use dctwin_core::clock::VirtualClock;
use dctwin_core::formats::{parse_telemetry_line, telemetry_line};
use dctwin_core::power::{curve_peak, energy_kwh, host_power, hourly_efficiency};
use dctwin_core::simengine::{simulate_window, SimConfig, SimState};
use dctwin_core::telemetry::{clip_to_window, replay_samples, SharedAcceleration};
use dctwin_core::{
    validate_workload, windows, AccelerationMode, Fragment, HostSpec, PowerModelParams,
    SampleSource, TelemetrySample, Topology, WorkloadTask,
};

fn sample(ts: i64, power: f64, util: f64, source: SampleSource) -> TelemetrySample {
    TelemetrySample {
        timestamp: ts,
        power_draw: power,
        cpu_utilization: util,
        source,
    }
}

fn arb_topology() -> impl Strategy<Value = Topology> {
    prop::collection::vec((1u32..=16, 1u32..=30, 10.0f64..200.0, 1.0f64..300.0), 1..=4).prop_map(|hosts| {
        Topology {
            name: "arb".into(),
            hosts: hosts
                .into_iter()
                .enumerate()
                .map(|(i, (cores, freq, idle, span))| HostSpec {
                    id: format!("h{i}"),
                    core_count: cores,
                    core_frequency: f64::from(freq * 100),
                    memory: 1024,
                    power: PowerModelParams {
                        p_idle: idle,
                        p_max: idle + span,
                        r: 2.0,
                    },
                })
                .collect(),
        }
    })
}

fn arb_tasks(max_cores: u32, horizon: i64) -> impl Strategy<Value = Vec<WorkloadTask>> {
    prop::collection::vec(
        (
            0..horizon,
            1..=max_cores,
            prop::collection::vec((1i64..2000, 1.0f64..20_000.0), 1..=3),
        ),
        0..20,
    )
    .prop_map(|raw| {
        let tasks = raw
            .into_iter()
            .enumerate()
            .map(|(i, (submit, cores, frags))| WorkloadTask {
                id: format!("task-{i:03}"),
                submit_time: submit,
                core_request: cores,
                fragments: frags
                    .into_iter()
                    .map(|(duration, cpu_demand)| Fragment {
                        duration,
                        cpu_demand,
                    })
                    .collect(),
            })
            .collect();
        validate_workload(tasks).unwrap()
    })
}

fn arb_scenario() -> impl Strategy<Value = (Topology, Vec<WorkloadTask>)> {
    arb_topology().prop_flat_map(|topo| {
        let max = topo.max_core_count();
        (Just(topo), arb_tasks(max, 7200))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn telemetry_line_roundtrip(
        ts in -1_000_000i64..1_000_000,
        power in 0.0f64..1e6,
        util in 0.0f64..=1.0,
        truth in any::<bool>(),
    ) {
        let source = if truth { SampleSource::GroundTruth } else { SampleSource::Prediction };
        let s = sample(ts, power, util, source);
        prop_assert_eq!(parse_telemetry_line(&telemetry_line(&s), 1).unwrap(), s);
    }

    #[test]
    fn windows_partition_the_horizon(duration in 1i64..10_000, count in 0i64..50) {
        let horizon = duration * count;
        let ws = windows(duration, horizon);
        prop_assert_eq!(ws.len() as i64, count);
        for (k, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.index, k as u64);
            prop_assert_eq!(w.start, k as i64 * duration);
            prop_assert_eq!(w.end - w.start, duration);
        }
        if let (Some(first), Some(last)) = (ws.first(), ws.last()) {
            prop_assert_eq!(first.start, 0);
            prop_assert_eq!(last.end, horizon);
        }
    }

    #[test]
    fn power_curve_bounds(
        p_idle in 0.0f64..500.0,
        span in 0.0f64..500.0,
        r in 1.0f64..=4.0,
        u in 0.0f64..=1.0,
    ) {
        let params = PowerModelParams { p_idle, p_max: p_idle + span, r };
        let p = host_power(&params, u).unwrap();
        prop_assert!(p >= p_idle - 1e-9);
        prop_assert!(p <= p_idle + span * curve_peak(r) + 1e-9);
        prop_assert_eq!(host_power(&params, 0.0).unwrap(), p_idle);
        prop_assert_eq!(host_power(&params, 1.0).unwrap(), p_idle + span);
    }

    #[test]
    fn simulation_invariants((topo, tasks) in arb_scenario(), r in 0.5f64..=4.0) {
        let config = SimConfig::new(topo.clone());
        let mut state = SimState::new(&topo, 0);
        let mut completed = Vec::new();
        let mut runs = Vec::new();
        for window in windows(1800, 7200) {
            let in_window: Vec<_> = tasks.iter().filter(|t| window.contains(t.submit_time)).cloned().collect();
            let (sim, next) = simulate_window(&config, window, state.clone(), &in_window, r).unwrap();
            // determinism
            let (again, _) = simulate_window(&config, window, state, &in_window, r).unwrap();
            prop_assert_eq!(&sim, &again);
            // capacity
            for (used, host) in next.allocated_cores(&topo).iter().zip(&topo.hosts) {
                prop_assert!(*used <= host.core_count);
            }
            // utilization bounds and one prediction per tick
            prop_assert_eq!(sim.samples.len(), 6);
            for s in &sim.samples {
                prop_assert!(s.host_utilization.iter().all(|u| (0.0..=1.0).contains(u)));
                prop_assert!((0.0..=1.0).contains(&s.sample.cpu_utilization));
            }
            completed.extend(sim.completions.clone());
            runs.push(sim);
            state = next;
        }
        // work conservation for every finished task
        for c in &completed {
            let rel = (c.delivered_work - c.required_work).abs() / c.required_work;
            prop_assert!(rel < 1e-6, "task {} delivered {} of {}", c.task_id, c.delivered_work, c.required_work);
            prop_assert!(c.finished_at >= c.started_at);
        }
        // no task is lost: finished + running + waiting == submitted
        let accounted = completed.len() + state.running_count() + state.pending_len();
        prop_assert_eq!(accounted, tasks.len());
    }

    #[test]
    fn mape_is_scale_invariant(
        pairs in prop::collection::vec((1.0f64..1e4, 0.0f64..1e4), 1..50),
        c in prop::sample::select(vec![0.5, 3.0, 1000.0]),
    ) {
        let real: Vec<_> = pairs.iter().enumerate().map(|(i, p)| sample(i as i64 * 300, p.0, 0.5, SampleSource::GroundTruth)).collect();
        let sim: Vec<_> = pairs.iter().enumerate().map(|(i, p)| sample(i as i64 * 300, p.1, 0.5, SampleSource::Prediction)).collect();
        let scale = |v: &[TelemetrySample]| v.iter().map(|s| TelemetrySample { power_draw: s.power_draw * c, ..*s }).collect::<Vec<_>>();
        let base = mape(&real, &sim).unwrap();
        let scaled = mape(&scale(&real), &scale(&sim)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
        prop_assert!(base >= 0.0);
        prop_assert_eq!(mape(&real, &real).unwrap(), 0.0);
    }

    #[test]
    fn energy_is_additive(watts in prop::collection::vec(0.0f64..1e4, 2..60), split in any::<prop::sample::Index>()) {
        let series: Vec<_> = watts.iter().enumerate().map(|(i, w)| (i as i64 * 300, *w)).collect();
        let cut = split.index(series.len() - 1) + 1;
        let whole = energy_kwh(&series, 300).unwrap();
        let parts = energy_kwh(&series[..cut], 300).unwrap() + energy_kwh(&series[cut..], 300).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-9 * whole.max(1e-9));
    }

    #[test]
    fn efficiency_scales_linearly(
        points in prop::collection::vec((0.0f64..10.0, 1.0f64..1e4), 12..=36),
        c in 0.1f64..10.0,
    ) {
        let tflops: Vec<_> = points.iter().enumerate().map(|(i, p)| (i as i64 * 300, p.0)).collect();
        let power: Vec<_> = points.iter().enumerate().map(|(i, p)| (i as i64 * 300, p.1)).collect();
        let base = hourly_efficiency(&tflops, &power, 300).unwrap();
        let more_work: Vec<_> = tflops.iter().map(|&(t, v)| (t, v * c)).collect();
        let more_power: Vec<_> = power.iter().map(|&(t, v)| (t, v * c)).collect();
        let a = hourly_efficiency(&more_work, &power, 300).unwrap();
        let b = hourly_efficiency(&tflops, &more_power, 300).unwrap();
        for ((x, y), z) in base.iter().zip(&a).zip(&b) {
            prop_assert_eq!(x.0, y.0);
            prop_assert!((y.1 - x.1 * c).abs() <= 1e-9 * (x.1 * c).max(1e-12));
            prop_assert!((z.1 - x.1 / c).abs() <= 1e-9 * (x.1 / c).max(1e-12));
        }
    }

    #[test]
    fn clipping_partitions_samples(n in 0usize..100, duration in prop::sample::select(vec![300i64, 900, 3600])) {
        let samples: Vec<_> = (0..n).map(|i| sample(i as i64 * 300, 1.0, 0.0, SampleSource::GroundTruth)).collect();
        let horizon = ((n as i64 * 300) / duration + 1) * duration;
        let rebuilt: Vec<_> = windows(duration, horizon).iter().flat_map(|w| clip_to_window(&samples, w)).collect();
        prop_assert_eq!(rebuilt, samples);
    }

    #[test]
    fn calibration_result_applies_next_window(produced in 0u64..1000, truth_r in prop::sample::select(vec![1.0, 2.0, 3.0])) {
        let real: Vec<_> = (0..12).map(|i| {
            let u = 0.1 + 0.05 * f64::from(i);
            let p = host_power(&PowerModelParams { p_idle: 100.0, p_max: 300.0, r: truth_r }, u).unwrap();
            sample(i64::from(i) * 300, p, u, SampleSource::GroundTruth)
        }).collect();
        let toy = |r: f64| -> Result<Vec<TelemetrySample>, dctwin_core::simengine::SimError> {
            Ok(real.iter().map(|s| {
                let p = host_power(&PowerModelParams { p_idle: 100.0, p_max: 300.0, r }, s.cpu_utilization).unwrap();
                sample(s.timestamp, p, s.cpu_utilization, SampleSource::Prediction)
            }).collect())
        };
        let result = calibrate(&CalibrationConfig::for_window(3600), &real, &toy, (0, 3600), produced).unwrap();
        prop_assert_eq!(result.applies_from_window, result.produced_in_window + 1);
        prop_assert_eq!(result.selected_r, truth_r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn replay_preserves_order(
        gaps in prop::collection::vec(prop::sample::select(vec![0i64, 300, 600]), 0..40),
        mode in prop::sample::select(vec![AccelerationMode::RealTime, AccelerationMode::Fixed(10.0), AccelerationMode::Maximum]),
    ) {
        let mut ts = 0;
        let samples: Vec<_> = gaps.iter().enumerate().map(|(i, g)| {
            ts += g;
            sample(ts, i as f64, 0.0, SampleSource::GroundTruth)
        }).collect();
        let clock = Arc::new(VirtualClock::new(DateTime::<Utc>::UNIX_EPOCH));
        let feed = replay_samples(samples.clone(), SharedAcceleration::new(mode), clock);
        prop_assert_eq!(feed.collect_all().unwrap(), samples);
    }
}
