#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dctwin_core::clock::Clock;
use dctwin_core::orchestrator::{Twin, TwinConfig};
use dctwin_core::power::host_power;
use dctwin_core::simengine::{simulate_window, SimConfig, SimState};
use dctwin_core::telemetry::{self, GroundTruthProfile, SourceKind, TelemetrySource};
use dctwin_core::{
    windows, Fragment, HostSpec, PowerModelParams, Timestamp, Topology, WindowReport, WorkloadTask,
};

pub fn single_host(cores: u32, freq: f64, p_idle: f64, p_max: f64) -> Topology {
    Topology {
        name: "single".into(),
        hosts: vec![HostSpec {
            id: "h0".into(),
            core_count: cores,
            core_frequency: freq,
            memory: 1024,
            power: PowerModelParams {
                p_idle,
                p_max,
                r: 2.0,
            },
        }],
    }
}

/// What both simulators are compared on.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// `(ts, host utilization, power)`.
    pub samples: Vec<(Timestamp, f64, f64)>,
    /// `(task id, finished_at)` in completion order.
    pub completions: Vec<(String, Timestamp)>,
}

struct Running {
    id: String,
    cores: u32,
    fragments: Vec<Fragment>,
    index: usize,
    remaining: f64,
}

/// Second-by-second interpreter of a single host over `[0, horizon)`.
///
/// Each second: finished fragments advance in task-id order (a finished task
/// frees its cores and the waiting queue is rescanned front to back), then
/// arrivals are admitted or queued, then the tick is sampled, then every
/// running fragment progresses by one second at `min(1, capacity/demand)`.
pub fn brute_force(
    topology: &Topology,
    tasks: &[WorkloadTask],
    horizon: Timestamp,
    granularity: i64,
    r: f64,
) -> Trace {
    assert_eq!(topology.hosts.len(), 1);
    let host = &topology.hosts[0];
    let capacity = f64::from(host.core_count) * host.core_frequency;
    let params = host.power.with_r(r);
    let mut free = host.core_count;
    let mut running: Vec<Running> = Vec::new();
    let mut waiting: Vec<&WorkloadTask> = Vec::new();
    let mut out = Trace {
        samples: Vec::new(),
        completions: Vec::new(),
    };

    let start = |t: &WorkloadTask| Running {
        id: t.id.clone(),
        cores: t.core_request,
        fragments: t.fragments.clone(),
        index: 0,
        remaining: t.fragments[0].duration as f64,
    };

    for now in 0..horizon {
        let mut done: Vec<String> = running
            .iter()
            .filter(|t| t.remaining <= 1e-6)
            .map(|t| t.id.clone())
            .collect();
        done.sort();
        for id in done {
            let pos = running.iter().position(|t| t.id == id).unwrap();
            let t = &mut running[pos];
            if t.index + 1 < t.fragments.len() {
                t.index += 1;
                t.remaining = t.fragments[t.index].duration as f64;
                continue;
            }
            let t = running.remove(pos);
            free += t.cores;
            out.completions.push((t.id, now));
            let mut still = Vec::new();
            for w in waiting.drain(..) {
                if w.core_request <= free {
                    free -= w.core_request;
                    running.push(start(w));
                } else {
                    still.push(w);
                }
            }
            waiting = still;
        }

        for task in tasks.iter().filter(|t| t.submit_time == now) {
            if task.core_request <= free {
                free -= task.core_request;
                running.push(start(task));
            } else {
                waiting.push(task);
            }
        }

        let demand: f64 = running
            .iter()
            .map(|t| t.fragments[t.index].cpu_demand)
            .sum();
        if now % granularity == 0 {
            let u = (demand / capacity).min(1.0);
            out.samples
                .push((now, u, host_power(&params, u).unwrap()));
        }
        let speed = if demand > capacity { capacity / demand } else { 1.0 };
        for t in &mut running {
            t.remaining -= speed;
        }
    }
    out
}

/// The event-driven simulator over consecutive windows covering `[0, horizon)`.
pub fn engine(
    topology: &Topology,
    tasks: &[WorkloadTask],
    window_duration: i64,
    horizon: Timestamp,
    granularity: i64,
    r: f64,
) -> Trace {
    let mut config = SimConfig::new(topology.clone());
    config.sampling_granularity = granularity;
    let mut state = SimState::new(topology, 0);
    let mut out = Trace {
        samples: Vec::new(),
        completions: Vec::new(),
    };
    for window in windows(window_duration, horizon) {
        let in_window: Vec<WorkloadTask> = tasks
            .iter()
            .filter(|t| window.contains(t.submit_time))
            .cloned()
            .collect();
        let (sim, next) = simulate_window(&config, window, state, &in_window, r).unwrap();
        state = next;
        out.samples.extend(
            sim.samples
                .iter()
                .map(|s| (s.sample.timestamp, s.host_utilization[0], s.sample.power_draw)),
        );
        out.completions
            .extend(sim.completions.iter().map(|c| (c.task_id.clone(), c.finished_at)));
    }
    out
}

/// Small random single-host scenario with at most three tasks.
pub fn random_scenario(rng: &mut ChaCha8Rng, horizon: Timestamp) -> (Topology, Vec<WorkloadTask>) {
    let cores = rng.random_range(1..=16);
    let freq = f64::from(rng.random_range(1..=30u32) * 100);
    let topology = single_host(cores, freq, 50.0 + f64::from(rng.random_range(0..100u32)), 400.0);
    let n = rng.random_range(0..=3);
    let tasks = (0..n)
        .map(|i| {
            let core_request = rng.random_range(1..=cores);
            let fragments = (0..rng.random_range(1..=3))
                .map(|_| Fragment {
                    duration: rng.random_range(1..=1500),
                    // up to 150% of the whole host, so over-demand happens
                    cpu_demand: f64::from(rng.random_range(1..=(cores * freq as u32 * 3 / 2))),
                })
                .collect();
            WorkloadTask {
                id: format!("t{i}"),
                submit_time: rng.random_range(0..horizon),
                core_request,
                fragments,
            }
        })
        .collect();
    let tasks = dctwin_core::validate_workload(tasks).unwrap();
    (topology, tasks)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Outcome of one twin run over a synthetic trace.
pub struct TwinRun {
    pub reports: Vec<WindowReport>,
    pub elapsed: std::time::Duration,
}

/// Writes a synthetic trace for `profile` into `dir`.
pub fn write_trace(profile: &GroundTruthProfile, horizon: i64, seed: u64, dir: &Path) -> Vec<WorkloadTask> {
    let trace = telemetry::synthesize_ground_truth(profile, horizon, seed).unwrap();
    trace.write(&profile.topology, dir).unwrap();
    trace.tasks
}

pub fn file_source(dir: &Path) -> TelemetrySource {
    TelemetrySource {
        kind: SourceKind::FileReplay(dir.join("telemetry.jsonl")),
        granularity: 300,
    }
}

/// Runs the twin over a trace previously written to `dir`.
pub fn run_twin(
    profile: &GroundTruthProfile,
    tasks: &[WorkloadTask],
    horizon: i64,
    dir: &Path,
    workspace: &str,
    customize: impl FnOnce(&mut TwinConfig),
    clock: Option<Arc<dyn Clock>>,
) -> TwinRun {
    let mut config = TwinConfig::new(SimConfig::new(profile.topology.clone()), dir.join(workspace));
    config.horizon = Some(horizon);
    customize(&mut config);
    let mut twin = Twin::new(config).unwrap();
    if let Some(clock) = clock {
        twin = twin.with_clock(clock);
    }
    let mut reports = Vec::new();
    let started = std::time::Instant::now();
    twin.run(&file_source(dir), tasks.to_vec(), |r| reports.push(r.clone()))
        .unwrap();
    TwinRun {
        reports,
        elapsed: started.elapsed(),
    }
}
