mod common;

use common::{brute_force, engine, random_scenario, rng, single_host};
use dctwin_core::{Fragment, WorkloadTask};
use proptest::prelude::*;

fn task(id: &str, submit: i64, cores: u32, frags: &[(i64, f64)]) -> WorkloadTask {
    WorkloadTask {
        id: id.into(),
        submit_time: submit,
        core_request: cores,
        fragments: frags
            .iter()
            .map(|&(duration, cpu_demand)| Fragment {
                duration,
                cpu_demand,
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn engine_matches_interpreter(seed in any::<u64>(), granularity in prop::sample::select(vec![60i64, 300])) {
        let horizon = 3600;
        let (topology, tasks) = random_scenario(&mut rng(seed), horizon);
        let r = 0.5 + 0.25 * f64::from((seed % 15) as u32);
        let expected = brute_force(&topology, &tasks, horizon, granularity, r);
        let actual = engine(&topology, &tasks, 1800, horizon, granularity, r);
        prop_assert_eq!(actual, expected);
    }
}

#[test]
fn hand_checked_cases_agree() {
    // 4 cores at 1000 MHz, p_idle 100 / p_max 200
    let topo = single_host(4, 1000.0, 100.0, 200.0);
    let cases = vec![
        // one task at half load for 10 minutes
        vec![task("a", 0, 2, &[(600, 2000.0)])],
        // over-demand: 6000 MHz on 4000 MHz runs at 2/3 speed
        vec![task("a", 0, 2, &[(300, 3000.0)]), task("b", 0, 2, &[(300, 3000.0)])],
        // queueing behind a full host, then a multi-fragment task
        vec![
            task("a", 0, 4, &[(120, 1000.0)]),
            task("b", 10, 2, &[(60, 500.0), (60, 4000.0)]),
            task("c", 20, 4, &[(30, 4000.0)]),
        ],
    ];
    for tasks in cases {
        let expected = brute_force(&topo, &tasks, 3600, 60, 2.0);
        assert_eq!(engine(&topo, &tasks, 1800, 3600, 60, 2.0), expected);
        assert_eq!(engine(&topo, &tasks, 3600, 3600, 60, 2.0), expected);
    }
}

#[test]
fn over_demand_finishes_at_450s() {
    let topo = single_host(4, 1000.0, 100.0, 200.0);
    let tasks = vec![task("a", 0, 2, &[(300, 3000.0)]), task("b", 0, 2, &[(300, 3000.0)])];
    let trace = brute_force(&topo, &tasks, 900, 300, 2.0);
    assert_eq!(
        trace.completions,
        vec![("a".to_string(), 450), ("b".to_string(), 450)]
    );
    // saturated host samples at P_max
    assert_eq!(trace.samples[0], (0, 1.0, 200.0));
    assert_eq!(trace.samples[1], (300, 1.0, 200.0));
    assert_eq!(trace.samples[2], (600, 0.0, 100.0));
}
