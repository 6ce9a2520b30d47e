use std::collections::HashMap;

use proptest::prelude::*;
use serde_json::Value;

use pilotfarm_core::coordinator::DispatchPolicy;
use pilotfarm_core::events::{EntityKind, EventName, EventRecord, LogWriter};
use pilotfarm_core::metrics::Timeline;
use pilotfarm_core::model::{Backend, CoordinatorConfig, PilotDescription, TaskDescription};
use pilotfarm_core::par::Execution;
use pilotfarm_core::sim::{simulate_pilot, simulate_pilots, SimSettings, StartupDelays};

fn pilot(nodes: usize, cores: u32, coords: &[(usize, u32)]) -> PilotDescription {
    let mut p = PilotDescription::new("p0", nodes, cores, Backend::Sim);
    p.coordinators = coords.iter().map(|&(n, cpn)| CoordinatorConfig::new(n, cpn)).collect();
    p
}

fn tasks(durations: &[f64], cores: &[u32]) -> Vec<TaskDescription> {
    durations
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            TaskDescription::function(format!("t{i:05}"), "dock", Value::Null).with_duration(d).with_cores(cores[i % cores.len()])
        })
        .collect()
}

/// Peak running cores per node, from place and release events.
fn peak_node_load(log: &[EventRecord]) -> HashMap<String, u64> {
    let mut held: HashMap<String, (String, u64)> = HashMap::new();
    let mut load: HashMap<String, u64> = HashMap::new();
    let mut peak: HashMap<String, u64> = HashMap::new();
    for e in log {
        match e.event {
            EventName::Place => {
                let node = e.get("node").unwrap().to_string();
                let c: u64 = e.get_parsed("cores").unwrap();
                let l = load.entry(node.clone()).or_default();
                *l += c;
                let p = peak.entry(node.clone()).or_default();
                *p = (*p).max(*l);
                held.insert(e.entity_id.clone(), (node, c));
            }
            EventName::Release => {
                let (node, c) = held.remove(&e.entity_id).unwrap();
                *load.get_mut(&node).unwrap() -= c;
            }
            _ => {}
        }
    }
    peak
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn list_scheduling_bound_holds(m in 1usize..24, durations in proptest::collection::vec(0.0..50.0f64, 1..400)) {
        let p = pilot(m, 1, &[(m, 1)]);
        let mut tl = Timeline::new();
        let out = simulate_pilot(&p, tasks(&durations, &[1]), &SimSettings::default(), &mut tl).unwrap();
        prop_assert_eq!(out.summary.done, durations.len());
        let first = tl.spans().iter().map(|s| s.start).fold(f64::INFINITY, f64::min);
        let last = tl.spans().iter().map(|s| s.end).fold(f64::NEG_INFINITY, f64::max);
        let bound = durations.iter().sum::<f64>() / m as f64 + durations.iter().copied().fold(0.0, f64::max);
        prop_assert!(last - first <= bound * (1.0 + 1e-12), "{} > {}", last - first, bound);
    }

    #[test]
    fn every_task_ends_once_and_nodes_are_never_oversubscribed(
        nodes in 1usize..6,
        cpn in 1u32..5,
        per_node in 1usize..3,
        durations in proptest::collection::vec(0.0..20.0f64, 1..200),
        cores in proptest::collection::vec(1u32..5, 1..8),
        latency in 0.0..0.01f64,
        static_rr in any::<bool>(),
    ) {
        let wc = (cpn / per_node as u32).max(1);
        let n_workers = nodes * (cpn / wc) as usize;
        let cores: Vec<u32> = cores.into_iter().map(|c| c.min(wc)).collect();
        let p = pilot(nodes, cpn, &[(n_workers, wc)]);
        let policy = if static_rr { DispatchPolicy::StaticRoundRobin } else { DispatchPolicy::CreditPull };
        let settings = SimSettings { latency_s: latency, policy, ..SimSettings::default() };
        let mut log: Vec<EventRecord> = Vec::new();
        let out = simulate_pilot(&p, tasks(&durations, &cores), &settings, &mut log).unwrap();
        prop_assert_eq!(out.slot_violations, 0);
        prop_assert_eq!(out.summary.done, durations.len());
        for (_, peak) in peak_node_load(&log) {
            prop_assert!(peak <= cpn as u64);
        }
        let mut ends: HashMap<&str, usize> = HashMap::new();
        for e in log.iter().filter(|e| e.entity_kind == EntityKind::Task && e.event == EventName::TaskEnd) {
            *ends.entry(e.entity_id.as_str()).or_default() += 1;
        }
        prop_assert_eq!(ends.len(), durations.len());
        prop_assert!(ends.values().all(|&n| n == 1));
        prop_assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
    }
}

#[test]
fn coordinators_split_the_workload_by_stride() {
    let p = pilot(8, 4, &[(4, 4), (4, 4)]);
    let mut log: Vec<EventRecord> = Vec::new();
    simulate_pilot(&p, tasks(&[1.0; 40], &[1]), &SimSettings::default(), &mut log).unwrap();
    let mut by_coord: HashMap<String, Vec<String>> = HashMap::new();
    for e in log.iter().filter(|e| e.event == EventName::TaskSubmit) {
        by_coord.entry(e.get("coordinator").unwrap().to_string()).or_default().push(e.entity_id.clone());
    }
    assert_eq!(by_coord.len(), 2);
    let mut firsts: Vec<&str> = by_coord.values().map(|u| u[0].as_str()).collect();
    firsts.sort();
    assert_eq!(firsts, ["t00000", "t00001"]);
    assert!(by_coord.values().all(|u| u.len() == 20));
}

#[test]
fn startup_phases_follow_the_configured_delays() {
    let mut p = pilot(5, 2, &[(4, 2)]);
    p.available_at_s = 100.0;
    let delays = StartupDelays { bootstrap_s: 10.0, staging_s: 4.0, coordinator_s: 2.0, preprocess_s: 3.0, worker_launch_s: 6.0 };
    let settings = SimSettings { delays, ..SimSettings::default() };
    let mut tl = Timeline::new();
    simulate_pilot(&p, tasks(&[5.0; 16], &[1]), &settings, &mut tl).unwrap();
    let b = tl.startup_breakdown().unwrap();
    assert_eq!(b.bootstrap, 10.0);
    assert_eq!(b.staging, 4.0);
    assert_eq!(b.coordinator_startup, 2.0);
    assert_eq!(b.preprocessing, 3.0);
    assert!((b.worker_launch_spread - 6.0).abs() < 1e-9);
    assert!((b.sequential_sum() - b.t_first_task).abs() < 1e-9);
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let p = pilot(6, 3, &[(3, 3), (3, 3)]);
    let durations: Vec<f64> = (0..500).map(|i| ((i * 7919) % 97) as f64 / 7.0).collect();
    let run = || {
        let mut w = LogWriter::new(Vec::new());
        simulate_pilot(&p, tasks(&durations, &[1, 2, 3]), &SimSettings { latency_s: 0.003, ..SimSettings::default() }, &mut w).unwrap();
        w.finish().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn pilots_simulate_the_same_in_both_modes() {
    let mut pilots: Vec<PilotDescription> = (0..3).map(|_| pilot(4, 2, &[(4, 2)])).collect();
    for (i, p) in pilots.iter_mut().enumerate() {
        p.pilot_id = format!("p{i}");
        p.available_at_s = i as f64 * 5.0;
    }
    let durations: Vec<f64> = (0..300).map(|i| 1.0 + (i % 13) as f64).collect();
    let run = |exec| {
        let parts =
            simulate_pilots(&pilots, tasks(&durations, &[1, 2]), &SimSettings::default(), exec, |_| Vec::<EventRecord>::new()).unwrap();
        parts.into_iter().map(|(_, log)| log).collect::<Vec<_>>()
    };
    let seq = run(Execution::Sequential);
    assert_eq!(seq, run(Execution::Parallel));
    assert_eq!(seq.iter().map(|l| l.iter().filter(|e| e.event == EventName::TaskEnd).count()).sum::<usize>(), 300);
}
