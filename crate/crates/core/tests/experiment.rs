use std::fs;
use std::path::{Path, PathBuf};

use pilotfarm_core::events::{read_log, EntityKind, EventName};
use pilotfarm_core::experiment::{
    emit_plots, load_report, run_experiment, ExperimentConfig, LaunchMode, CONCURRENCY_TSV, EVENTS_LOG, RATE_TSV, SUMMARY_JSON,
};
use pilotfarm_core::model::{Backend, CoordinatorConfig, PilotDescription};
use pilotfarm_core::workload::{DurationModel, WorkloadSpec};

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<PathBuf> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|x| x == "toml")).collect();
    files.sort();
    files
}

#[test]
fn shipped_configs_load_validate_and_round_trip() {
    let files = shipped_configs();
    assert!(files.len() >= 4, "{files:?}");
    for f in files {
        let cfg = ExperimentConfig::load(&f).unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", f.display()));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{}", f.display());
    }
}

#[test]
fn config_errors_map_to_exit_code_two() {
    let missing = ExperimentConfig::load(Path::new("/nonexistent/experiment.toml")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
    let typo = ExperimentConfig::from_toml("backend = \"sim\"\nnmae = \"x\"\n").unwrap_err();
    assert_eq!(typo.exit_code(), 2);
    assert_eq!(emit_plots(Path::new("/nonexistent/run"), 10.0).unwrap_err().exit_code(), 3);
}

fn local(n_tasks: usize, nodes: usize) -> ExperimentConfig {
    let mut p = PilotDescription::new("p0", nodes, 2, Backend::Local);
    p.walltime_s = 120.0;
    p.coordinators.push(CoordinatorConfig::new(nodes, 2));
    let workload = WorkloadSpec::new(n_tasks, DurationModel::Uniform { low: 0.01, high: 0.05 }, 5);
    let mut cfg = ExperimentConfig::new(workload, vec![p], Backend::Local);
    cfg.host_cores = Some(8);
    cfg.worker_launch = LaunchMode::Threads;
    cfg.analysis.bin_s = 0.5;
    cfg
}

#[test]
fn local_thread_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = local(60, 3);
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert!(out.summary.clean, "{:?}", out.summary);
    assert_eq!(out.report.tasks_done, 60);
    assert_eq!(out.report.nodes, 3);
    assert!(out.report.avg > 0.0 && out.report.avg <= 1.0);
    assert_eq!(load_report(dir.path()).unwrap(), out.report);
    assert!(dir.path().join(SUMMARY_JSON).is_file());

    let log = read_log(&dir.path().join(EVENTS_LOG)).unwrap();
    assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
    assert_eq!(log.iter().filter(|e| e.event == EventName::WorkerStart).count(), 3);
    assert_eq!(log.iter().filter(|e| e.event == EventName::TaskEnd).count(), 60);
    assert_eq!(log.iter().filter(|e| e.entity_kind == EntityKind::Pilot && e.event == EventName::Shutdown).count(), 1);

    // the rate table covers every completion
    let rate = fs::read_to_string(dir.path().join(RATE_TSV)).unwrap();
    let per_hour: f64 = rate.lines().skip(1).map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap()).sum();
    assert!((per_hour * 0.5 / 3600.0 - 60.0).abs() < 1e-6);
    let conc = fs::read_to_string(dir.path().join(CONCURRENCY_TSV)).unwrap();
    assert!(conc.lines().skip(1).all(|l| l.split('\t').nth(1).unwrap().parse::<u64>().unwrap() <= 6));
}

#[test]
fn a_local_run_past_its_walltime_is_not_clean() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = local(8, 1);
    cfg.workload.duration = DurationModel::Constant { seconds: 3.0 };
    cfg.pilots[0].walltime_s = 1.0;
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert!(!out.summary.clean);
    assert!(out.summary.pilots[0].walltime_hit);
    assert_eq!(out.report.tasks_done, 0);
}

#[test]
fn local_pilots_beyond_the_host_are_refused() {
    let mut cfg = local(4, 3);
    cfg.host_cores = Some(4);
    assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
}
