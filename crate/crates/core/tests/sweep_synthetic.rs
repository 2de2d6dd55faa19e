//! End-to-end sweeps on the synthetic backend. Each test uses its own
//! activity registry, and the tests take turns so throughput comparisons
//! are not skewed by a neighbour's workers.

use std::sync::{Mutex, MutexGuard};

use wattbench::host;
use wattbench::report::{self, Figure};
use wattbench::sweep::{recompute_report, run_sweep_with, WorkloadLog};
use wattbench::telemetry::trace::read_trace_file;
use wattbench::telemetry::ActivityRegistry;
use wattbench::{BackendDescriptor, EventsPerPoint, SamplingPlan, SweepConfig};

const IDLE: f64 = 17.0;
const SLOPE: f64 = 5.0;

fn config(threads: Vec<usize>, point_seconds: f64) -> SweepConfig {
    SweepConfig {
        label: "synthetic".into(),
        thread_counts: threads,
        warmup_s: 0.0,
        events_per_point: EventsPerPoint::Calibrated { point_seconds },
        work_scale: 5_000,
        backend: BackendDescriptor::synthetic(IDLE, SLOPE),
        plan: SamplingPlan::with_interval_ms(10),
        ..SweepConfig::default()
    }
}

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn model(threads: usize) -> f64 {
    IDLE + SLOPE * threads as f64
}

#[test]
fn four_threads_draw_model_power() {
    let _turn = serial();
    let r = run_sweep_with(&config(vec![4], 1.0), &ActivityRegistry::new()).unwrap();
    let p = &r.points[0];
    let rel = (p.primary_watts - model(4)).abs() / model(4);
    assert!(rel <= 0.01, "4 threads: {} W vs {} W", p.primary_watts, model(4));
}

#[test]
fn one_thread_efficiency_uses_model_power() {
    let _turn = serial();
    let r = run_sweep_with(&config(vec![1], 1.0), &ActivityRegistry::new()).unwrap();
    let p = &r.points[0];
    assert!((p.primary_watts - 22.0).abs() <= 0.22, "{} W", p.primary_watts);
    let eff = p.efficiency_eps_per_watt.unwrap();
    assert_eq!(eff, p.workload.events_per_sec / p.primary_watts);
    assert!((eff - p.workload.events_per_sec / 22.0).abs() <= 0.01 * eff);
}

#[test]
fn idle_subtraction_leaves_the_slope() {
    let _turn = serial();
    let mut c = config(vec![2], 1.0);
    c.idle_watts = Some(IDLE);
    let r = run_sweep_with(&c, &ActivityRegistry::new()).unwrap();
    let p = &r.points[0];
    assert!((p.primary_watts - 10.0).abs() <= 0.01 * model(2), "{} W net", p.primary_watts);
    let pkg = &p.domains[0];
    assert!((pkg.mean_watts - model(2)).abs() <= 0.01 * model(2));
    assert_eq!(r.idle_subtracted_watts, Some(IDLE));
}

#[test]
fn repetitions_are_reported_individually_and_agree() {
    let _turn = serial();
    let mut c = config(vec![1, 2], 0.4);
    c.repetitions = 2;
    c.events_per_point = EventsPerPoint::Fixed(c.events_for(1));
    let r = run_sweep_with(&c, &ActivityRegistry::new()).unwrap();
    let order: Vec<(usize, u32)> = r.points.iter().map(|p| (p.threads, p.repetition)).collect();
    assert_eq!(order, [(1, 0), (1, 1), (2, 0), (2, 1)]);
    for pair in r.points.chunks(2) {
        let (a, b) = (pair[0].workload.events_per_sec, pair[1].workload.events_per_sec);
        assert!((a - b).abs() <= 0.1 * a.max(b), "repetitions differ: {a} vs {b}");
        assert_eq!(pair[0].workload.checksum, pair[1].workload.checksum);
    }
}

#[test]
fn throughput_scales_on_multicore_hosts() {
    let _turn = serial();
    if host::physical_cores() < 4 {
        eprintln!("skipped: needs 4 physical cores, host has {}", host::physical_cores());
        return;
    }
    let r = run_sweep_with(&config(vec![1, 2, 4], 0.5), &ActivityRegistry::new()).unwrap();
    let eps: Vec<f64> = r.points.iter().map(|p| p.workload.events_per_sec).collect();
    assert!(eps.windows(2).all(|w| w[1] > w[0]), "{eps:?}");
}

#[test]
fn recorded_trace_reproduces_the_report() {
    let _turn = serial();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("raw.trace");
    let mut c = config(vec![1, 2, 3], 0.2);
    c.plan.record_path = Some(trace.clone());
    c.backend = BackendDescriptor::synthetic(IDLE, SLOPE)
        .with_param("noise_stddev", "0.5")
        .with_param("seed", "11");
    let original = run_sweep_with(&c, &ActivityRegistry::new()).unwrap();

    let samples = read_trace_file(&trace).unwrap();
    let rebuilt = recompute_report(&WorkloadLog::from(&original), &samples).unwrap();
    assert_eq!(rebuilt, original);
    assert_eq!(report::csv_string(&rebuilt), report::csv_string(&original));
    for fig in Figure::ALL {
        assert_eq!(
            report::figure_data(&rebuilt, fig).unwrap(),
            report::figure_data(&original, fig).unwrap()
        );
    }
    // and through the JSON files the CLI writes
    let log_json = serde_json::to_string(&WorkloadLog::from(&original)).unwrap();
    let log: WorkloadLog = serde_json::from_str(&log_json).unwrap();
    let again = recompute_report(&log, &samples).unwrap();
    assert_eq!(report::json_string(&again), report::json_string(&original));
}

#[test]
fn perf_vs_power_rows_follow_thread_order() {
    let _turn = serial();
    let r = run_sweep_with(&config(vec![1, 2, 4, 8], 0.3), &ActivityRegistry::new()).unwrap();
    let data = report::figure_data(&r, Figure::PerfVsPower).unwrap();
    let rows: Vec<Vec<f64>> = data
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[2] as usize).collect::<Vec<_>>(), [1, 2, 4, 8]);
    assert!(rows.windows(2).all(|w| w[1][0] > w[0][0]), "watts not increasing: {rows:?}");
}
