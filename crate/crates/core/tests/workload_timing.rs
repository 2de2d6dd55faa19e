//! Timing properties of the workload kernel. These measure wall-clock time,
//! so they run in one test function to avoid competing with each other.

use wattbench::workload::{calibrate_work_scale, run_workload, time_per_event, DEFAULT_LAYERS};
use wattbench::WorkloadSpec;

/// Best-of-`reps` single-thread events/sec at `work_scale`.
fn best_eps(work_scale: u32, events: u64, reps: usize) -> f64 {
    (0..reps)
        .map(|_| {
            run_workload(&WorkloadSpec {
                events,
                threads: 1,
                seed: 3,
                work_scale,
                layers: DEFAULT_LAYERS,
            })
            .unwrap()
            .events_per_sec
        })
        .fold(0.0, f64::max)
}

fn calibration_hits_target() {
    let target = 1e-3;
    let ws = calibrate_work_scale(target, 8).unwrap();
    assert!((1_000..=10_000_000).contains(&ws), "work_scale {ws} outside the plausible range");
    // re-measure independently of the search
    let t = time_per_event(ws, DEFAULT_LAYERS, 16, 5);
    assert!((t - target).abs() <= 0.25 * target, "re-measured {t} s/event for work_scale {ws}");
}

fn doubling_doubles_cost() {
    let ws = 20_000;
    let one = time_per_event(ws, DEFAULT_LAYERS, 8, 5);
    let two = time_per_event(2 * ws, DEFAULT_LAYERS, 8, 5);
    let ratio = two / one;
    assert!((1.5..=2.5).contains(&ratio), "doubling work_scale changed cost by {ratio}x");
}

fn throughput_falls_with_work() {
    let mut ws = 500;
    let mut prev = best_eps(ws, 400, 5);
    for _ in 0..5 {
        ws *= 2;
        let eps = best_eps(ws, 400, 5);
        assert!(eps < prev, "events/s did not drop from {prev} to {eps} at work_scale {ws}");
        prev = eps;
    }
}

#[test]
fn timing_properties() {
    calibration_hits_target();
    doubling_doubles_cost();
    throughput_falls_with_work();
}
