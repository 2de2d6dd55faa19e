//! Deterministic CPU-bound event-processing kernel.
//!
//! Each event is a toy particle history: a counter-based generator keyed by
//! `(seed, event_index)` drives `work_scale` transport steps through
//! `layers` slabs of material whose densities depend on the seed only. The
//! final particle state is hashed to 64 bits. Events are independent, so the
//! XOR of event checksums does not depend on how events are split between
//! threads.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::monotonic_ns;
use crate::host;
use crate::telemetry::ActivityRegistry;

pub const DEFAULT_WORK_SCALE: u32 = 50_000;
pub const DEFAULT_LAYERS: u32 = 16;
const MAX_WORK_SCALE: u32 = 1 << 30;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("workload needs at least one event")]
    ZeroEvents,
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("failed to spawn worker thread: {0}")]
    ThreadSpawnFailure(#[source] std::io::Error),
    #[error("worker thread {0} panicked")]
    WorkerPanicked(usize),
    #[error("calibration target must be a positive number of seconds, got {0}")]
    InvalidTarget(f64),
    #[error("calibration target {target_s:e} s per event is unreachable (closest: {achieved_s:e} s at work_scale {work_scale})")]
    TargetUnreachable {
        target_s: f64,
        achieved_s: f64,
        work_scale: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub events: u64,
    pub threads: usize,
    pub seed: u64,
    /// Transport steps per event.
    pub work_scale: u32,
    pub layers: u32,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            events: 1000,
            threads: 1,
            seed: 0,
            work_scale: DEFAULT_WORK_SCALE,
            layers: DEFAULT_LAYERS,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.events == 0 {
            return Err(WorkloadError::ZeroEvents);
        }
        if self.threads == 0 {
            return Err(WorkloadError::InvalidSpec("threads must be positive".into()));
        }
        if self.work_scale == 0 {
            return Err(WorkloadError::InvalidSpec("work_scale must be positive".into()));
        }
        if self.layers == 0 {
            return Err(WorkloadError::InvalidSpec("layers must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadResult {
    pub events_done: u64,
    pub wall_time_s: f64,
    pub events_per_sec: f64,
    pub checksum: u64,
    pub per_thread_events: Vec<u64>,
    /// Monotonic timestamps bracketing the timed region.
    pub started_ns: u64,
    pub finished_ns: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based stream: the n-th draw depends only on (key, n).
#[derive(Clone, Copy)]
struct Stream {
    key: u64,
}

impl Stream {
    fn draw(self, n: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(n.wrapping_mul(GOLDEN)))
    }

    /// Uniform in (0, 1].
    fn unit(bits: u64) -> f64 {
        ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

fn event_key(seed: u64, event_index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(event_index ^ 0x5851_F42D_4C95_7F2D))
}

fn layer_densities(seed: u64, layers: u32) -> Vec<f64> {
    let geometry = Stream {
        key: splitmix64(seed ^ 0xD1B5_4A32_D192_ED03),
    };
    (0..layers as u64)
        .map(|l| 0.5 + 1.5 * Stream::unit(geometry.draw(l)))
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Particle {
    pos: [f64; 3],
    dir: [f64; 3],
    energy: f64,
}

impl Particle {
    fn from_key(key: u64) -> Self {
        let s = Stream { key };
        let cos_t = 1.0 - 2.0 * Stream::unit(s.draw(u64::MAX));
        let phi = std::f64::consts::TAU * Stream::unit(s.draw(u64::MAX - 1));
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        Self {
            pos: [0.0; 3],
            dir: [sin_t * phi.cos(), sin_t * phi.sin(), cos_t],
            energy: 1.0 + Stream::unit(s.draw(u64::MAX - 2)),
        }
    }

    fn hash(&self, key: u64) -> u64 {
        let mut h = key;
        for v in self.pos.iter().chain(&self.dir).chain(std::iter::once(&self.energy)) {
            h = splitmix64(h ^ v.to_bits());
        }
        h
    }
}

fn simulate(key: u64, work_scale: u32, densities: &[f64]) -> u64 {
    let stream = Stream { key };
    let mut p = Particle::from_key(key);
    for step in 0..work_scale as u64 {
        let density = densities[(step % densities.len() as u64) as usize];
        let bits = stream.draw(step);
        let free_path = -Stream::unit(bits).ln() / density;
        for (x, d) in p.pos.iter_mut().zip(p.dir) {
            *x += d * free_path;
        }
        // Scattering: new polar and azimuthal angles from the low bits.
        let cos_t = 1.0 - 2.0 * (((bits & 0xFFFF_FFFF) as f64 + 0.5) / 4_294_967_296.0);
        let phi = std::f64::consts::TAU * (((bits >> 32) & 0x1F_FFFF) as f64 / 2_097_152.0);
        let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
        p.dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        p.energy *= (-0.01 * free_path * density).exp();
        if p.energy < 1e-3 {
            p.energy += 1.0;
        }
    }
    p.hash(key)
}

/// Checksum of one simulated event. Pure in its arguments.
pub fn event_checksum(seed: u64, event_index: u64, work_scale: u32, layers: u32) -> u64 {
    let densities = layer_densities(seed, layers.max(1));
    simulate(event_key(seed, event_index), work_scale, &densities)
}

/// Event indices handled by `thread` out of `threads` (index modulo threads).
pub fn partition_indices(events: u64, threads: usize, thread: usize) -> impl Iterator<Item = u64> {
    (thread as u64..events).step_by(threads.max(1))
}

pub fn partition_counts(events: u64, threads: usize) -> Vec<u64> {
    let t = threads as u64;
    (0..t).map(|i| (events + t - 1 - i) / t).collect()
}

#[derive(Default)]
struct GateState {
    arrived: usize,
    finished: usize,
    open: bool,
    aborted: bool,
}

/// Start line and finish line for the worker pool: workers register, wait
/// for the start signal, and stay registered until every worker is done.
#[derive(Default)]
struct Gate {
    state: Mutex<GateState>,
    cv: Condvar,
}

impl Gate {
    fn lock(&self) -> std::sync::MutexGuard<'_, GateState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Returns false if the run was aborted before starting.
    fn arrive_and_wait(&self) -> bool {
        let mut st = self.lock();
        st.arrived += 1;
        self.cv.notify_all();
        while !st.open && !st.aborted {
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        !st.aborted
    }

    fn wait_arrivals(&self, n: usize) {
        let mut st = self.lock();
        while st.arrived < n {
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn open(&self) {
        self.lock().open = true;
        self.cv.notify_all();
    }

    fn abort(&self) {
        self.lock().aborted = true;
        self.cv.notify_all();
    }

    fn finish_and_wait(&self, n: usize) {
        let mut st = self.lock();
        st.finished += 1;
        self.cv.notify_all();
        while st.finished < n && !st.aborted {
            st = self.cv.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }
}

/// Counts the worker as finished even if it unwinds.
struct FinishLine<'a> {
    gate: &'a Gate,
    workers: usize,
}

impl Drop for FinishLine<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            self.gate.abort();
        } else {
            self.gate.finish_and_wait(self.workers);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Activity registry the workers report to; the global one when `None`.
    pub registry: Option<ActivityRegistry>,
    /// CPU for each worker, cycled when shorter than the thread count.
    pub cpus: Option<Vec<usize>>,
}

pub fn run_workload(spec: &WorkloadSpec) -> Result<WorkloadResult, WorkloadError> {
    run_workload_with(spec, &RunOptions::default())
}

/// Runs `spec.events` events on `spec.threads` workers and times the run
/// from the start signal to the last join.
pub fn run_workload_with(spec: &WorkloadSpec, opts: &RunOptions) -> Result<WorkloadResult, WorkloadError> {
    spec.validate()?;
    let registry = opts.registry.clone().unwrap_or_else(ActivityRegistry::global);
    let densities = layer_densities(spec.seed, spec.layers);
    let gate = Gate::default();
    let threads = spec.threads;

    std::thread::scope(|scope| {
        let mut workers = Vec::with_capacity(threads);
        for t in 0..threads {
            let (gate, densities, registry) = (&gate, &densities, &registry);
            let cpu = opts.cpus.as_ref().filter(|c| !c.is_empty()).map(|c| c[t % c.len()]);
            let spawned = std::thread::Builder::new()
                .name(format!("wattbench-worker-{t}"))
                .spawn_scoped(scope, move || {
                    if let Some(cpu) = cpu {
                        if let Err(e) = host::pin_current_thread(cpu) {
                            log::warn!("worker {t}: cannot pin to cpu {cpu}: {e}");
                        }
                    }
                    let _active = registry.enter();
                    if !gate.arrive_and_wait() {
                        return (0, 0);
                    }
                    let _finish = FinishLine { gate, workers: threads };
                    let mut checksum = 0u64;
                    let mut count = 0u64;
                    for i in partition_indices(spec.events, threads, t) {
                        checksum ^= simulate(event_key(spec.seed, i), spec.work_scale, densities);
                        count += 1;
                    }
                    (checksum, count)
                });
            match spawned {
                Ok(w) => workers.push(w),
                Err(e) => {
                    gate.abort();
                    for w in workers {
                        let _ = w.join();
                    }
                    return Err(WorkloadError::ThreadSpawnFailure(e));
                }
            }
        }

        gate.wait_arrivals(threads);
        let started_ns = monotonic_ns();
        let started = Instant::now();
        gate.open();

        let mut checksum = 0u64;
        let mut per_thread_events = Vec::with_capacity(threads);
        let mut panicked = None;
        for (t, w) in workers.into_iter().enumerate() {
            match w.join() {
                Ok((c, n)) => {
                    checksum ^= c;
                    per_thread_events.push(n);
                }
                Err(_) => {
                    panicked.get_or_insert(t);
                }
            }
        }
        let wall = started.elapsed().max(Duration::from_nanos(1));
        let finished_ns = monotonic_ns();
        if let Some(t) = panicked {
            return Err(WorkloadError::WorkerPanicked(t));
        }
        let events_done: u64 = per_thread_events.iter().sum();
        let wall_time_s = wall.as_secs_f64();
        Ok(WorkloadResult {
            events_done,
            wall_time_s,
            events_per_sec: events_done as f64 / wall_time_s,
            checksum,
            per_thread_events,
            started_ns,
            finished_ns,
        })
    })
}

/// Single-thread seconds per event, taking the fastest of `reps` timed
/// passes. Short passes are repeated until they last a few milliseconds.
pub fn time_per_event(work_scale: u32, layers: u32, probe_events: u64, reps: usize) -> f64 {
    let densities = layer_densities(0, layers.max(1));
    let mut best = f64::INFINITY;
    let mut next_index = 0u64;
    for _ in 0..reps.max(1) {
        let mut count = probe_events.max(1);
        loop {
            let start = Instant::now();
            let mut sink = 0u64;
            for i in next_index..next_index + count {
                sink ^= simulate(event_key(0, i), work_scale, &densities);
            }
            std::hint::black_box(sink);
            next_index += count;
            let elapsed = start.elapsed();
            if elapsed >= Duration::from_millis(2) || count >= 1 << 24 {
                best = best.min(elapsed.as_secs_f64() / count as f64);
                break;
            }
            count *= 4;
        }
    }
    best
}

/// Finds a work scale whose single-thread cost per event is close to
/// `target_seconds_per_event` by multiplicative search on timed probes.
pub fn calibrate_work_scale(target_seconds_per_event: f64, probe_events: u64) -> Result<u32, WorkloadError> {
    let target = target_seconds_per_event;
    if !(target.is_finite() && target > 0.0) {
        return Err(WorkloadError::InvalidTarget(target));
    }
    const REPS: usize = 3;
    let mut ws: u32 = 1000;
    let mut best = (ws, f64::INFINITY);
    for _ in 0..24 {
        let t = time_per_event(ws, DEFAULT_LAYERS, probe_events, REPS);
        let miss = (t / target).ln().abs();
        if miss < best.1 {
            best = (ws, miss);
        }
        if (t - target).abs() <= 0.1 * target {
            return Ok(ws);
        }
        let ratio = (target / t).clamp(1.0 / 64.0, 64.0);
        let next = ((ws as f64 * ratio).round() as u64).clamp(1, MAX_WORK_SCALE as u64) as u32;
        if next == ws {
            break;
        }
        ws = next;
    }
    let achieved = time_per_event(best.0, DEFAULT_LAYERS, probe_events, REPS);
    if (achieved - target).abs() <= 0.25 * target {
        Ok(best.0)
    } else {
        Err(WorkloadError::TargetUnreachable {
            target_s: target,
            achieved_s: achieved,
            work_scale: best.0,
        })
    }
}
