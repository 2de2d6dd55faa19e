//! Fixed-interval sampling of a telemetry backend into per-domain series.
//!
//! Ticks follow an absolute schedule (`start + k * interval`). A tick that is
//! more than half an interval late is skipped rather than caught up. The
//! first acquisition happens before [`start_sampling`] returns and the last
//! one on the first scheduled tick after [`SamplingSession::stop`], so a
//! workload run between the two calls is always bracketed by samples.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::telemetry::trace::write_trace_file;
use crate::telemetry::{PowerDomain, SampleKind, SensorSample, TelemetryError, TelemetryHandle};

/// Intervals below this are rejected; accelerator sensors refresh every 50 ms.
pub const MIN_INTERVAL_MS: u64 = 10;
pub const DEFAULT_INTERVAL_MS: u64 = 1000;
/// Retries after a transient failure before a session gives up.
pub const MAX_READ_RETRIES: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("backend is already owned by a sampling session")]
    AlreadySampling,
    #[error("invalid sampling plan: {0}")]
    InvalidPlan(String),
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("timestamps must be strictly increasing (index {0})")]
    NonIncreasingTimestamps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub interval_ms: u64,
    /// `None` samples every advertised domain.
    pub domains: Option<Vec<PowerDomain>>,
    pub record_path: Option<PathBuf>,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        Self {
            interval_ms: DEFAULT_INTERVAL_MS,
            domains: None,
            record_path: None,
        }
    }
}

impl SamplingPlan {
    pub fn with_interval_ms(interval_ms: u64) -> Self {
        Self {
            interval_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self, advertised: &[PowerDomain]) -> Result<(), SamplerError> {
        if self.interval_ms < MIN_INTERVAL_MS {
            return Err(SamplerError::InvalidPlan(format!(
                "interval {} ms is below the {} ms floor",
                self.interval_ms, MIN_INTERVAL_MS
            )));
        }
        if let Some(domains) = &self.domains {
            if domains.is_empty() {
                return Err(SamplerError::InvalidPlan("empty domain list".into()));
            }
            if let Some(d) = domains.iter().find(|d| !advertised.contains(d)) {
                return Err(SamplerError::InvalidPlan(format!(
                    "domain {d} is not advertised by the backend"
                )));
            }
        }
        Ok(())
    }

    fn selected(&self, advertised: &[PowerDomain]) -> Vec<PowerDomain> {
        match &self.domains {
            Some(d) => advertised.iter().filter(|a| d.contains(a)).cloned().collect(),
            None => advertised.to_vec(),
        }
    }
}

/// Time-ordered readings of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySeries {
    pub domain: PowerDomain,
    pub kind: SampleKind,
    /// `(timestamp_ns, value)`, timestamps strictly increasing.
    pub points: Vec<(u64, f64)>,
}

impl TelemetrySeries {
    pub fn empty(domain: PowerDomain, kind: SampleKind) -> Self {
        Self {
            domain,
            kind,
            points: Vec::new(),
        }
    }

    pub fn new(
        domain: PowerDomain,
        kind: SampleKind,
        points: Vec<(u64, f64)>,
    ) -> Result<Self, SamplerError> {
        if let Some(i) = points.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(SamplerError::NonIncreasingTimestamps(i + 1));
        }
        Ok(Self {
            domain,
            kind,
            points,
        })
    }

    /// Appends a point; returns false (and drops it) if it is not strictly
    /// after the last one.
    pub fn push(&mut self, timestamp_ns: u64, value: f64) -> bool {
        if self.points.last().is_some_and(|&(t, _)| t >= timestamp_ns) {
            return false;
        }
        self.points.push((timestamp_ns, value));
        true
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn timestamps(&self) -> impl Iterator<Item = u64> + '_ {
        self.points.iter().map(|p| p.0)
    }
}

/// Splits samples into one series per domain, in first-appearance order.
/// Kind mismatches and non-increasing timestamps are dropped; the count of
/// dropped samples is returned alongside.
pub fn partition_samples(samples: &[SensorSample]) -> (Vec<TelemetrySeries>, usize) {
    let mut order: Vec<PowerDomain> = Vec::new();
    let mut by_domain: BTreeMap<PowerDomain, TelemetrySeries> = BTreeMap::new();
    let mut dropped = 0;
    for s in samples {
        let series = by_domain.entry(s.domain.clone()).or_insert_with(|| {
            order.push(s.domain.clone());
            TelemetrySeries::empty(s.domain.clone(), s.kind)
        });
        if series.kind != s.kind || !series.push(s.timestamp_ns, s.value) {
            dropped += 1;
        }
    }
    let series = order
        .into_iter()
        .filter_map(|d| by_domain.remove(&d))
        .collect();
    (series, dropped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    pub mean_ms: f64,
    pub max_ms: f64,
    pub stddev_ms: f64,
}

/// Statistics over successive timestamp differences.
pub fn interval_stats(series: &TelemetrySeries) -> Result<IntervalStats, SamplerError> {
    if series.len() < 2 {
        return Err(SamplerError::TooFewPoints(series.len()));
    }
    let gaps: Vec<f64> = series
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as f64 / 1e6)
        .collect();
    let n = gaps.len() as f64;
    let mean_ms = gaps.iter().sum::<f64>() / n;
    let max_ms = gaps.iter().copied().fold(f64::MIN, f64::max);
    let var = gaps.iter().map(|g| (g - mean_ms).powi(2)).sum::<f64>() / n;
    Ok(IntervalStats {
        mean_ms,
        max_ms,
        stddev_ms: var.sqrt(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    /// Successful acquisitions (one per tick, each covering every domain).
    pub acquisitions: usize,
    /// Lateness of each acquisition against its scheduled tick.
    pub mean_jitter_ms: f64,
    pub max_jitter_ms: f64,
    pub retries: u32,
    pub skipped_ticks: u64,
    /// Samples dropped because their timestamp did not advance.
    pub dropped_samples: usize,
    /// Set when the session ended early on a persistent read failure.
    pub aborted: Option<String>,
    /// Set when writing `record_path` failed.
    pub record_error: Option<String>,
}

impl SessionStats {
    pub fn is_clean(&self) -> bool {
        self.aborted.is_none() && self.record_error.is_none()
    }
}

#[derive(Debug, Clone)]
pub struct SamplingOutcome {
    pub series: Vec<TelemetrySeries>,
    pub stats: SessionStats,
    /// Every accepted sample in acquisition order, as written to a trace.
    pub raw: Vec<SensorSample>,
}

struct Collector {
    selected: Vec<PowerDomain>,
    series: Vec<TelemetrySeries>,
    raw: Vec<SensorSample>,
    stats: SessionStats,
    jitter_sum_ms: f64,
    live_ticks: usize,
}

enum Acquire {
    Ok,
    Closed,
    Failed,
}

impl Collector {
    fn new(selected: Vec<PowerDomain>) -> Self {
        Self {
            selected,
            series: Vec::new(),
            raw: Vec::new(),
            stats: SessionStats::default(),
            jitter_sum_ms: 0.0,
            live_ticks: 0,
        }
    }

    fn acquire(&mut self, handle: &TelemetryHandle) -> Acquire {
        let mut attempt = 0;
        let samples = loop {
            match handle.read_all() {
                Ok(s) => break s,
                Err(TelemetryError::TransientReadFailure(msg)) => {
                    if attempt == MAX_READ_RETRIES {
                        self.stats.aborted = Some(format!(
                            "read failed after {MAX_READ_RETRIES} retries: {msg}"
                        ));
                        return Acquire::Failed;
                    }
                    attempt += 1;
                    self.stats.retries += 1;
                }
                Err(TelemetryError::BackendClosed) => return Acquire::Closed,
                Err(other) => {
                    self.stats.aborted = Some(other.to_string());
                    return Acquire::Failed;
                }
            }
        };
        for s in samples {
            if !self.selected.contains(&s.domain) {
                continue;
            }
            let idx = match self.series.iter().position(|x| x.domain == s.domain) {
                Some(i) => i,
                None => {
                    self.series
                        .push(TelemetrySeries::empty(s.domain.clone(), s.kind));
                    self.series.len() - 1
                }
            };
            let series = &mut self.series[idx];
            if series.kind == s.kind && series.push(s.timestamp_ns, s.value) {
                self.raw.push(s);
            } else {
                self.stats.dropped_samples += 1;
            }
        }
        self.stats.acquisitions += 1;
        Acquire::Ok
    }

    fn record_jitter(&mut self, late: Duration) {
        let ms = late.as_secs_f64() * 1e3;
        self.jitter_sum_ms += ms;
        self.live_ticks += 1;
        self.stats.max_jitter_ms = self.stats.max_jitter_ms.max(ms);
    }

    fn finish(mut self) -> SamplingOutcome {
        if self.live_ticks > 0 {
            self.stats.mean_jitter_ms = self.jitter_sum_ms / self.live_ticks as f64;
        }
        // Series in advertised order, including domains that never produced a
        // sample.
        let mut series = Vec::with_capacity(self.selected.len());
        for d in &self.selected {
            match self.series.iter().position(|s| &s.domain == d) {
                Some(i) => series.push(self.series.swap_remove(i)),
                None => series.push(TelemetrySeries::empty(
                    d.clone(),
                    SampleKind::InstantPowerWatts,
                )),
            }
        }
        SamplingOutcome {
            series,
            stats: self.stats,
            raw: self.raw,
        }
    }
}

fn run_live(
    handle: &TelemetryHandle,
    interval: Duration,
    mut collector: Collector,
    ready: mpsc::SyncSender<()>,
    stop: mpsc::Receiver<()>,
) -> Collector {
    let start = Instant::now();
    let mut tick: u32 = 0;
    let mut ready = Some(ready);
    let mut stopping = false;
    loop {
        let target = start + interval * tick;
        let status = collector.acquire(handle);
        collector.record_jitter(Instant::now().saturating_duration_since(target));
        if let Some(r) = ready.take() {
            let _ = r.send(());
        }
        if !matches!(status, Acquire::Ok) || stopping {
            break;
        }

        tick += 1;
        let now = Instant::now();
        while now > start + interval * tick + interval / 2 {
            tick += 1;
            collector.stats.skipped_ticks += 1;
        }
        let target = start + interval * tick;
        match stop.recv_timeout(target.saturating_duration_since(now)) {
            Err(RecvTimeoutError::Timeout) => {}
            Ok(()) | Err(RecvTimeoutError::Disconnected) => {
                stopping = true;
                thread::sleep(target.saturating_duration_since(Instant::now()));
            }
        }
    }
    if !stopping {
        let _ = stop.recv();
    }
    collector
}

fn run_drain(
    handle: &TelemetryHandle,
    mut collector: Collector,
    ready: mpsc::SyncSender<()>,
    stop: mpsc::Receiver<()>,
) -> Collector {
    let mut ready = Some(ready);
    while let Acquire::Ok = collector.acquire(handle) {
        if let Some(r) = ready.take() {
            let _ = r.send(());
        }
    }
    drop(ready);
    let _ = stop.recv();
    collector
}

/// An active sampling session. Dropping it without calling
/// [`stop`](Self::stop) stops the sampler and discards its data.
pub struct SamplingSession {
    handle: TelemetryHandle,
    plan: SamplingPlan,
    stop_tx: Option<mpsc::Sender<()>>,
    worker: Option<JoinHandle<Collector>>,
}

/// Starts sampling `handle` according to `plan`. The first acquisition is
/// complete when this returns.
pub fn start_sampling(
    handle: &TelemetryHandle,
    plan: SamplingPlan,
) -> Result<SamplingSession, SamplerError> {
    plan.validate(handle.domains())?;
    if !handle.try_claim() {
        return Err(SamplerError::AlreadySampling);
    }
    let selected = plan.selected(handle.domains());
    let interval = Duration::from_millis(plan.interval_ms);
    let (ready_tx, ready_rx) = mpsc::sync_channel(1);
    let (stop_tx, stop_rx) = mpsc::channel();
    let worker_handle = handle.clone();
    let spawned = thread::Builder::new()
        .name("wattbench-sampler".into())
        .spawn(move || {
            let collector = Collector::new(selected);
            if worker_handle.is_live() {
                run_live(&worker_handle, interval, collector, ready_tx, stop_rx)
            } else {
                run_drain(&worker_handle, collector, ready_tx, stop_rx)
            }
        });
    let worker = match spawned {
        Ok(w) => w,
        Err(e) => {
            handle.release();
            return Err(SamplerError::InvalidPlan(format!(
                "cannot spawn sampler thread: {e}"
            )));
        }
    };
    // Either the first acquisition finished or the sampler gave up.
    let _ = ready_rx.recv();
    Ok(SamplingSession {
        handle: handle.clone(),
        plan,
        stop_tx: Some(stop_tx),
        worker: Some(worker),
    })
}

impl SamplingSession {
    pub fn plan(&self) -> &SamplingPlan {
        &self.plan
    }

    /// Stops the session after one more scheduled acquisition and returns the
    /// collected series.
    pub fn stop(mut self) -> SamplingOutcome {
        let collector = self.join();
        let mut outcome = collector.finish();
        if let Some(path) = &self.plan.record_path {
            if let Err(e) = write_trace_file(path, &outcome.raw) {
                outcome.stats.record_error = Some(format!("{}: {e}", path.display()));
            }
        }
        outcome
    }

    fn join(&mut self) -> Collector {
        drop(self.stop_tx.take());
        let worker = self.worker.take().expect("session joined twice");
        let collector = match worker.join() {
            Ok(c) => c,
            Err(_) => {
                let mut c = Collector::new(Vec::new());
                c.stats.aborted = Some("sampler thread panicked".into());
                c
            }
        };
        self.handle.release();
        collector
    }
}

impl Drop for SamplingSession {
    fn drop(&mut self) {
        if self.worker.is_some() {
            let _ = self.join();
        }
    }
}

pub fn stop_sampling(session: SamplingSession) -> SamplingOutcome {
    session.stop()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::synthetic::SyntheticBackend;
    use crate::telemetry::replay::ReplayBackend;
    use crate::telemetry::{ActivityRegistry, BackendKind, TelemetryBackend};
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn synthetic() -> TelemetryHandle {
        TelemetryHandle::new(Box::new(SyntheticBackend::new(
            17.0,
            5.0,
            ActivityRegistry::new(),
        )))
    }

    fn series(ts_s: &[f64]) -> TelemetrySeries {
        TelemetrySeries::new(
            PowerDomain::Package,
            SampleKind::InstantPowerWatts,
            ts_s.iter().map(|&t| ((t * 1e9) as u64, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn interval_stats_examples() {
        let s = interval_stats(&series(&[0.0, 1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.mean_ms, 1000.0);
        assert_eq!(s.stddev_ms, 0.0);
        let s = interval_stats(&series(&[0.0, 1.0, 3.0])).unwrap();
        assert_eq!(s.mean_ms, 1500.0);
        assert_eq!(s.max_ms, 2000.0);
        assert_eq!(
            interval_stats(&series(&[0.0])),
            Err(SamplerError::TooFewPoints(1))
        );
    }

    #[test]
    fn series_rejects_non_increasing() {
        assert!(TelemetrySeries::new(
            PowerDomain::Package,
            SampleKind::InstantPowerWatts,
            vec![(0, 1.0), (0, 2.0)]
        )
        .is_err());
    }

    #[test]
    fn interval_floor() {
        let h = synthetic();
        assert!(matches!(
            start_sampling(&h, SamplingPlan::with_interval_ms(5)),
            Err(SamplerError::InvalidPlan(_))
        ));
        let plan = SamplingPlan {
            domains: Some(vec![PowerDomain::Dram]),
            ..SamplingPlan::with_interval_ms(100)
        };
        assert!(matches!(
            start_sampling(&h, plan),
            Err(SamplerError::InvalidPlan(_))
        ));
    }

    #[test]
    fn one_session_per_backend() {
        let h = synthetic();
        let s = start_sampling(&h, SamplingPlan::with_interval_ms(10)).unwrap();
        assert!(matches!(
            start_sampling(&h, SamplingPlan::with_interval_ms(10)),
            Err(SamplerError::AlreadySampling)
        ));
        let out = s.stop();
        assert!(!out.series[0].is_empty());
        // Released after stop.
        start_sampling(&h, SamplingPlan::with_interval_ms(10))
            .unwrap()
            .stop();
    }

    #[test]
    fn immediate_stop_has_samples() {
        let h = synthetic();
        let out = start_sampling(&h, SamplingPlan::with_interval_ms(10))
            .unwrap()
            .stop();
        assert_eq!(out.series.len(), 1);
        assert!(!out.series[0].is_empty());
        assert!(out.stats.is_clean());
    }

    #[test]
    fn short_session_sample_count() {
        let h = synthetic();
        let session = start_sampling(&h, SamplingPlan::with_interval_ms(50)).unwrap();
        thread::sleep(Duration::from_millis(500));
        let out = session.stop();
        let n = out.series[0].len();
        // 500 ms / 50 ms, plus the start sample and the closing tick.
        assert!((10..=13).contains(&n), "{n} samples");
        let st = interval_stats(&out.series[0]).unwrap();
        assert!((st.mean_ms - 50.0).abs() < 10.0, "{st:?}");
    }

    fn replay_fixture(rows_per_domain: usize) -> Vec<SensorSample> {
        let mut v = Vec::new();
        for i in 0..rows_per_domain {
            for (d, base) in [(PowerDomain::Package, 95.0), (PowerDomain::CoreSubsystem, 80.0)] {
                v.push(SensorSample {
                    timestamp_ns: i as u64 * 1_000_000_000,
                    domain: d,
                    kind: SampleKind::InstantPowerWatts,
                    value: base + i as f64 * 0.25,
                });
            }
        }
        v
    }

    #[test]
    fn replay_partitions_by_domain_regardless_of_interval() {
        for interval in [10, 1000, 60_000] {
            let backend = ReplayBackend::from_samples(replay_fixture(10)).unwrap();
            let h = TelemetryHandle::new(Box::new(backend));
            let out = start_sampling(&h, SamplingPlan::with_interval_ms(interval))
                .unwrap()
                .stop();
            assert_eq!(out.series.len(), 2);
            assert!(out.series.iter().all(|s| s.len() == 10));
            assert_eq!(out.series[1].points[3], (3_000_000_000, 80.75));
            assert_eq!(out.raw, replay_fixture(10));
        }
    }

    #[test]
    fn records_trace_that_replays_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.trace");
        let h = synthetic();
        let plan = SamplingPlan {
            record_path: Some(path.clone()),
            ..SamplingPlan::with_interval_ms(10)
        };
        let session = start_sampling(&h, plan).unwrap();
        thread::sleep(Duration::from_millis(60));
        let live = session.stop();
        assert!(live.stats.is_clean());

        let replay = TelemetryHandle::new(Box::new(ReplayBackend::open(&path).unwrap()));
        let replayed = start_sampling(&replay, SamplingPlan::with_interval_ms(1000))
            .unwrap()
            .stop();
        assert_eq!(replayed.series, live.series);
    }

    struct Flaky {
        failures_left: Arc<AtomicU32>,
        domains: Vec<PowerDomain>,
        t: u64,
    }

    impl TelemetryBackend for Flaky {
        fn domains(&self) -> &[PowerDomain] {
            &self.domains
        }
        fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError> {
            if self.failures_left.load(Ordering::SeqCst) > 0 {
                self.failures_left.fetch_sub(1, Ordering::SeqCst);
                return Err(TelemetryError::TransientReadFailure("flaky".into()));
            }
            self.t += 1;
            Ok(vec![SensorSample {
                timestamp_ns: crate::clock::monotonic_ns(),
                domain: PowerDomain::Package,
                kind: SampleKind::InstantPowerWatts,
                value: 1.0,
            }])
        }
        fn kind(&self) -> BackendKind {
            BackendKind::Synthetic
        }
    }

    #[test]
    fn transient_failures_are_retried_and_counted() {
        let failures = Arc::new(AtomicU32::new(2));
        let h = TelemetryHandle::new(Box::new(Flaky {
            failures_left: failures.clone(),
            domains: vec![PowerDomain::Package],
            t: 0,
        }));
        let out = start_sampling(&h, SamplingPlan::with_interval_ms(10))
            .unwrap()
            .stop();
        assert_eq!(out.stats.retries, 2);
        assert!(out.stats.aborted.is_none());
        assert!(!out.series[0].is_empty());
    }

    #[test]
    fn persistent_failure_aborts() {
        let failures = Arc::new(AtomicU32::new(0));
        let h = TelemetryHandle::new(Box::new(Flaky {
            failures_left: failures.clone(),
            domains: vec![PowerDomain::Package],
            t: 0,
        }));
        let session = start_sampling(&h, SamplingPlan::with_interval_ms(10)).unwrap();
        failures.store(100, Ordering::SeqCst);
        thread::sleep(Duration::from_millis(50));
        let out = session.stop();
        assert_eq!(out.stats.retries, MAX_READ_RETRIES);
        assert!(out.stats.aborted.is_some());
        assert!(!out.series[0].is_empty(), "partial series kept");
    }
}
