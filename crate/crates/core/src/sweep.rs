//! Thread-scaling experiment: for each thread count, run the workload while
//! sampling power and join throughput with energy into a [`SweepPoint`].
//!
//! Point sequence: untimed warmup, start sampling, timed workload, stop
//! sampling, then metrics over the window clipped to the workload's own
//! start and end timestamps.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::host::{self, HostMetadata};
use crate::metrics::{self, derive_uncore, power_stats, subtract_idle, MetricsError, Window};
use crate::sampler::{self, partition_samples, SamplerError, SamplingOutcome, SamplingPlan, TelemetrySeries};
use crate::telemetry::trace::write_trace_file;
use crate::telemetry::{
    open_backend_with, ActivityRegistry, BackendDescriptor, PowerDomain, SensorSample, TelemetryError,
};
use crate::workload::{self, RunOptions, WorkloadError, WorkloadResult, WorkloadSpec, DEFAULT_LAYERS, DEFAULT_WORK_SCALE};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THREAD_COUNTS: [usize; 5] = [1, 2, 4, 8, 16];
/// Default seconds per point when the event count is calibrated.
pub const DEFAULT_POINT_SECONDS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum PointError {
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("sampling aborted: {0}")]
    SamplingAborted(String),
    #[error("no samples for primary domain {0}")]
    MissingPrimary(PowerDomain),
}

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error("point with {threads} threads failed: {source}")]
    PointFailed {
        threads: usize,
        #[source]
        source: PointError,
    },
    #[error("cannot write trace {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SweepError {
    fn point(threads: usize, source: impl Into<PointError>) -> Self {
        Self::PointFailed {
            threads,
            source: source.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventsPerPoint {
    Fixed(u64),
    /// Sized from a single-thread probe so each point runs about this long.
    Calibrated { point_seconds: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pinning {
    #[default]
    None,
    Compact,
    Scatter,
}

impl std::str::FromStr for Pinning {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "compact" => Ok(Self::Compact),
            "scatter" => Ok(Self::Scatter),
            other => Err(format!("unknown pinning policy {other:?} (none, compact, scatter)")),
        }
    }
}

impl Pinning {
    fn cpus(self) -> Option<Vec<usize>> {
        match self {
            Self::None => None,
            Self::Compact => Some(host::compact_order(&host::cpu_topology())),
            Self::Scatter => Some(host::scatter_order(&host::cpu_topology())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Name of this machine/configuration in reports and comparisons.
    pub label: String,
    pub thread_counts: Vec<usize>,
    pub repetitions: u32,
    pub warmup_s: f64,
    pub events_per_point: EventsPerPoint,
    pub seed: u64,
    pub work_scale: u32,
    pub layers: u32,
    pub backend: BackendDescriptor,
    pub plan: SamplingPlan,
    pub idle_watts: Option<f64>,
    pub pinning: Pinning,
    /// Domain used for efficiency; package (or whole card) when unset.
    pub primary_domain: Option<PowerDomain>,
    pub keep_going: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            label: "local".into(),
            thread_counts: DEFAULT_THREAD_COUNTS.to_vec(),
            repetitions: 1,
            warmup_s: 5.0,
            events_per_point: EventsPerPoint::Calibrated {
                point_seconds: DEFAULT_POINT_SECONDS,
            },
            seed: 0,
            work_scale: DEFAULT_WORK_SCALE,
            layers: DEFAULT_LAYERS,
            backend: BackendDescriptor::synthetic(17.0, 5.0),
            plan: SamplingPlan::default(),
            idle_watts: None,
            pinning: Pinning::None,
            primary_domain: None,
            keep_going: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SweepError> {
        let bad = |m: String| Err(SweepError::InvalidConfig(m));
        if self.thread_counts.is_empty() {
            return bad("thread_counts is empty".into());
        }
        if self.thread_counts.contains(&0) {
            return bad("thread counts must be positive".into());
        }
        if self.thread_counts.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "thread_counts must be strictly increasing, got {:?}",
                self.thread_counts
            ));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be positive".into());
        }
        if !(self.warmup_s.is_finite() && self.warmup_s >= 0.0) {
            return bad(format!("warmup_s must be >= 0, got {}", self.warmup_s));
        }
        match self.events_per_point {
            EventsPerPoint::Fixed(0) => return bad("events per point must be positive".into()),
            EventsPerPoint::Calibrated { point_seconds } if point_seconds.is_nan() || point_seconds <= 0.0 => {
                return bad(format!("point_seconds must be positive, got {point_seconds}"))
            }
            _ => {}
        }
        if self.work_scale == 0 || self.layers == 0 {
            return bad("work_scale and layers must be positive".into());
        }
        if let Some(idle) = self.idle_watts {
            if !(idle.is_finite() && idle >= 0.0) {
                return bad(format!("idle_watts must be >= 0, got {idle}"));
            }
        }
        if self.plan.interval_ms < sampler::MIN_INTERVAL_MS {
            return bad(format!(
                "interval {} ms is below the {} ms floor",
                self.plan.interval_ms,
                sampler::MIN_INTERVAL_MS
            ));
        }
        self.backend
            .validate()
            .map_err(|e| SweepError::InvalidConfig(e.to_string()))
    }

    fn workload_spec(&self, threads: usize, events: u64) -> WorkloadSpec {
        WorkloadSpec {
            events,
            threads,
            seed: self.seed,
            work_scale: self.work_scale,
            layers: self.layers,
        }
    }

    /// Events for a point with `threads` workers.
    pub fn events_for(&self, threads: usize) -> u64 {
        match self.events_per_point {
            EventsPerPoint::Fixed(n) => n,
            EventsPerPoint::Calibrated { point_seconds } => {
                let per_event = workload::time_per_event(self.work_scale, self.layers, 16, 3);
                let parallel = threads.min(host::logical_cpus()) as f64;
                ((point_seconds / per_event) * parallel).ceil().max(threads as f64) as u64
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPower {
    pub domain: PowerDomain,
    pub mean_watts: f64,
    pub energy_joules: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threads: usize,
    pub repetition: u32,
    pub workload: WorkloadResult,
    /// Power over the workload window for every measured domain, plus the
    /// derived uncore when package and core are both present.
    pub domains: Vec<DomainPower>,
    /// Primary-domain watts used for efficiency, after idle subtraction.
    pub primary_watts: f64,
    pub idle_underflow: bool,
    pub efficiency_eps_per_watt: Option<f64>,
    pub joules_per_event: Option<f64>,
    /// Uncore points clamped to zero because core exceeded package.
    pub uncore_clamped: usize,
}

impl SweepPoint {
    pub fn domain(&self, d: &PowerDomain) -> Option<&DomainPower> {
        self.domains.iter().find(|p| &p.domain == d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPoint {
    pub threads: usize,
    pub repetition: u32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub config: SweepConfig,
    pub host: HostMetadata,
    pub primary_domain: PowerDomain,
    /// How the power axis is defined.
    pub power_axis: String,
    pub idle_subtracted_watts: Option<f64>,
    pub points: Vec<SweepPoint>,
    #[serde(default)]
    pub failed_points: Vec<FailedPoint>,
}

pub const POWER_AXIS: &str = "energy over the workload window / window length, primary domain";

impl SweepReport {
    pub fn label(&self) -> &str {
        &self.config.label
    }
}

/// Workload side of a sweep: everything needed to rebuild the report from a
/// recorded raw trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadLog {
    pub schema_version: u32,
    pub config: SweepConfig,
    pub host: HostMetadata,
    pub primary_domain: PowerDomain,
    pub runs: Vec<LoggedRun>,
    #[serde(default)]
    pub failed_points: Vec<FailedPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRun {
    pub threads: usize,
    pub repetition: u32,
    pub workload: WorkloadResult,
}

impl From<&SweepReport> for WorkloadLog {
    fn from(r: &SweepReport) -> Self {
        Self {
            schema_version: r.schema_version,
            config: r.config.clone(),
            host: r.host.clone(),
            primary_domain: r.primary_domain.clone(),
            runs: r
                .points
                .iter()
                .map(|p| LoggedRun {
                    threads: p.threads,
                    repetition: p.repetition,
                    workload: p.workload.clone(),
                })
                .collect(),
            failed_points: r.failed_points.clone(),
        }
    }
}

fn pick_primary(config: &SweepConfig, available: &[PowerDomain]) -> PowerDomain {
    if let Some(d) = &config.primary_domain {
        return d.clone();
    }
    [PowerDomain::Package, PowerDomain::WholeCard]
        .into_iter()
        .find(|d| available.contains(d))
        .or_else(|| available.first().cloned())
        .unwrap_or(PowerDomain::Package)
}

/// Joins one workload run with the telemetry series covering it.
pub fn join_point(
    threads: usize,
    repetition: u32,
    workload: WorkloadResult,
    series: &[TelemetrySeries],
    primary: &PowerDomain,
    config: &SweepConfig,
) -> Result<SweepPoint, PointError> {
    let window = Window::new(workload.started_ns, workload.finished_ns);
    let mut domains = Vec::with_capacity(series.len() + 1);
    for s in series.iter().filter(|s| !s.is_empty()) {
        let st = power_stats(s, window)?;
        domains.push(DomainPower {
            domain: s.domain.clone(),
            mean_watts: st.mean_watts,
            energy_joules: st.energy_joules,
            sample_count: st.sample_count,
        });
    }

    let find = |d: PowerDomain| series.iter().find(|s| s.domain == d && s.len() >= 2);
    let mut uncore_clamped = 0;
    if let (Some(pkg), Some(pp0)) = (find(PowerDomain::Package), find(PowerDomain::CoreSubsystem)) {
        let tolerance_ns = config.plan.interval_ms * 1_000_000 / 2;
        if let Ok(u) = derive_uncore(pkg, pp0, tolerance_ns) {
            if let Ok(st) = power_stats(&u.series, window) {
                uncore_clamped = u.clamped;
                domains.push(DomainPower {
                    domain: PowerDomain::UncoreDerived,
                    mean_watts: st.mean_watts,
                    energy_joules: st.energy_joules,
                    sample_count: st.sample_count,
                });
            }
        }
    }

    let primary_mean = domains
        .iter()
        .find(|d| &d.domain == primary)
        .map(|d| d.mean_watts)
        .ok_or_else(|| PointError::MissingPrimary(primary.clone()))?;
    let (primary_watts, idle_underflow) = match config.idle_watts {
        Some(idle) => {
            let s = subtract_idle(primary_mean, idle);
            (s.watts, s.underflow)
        }
        None => (primary_mean, false),
    };
    let eff = metrics::efficiency(workload.events_per_sec, primary_watts).ok();
    Ok(SweepPoint {
        threads,
        repetition,
        workload,
        domains,
        primary_watts,
        idle_underflow,
        efficiency_eps_per_watt: eff.map(|e| e.eps_per_watt),
        joules_per_event: eff.and_then(|e| e.joules_per_event),
        uncore_clamped,
    })
}

fn warmup(config: &SweepConfig, threads: usize, events: u64, opts: &RunOptions) -> Result<(), WorkloadError> {
    if config.warmup_s <= 0.0 {
        return Ok(());
    }
    let chunk = (events / 10).max(threads as u64);
    let start = Instant::now();
    while start.elapsed().as_secs_f64() < config.warmup_s {
        workload::run_workload_with(&config.workload_spec(threads, chunk), opts)?;
    }
    Ok(())
}

/// One measured point plus the raw samples recorded for it.
pub struct PointRun {
    pub point: SweepPoint,
    pub sampling: SamplingOutcome,
    pub primary: PowerDomain,
}

/// Runs one point with an explicit event count and activity registry.
pub fn run_point_with(
    threads: usize,
    repetition: u32,
    events: u64,
    config: &SweepConfig,
    registry: &ActivityRegistry,
) -> Result<PointRun, SweepError> {
    let fail = |e: PointError| SweepError::PointFailed { threads, source: e };
    let handle = open_backend_with(&config.backend, registry).map_err(|e| fail(e.into()))?;
    let opts = RunOptions {
        registry: Some(registry.clone()),
        cpus: config.pinning.cpus(),
    };
    warmup(config, threads, events, &opts).map_err(|e| fail(e.into()))?;

    let plan = SamplingPlan {
        record_path: None,
        ..config.plan.clone()
    };
    let session = sampler::start_sampling(&handle, plan).map_err(|e| fail(e.into()))?;
    let result = workload::run_workload_with(&config.workload_spec(threads, events), &opts);
    let sampling = session.stop();
    handle.close();
    let result = result.map_err(|e| fail(e.into()))?;
    if let Some(reason) = &sampling.stats.aborted {
        return Err(fail(PointError::SamplingAborted(reason.clone())));
    }

    let primary = pick_primary(config, handle.domains());
    let point = join_point(threads, repetition, result, &sampling.series, &primary, config)
        .map_err(fail)?;
    Ok(PointRun {
        point,
        sampling,
        primary,
    })
}

pub fn run_point(threads: usize, config: &SweepConfig) -> Result<SweepPoint, SweepError> {
    let events = config.events_for(threads);
    run_point_with(threads, 0, events, config, &ActivityRegistry::global()).map(|r| r.point)
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepReport, SweepError> {
    run_sweep_with(config, &ActivityRegistry::global())
}

/// Runs every (thread count, repetition) point in ascending thread order.
/// The raw samples of all points are written to `config.plan.record_path`
/// when it is set.
pub fn run_sweep_with(config: &SweepConfig, registry: &ActivityRegistry) -> Result<SweepReport, SweepError> {
    config.validate()?;
    let host = HostMetadata::capture();
    let mut points = Vec::new();
    let mut failed_points = Vec::new();
    let mut raw: Vec<SensorSample> = Vec::new();
    let mut primary = None;

    for &threads in &config.thread_counts {
        let events = config.events_for(threads);
        for repetition in 0..config.repetitions {
            log::info!("point: {threads} threads, repetition {repetition}, {events} events");
            match run_point_with(threads, repetition, events, config, registry) {
                Ok(run) => {
                    primary.get_or_insert(run.primary);
                    raw.extend(run.sampling.raw);
                    points.push(run.point);
                }
                Err(e) if config.keep_going => {
                    log::warn!("{e}; continuing");
                    failed_points.push(FailedPoint {
                        threads,
                        repetition,
                        error: e.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    if let Some(path) = &config.plan.record_path {
        write_trace(path, &raw)?;
    }
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        host,
        primary_domain: primary.unwrap_or_else(|| pick_primary(config, &[])),
        power_axis: POWER_AXIS.into(),
        idle_subtracted_watts: config.idle_watts,
        points,
        failed_points,
    })
}

fn write_trace(path: &Path, raw: &[SensorSample]) -> Result<(), SweepError> {
    write_trace_file(path, raw).map_err(|source| SweepError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Rebuilds a report from a workload log and the raw samples recorded during
/// the sweep. With the trace written by [`run_sweep`] the result equals the
/// original report.
pub fn recompute_report(log: &WorkloadLog, samples: &[SensorSample]) -> Result<SweepReport, SweepError> {
    let (series, dropped) = partition_samples(samples);
    if dropped > 0 {
        log::warn!("{dropped} trace rows dropped (non-increasing timestamps or mixed kinds)");
    }
    let points = log
        .runs
        .iter()
        .map(|run| {
            join_point(
                run.threads,
                run.repetition,
                run.workload.clone(),
                &series,
                &log.primary_domain,
                &log.config,
            )
            .map_err(|e| SweepError::point(run.threads, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SweepReport {
        schema_version: log.schema_version,
        config: log.config.clone(),
        host: log.host.clone(),
        primary_domain: log.primary_domain.clone(),
        power_axis: POWER_AXIS.into(),
        idle_subtracted_watts: log.config.idle_watts,
        points,
        failed_points: log.failed_points.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::BackendKind;

    fn quick(thread_counts: Vec<usize>) -> SweepConfig {
        SweepConfig {
            thread_counts,
            warmup_s: 0.0,
            events_per_point: EventsPerPoint::Fixed(64),
            work_scale: 2000,
            plan: SamplingPlan::with_interval_ms(10),
            ..SweepConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(matches!(quick(vec![]).validate(), Err(SweepError::InvalidConfig(_))));
        assert!(quick(vec![2, 1]).validate().is_err());
        assert!(quick(vec![1, 1]).validate().is_err());
        assert!(quick(vec![0, 1]).validate().is_err());
        assert!(quick(vec![1, 2, 4, 8, 16, 32]).validate().is_ok());
        let mut c = quick(vec![1]);
        c.plan.interval_ms = 5;
        assert!(c.validate().is_err());
        let mut c = quick(vec![1]);
        c.repetitions = 0;
        assert!(c.validate().is_err());
        assert!(matches!(
            run_sweep_with(&quick(vec![]), &ActivityRegistry::new()),
            Err(SweepError::InvalidConfig(_))
        ));
    }

    #[test]
    fn unsupported_backend_fails_point() {
        let mut c = quick(vec![3]);
        c.backend = BackendDescriptor::new(BackendKind::RaplMsr).with_param("device", "/nonexistent/msr");
        match run_point_with(3, 0, 10, &c, &ActivityRegistry::new()) {
            Err(SweepError::PointFailed {
                threads: 3,
                source: PointError::Telemetry(TelemetryError::UnsupportedOnHost { .. }),
            }) => {}
            other => panic!("unexpected {:?}", other.err()),
        }
    }

    #[test]
    fn keep_going_records_failures() {
        let mut c = quick(vec![1, 2]);
        c.backend = BackendDescriptor::new(BackendKind::RaplMsr).with_param("device", "/nonexistent/msr");
        assert!(run_sweep_with(&c, &ActivityRegistry::new()).is_err());
        c.keep_going = true;
        let r = run_sweep_with(&c, &ActivityRegistry::new()).unwrap();
        assert!(r.points.is_empty());
        assert_eq!(r.failed_points.len(), 2);
    }

    #[test]
    fn idle_subtraction_changes_efficiency_only() {
        let series = vec![TelemetrySeries::new(
            PowerDomain::Package,
            crate::telemetry::SampleKind::InstantPowerWatts,
            vec![(0, 37.0), (2_000_000_000, 37.0)],
        )
        .unwrap()];
        let wl = WorkloadResult {
            events_done: 200,
            wall_time_s: 1.0,
            events_per_sec: 200.0,
            checksum: 0,
            per_thread_events: vec![200],
            started_ns: 500_000_000,
            finished_ns: 1_500_000_000,
        };
        let mut c = quick(vec![4]);
        let p = join_point(4, 0, wl.clone(), &series, &PowerDomain::Package, &c).unwrap();
        assert_eq!(p.primary_watts, 37.0);
        assert_eq!(p.efficiency_eps_per_watt, Some(200.0 / 37.0));
        c.idle_watts = Some(17.0);
        let p = join_point(4, 0, wl.clone(), &series, &PowerDomain::Package, &c).unwrap();
        assert_eq!(p.domain(&PowerDomain::Package).unwrap().mean_watts, 37.0);
        assert_eq!(p.primary_watts, 20.0);
        assert_eq!(p.efficiency_eps_per_watt, Some(10.0));
        assert_eq!(p.joules_per_event, Some(0.1));
        c.idle_watts = Some(50.0);
        let p = join_point(4, 0, wl, &series, &PowerDomain::Package, &c).unwrap();
        assert!(p.idle_underflow);
        assert_eq!(p.efficiency_eps_per_watt, None);
    }

    #[test]
    fn uncore_is_added_when_package_and_core_present() {
        use crate::telemetry::SampleKind::InstantPowerWatts as W;
        let ts = [0u64, 1_000_000_000, 2_000_000_000];
        let pkg = TelemetrySeries::new(PowerDomain::Package, W, ts.iter().map(|&t| (t, 95.0)).collect()).unwrap();
        let pp0 = TelemetrySeries::new(PowerDomain::CoreSubsystem, W, ts.iter().map(|&t| (t, 80.0)).collect()).unwrap();
        let wl = WorkloadResult {
            events_done: 10,
            wall_time_s: 2.0,
            events_per_sec: 5.0,
            checksum: 0,
            per_thread_events: vec![10],
            started_ns: 0,
            finished_ns: 2_000_000_000,
        };
        let mut c = quick(vec![1]);
        c.plan.interval_ms = 1000;
        let p = join_point(1, 0, wl, &[pkg, pp0], &PowerDomain::Package, &c).unwrap();
        let u = p.domain(&PowerDomain::UncoreDerived).unwrap();
        assert!((u.mean_watts - 15.0).abs() < 1e-12);
        assert_eq!(p.domains.len(), 3);
    }
}
