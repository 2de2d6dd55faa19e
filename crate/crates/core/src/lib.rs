//! Performance-per-watt benchmarking harness.
//!
//! Power telemetry is read from a [`telemetry::TelemetryBackend`] (RAPL via MSR
//! or powercap, a recorded trace, or a synthetic affine model), sampled at a
//! fixed interval by the [`sampler`] while the deterministic multi-threaded
//! [`workload`] runs. The [`sweep`] module repeats that for a list of thread
//! counts, [`metrics`] turns the series into energy and efficiency figures and
//! [`report`] writes CSV, JSON, plot data and SVG charts.

pub mod clock;
pub mod host;
pub mod metrics;
pub mod report;
pub mod sampler;
pub mod sweep;
pub mod telemetry;
pub mod workload;

pub use metrics::{MetricsError, PowerStats};
pub use sampler::{SamplingPlan, SamplingSession, SessionStats, TelemetrySeries};
pub use sweep::{EventsPerPoint, Pinning, SweepConfig, SweepError, SweepPoint, SweepReport};
pub use telemetry::{
    open_backend, BackendDescriptor, BackendKind, PowerDomain, SampleKind, SensorSample,
    TelemetryBackend, TelemetryError, TelemetryHandle,
};
pub use workload::{WorkloadError, WorkloadResult, WorkloadSpec};
