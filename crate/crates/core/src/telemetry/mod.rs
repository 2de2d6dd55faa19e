//! Power telemetry sources behind a single read interface.
//!
//! Every source implements [`TelemetryBackend`]. Callers normally go through
//! [`open_backend`], which validates a [`BackendDescriptor`] and wraps the
//! concrete source in a shareable [`TelemetryHandle`].

pub mod rapl;
pub mod replay;
pub mod synthetic;
pub mod trace;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{ActivityGuard, ActivityRegistry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    #[error("{backend} is not available on this host: {reason} (hint: {hint})")]
    UnsupportedOnHost {
        backend: BackendKind,
        reason: String,
        hint: String,
    },
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("cannot read replay trace {path:?}: {reason}")]
    ReplayFileUnreadable { path: PathBuf, reason: String },
    #[error("backend is closed")]
    BackendClosed,
    #[error("transient read failure: {0}")]
    TransientReadFailure(String),
    #[error("invalid power domain label {0:?}")]
    InvalidDomain(String),
}

/// A Custom domain label: non-empty, lowercase, at most 32 characters.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CustomLabel(String);

impl CustomLabel {
    pub const MAX_LEN: usize = 32;

    pub fn new(label: &str) -> Result<Self, TelemetryError> {
        let ok = !label.is_empty()
            && label.chars().count() <= Self::MAX_LEN
            && label
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
            && PowerDomain::builtin(label).is_none();
        if ok {
            Ok(Self(label.to_owned()))
        } else {
            Err(TelemetryError::InvalidDomain(label.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Measurement domain of a sample.
///
/// `UncoreDerived` is never produced by a backend; it only comes out of
/// [`crate::metrics::derive_uncore`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PowerDomain {
    /// RAPL PP0: cores, ALU/FPU, L1 and L2.
    CoreSubsystem,
    /// RAPL PKG: the whole processor die.
    Package,
    Dram,
    /// SoC / uncore sensor rail (X-Gene SOC).
    Soc,
    /// Processor module sensor rail (X-Gene PMD).
    Pmd,
    WholeCard,
    /// Package minus core subsystem.
    UncoreDerived,
    Custom(CustomLabel),
}

impl PowerDomain {
    fn builtin(name: &str) -> Option<Self> {
        Some(match name {
            "pp0" => Self::CoreSubsystem,
            "pkg" => Self::Package,
            "dram" => Self::Dram,
            "soc" => Self::Soc,
            "pmd" => Self::Pmd,
            "card" => Self::WholeCard,
            "uncore" => Self::UncoreDerived,
            _ => return None,
        })
    }

    pub fn custom(label: &str) -> Result<Self, TelemetryError> {
        CustomLabel::new(label).map(Self::Custom)
    }

    pub fn name(&self) -> &str {
        match self {
            Self::CoreSubsystem => "pp0",
            Self::Package => "pkg",
            Self::Dram => "dram",
            Self::Soc => "soc",
            Self::Pmd => "pmd",
            Self::WholeCard => "card",
            Self::UncoreDerived => "uncore",
            Self::Custom(label) => label.as_str(),
        }
    }

    /// Parses a domain name as it may appear in raw backend output, which
    /// excludes the derived uncore domain.
    pub fn parse_raw(name: &str) -> Result<Self, TelemetryError> {
        match name.parse()? {
            Self::UncoreDerived => Err(TelemetryError::InvalidDomain(format!(
                "{name} is derived and cannot appear in raw telemetry"
            ))),
            d => Ok(d),
        }
    }
}

impl FromStr for PowerDomain {
    type Err = TelemetryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match Self::builtin(s) {
            Some(d) => Ok(d),
            None => Self::custom(s),
        }
    }
}

impl fmt::Display for PowerDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<PowerDomain> for String {
    fn from(d: PowerDomain) -> String {
        d.name().to_owned()
    }
}

impl TryFrom<String> for PowerDomain {
    type Error = TelemetryError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SampleKind {
    /// Cumulative joules since the handle was opened.
    #[serde(rename = "energy_j")]
    EnergyCounterJoules,
    #[serde(rename = "power_w")]
    InstantPowerWatts,
}

impl SampleKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::EnergyCounterJoules => "energy_j",
            Self::InstantPowerWatts => "power_w",
        }
    }
}

impl FromStr for SampleKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "energy_j" => Ok(Self::EnergyCounterJoules),
            "power_w" => Ok(Self::InstantPowerWatts),
            other => Err(format!("unknown sample kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSample {
    pub timestamp_ns: u64,
    pub domain: PowerDomain,
    pub kind: SampleKind,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RaplMsr,
    RaplSysfs,
    #[serde(rename = "replay")]
    TraceReplay,
    Synthetic,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::RaplMsr => "rapl-msr",
            Self::RaplSysfs => "rapl-sysfs",
            Self::TraceReplay => "replay",
            Self::Synthetic => "synthetic",
        }
    }

    /// Parameter keys accepted by this backend, and whether each is required.
    pub fn parameter_keys(self) -> &'static [(&'static str, bool)] {
        match self {
            Self::RaplMsr => &[("package", false), ("cpu", false), ("device", false)],
            Self::RaplSysfs => &[("package", false), ("root", false)],
            Self::TraceReplay => &[("path", true)],
            Self::Synthetic => &[
                ("idle_watts", true),
                ("watts_per_thread", true),
                ("noise_stddev", false),
                ("seed", false),
            ],
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rapl-msr" | "msr" => Ok(Self::RaplMsr),
            "rapl-sysfs" | "powercap" => Ok(Self::RaplSysfs),
            "replay" | "trace" => Ok(Self::TraceReplay),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(format!(
                "unknown backend {other:?} (expected rapl-msr, rapl-sysfs, replay or synthetic)"
            )),
        }
    }
}

/// Declarative selection of a telemetry source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_kind: BackendKind,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn new(backend_kind: BackendKind) -> Self {
        Self {
            backend_kind,
            parameters: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.parameters.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn synthetic(idle_watts: f64, watts_per_thread: f64) -> Self {
        Self::new(BackendKind::Synthetic)
            .with_param("idle_watts", idle_watts)
            .with_param("watts_per_thread", watts_per_thread)
    }

    pub fn replay(path: impl Into<PathBuf>) -> Self {
        Self::new(BackendKind::TraceReplay).with_param("path", path.into().display())
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.parameters.get(key).map(String::as_str)
    }

    /// Parses an optional parameter, failing with `InvalidDescriptor` when it
    /// is present but malformed.
    pub fn parse_param<T: FromStr>(&self, key: &str) -> Result<Option<T>, TelemetryError>
    where
        T::Err: fmt::Display,
    {
        self.param(key)
            .map(|raw| {
                raw.trim().parse::<T>().map_err(|e| {
                    TelemetryError::InvalidDescriptor(format!(
                        "{}: parameter {key}={raw:?}: {e}",
                        self.backend_kind
                    ))
                })
            })
            .transpose()
    }

    pub fn validate(&self) -> Result<(), TelemetryError> {
        let keys = self.backend_kind.parameter_keys();
        for key in self.parameters.keys() {
            if !keys.iter().any(|(k, _)| k == key) {
                return Err(TelemetryError::InvalidDescriptor(format!(
                    "{}: unknown parameter {key:?}",
                    self.backend_kind
                )));
            }
        }
        for (key, required) in keys {
            if *required && !self.parameters.contains_key(*key) {
                return Err(TelemetryError::InvalidDescriptor(format!(
                    "{}: missing required parameter {key:?}",
                    self.backend_kind
                )));
            }
        }
        if self.backend_kind == BackendKind::Synthetic {
            for key in ["idle_watts", "watts_per_thread", "noise_stddev"] {
                if let Some(v) = self.parse_param::<f64>(key)? {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(TelemetryError::InvalidDescriptor(format!(
                            "synthetic: {key} must be a finite value >= 0, got {v}"
                        )));
                    }
                }
            }
            self.parse_param::<u64>("seed")?;
        }
        Ok(())
    }
}

/// A telemetry source.
///
/// `domains` must return the same list for the whole lifetime of the backend.
pub trait TelemetryBackend: Send {
    fn domains(&self) -> &[PowerDomain];

    /// One sample per advertised domain, all carrying the same acquisition
    /// timestamp.
    fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError>;

    /// Live sources are paced by the sampling interval. Recorded sources are
    /// drained as fast as they can be read.
    fn is_live(&self) -> bool {
        true
    }

    fn kind(&self) -> BackendKind;

    /// Extra human-readable facts for the probe report (unit constants etc).
    fn details(&self) -> Vec<String> {
        Vec::new()
    }
}

struct HandleShared {
    backend: Mutex<Box<dyn TelemetryBackend>>,
    domains: Vec<PowerDomain>,
    kind: BackendKind,
    live: bool,
    sampling: AtomicBool,
    closed: AtomicBool,
}

/// Shareable handle around an open backend.
///
/// Cloning yields another reference to the same source; the advertised
/// domain list is captured at open time and never changes.
#[derive(Clone)]
pub struct TelemetryHandle {
    shared: Arc<HandleShared>,
}

impl fmt::Debug for TelemetryHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TelemetryHandle")
            .field("kind", &self.shared.kind)
            .field("domains", &self.shared.domains)
            .finish()
    }
}

impl TelemetryHandle {
    pub fn new(backend: Box<dyn TelemetryBackend>) -> Self {
        let domains = backend.domains().to_vec();
        let kind = backend.kind();
        let live = backend.is_live();
        Self {
            shared: Arc::new(HandleShared {
                backend: Mutex::new(backend),
                domains,
                kind,
                live,
                sampling: AtomicBool::new(false),
                closed: AtomicBool::new(false),
            }),
        }
    }

    pub fn domains(&self) -> &[PowerDomain] {
        &self.shared.domains
    }

    pub fn kind(&self) -> BackendKind {
        self.shared.kind
    }

    pub fn is_live(&self) -> bool {
        self.shared.live
    }

    fn lock(&self) -> MutexGuard<'_, Box<dyn TelemetryBackend>> {
        self.shared
            .backend
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub fn read_all(&self) -> Result<Vec<SensorSample>, TelemetryError> {
        if self.is_closed() {
            return Err(TelemetryError::BackendClosed);
        }
        self.lock().read_all()
    }

    pub fn details(&self) -> Vec<String> {
        self.lock().details()
    }

    pub fn close(&self) {
        self.shared.closed.store(true, Ordering::SeqCst);
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    /// Marks the handle as owned by a sampling session. Returns false if a
    /// session already holds it.
    pub(crate) fn try_claim(&self) -> bool {
        self.shared
            .sampling
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .is_ok()
    }

    pub(crate) fn release(&self) {
        self.shared.sampling.store(false, Ordering::SeqCst);
    }
}

/// Opens the source described by `descriptor`. Synthetic backends follow the
/// process-wide [`ActivityRegistry::global`].
pub fn open_backend(descriptor: &BackendDescriptor) -> Result<TelemetryHandle, TelemetryError> {
    open_backend_with(descriptor, &ActivityRegistry::global())
}

/// Like [`open_backend`], with an explicit activity registry for the
/// synthetic power model.
pub fn open_backend_with(
    descriptor: &BackendDescriptor,
    registry: &ActivityRegistry,
) -> Result<TelemetryHandle, TelemetryError> {
    descriptor.validate()?;
    let backend: Box<dyn TelemetryBackend> = match descriptor.backend_kind {
        BackendKind::Synthetic => Box::new(synthetic::SyntheticBackend::from_descriptor(
            descriptor,
            registry.clone(),
        )?),
        BackendKind::TraceReplay => Box::new(replay::ReplayBackend::from_descriptor(descriptor)?),
        BackendKind::RaplMsr => Box::new(rapl::MsrBackend::from_descriptor(descriptor)?),
        BackendKind::RaplSysfs => Box::new(rapl::SysfsBackend::from_descriptor(descriptor)?),
    };
    Ok(TelemetryHandle::new(backend))
}
