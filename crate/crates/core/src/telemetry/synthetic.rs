//! Affine power model driven by the number of active workload threads.
//!
//! `watts = idle_watts + watts_per_thread * active_threads (+ N(0, noise_stddev))`

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{BackendDescriptor, BackendKind, PowerDomain, SampleKind, SensorSample, TelemetryBackend, TelemetryError};
use crate::clock::monotonic_ns;

/// Count of workload threads currently running.
///
/// Workers hold an [`ActivityGuard`] while they are part of a run, and the
/// synthetic backend reads the count on every acquisition.
#[derive(Debug, Clone, Default)]
pub struct ActivityRegistry {
    active: Arc<AtomicUsize>,
}

impl ActivityRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The process-wide registry used when no explicit registry is given.
    pub fn global() -> Self {
        static GLOBAL: OnceLock<ActivityRegistry> = OnceLock::new();
        GLOBAL.get_or_init(ActivityRegistry::new).clone()
    }

    pub fn enter(&self) -> ActivityGuard {
        self.active.fetch_add(1, Ordering::SeqCst);
        ActivityGuard {
            active: Arc::clone(&self.active),
        }
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }
}

#[must_use = "the thread is counted only while the guard is alive"]
#[derive(Debug)]
pub struct ActivityGuard {
    active: Arc<AtomicUsize>,
}

impl Drop for ActivityGuard {
    fn drop(&mut self) {
        self.active.fetch_sub(1, Ordering::SeqCst);
    }
}

#[derive(Debug)]
pub struct SyntheticBackend {
    idle_watts: f64,
    watts_per_thread: f64,
    noise: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    registry: ActivityRegistry,
    domains: [PowerDomain; 1],
}

impl SyntheticBackend {
    pub fn new(idle_watts: f64, watts_per_thread: f64, registry: ActivityRegistry) -> Self {
        Self {
            idle_watts,
            watts_per_thread,
            noise: None,
            rng: ChaCha8Rng::seed_from_u64(0),
            registry,
            domains: [PowerDomain::Package],
        }
    }

    pub fn with_noise(mut self, stddev: f64, seed: u64) -> Self {
        self.noise = (stddev > 0.0).then(|| Normal::new(0.0, stddev).expect("finite stddev"));
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub(crate) fn from_descriptor(
        descriptor: &BackendDescriptor,
        registry: ActivityRegistry,
    ) -> Result<Self, TelemetryError> {
        let idle = descriptor.parse_param::<f64>("idle_watts")?.unwrap_or_default();
        let slope = descriptor
            .parse_param::<f64>("watts_per_thread")?
            .unwrap_or_default();
        let noise = descriptor.parse_param::<f64>("noise_stddev")?.unwrap_or(0.0);
        let seed = descriptor.parse_param::<u64>("seed")?.unwrap_or(0);
        Ok(Self::new(idle, slope, registry).with_noise(noise, seed))
    }

    /// Noise-free model value for `threads` active threads.
    pub fn model_watts(&self, threads: usize) -> f64 {
        self.idle_watts + self.watts_per_thread * threads as f64
    }
}

impl TelemetryBackend for SyntheticBackend {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError> {
        let timestamp_ns = monotonic_ns();
        let mut watts = self.model_watts(self.registry.active());
        if let Some(noise) = &self.noise {
            watts += noise.sample(&mut self.rng);
        }
        Ok(vec![SensorSample {
            timestamp_ns,
            domain: PowerDomain::Package,
            kind: SampleKind::InstantPowerWatts,
            value: watts.max(0.0),
        }])
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Synthetic
    }

    fn details(&self) -> Vec<String> {
        vec![format!(
            "model: {} W + {} W/thread",
            self.idle_watts, self.watts_per_thread
        )]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::open_backend_with;

    #[test]
    fn advertises_package_only() {
        let registry = ActivityRegistry::new();
        let handle =
            open_backend_with(&BackendDescriptor::synthetic(17.0, 5.0), &registry).unwrap();
        assert_eq!(handle.domains(), &[PowerDomain::Package]);
    }

    #[test]
    fn affine_in_active_threads() {
        let registry = ActivityRegistry::new();
        let handle =
            open_backend_with(&BackendDescriptor::synthetic(17.0, 5.0), &registry).unwrap();
        let idle = handle.read_all().unwrap();
        assert_eq!(idle.len(), 1);
        assert_eq!(idle[0].value, 17.0);
        assert_eq!(idle[0].kind, SampleKind::InstantPowerWatts);

        let guards: Vec<_> = (0..4).map(|_| registry.enter()).collect();
        for _ in 0..10 {
            assert_eq!(handle.read_all().unwrap()[0].value, 37.0);
        }
        drop(guards);
        assert_eq!(handle.read_all().unwrap()[0].value, 17.0);
        assert_eq!(registry.active(), 0);
    }

    #[test]
    fn noise_is_seeded_and_non_negative() {
        let read = |seed: u64| {
            let registry = ActivityRegistry::new();
            let d = BackendDescriptor::synthetic(0.5, 0.0)
                .with_param("noise_stddev", 2.0)
                .with_param("seed", seed);
            let h = open_backend_with(&d, &registry).unwrap();
            (0..50)
                .map(|_| h.read_all().unwrap()[0].value)
                .collect::<Vec<_>>()
        };
        let a = read(7);
        assert_eq!(a, read(7));
        assert_ne!(a, read(8));
        assert!(a.iter().all(|&w| w >= 0.0));
    }
}
