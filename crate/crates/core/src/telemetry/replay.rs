//! Replays a recorded trace as if it were a live source.
//!
//! Each `read_all` returns the rows sharing the next timestamp. Recordings
//! from platforms without a native backend (accelerator cards, IPMI/I2C
//! boards) enter the pipeline through this backend.

use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};

use super::trace::{read_trace_file, TraceError};
use super::{BackendDescriptor, BackendKind, PowerDomain, SampleKind, SensorSample, TelemetryBackend, TelemetryError};

#[derive(Debug)]
pub struct ReplayBackend {
    path: PathBuf,
    domains: Vec<PowerDomain>,
    groups: VecDeque<Vec<SensorSample>>,
    rows: usize,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, TelemetryError> {
        let unreadable = |reason: String| TelemetryError::ReplayFileUnreadable {
            path: path.to_owned(),
            reason,
        };
        let samples = read_trace_file(path).map_err(|e| match e {
            TraceError::Io(io) => unreadable(io.to_string()),
            other => unreadable(other.to_string()),
        })?;
        Self::from_samples(samples).map_err(unreadable).map(|mut b| {
            b.path = path.to_owned();
            b
        })
    }

    /// Builds a replay source from in-memory samples sorted by timestamp.
    pub fn from_samples(samples: Vec<SensorSample>) -> Result<Self, String> {
        let mut domains: Vec<PowerDomain> = Vec::new();
        let mut kinds: HashMap<PowerDomain, SampleKind> = HashMap::new();
        let rows = samples.len();
        let mut groups: VecDeque<Vec<SensorSample>> = VecDeque::new();
        for s in samples {
            match kinds.get(&s.domain) {
                Some(k) if *k != s.kind => {
                    return Err(format!(
                        "domain {} mixes {} and {} samples",
                        s.domain,
                        k.name(),
                        s.kind.name()
                    ))
                }
                Some(_) => {}
                None => {
                    kinds.insert(s.domain.clone(), s.kind);
                    domains.push(s.domain.clone());
                }
            }
            match groups.back_mut() {
                Some(g) if g[0].timestamp_ns == s.timestamp_ns => {
                    if g.iter().any(|o| o.domain == s.domain) {
                        return Err(format!(
                            "duplicate {} row at t_ns={}",
                            s.domain, s.timestamp_ns
                        ));
                    }
                    g.push(s)
                }
                Some(g) if g[0].timestamp_ns > s.timestamp_ns => {
                    return Err("rows not sorted by t_ns".into())
                }
                _ => groups.push_back(vec![s]),
            }
        }
        Ok(Self {
            path: PathBuf::new(),
            domains,
            groups,
            rows,
        })
    }

    pub(crate) fn from_descriptor(descriptor: &BackendDescriptor) -> Result<Self, TelemetryError> {
        let path = descriptor
            .param("path")
            .ok_or_else(|| TelemetryError::InvalidDescriptor("replay: missing path".into()))?;
        Self::open(Path::new(path))
    }

    pub fn row_count(&self) -> usize {
        self.rows
    }
}

impl TelemetryBackend for ReplayBackend {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError> {
        self.groups.pop_front().ok_or(TelemetryError::BackendClosed)
    }

    fn is_live(&self) -> bool {
        false
    }

    fn kind(&self) -> BackendKind {
        BackendKind::TraceReplay
    }

    fn details(&self) -> Vec<String> {
        vec![format!("{}: {} rows", self.path.display(), self.rows)]
    }
}
