//! Layered settings: configuration file, then `WATTBENCH_*` environment
//! variables, then command-line flags. Later layers win per key.
//!
//! Keys are `section.name`. The file uses `[section]` headers with
//! `name = value` lines; the environment uses `WATTBENCH_SECTION_NAME`.
//! Any key under `telemetry` other than `backend` is passed to the backend
//! as a parameter and checked against the keys that backend accepts.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;
use wattbench::report::{Format, DEFAULT_FORMATS};
use wattbench::sampler::DEFAULT_INTERVAL_MS;
use wattbench::sweep::{DEFAULT_POINT_SECONDS, DEFAULT_THREAD_COUNTS};
use wattbench::telemetry::BackendKind;
use wattbench::workload::{DEFAULT_LAYERS, DEFAULT_WORK_SCALE};
use wattbench::{BackendDescriptor, EventsPerPoint, Pinning, PowerDomain, SamplingPlan, SweepConfig};

pub const ENV_PREFIX: &str = "WATTBENCH_";
/// Log filter, read by the logger rather than the settings layers.
pub const ENV_LOG: &str = "WATTBENCH_LOG";

pub const DEFAULT_IDLE_WATTS: f64 = 17.0;
pub const DEFAULT_WATTS_PER_THREAD: f64 = 5.0;

/// Every recognised key apart from backend parameters.
pub const KEYS: &[&str] = &[
    "telemetry.backend",
    "sampler.interval_ms",
    "sampler.domains",
    "sampler.record",
    "workload.events",
    "workload.point_seconds",
    "workload.seed",
    "workload.work_scale",
    "workload.layers",
    "sweep.threads",
    "sweep.warmup_s",
    "sweep.idle_watts",
    "sweep.pin",
    "sweep.repetitions",
    "sweep.label",
    "sweep.keep_going",
    "sweep.primary_domain",
    "report.out",
    "report.format",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("unknown setting {key:?} ({origin})")]
    UnknownKey { key: String, origin: Origin },
    #[error("invalid value {value:?} for {key} ({origin}): {reason}")]
    Invalid {
        key: String,
        value: String,
        origin: Origin,
        reason: String,
    },
    #[error(transparent)]
    Backend(#[from] wattbench::TelemetryError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Origin {
    File(PathBuf),
    Env(String),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::File(p) => write!(f, "from {}", p.display()),
            Self::Env(v) => write!(f, "from ${v}"),
            Self::Flag => f.write_str("from command line"),
        }
    }
}

fn is_known(key: &str) -> bool {
    KEYS.contains(&key) || key.strip_prefix("telemetry.").is_some_and(|p| !p.is_empty())
}

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Origin)>,
}

impl Settings {
    pub fn set(&mut self, key: &str, value: impl Into<String>, origin: Origin) -> Result<(), ConfigError> {
        if !is_known(key) {
            return Err(ConfigError::UnknownKey {
                key: key.into(),
                origin,
            });
        }
        self.values.insert(key.into(), (value.into(), origin));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.into(),
            reason: e.to_string(),
        })?;
        self.load_str(&text, path)
    }

    pub fn load_str(&mut self, text: &str, path: &Path) -> Result<(), ConfigError> {
        let ini = ini::Ini::load_from_str(text).map_err(|e| ConfigError::File {
            path: path.into(),
            reason: e.to_string(),
        })?;
        for (section, props) in ini.iter() {
            for (name, value) in props.iter() {
                let key = match section {
                    Some(s) => format!("{s}.{name}"),
                    None => name.to_owned(),
                };
                self.set(&key, value.trim(), Origin::File(path.into()))?;
            }
        }
        Ok(())
    }

    /// Applies `WATTBENCH_SECTION_NAME` variables. Other variables are ignored.
    pub fn load_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (var, value) in vars {
            let Some(rest) = var.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            if var == ENV_LOG {
                continue;
            }
            let lower = rest.to_ascii_lowercase();
            let key = match lower.split_once('_') {
                Some((section, name)) => format!("{section}.{name}"),
                None => lower,
            };
            self.set(&key, value, Origin::Env(var.clone()))?;
        }
        Ok(())
    }

    fn origin(&self, key: &str) -> Origin {
        self.values.get(key).map(|(_, o)| o.clone()).unwrap_or(Origin::Flag)
    }

    fn invalid(&self, key: &str, reason: impl fmt::Display) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            value: self.get(key).unwrap_or_default().into(),
            origin: self.origin(key),
            reason: reason.to_string(),
        }
    }

    pub fn parse<T>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|e| self.invalid(key, e)))
            .transpose()
    }

    fn parse_or<T>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn list<T>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<T>().map_err(|e| self.invalid(key, e)))
                    .collect()
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get(key) {
            None => Ok(false),
            Some("true" | "yes" | "1" | "on") => Ok(true),
            Some("false" | "no" | "0" | "off") => Ok(false),
            Some(_) => Err(self.invalid(key, "expected true or false")),
        }
    }

    pub fn backend(&self) -> Result<BackendDescriptor, ConfigError> {
        let kind: BackendKind = self.parse_or("telemetry.backend", BackendKind::Synthetic)?;
        let mut desc = BackendDescriptor::new(kind);
        for (key, (value, _)) in &self.values {
            if let Some(param) = key.strip_prefix("telemetry.") {
                if param != "backend" {
                    desc = desc.with_param(param, value.clone());
                }
            }
        }
        if kind == BackendKind::Synthetic {
            for (param, default) in [
                ("idle_watts", DEFAULT_IDLE_WATTS),
                ("watts_per_thread", DEFAULT_WATTS_PER_THREAD),
            ] {
                if desc.param(param).is_none() {
                    desc = desc.with_param(param, default.to_string());
                }
            }
        }
        desc.validate()?;
        Ok(desc)
    }

    pub fn plan(&self) -> Result<SamplingPlan, ConfigError> {
        Ok(SamplingPlan {
            interval_ms: self.parse_or("sampler.interval_ms", DEFAULT_INTERVAL_MS)?,
            domains: self.list::<PowerDomain>("sampler.domains")?,
            record_path: self.get("sampler.record").map(PathBuf::from),
        })
    }

    pub fn events(&self) -> Result<EventsPerPoint, ConfigError> {
        let point_seconds = self.parse_or("workload.point_seconds", DEFAULT_POINT_SECONDS)?;
        match self.get("workload.events") {
            None | Some("calibrated") => Ok(EventsPerPoint::Calibrated { point_seconds }),
            Some(_) => Ok(EventsPerPoint::Fixed(self.parse_or("workload.events", 0u64)?)),
        }
    }

    pub fn thread_counts(&self) -> Result<Vec<usize>, ConfigError> {
        Ok(self
            .list("sweep.threads")?
            .unwrap_or_else(|| DEFAULT_THREAD_COUNTS.to_vec()))
    }

    pub fn sweep_config(&self) -> Result<SweepConfig, ConfigError> {
        let base = SweepConfig::default();
        Ok(SweepConfig {
            label: self.get("sweep.label").unwrap_or(&base.label).to_owned(),
            thread_counts: self.thread_counts()?,
            repetitions: self.parse_or("sweep.repetitions", base.repetitions)?,
            warmup_s: self.parse_or("sweep.warmup_s", base.warmup_s)?,
            events_per_point: self.events()?,
            seed: self.parse_or("workload.seed", base.seed)?,
            work_scale: self.parse_or("workload.work_scale", DEFAULT_WORK_SCALE)?,
            layers: self.parse_or("workload.layers", DEFAULT_LAYERS)?,
            backend: self.backend()?,
            plan: self.plan()?,
            idle_watts: self.parse("sweep.idle_watts")?,
            pinning: self.parse_or("sweep.pin", Pinning::None)?,
            primary_domain: self.parse("sweep.primary_domain")?,
            keep_going: self.flag("sweep.keep_going")?,
        })
    }

    pub fn out_dir(&self) -> Option<PathBuf> {
        self.get("report.out").map(PathBuf::from)
    }

    pub fn formats(&self) -> Result<Vec<Format>, ConfigError> {
        Ok(self
            .list("report.format")?
            .unwrap_or_else(|| DEFAULT_FORMATS.to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> Settings {
        let mut s = Settings::default();
        s.load_str(text, Path::new("test.conf")).unwrap();
        s
    }

    #[test]
    fn defaults() {
        let c = Settings::default().sweep_config().unwrap();
        assert_eq!(c.thread_counts, [1, 2, 4, 8, 16]);
        assert_eq!(c.plan.interval_ms, 1000);
        assert_eq!(c.backend, BackendDescriptor::synthetic(17.0, 5.0));
        assert!(matches!(c.events_per_point, EventsPerPoint::Calibrated { point_seconds } if point_seconds == 60.0));
        assert_eq!(Settings::default().formats().unwrap(), DEFAULT_FORMATS);
    }

    #[test]
    fn file_sections() {
        let s = file("[sweep]\nthreads = 1, 3\nkeep_going = yes\n[telemetry]\nbackend = synthetic\nidle_watts = 9\n[workload]\nevents = 40\n");
        let c = s.sweep_config().unwrap();
        assert_eq!(c.thread_counts, [1, 3]);
        assert!(c.keep_going);
        assert_eq!(c.backend.param("idle_watts"), Some("9"));
        assert!(matches!(c.events_per_point, EventsPerPoint::Fixed(40)));
    }

    #[test]
    fn unknown_keys_are_errors() {
        let mut s = Settings::default();
        let e = s.load_str("[sweep]\nthread = 4\n", Path::new("x.conf")).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { ref key, .. } if key == "sweep.thread"));
        assert!(s.load_str("interval_ms = 4\n", Path::new("x.conf")).is_err());
        let e = s
            .load_env([("WATTBENCH_SAMPLER_INTERVAL".to_string(), "5".to_string())])
            .unwrap_err();
        assert!(e.to_string().contains("$WATTBENCH_SAMPLER_INTERVAL"));
        // backend parameters are checked against the chosen backend
        let s = file("[telemetry]\nbackend = replay\npath = t.csv\nidle_watts = 3\n");
        assert!(matches!(s.backend(), Err(ConfigError::Backend(_))));
    }

    #[test]
    fn env_namespace() {
        let mut s = Settings::default();
        s.load_env([
            ("WATTBENCH_SAMPLER_INTERVAL_MS".to_string(), "250".to_string()),
            ("WATTBENCH_LOG".to_string(), "debug".to_string()),
            ("HOME".to_string(), "/root".to_string()),
        ])
        .unwrap();
        assert_eq!(s.plan().unwrap().interval_ms, 250);
        assert_eq!(s.values.len(), 1);
    }

    #[test]
    fn invalid_values_name_their_origin() {
        let s = file("[sampler]\ninterval_ms = fast\n");
        let e = s.plan().unwrap_err().to_string();
        assert!(e.contains("sampler.interval_ms") && e.contains("test.conf"), "{e}");
        assert!(file("[sweep]\nkeep_going = maybe\n").sweep_config().is_err());
        assert!(file("[sweep]\npin = diagonal\n").sweep_config().is_err());
        assert!(file("[workload]\nevents = many\n").sweep_config().is_err());
    }

    /// Sample value pairs for every key: (file value, flag value).
    fn key_values(key: &str) -> (&'static str, &'static str) {
        match key {
            "telemetry.backend" => ("replay", "synthetic"),
            "sampler.interval_ms" => ("500", "20"),
            "sampler.domains" => ("pkg", "pkg"),
            "sampler.record" => ("a.trace", "b.trace"),
            "workload.events" => ("10", "20"),
            "workload.point_seconds" => ("3", "4"),
            "workload.seed" => ("1", "2"),
            "workload.work_scale" => ("10", "20"),
            "workload.layers" => ("3", "4"),
            "sweep.threads" => ("1,2", "3"),
            "sweep.warmup_s" => ("1", "0"),
            "sweep.idle_watts" => ("1", "2"),
            "sweep.pin" => ("compact", "scatter"),
            "sweep.repetitions" => ("2", "3"),
            "sweep.label" => ("file", "flag"),
            "sweep.keep_going" => ("false", "true"),
            "sweep.primary_domain" => ("dram", "pkg"),
            "report.out" => ("d1", "d2"),
            "report.format" => ("json", "csv,svg"),
            other => panic!("no sample values for {other}"),
        }
    }

    #[test]
    fn flags_override_file_and_env_for_every_key() {
        for key in KEYS {
            let (file_value, flag_value) = key_values(key);
            let (section, name) = key.split_once('.').unwrap();
            let mut s = Settings::default();
            s.load_str(&format!("[{section}]\n{name} = {file_value}\n"), Path::new("c.conf"))
                .unwrap();
            assert_eq!(s.get(key), Some(file_value));
            let var = format!("WATTBENCH_{}_{}", section.to_uppercase(), name.to_uppercase());
            s.load_env([(var, file_value.to_string())]).unwrap();
            s.set(key, flag_value, Origin::Flag).unwrap();
            assert_eq!(s.get(key), Some(flag_value), "{key}");
            assert_eq!(s.origin(key), Origin::Flag);
        }
        // resolved through the typed view as well
        let mut s = file("[sweep]\nthreads = 1,2\nlabel = file\n[sampler]\ninterval_ms = 500\n");
        s.set("sweep.threads", "4", Origin::Flag).unwrap();
        s.set("sampler.interval_ms", "20", Origin::Flag).unwrap();
        let c = s.sweep_config().unwrap();
        assert_eq!(c.thread_counts, [4]);
        assert_eq!(c.plan.interval_ms, 20);
        assert_eq!(c.label, "file");
    }

    #[test]
    fn env_overrides_file() {
        let mut s = file("[workload]\nseed = 1\n");
        s.load_env([("WATTBENCH_WORKLOAD_SEED".to_string(), "9".to_string())])
            .unwrap();
        assert_eq!(s.sweep_config().unwrap().seed, 9);
    }
}
