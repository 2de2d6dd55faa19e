//! Raw telemetry trace files.
//!
//! UTF-8 CSV with header `t_ns,domain,kind,value`, rows sorted by `t_ns`.
//! Values are written in shortest round-trip decimal form, so a recorded
//! trace replays to bit-identical samples.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{PowerDomain, SampleKind, SensorSample};

pub const TRACE_HEADER: &str = "t_ns,domain,kind,value";

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
}

pub fn write_trace<W: Write>(mut out: W, samples: &[SensorSample]) -> io::Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for s in samples {
        writeln!(
            out,
            "{},{},{},{}",
            s.timestamp_ns,
            s.domain.name(),
            s.kind.name(),
            s.value
        )?;
    }
    out.flush()
}

pub fn write_trace_file(path: &Path, samples: &[SensorSample]) -> io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let file = io::BufWriter::new(fs::File::create(path)?);
    write_trace(file, samples)
}

pub fn parse_trace<R: io::Read>(input: R) -> Result<Vec<SensorSample>, TraceError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| TraceError::Malformed {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != TRACE_HEADER {
        return Err(TraceError::Malformed {
            line: 1,
            reason: format!("expected header {TRACE_HEADER:?}, found {header:?}"),
        });
    }

    let mut samples = Vec::new();
    let mut last_t = 0u64;
    for record in reader.records() {
        let record = record.map_err(|e| TraceError::Malformed {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| TraceError::Malformed { line, reason };
        if record.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", record.len())));
        }
        let timestamp_ns: u64 = record[0]
            .parse()
            .map_err(|e| bad(format!("t_ns {:?}: {e}", &record[0])))?;
        let domain = PowerDomain::parse_raw(&record[1]).map_err(|e| bad(e.to_string()))?;
        let kind: SampleKind = record[2].parse().map_err(bad)?;
        let value: f64 = record[3]
            .parse()
            .map_err(|e| bad(format!("value {:?}: {e}", &record[3])))?;
        if !(value.is_finite() && value >= 0.0) {
            return Err(bad(format!("value must be finite and >= 0, got {value}")));
        }
        if timestamp_ns < last_t {
            return Err(bad(format!(
                "rows not sorted by t_ns ({timestamp_ns} after {last_t})"
            )));
        }
        last_t = timestamp_ns;
        samples.push(SensorSample {
            timestamp_ns,
            domain,
            kind,
            value,
        });
    }
    Ok(samples)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<SensorSample>, TraceError> {
    parse_trace(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(t: u64, d: PowerDomain, v: f64) -> SensorSample {
        SensorSample {
            timestamp_ns: t,
            domain: d,
            kind: SampleKind::InstantPowerWatts,
            value: v,
        }
    }

    #[test]
    fn parses_documented_format() {
        let text = "t_ns,domain,kind,value\n0,pkg,power_w,95.5\n0,pp0,power_w,80\n1000,pkg,energy_j,1e-3\n";
        let s = parse_trace(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1].domain, PowerDomain::CoreSubsystem);
        assert_eq!(s[2].kind, SampleKind::EnergyCounterJoules);
        assert_eq!(s[2].value, 0.001);
    }

    #[test]
    fn rejects_bad_traces() {
        for text in [
            "time,domain,kind,value\n",
            "t_ns,domain,kind,value\n5,pkg,power_w,1\n4,pkg,power_w,1\n",
            "t_ns,domain,kind,value\n0,uncore,power_w,1\n",
            "t_ns,domain,kind,value\n0,pkg,watts,1\n",
            "t_ns,domain,kind,value\n0,pkg,power_w,-1\n",
            "t_ns,domain,kind,value\n0,pkg,power_w\n",
        ] {
            assert!(parse_trace(text.as_bytes()).is_err(), "{text}");
        }
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(values in prop::collection::vec(0.0f64..1e6, 0..50)) {
            let samples: Vec<_> = values
                .iter()
                .enumerate()
                .map(|(i, &v)| sample(i as u64 * 7, PowerDomain::Package, v))
                .collect();
            let mut buf = Vec::new();
            write_trace(&mut buf, &samples).unwrap();
            prop_assert_eq!(parse_trace(buf.as_slice()).unwrap(), samples);
        }
    }
}
