//! Report files: tabular CSV/JSON and plot datasets for the three scaling
//! views (absolute performance, efficiency vs threads, performance vs power).
//!
//! Output depends only on the [`SweepReport`] it is built from. Floating
//! point values use shortest round-trip decimal form.

pub mod svg;

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::metrics;
use crate::sweep::{SweepPoint, SweepReport};

pub const CSV_HEADER: &str = "threads,events,wall_s,eps,domain,mean_w,energy_j,eps_per_w,j_per_event";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep has no points")]
    EmptySweep,
    #[error("comparison needs at least two sweeps, got {0}")]
    FewerThanTwoSweeps(usize),
    #[error("malformed report JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Csv,
    Json,
    Plotdat,
    Svg,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "plotdat" | "dat" => Ok(Self::Plotdat),
            "svg" => Ok(Self::Svg),
            other => Err(format!("unknown format {other:?} (csv, json, plotdat, svg)")),
        }
    }
}

pub const DEFAULT_FORMATS: [Format; 3] = [Format::Csv, Format::Json, Format::Plotdat];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    AbsPerf,
    EffScaling,
    PerfVsPower,
}

impl Figure {
    pub const ALL: [Figure; 3] = [Figure::AbsPerf, Figure::EffScaling, Figure::PerfVsPower];

    pub fn name(self) -> &'static str {
        match self {
            Self::AbsPerf => "abs_perf",
            Self::EffScaling => "eff_scaling",
            Self::PerfVsPower => "perf_vs_power",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown figure {s:?} (abs_perf, eff_scaling, perf_vs_power)"))
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NaN".into()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn write_file(path: &Path, contents: &str) -> Result<(), ReportError> {
    let io = |source| ReportError::IoFailure {
        path: path.to_owned(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

/// Per-domain efficiency for a CSV row. The primary domain reports the
/// point's own figures, which include any idle subtraction.
fn row_efficiency(report: &SweepReport, point: &SweepPoint, domain_idx: usize) -> (Option<f64>, Option<f64>) {
    let d = &point.domains[domain_idx];
    if d.domain == report.primary_domain {
        return (point.efficiency_eps_per_watt, point.joules_per_event);
    }
    match metrics::efficiency(point.workload.events_per_sec, d.mean_watts) {
        Ok(e) => (Some(e.eps_per_watt), e.joules_per_event),
        Err(_) => (None, None),
    }
}

/// One row per point and measured domain.
pub fn csv_string(report: &SweepReport) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for p in &report.points {
        for (i, d) in p.domains.iter().enumerate() {
            let (eff, jpe) = row_efficiency(report, p, i);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                p.threads,
                p.workload.events_done,
                num(p.workload.wall_time_s),
                num(p.workload.events_per_sec),
                d.domain,
                num(d.mean_watts),
                num(d.energy_joules),
                opt(eff),
                opt(jpe),
            );
        }
    }
    out
}

pub fn json_string(report: &SweepReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_json(text: &str) -> Result<SweepReport, ReportError> {
    Ok(serde_json::from_str(text)?)
}

pub fn emit_tabular(report: &SweepReport, format: Format, path: &Path) -> Result<(), ReportError> {
    let text = match format {
        Format::Csv => csv_string(report),
        Format::Json => json_string(report),
        other => panic!("{other:?} is not a tabular format"),
    };
    write_file(path, &text)
}

fn quoted(label: &str) -> String {
    format!("\"{}\"", label.replace('"', "'"))
}

/// (watts, events/s, threads) rows ordered by threads.
fn perf_vs_power_rows(report: &SweepReport) -> Vec<(f64, f64, usize)> {
    let mut rows: Vec<_> = report
        .points
        .iter()
        .map(|p| (p.primary_watts, p.workload.events_per_sec, p.threads))
        .collect();
    rows.sort_by_key(|r| r.2);
    rows
}

fn max_eps(report: &SweepReport) -> f64 {
    report
        .points
        .iter()
        .map(|p| p.workload.events_per_sec)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Whitespace-separated columns for one figure.
pub fn figure_data(report: &SweepReport, figure: Figure) -> Result<String, ReportError> {
    if report.points.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let label = report.label();
    let mut out = String::new();
    match figure {
        Figure::AbsPerf => {
            out.push_str("# abs_perf: label max_events_per_sec\n");
            let _ = writeln!(out, "{} {}", quoted(label), num(max_eps(report)));
        }
        Figure::EffScaling => {
            let _ = writeln!(out, "# eff_scaling {}: threads eps_per_w", quoted(label));
            for p in &report.points {
                let _ = writeln!(out, "{} {}", p.threads, num(p.efficiency_eps_per_watt.unwrap_or(f64::NAN)));
            }
        }
        Figure::PerfVsPower => {
            let _ = writeln!(out, "# perf_vs_power {}: watts events_per_sec threads", quoted(label));
            for (w, eps, t) in perf_vs_power_rows(report) {
                let _ = writeln!(out, "{} {} {}", num(w), num(eps), t);
            }
        }
    }
    Ok(out)
}

pub fn figure_svg(report: &SweepReport, figure: Figure) -> Result<String, ReportError> {
    if report.points.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let label = report.label();
    let watts = format!("{} watts", report.primary_domain);
    Ok(match figure {
        Figure::AbsPerf => svg::bar_chart("Absolute performance", "events/s", &[(label, max_eps(report))]),
        Figure::EffScaling => svg::line_chart(
            "Energy efficiency scaling",
            "threads",
            "events/s per watt",
            &[(
                label,
                report
                    .points
                    .iter()
                    .map(|p| (p.threads as f64, p.efficiency_eps_per_watt.unwrap_or(f64::NAN)))
                    .collect(),
            )],
        ),
        Figure::PerfVsPower => svg::line_chart(
            "Performance over power",
            &watts,
            "events/s",
            &[(label, perf_vs_power_rows(report).into_iter().map(|r| (r.0, r.1)).collect())],
        ),
    })
}

pub fn emit_figure_data(report: &SweepReport, figure: Figure, path: &Path) -> Result<(), ReportError> {
    write_file(path, &figure_data(report, figure)?)
}

/// Unique labels: repeats get `_2`, `_3`, ... suffixes.
pub fn dedup_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        let mut candidate = l.to_owned();
        let mut n = 1;
        while out.contains(&candidate) {
            n += 1;
            candidate = format!("{l}_{n}");
        }
        out.push(candidate);
    }
    out
}

/// Overlaid perf-vs-power data for several sweeps, one block per sweep
/// (blocks separated by two blank lines, gnuplot `index` style).
pub fn compare_data(sweeps: &[SweepReport]) -> Result<String, ReportError> {
    if sweeps.len() < 2 {
        return Err(ReportError::FewerThanTwoSweeps(sweeps.len()));
    }
    let labels = dedup_labels(sweeps.iter().map(|s| s.label()));
    let mut out = String::from("# compare perf_vs_power: label watts events_per_sec threads\n");
    for (i, (sweep, label)) in sweeps.iter().zip(&labels).enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# {}", quoted(label));
        for (w, eps, t) in perf_vs_power_rows(sweep) {
            let _ = writeln!(out, "{} {} {} {}", quoted(label), num(w), num(eps), t);
        }
    }
    Ok(out)
}

pub fn compare_svg(sweeps: &[SweepReport]) -> Result<String, ReportError> {
    if sweeps.len() < 2 {
        return Err(ReportError::FewerThanTwoSweeps(sweeps.len()));
    }
    let labels = dedup_labels(sweeps.iter().map(|s| s.label()));
    let series: Vec<svg::Series<'_>> = sweeps
        .iter()
        .zip(&labels)
        .map(|(s, l)| {
            (
                l.as_str(),
                perf_vs_power_rows(s).into_iter().map(|r| (r.0, r.1)).collect(),
            )
        })
        .collect();
    Ok(svg::line_chart("Performance over power", "watts", "events/s", &series))
}

pub fn compare(sweeps: &[SweepReport], path: &Path) -> Result<(), ReportError> {
    write_file(path, &compare_data(sweeps)?)
}

pub const CSV_FILE: &str = "sweep.csv";
pub const JSON_FILE: &str = "sweep.json";

/// Writes every requested format into `dir` and returns the files written.
pub fn write_bundle(report: &SweepReport, formats: &[Format], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<(), ReportError> {
        let path = dir.join(name);
        write_file(&path, &text)?;
        written.push(path);
        Ok(())
    };
    for format in formats {
        match format {
            Format::Csv => put(CSV_FILE.into(), csv_string(report))?,
            Format::Json => put(JSON_FILE.into(), json_string(report))?,
            Format::Plotdat if !report.points.is_empty() => {
                for fig in Figure::ALL {
                    put(format!("{fig}.dat"), figure_data(report, fig)?)?;
                }
            }
            Format::Svg if !report.points.is_empty() => {
                for fig in Figure::ALL {
                    put(format!("{fig}.svg"), figure_svg(report, fig)?)?;
                }
            }
            Format::Plotdat | Format::Svg => log::warn!("no points; skipping {format:?} output"),
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::host::HostMetadata;
    use crate::sweep::{DomainPower, SweepConfig, POWER_AXIS, REPORT_SCHEMA_VERSION};
    use crate::telemetry::PowerDomain;
    use crate::workload::WorkloadResult;

    fn point(threads: usize, eps: f64, pkg_w: f64, dram_w: f64) -> SweepPoint {
        SweepPoint {
            threads,
            repetition: 0,
            workload: WorkloadResult {
                events_done: (eps * 2.0) as u64,
                wall_time_s: 2.0,
                events_per_sec: eps,
                checksum: 7,
                per_thread_events: vec![0; threads],
                started_ns: 0,
                finished_ns: 2_000_000_000,
            },
            domains: vec![
                DomainPower {
                    domain: PowerDomain::Package,
                    mean_watts: pkg_w,
                    energy_joules: pkg_w * 2.0,
                    sample_count: 3,
                },
                DomainPower {
                    domain: PowerDomain::Dram,
                    mean_watts: dram_w,
                    energy_joules: dram_w * 2.0,
                    sample_count: 3,
                },
            ],
            primary_watts: pkg_w,
            idle_underflow: false,
            efficiency_eps_per_watt: Some(eps / pkg_w),
            joules_per_event: Some(pkg_w / eps),
            uncore_clamped: 0,
        }
    }

    fn report(label: &str) -> SweepReport {
        SweepReport {
            schema_version: REPORT_SCHEMA_VERSION,
            config: SweepConfig {
                label: label.into(),
                ..SweepConfig::default()
            },
            host: HostMetadata {
                os: "linux".into(),
                kernel: None,
                cpu_model: None,
                logical_cpus: 4,
                started_at: "2020-01-01T00:00:00Z".into(),
            },
            primary_domain: PowerDomain::Package,
            power_axis: POWER_AXIS.into(),
            idle_subtracted_watts: None,
            points: vec![point(1, 100.0, 20.0, 0.0), point(2, 180.0, 25.0, 4.0)],
            failed_points: vec![],
        }
    }

    #[test]
    fn csv_rows_per_point_and_domain() {
        let csv = csv_string(&report("x"));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "1,200,2,100,pkg,20,40,5,0.2");
        // zero-watt domain has no efficiency
        assert_eq!(lines[2], "1,200,2,100,dram,0,0,,");
        assert_eq!(lines[4], "2,360,2,180,dram,4,8,45,0.022222222222222223");
    }

    #[test]
    fn json_round_trips() {
        let r = report("x");
        let text = json_string(&r);
        assert!(text.ends_with("}\n"));
        assert_eq!(parse_json(&text).unwrap(), r);
        assert!(parse_json("{").is_err());
    }

    #[test]
    fn figure_datasets() {
        let r = report("lab");
        assert_eq!(figure_data(&r, Figure::AbsPerf).unwrap().lines().nth(1), Some("\"lab\" 180"));
        let eff = figure_data(&r, Figure::EffScaling).unwrap();
        assert_eq!(eff.lines().skip(1).collect::<Vec<_>>(), ["1 5", "2 7.2"]);
        let pvp = figure_data(&r, Figure::PerfVsPower).unwrap();
        assert_eq!(pvp.lines().skip(1).collect::<Vec<_>>(), ["20 100 1", "25 180 2"]);

        let mut none = r.clone();
        none.points[0].efficiency_eps_per_watt = None;
        assert!(figure_data(&none, Figure::EffScaling).unwrap().contains("1 NaN\n"));

        let mut empty = r;
        empty.points.clear();
        assert!(matches!(figure_data(&empty, Figure::AbsPerf), Err(ReportError::EmptySweep)));
    }

    #[test]
    fn compare_blocks_and_labels() {
        assert!(matches!(compare_data(&[report("a")]), Err(ReportError::FewerThanTwoSweeps(1))));
        let text = compare_data(&[report("a"), report("a"), report("b")]).unwrap();
        let blocks: Vec<&str> = text.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 3);
        assert!(blocks[1].starts_with("# \"a_2\"\n\"a_2\" 20 100 1"));
        assert!(blocks[2].contains("\"b\" 25 180 2"));
        assert_eq!(dedup_labels(["a", "a", "a_2"]), ["a", "a_2", "a_2_2"]);
        assert!(!compare_svg(&[report("a"), report("b")]).unwrap().contains("a_2"));
    }

    #[test]
    fn bundle_writes_requested_files() {
        let dir = tempfile::tempdir().unwrap();
        let all = [Format::Csv, Format::Json, Format::Plotdat, Format::Svg];
        let files = write_bundle(&report("x"), &all, &dir.path().join("out")).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(
            names,
            [
                "sweep.csv",
                "sweep.json",
                "abs_perf.dat",
                "eff_scaling.dat",
                "perf_vs_power.dat",
                "abs_perf.svg",
                "eff_scaling.svg",
                "perf_vs_power.svg"
            ]
        );
        for f in &files {
            assert!(f.exists());
        }
        assert_eq!("plotdat".parse::<Format>().unwrap(), Format::Plotdat);
        assert!("xml".parse::<Format>().is_err());
        assert_eq!("eff_scaling".parse::<Figure>().unwrap(), Figure::EffScaling);
    }
}
