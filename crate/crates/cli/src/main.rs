mod config;

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use config::{ConfigError, Origin, Settings};
use wattbench::metrics::{derive_uncore, power_stats, Window};
use wattbench::report::{self, Format};
use wattbench::sampler::{interval_stats, start_sampling};
use wattbench::sweep::{recompute_report, run_sweep, WorkloadLog};
use wattbench::telemetry::rapl::DEFAULT_POWERCAP_ROOT;
use wattbench::telemetry::trace::{read_trace_file, write_trace};
use wattbench::telemetry::BackendKind;
use wattbench::{host, open_backend, BackendDescriptor, PowerDomain, SweepReport};

const WORKLOAD_FILE: &str = "workload.json";
const RAW_TRACE_FILE: &str = "raw.trace";
const COMPARE_FILE: &str = "compare.dat";
const COMPARE_SVG_FILE: &str = "compare.svg";

#[derive(Parser)]
#[command(
    name = "wattbench",
    version,
    about = "Performance-per-watt benchmarking harness",
    after_help = "Settings resolve as: config file < WATTBENCH_<SECTION>_<KEY> environment < flags.\n\
                  WATTBENCH_LOG sets the log filter (default: info)."
)]
struct Cli {
    /// Configuration file with [section] headers and key = value lines
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List telemetry backends usable on this host
    Probe(ProbeArgs),
    /// Sample a backend for a fixed duration without running a workload
    Sample(SampleArgs),
    /// Measure a single thread count
    Bench(RunArgs),
    /// Measure a list of thread counts
    Sweep(RunArgs),
    /// Rebuild reports from recorded data, or compare several sweeps
    Report(ReportArgs),
    /// Summarise a recorded trace per domain
    Replay(ReplayArgs),
}

#[derive(Args, Default)]
struct TelemetryArgs {
    /// rapl-msr, rapl-sysfs, replay or synthetic
    #[arg(long)]
    backend: Option<String>,
    /// Backend parameter as key=value (repeatable)
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Sampling interval in milliseconds (at least 10)
    #[arg(long)]
    interval_ms: Option<String>,
    /// Comma-separated domains to sample (default: all advertised)
    #[arg(long)]
    domains: Option<String>,
    /// Write the raw samples to this trace file
    #[arg(long, value_name = "FILE")]
    record: Option<String>,
}

#[derive(Args, Default)]
struct WorkloadArgs {
    /// Events per point, or "calibrated"
    #[arg(long)]
    events: Option<String>,
    /// Target seconds per point when events are calibrated
    #[arg(long)]
    point_seconds: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Transport steps per event
    #[arg(long)]
    work_scale: Option<String>,
    #[arg(long)]
    layers: Option<String>,
}

#[derive(Args, Default)]
struct SweepArgs {
    /// Comma-separated thread counts
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    warmup_s: Option<String>,
    /// Idle power subtracted from the primary domain
    #[arg(long)]
    idle_watts: Option<String>,
    /// none, compact or scatter
    #[arg(long)]
    pin: Option<String>,
    #[arg(long)]
    repetitions: Option<String>,
    /// Name of this machine in reports
    #[arg(long)]
    label: Option<String>,
    /// Domain used for efficiency (default pkg, else card)
    #[arg(long)]
    primary_domain: Option<String>,
    /// Record failed points and continue
    #[arg(long)]
    keep_going: bool,
}

#[derive(Args, Default)]
struct OutputArgs {
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<String>,
    /// Comma-separated formats: csv, json, plotdat, svg
    #[arg(long)]
    format: Option<String>,
    /// Also print the CSV report to standard output
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    telemetry: TelemetryArgs,
    #[command(flatten)]
    workload: WorkloadArgs,
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ProbeArgs {
    /// Also describe this recorded trace
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// RAPL backend parameter as key=value (for example root=/sys/class/powercap)
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    telemetry: TelemetryArgs,
    /// How long to sample
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    /// Print the trace to standard output
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Raw trace recorded during a sweep
    #[arg(long, value_name = "TRACE", requires = "workload", conflicts_with = "compare")]
    from: Option<PathBuf>,
    /// Workload log written next to the trace
    #[arg(long, value_name = "FILE", requires = "from")]
    workload: Option<PathBuf>,
    /// Sweep JSON reports to overlay (at least two)
    #[arg(long, num_args = 1.., value_name = "SWEEP_JSON")]
    compare: Vec<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace file to replay
    #[arg(long, value_name = "TRACE")]
    from: PathBuf,
    /// Treat pkg and pp0 samples this far apart as paired (default 1 ms)
    #[arg(long, default_value_t = 1.0)]
    pair_tolerance_ms: f64,
    /// Print the per-domain summary as CSV to standard output
    #[arg(long)]
    stdout: bool,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::Usage(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn put(s: &mut Settings, key: &str, value: &Option<String>) -> Result<(), ConfigError> {
    match value {
        Some(v) => s.set(key, v.clone(), Origin::Flag),
        None => Ok(()),
    }
}

fn split_param(p: &str) -> Result<(&str, &str), ConfigError> {
    p.split_once('=').ok_or_else(|| ConfigError::Invalid {
        key: "--param".into(),
        value: p.into(),
        origin: Origin::Flag,
        reason: "expected key=value".into(),
    })
}

impl TelemetryArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        put(s, "telemetry.backend", &self.backend)?;
        for p in &self.params {
            let (k, v) = split_param(p)?;
            s.set(&format!("telemetry.{k}"), v, Origin::Flag)?;
        }
        put(s, "sampler.interval_ms", &self.interval_ms)?;
        put(s, "sampler.domains", &self.domains)?;
        put(s, "sampler.record", &self.record)
    }
}

impl WorkloadArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        put(s, "workload.events", &self.events)?;
        put(s, "workload.point_seconds", &self.point_seconds)?;
        put(s, "workload.seed", &self.seed)?;
        put(s, "workload.work_scale", &self.work_scale)?;
        put(s, "workload.layers", &self.layers)
    }
}

impl SweepArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        put(s, "sweep.threads", &self.threads)?;
        put(s, "sweep.warmup_s", &self.warmup_s)?;
        put(s, "sweep.idle_watts", &self.idle_watts)?;
        put(s, "sweep.pin", &self.pin)?;
        put(s, "sweep.repetitions", &self.repetitions)?;
        put(s, "sweep.label", &self.label)?;
        put(s, "sweep.primary_domain", &self.primary_domain)?;
        if self.keep_going {
            s.set("sweep.keep_going", "true", Origin::Flag)?;
        }
        Ok(())
    }
}

impl OutputArgs {
    fn apply(&self, s: &mut Settings) -> Result<(), ConfigError> {
        put(s, "report.out", &self.out)?;
        put(s, "report.format", &self.format)
    }
}

fn settings(file: Option<&Path>, flags: impl FnOnce(&mut Settings) -> Result<(), ConfigError>) -> Result<Settings, ConfigError> {
    let mut s = Settings::default();
    if let Some(path) = file {
        s.load_file(path)?;
    }
    s.load_env(std::env::vars())?;
    flags(&mut s)?;
    Ok(s)
}

fn probe(args: &ProbeArgs) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    let params: Vec<(&str, &str)> = args
        .params
        .iter()
        .map(|p| split_param(p))
        .collect::<Result<_, _>>()?;
    let meta = host::HostMetadata::capture();
    let _ = writeln!(
        out,
        "host: {} {} ({} logical cpus, {} physical cores)",
        meta.os,
        meta.kernel.as_deref().unwrap_or("?"),
        meta.logical_cpus,
        host::physical_cores()
    );
    if let Some(model) = &meta.cpu_model {
        let _ = writeln!(out, "cpu: {model}");
    }
    for kind in [BackendKind::RaplMsr, BackendKind::RaplSysfs] {
        let mut desc = BackendDescriptor::new(kind);
        for (k, v) in &params {
            if kind.parameter_keys().iter().any(|(key, _)| key == k) {
                desc = desc.with_param(k, *v);
            }
        }
        if kind == BackendKind::RaplSysfs && desc.param("root").is_none() {
            desc = desc.with_param("root", DEFAULT_POWERCAP_ROOT);
        }
        match open_backend(&desc) {
            Ok(handle) => {
                let names: Vec<String> = handle.domains().iter().map(|d| d.to_string()).collect();
                let _ = writeln!(out, "{kind}: available, domains {}", names.join(","));
                for line in handle.details() {
                    let _ = writeln!(out, "  {line}");
                }
                handle.close();
            }
            Err(e) => {
                let _ = writeln!(out, "{kind}: unavailable: {e}");
            }
        }
    }
    let _ = writeln!(out, "synthetic: available, domains pkg (affine model of active threads)");
    match &args.trace {
        None => {
            let _ = writeln!(out, "replay: available (pass --trace FILE to inspect a recording)");
        }
        Some(path) => match read_trace_file(path) {
            Ok(samples) => {
                let mut counts: Vec<(PowerDomain, usize)> = Vec::new();
                for s in &samples {
                    match counts.iter_mut().find(|(d, _)| *d == s.domain) {
                        Some((_, n)) => *n += 1,
                        None => counts.push((s.domain.clone(), 1)),
                    }
                }
                let _ = writeln!(out, "replay: {} ({} rows)", path.display(), samples.len());
                for (d, n) in counts {
                    let _ = writeln!(out, "  {d}: {n} rows");
                }
            }
            Err(e) => {
                let _ = writeln!(out, "replay: {}: unreadable: {e}", path.display());
            }
        },
    }
    Ok(())
}

fn sample(s: &Settings, args: &SampleArgs) -> Result<(), Failure> {
    if !(args.duration_s.is_finite() && args.duration_s >= 0.0) {
        return Err(usage(anyhow!("--duration-s must be >= 0")));
    }
    let desc = s.backend()?;
    let plan = s.plan()?;
    let handle = open_backend(&desc).map_err(runtime)?;
    let session = start_sampling(&handle, plan).map_err(usage)?;
    if handle.is_live() {
        std::thread::sleep(Duration::from_secs_f64(args.duration_s));
    }
    let outcome = session.stop();
    handle.close();
    for series in &outcome.series {
        let mean = interval_stats(series)
            .map(|i| format!("{:.1} ms", i.mean_ms))
            .unwrap_or_else(|_| "n/a".into());
        let power = Window::full(series)
            .and_then(|w| power_stats(series, w).ok())
            .map(|p| format!("{:.3} W", p.mean_watts))
            .unwrap_or_else(|| "n/a".into());
        eprintln!("{}: {} samples, mean interval {mean}, mean power {power}", series.domain, series.len());
    }
    let st = &outcome.stats;
    eprintln!(
        "acquisitions {}, retries {}, skipped ticks {}, mean jitter {:.2} ms",
        st.acquisitions, st.retries, st.skipped_ticks, st.mean_jitter_ms
    );
    if let Some(e) = &st.record_error {
        return Err(runtime(anyhow!("recording failed: {e}")));
    }
    if args.stdout {
        write_trace(std::io::stdout().lock(), &outcome.raw).map_err(runtime)?;
    }
    match &st.aborted {
        Some(reason) => Err(runtime(anyhow!("sampling aborted: {reason}"))),
        None => Ok(()),
    }
}

fn summarize(report: &SweepReport) {
    eprintln!("{} ({} power)", report.label(), report.primary_domain);
    for p in &report.points {
        let eff = p
            .efficiency_eps_per_watt
            .map(|e| format!("{e:.3}"))
            .unwrap_or_else(|| "n/a".into());
        eprintln!(
            "  threads {:>3}: {} events in {:.3} s, {:.1} events/s, {:.3} W, {eff} events/s/W",
            p.threads, p.workload.events_done, p.workload.wall_time_s, p.workload.events_per_sec, p.primary_watts
        );
    }
    for f in &report.failed_points {
        eprintln!("  threads {:>3}: failed: {}", f.threads, f.error);
    }
}

fn write_json(path: &Path, value: &WorkloadLog) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(runtime)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(runtime)
}

fn run_measurement(s: &Settings, stdout: bool, single: bool) -> Result<(), Failure> {
    let formats = s.formats()?;
    let mut config = s.sweep_config()?;
    if single {
        if s.get("sweep.threads").is_none() {
            config.thread_counts = vec![host::logical_cpus()];
        }
        if config.thread_counts.len() != 1 {
            return Err(usage(anyhow!("bench takes a single --threads value; use sweep for a list")));
        }
    }
    let out = s.out_dir();
    if let (Some(dir), None) = (&out, &config.plan.record_path) {
        config.plan.record_path = Some(dir.join(RAW_TRACE_FILE));
    }
    config.validate().map_err(usage)?;

    let report = run_sweep(&config).map_err(runtime)?;
    summarize(&report);
    if let Some(dir) = &out {
        let written = report::write_bundle(&report, &formats, dir).map_err(runtime)?;
        write_json(&dir.join(WORKLOAD_FILE), &WorkloadLog::from(&report))?;
        for f in written {
            log::info!("wrote {}", f.display());
        }
    }
    if stdout {
        print!("{}", report::csv_string(&report));
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<SweepReport, Failure> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(runtime)?;
    report::parse_json(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(runtime)
}

fn report_cmd(s: &Settings, args: &ReportArgs) -> Result<(), Failure> {
    let formats = s.formats()?;
    let out = s.out_dir();
    if out.is_none() && !args.output.stdout {
        return Err(usage(anyhow!("report needs --out DIR or --stdout")));
    }
    if !args.compare.is_empty() {
        let sweeps = args.compare.iter().map(|p| read_report(p)).collect::<Result<Vec<_>, _>>()?;
        let data = report::compare_data(&sweeps).map_err(usage)?;
        if let Some(dir) = &out {
            let path = dir.join(COMPARE_FILE);
            std::fs::create_dir_all(dir).map_err(runtime)?;
            std::fs::write(&path, &data).map_err(runtime)?;
            if formats.contains(&Format::Svg) {
                let svg = report::compare_svg(&sweeps).map_err(runtime)?;
                std::fs::write(dir.join(COMPARE_SVG_FILE), svg).map_err(runtime)?;
            }
        }
        if args.output.stdout {
            print!("{data}");
        }
        return Ok(());
    }
    let (Some(trace), Some(workload)) = (&args.from, &args.workload) else {
        return Err(usage(anyhow!("report needs --from TRACE --workload FILE, or --compare A B ...")));
    };
    let log_text = std::fs::read_to_string(workload)
        .with_context(|| format!("reading {}", workload.display()))
        .map_err(runtime)?;
    let log: WorkloadLog = serde_json::from_str(&log_text)
        .with_context(|| format!("parsing {}", workload.display()))
        .map_err(runtime)?;
    let samples = read_trace_file(trace)
        .with_context(|| format!("reading {}", trace.display()))
        .map_err(runtime)?;
    let rebuilt = recompute_report(&log, &samples).map_err(runtime)?;
    summarize(&rebuilt);
    if let Some(dir) = &out {
        report::write_bundle(&rebuilt, &formats, dir).map_err(runtime)?;
    }
    if args.output.stdout {
        print!("{}", report::csv_string(&rebuilt));
    }
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<(), Failure> {
    if !(args.pair_tolerance_ms.is_finite() && args.pair_tolerance_ms >= 0.0) {
        return Err(usage(anyhow!("--pair-tolerance-ms must be >= 0")));
    }
    let handle = open_backend(&BackendDescriptor::replay(&args.from)).map_err(runtime)?;
    let session = start_sampling(&handle, Default::default()).map_err(runtime)?;
    let outcome = session.stop();
    if let Some(reason) = &outcome.stats.aborted {
        return Err(runtime(anyhow!("replay aborted: {reason}")));
    }
    let mut rows = vec!["domain,samples,seconds,energy_j,mean_w".to_string()];
    let mut summary = |series: &wattbench::TelemetrySeries| {
        let line = match Window::full(series).map(|w| power_stats(series, w)) {
            Some(Ok(p)) => format!(
                "{},{},{},{},{}",
                series.domain,
                series.len(),
                p.window.seconds(),
                p.energy_joules,
                p.mean_watts
            ),
            _ => format!("{},{},,,", series.domain, series.len()),
        };
        rows.push(line);
    };
    for series in &outcome.series {
        summary(series);
    }
    let find = |d: PowerDomain| outcome.series.iter().find(|s| s.domain == d);
    if let (Some(pkg), Some(pp0)) = (find(PowerDomain::Package), find(PowerDomain::CoreSubsystem)) {
        let tolerance_ns = (args.pair_tolerance_ms * 1e6) as u64;
        match derive_uncore(pkg, pp0, tolerance_ns) {
            Ok(u) => {
                summary(&u.series);
                if u.clamped > 0 || u.dropped > 0 {
                    log::warn!("uncore: {} negative pairs clamped, {} unpaired samples", u.clamped, u.dropped);
                }
            }
            Err(e) => log::warn!("uncore not derived: {e}"),
        }
    }
    if args.stdout {
        for r in &rows {
            println!("{r}");
        }
    } else {
        for r in &rows {
            eprintln!("{r}");
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Probe(args) => probe(args),
        Command::Sample(args) => {
            let s = settings(file, |s| args.telemetry.apply(s))?;
            sample(&s, args)
        }
        Command::Bench(args) | Command::Sweep(args) => {
            let s = settings(file, |s| {
                args.telemetry.apply(s)?;
                args.workload.apply(s)?;
                args.sweep.apply(s)?;
                args.output.apply(s)
            })?;
            run_measurement(&s, args.output.stdout, matches!(cli.command, Command::Bench(_)))
        }
        Command::Report(args) => {
            let s = settings(file, |s| args.output.apply(s))?;
            report_cmd(&s, args)
        }
        Command::Replay(args) => replay(args),
    }
}

/// The error and its causes, skipping causes whose text the previous
/// message already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let msg = cause.to_string();
        if !last.ends_with(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        last = msg;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(config::ENV_LOG, "info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            eprintln!("run `wattbench --help` for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
