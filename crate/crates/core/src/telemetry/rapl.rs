//! Intel RAPL energy counters, read either from the MSR character device or
//! from the kernel powercap tree.
//!
//! Both report cumulative joules since the handle was opened. Hardware
//! counters are 32 bits wide and wrap within minutes under load, so every
//! read is folded into a wide accumulator with modular deltas.

use std::fs::{self, File};
use std::io;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::{BackendDescriptor, BackendKind, PowerDomain, SampleKind, SensorSample, TelemetryBackend, TelemetryError};
use crate::clock::monotonic_ns;

pub const MSR_RAPL_POWER_UNIT: u64 = 0x606;
pub const DEFAULT_POWERCAP_ROOT: &str = "/sys/class/powercap";

/// One RAPL plane: where to find it via MSR and via powercap.
#[derive(Debug, Clone, Copy)]
pub struct RaplDomainEntry {
    pub domain: &'static str,
    pub msr: u64,
    /// Zone `name` in the powercap tree.
    pub powercap_name: &'static str,
    pub counter_width: CounterWidth,
    pub required: bool,
}

/// Energy status registers. PP1 is the client-part graphics plane, which
/// powercap calls "uncore".
pub const RAPL_DOMAINS: &[RaplDomainEntry] = &[
    RaplDomainEntry {
        domain: "pkg",
        msr: 0x611,
        powercap_name: "package",
        counter_width: CounterWidth::Bits32,
        required: true,
    },
    RaplDomainEntry {
        domain: "pp0",
        msr: 0x639,
        powercap_name: "core",
        counter_width: CounterWidth::Bits32,
        required: false,
    },
    RaplDomainEntry {
        domain: "dram",
        msr: 0x619,
        powercap_name: "dram",
        counter_width: CounterWidth::Bits32,
        required: false,
    },
    RaplDomainEntry {
        domain: "pp1",
        msr: 0x641,
        powercap_name: "uncore",
        counter_width: CounterWidth::Bits32,
        required: false,
    },
];

fn entry_domain(entry: &RaplDomainEntry) -> PowerDomain {
    entry.domain.parse().expect("table domains are valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterWidth {
    Bits32,
    Bits64,
}

impl CounterWidth {
    pub fn bits(self) -> u32 {
        match self {
            Self::Bits32 => 32,
            Self::Bits64 => 64,
        }
    }

    pub fn modulus(self) -> u128 {
        1u128 << self.bits()
    }

    fn mask(self) -> u64 {
        match self {
            Self::Bits32 => u32::MAX as u64,
            Self::Bits64 => u64::MAX,
        }
    }
}

impl TryFrom<u32> for CounterWidth {
    type Error = String;

    fn try_from(bits: u32) -> Result<Self, String> {
        match bits {
            32 => Ok(Self::Bits32),
            64 => Ok(Self::Bits64),
            other => Err(format!("counter width must be 32 or 64 bits, got {other}")),
        }
    }
}

/// `raw * 2^-energy_unit_exponent` joules. The exponent is a 5-bit field, so
/// values above 31 are masked.
pub fn decode_rapl_energy(raw: u64, energy_unit_exponent: u8) -> f64 {
    units_to_joules(raw as u128, energy_unit_exponent)
}

fn units_to_joules(units: u128, energy_unit_exponent: u8) -> f64 {
    units as f64 * (-f64::from(energy_unit_exponent & 0x1f)).exp2()
}

/// Counter increment between two reads, assuming at most one wrap.
pub fn raw_delta(prev_raw: u64, curr_raw: u64, width: CounterWidth) -> u64 {
    let mask = width.mask();
    curr_raw.wrapping_sub(prev_raw) & mask
}

/// Joules consumed between two raw reads:
/// `((curr - prev) mod 2^width) * 2^-exponent`.
pub fn delta_energy(
    prev_raw: u64,
    curr_raw: u64,
    width: CounterWidth,
    energy_unit_exponent: u8,
) -> f64 {
    decode_rapl_energy(raw_delta(prev_raw, curr_raw, width), energy_unit_exponent)
}

/// Unit fields of `MSR_RAPL_POWER_UNIT`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaplUnits {
    pub power_exponent: u8,
    pub energy_exponent: u8,
    pub time_exponent: u8,
}

impl RaplUnits {
    pub fn from_register(value: u64) -> Self {
        Self {
            power_exponent: (value & 0x0f) as u8,
            energy_exponent: ((value >> 8) & 0x1f) as u8,
            time_exponent: ((value >> 16) & 0x0f) as u8,
        }
    }

    pub fn joules_per_unit(&self) -> f64 {
        decode_rapl_energy(1, self.energy_exponent)
    }
}

/// Folds wrapping raw readings into an exact running total of counter units.
#[derive(Debug, Clone)]
pub struct CounterAccumulator {
    modulus: u128,
    last: u64,
    total: u128,
}

impl CounterAccumulator {
    pub fn new(initial_raw: u64, modulus: u128) -> Self {
        assert!(modulus >= 2, "counter modulus must be at least 2");
        Self {
            modulus,
            last: initial_raw,
            total: 0,
        }
    }

    pub fn for_width(initial_raw: u64, width: CounterWidth) -> Self {
        Self::new(initial_raw & width.mask(), width.modulus())
    }

    /// Records a new reading and returns the units accumulated since open.
    pub fn update(&mut self, raw: u64) -> u128 {
        let (curr, last) = (raw as u128 % self.modulus, self.last as u128 % self.modulus);
        self.total += (curr + self.modulus - last) % self.modulus;
        self.last = raw;
        self.total
    }

    pub fn total(&self) -> u128 {
        self.total
    }
}

fn first_cpu_of_package(package: u32) -> Option<u32> {
    let mut cpus: Vec<u32> = fs::read_dir("/sys/devices/system/cpu")
        .ok()?
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let id: u32 = name.strip_prefix("cpu")?.parse().ok()?;
            let pkg =
                fs::read_to_string(format!("/sys/devices/system/cpu/cpu{id}/topology/physical_package_id"))
                    .ok()?;
            (pkg.trim().parse::<u32>().ok()? == package).then_some(id)
        })
        .collect();
    cpus.sort_unstable();
    cpus.first().copied()
}

fn unsupported(kind: BackendKind, reason: impl Into<String>, hint: impl Into<String>) -> TelemetryError {
    TelemetryError::UnsupportedOnHost {
        backend: kind,
        reason: reason.into(),
        hint: hint.into(),
    }
}

fn open_error(kind: BackendKind, path: &Path, err: &io::Error) -> TelemetryError {
    let reason = format!("{}: {err}", path.display());
    match (kind, err.kind()) {
        (BackendKind::RaplMsr, io::ErrorKind::NotFound) => {
            unsupported(kind, reason, "load the msr kernel module (modprobe msr)")
        }
        (BackendKind::RaplMsr, io::ErrorKind::PermissionDenied) => unsupported(
            kind,
            reason,
            "run as root, or grant CAP_SYS_RAWIO and read access to /dev/cpu/*/msr",
        ),
        (_, io::ErrorKind::NotFound) => unsupported(
            kind,
            reason,
            "needs an Intel CPU with the intel_rapl powercap driver (modprobe intel_rapl_common)",
        ),
        (_, io::ErrorKind::PermissionDenied) => unsupported(
            kind,
            reason,
            "energy_uj is root-readable on recent kernels; run as root or relax its mode",
        ),
        _ => unsupported(kind, reason, "check that the device is readable"),
    }
}

struct MsrCounter {
    domain: PowerDomain,
    register: u64,
    acc: CounterAccumulator,
}

/// RAPL via `/dev/cpu/<n>/msr`: 8-byte reads at register offsets.
pub struct MsrBackend {
    device_path: PathBuf,
    device: File,
    units: RaplUnits,
    counters: Vec<MsrCounter>,
    domains: Vec<PowerDomain>,
}

impl MsrBackend {
    pub fn open(device_path: &Path) -> Result<Self, TelemetryError> {
        let kind = BackendKind::RaplMsr;
        let device = File::open(device_path).map_err(|e| open_error(kind, device_path, &e))?;
        let read = |reg: u64| -> io::Result<u64> {
            let mut buf = [0u8; 8];
            device.read_exact_at(&mut buf, reg)?;
            Ok(u64::from_le_bytes(buf))
        };
        let units = read(MSR_RAPL_POWER_UNIT).map(RaplUnits::from_register).map_err(|e| {
            unsupported(
                kind,
                format!("RAPL unit register unreadable: {e}"),
                "RAPL MSRs need an Intel Sandy Bridge or newer CPU",
            )
        })?;

        let mut counters = Vec::new();
        for entry in RAPL_DOMAINS {
            match read(entry.msr) {
                Ok(raw) => counters.push(MsrCounter {
                    domain: entry_domain(entry),
                    register: entry.msr,
                    acc: CounterAccumulator::for_width(raw, entry.counter_width),
                }),
                Err(e) if entry.required => {
                    return Err(unsupported(
                        kind,
                        format!("{} energy register {:#x} unreadable: {e}", entry.domain, entry.msr),
                        "RAPL MSRs need an Intel Sandy Bridge or newer CPU",
                    ))
                }
                Err(e) => log::debug!("rapl-msr: {} not available: {e}", entry.domain),
            }
        }
        let domains = counters.iter().map(|c| c.domain.clone()).collect();
        Ok(Self {
            device_path: device_path.to_owned(),
            device,
            units,
            counters,
            domains,
        })
    }

    pub(crate) fn from_descriptor(descriptor: &BackendDescriptor) -> Result<Self, TelemetryError> {
        let package = descriptor.parse_param::<u32>("package")?.unwrap_or(0);
        let path = match descriptor.param("device") {
            Some(p) => PathBuf::from(p),
            None => {
                let cpu = match descriptor.parse_param::<u32>("cpu")? {
                    Some(cpu) => cpu,
                    None => first_cpu_of_package(package).unwrap_or(0),
                };
                PathBuf::from(format!("/dev/cpu/{cpu}/msr"))
            }
        };
        Self::open(&path)
    }

    pub fn units(&self) -> RaplUnits {
        self.units
    }
}

impl TelemetryBackend for MsrBackend {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError> {
        let timestamp_ns = monotonic_ns();
        let mut raws = Vec::with_capacity(self.counters.len());
        for c in &self.counters {
            let mut buf = [0u8; 8];
            self.device
                .read_exact_at(&mut buf, c.register)
                .map_err(|e| TelemetryError::TransientReadFailure(format!("msr {:#x}: {e}", c.register)))?;
            raws.push(u64::from_le_bytes(buf));
        }
        let exp = self.units.energy_exponent;
        Ok(self
            .counters
            .iter_mut()
            .zip(raws)
            .map(|(c, raw)| SensorSample {
                timestamp_ns,
                domain: c.domain.clone(),
                kind: SampleKind::EnergyCounterJoules,
                value: units_to_joules(c.acc.update(raw), exp),
            })
            .collect())
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RaplMsr
    }

    fn details(&self) -> Vec<String> {
        vec![
            format!("device {}", self.device_path.display()),
            format!(
                "units: energy 2^-{} J ({:.3e} J), power 2^-{} W, time 2^-{} s",
                self.units.energy_exponent,
                self.units.joules_per_unit(),
                self.units.power_exponent,
                self.units.time_exponent
            ),
        ]
    }
}

struct SysfsCounter {
    domain: PowerDomain,
    energy_path: PathBuf,
    acc: CounterAccumulator,
}

/// RAPL via the powercap tree (`intel-rapl:<pkg>[:<sub>]/energy_uj`).
pub struct SysfsBackend {
    zone: PathBuf,
    counters: Vec<SysfsCounter>,
    domains: Vec<PowerDomain>,
}

fn read_u64(path: &Path) -> io::Result<u64> {
    fs::read_to_string(path)?
        .trim()
        .parse()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
}

impl SysfsBackend {
    pub fn open(root: &Path, package: u32) -> Result<Self, TelemetryError> {
        let kind = BackendKind::RaplSysfs;
        let zone = root.join(format!("intel-rapl:{package}"));
        let mut zones = vec![zone.clone()];
        if let Ok(entries) = fs::read_dir(&zone) {
            let prefix = format!("intel-rapl:{package}:");
            let mut subs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok())
                .filter(|e| e.file_name().to_string_lossy().starts_with(&prefix))
                .map(|e| e.path())
                .collect();
            subs.sort();
            zones.extend(subs);
        }

        let mut counters = Vec::new();
        for (i, z) in zones.iter().enumerate() {
            let name_path = z.join("name");
            let name = fs::read_to_string(&name_path).map_err(|e| open_error(kind, &name_path, &e))?;
            let name = name.trim();
            let entry = RAPL_DOMAINS.iter().find(|e| {
                if i == 0 {
                    name.starts_with(e.powercap_name)
                } else {
                    name == e.powercap_name
                }
            });
            let Some(entry) = entry else {
                log::debug!("rapl-sysfs: skipping zone {name:?}");
                continue;
            };
            let energy_path = z.join("energy_uj");
            let initial = read_u64(&energy_path).map_err(|e| open_error(kind, &energy_path, &e))?;
            let range = read_u64(&z.join("max_energy_range_uj")).unwrap_or(u32::MAX as u64);
            counters.push(SysfsCounter {
                domain: entry_domain(entry),
                energy_path,
                acc: CounterAccumulator::new(initial, range as u128 + 1),
            });
        }
        if counters.first().map(|c| &c.domain) != Some(&PowerDomain::Package) {
            return Err(unsupported(
                kind,
                format!("{} is not a package zone", zone.display()),
                "pick another package index",
            ));
        }
        let domains = counters.iter().map(|c| c.domain.clone()).collect();
        Ok(Self {
            zone,
            counters,
            domains,
        })
    }

    pub(crate) fn from_descriptor(descriptor: &BackendDescriptor) -> Result<Self, TelemetryError> {
        let package = descriptor.parse_param::<u32>("package")?.unwrap_or(0);
        let root = descriptor.param("root").unwrap_or(DEFAULT_POWERCAP_ROOT);
        Self::open(Path::new(root), package)
    }
}

impl TelemetryBackend for SysfsBackend {
    fn domains(&self) -> &[PowerDomain] {
        &self.domains
    }

    fn read_all(&mut self) -> Result<Vec<SensorSample>, TelemetryError> {
        let timestamp_ns = monotonic_ns();
        let raws = self
            .counters
            .iter()
            .map(|c| {
                read_u64(&c.energy_path).map_err(|e| TelemetryError::TransientReadFailure(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self
            .counters
            .iter_mut()
            .zip(raws)
            .map(|(c, raw)| SensorSample {
                timestamp_ns,
                domain: c.domain.clone(),
                kind: SampleKind::EnergyCounterJoules,
                value: c.acc.update(raw) as f64 * 1e-6,
            })
            .collect())
    }

    fn kind(&self) -> BackendKind {
        BackendKind::RaplSysfs
    }

    fn details(&self) -> Vec<String> {
        vec![format!("zone {} (microjoule counters)", self.zone.display())]
    }
}
