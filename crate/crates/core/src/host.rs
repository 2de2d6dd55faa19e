//! Host facts for report metadata, CPU topology and thread pinning.

use std::fs;
use std::io;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostMetadata {
    pub os: String,
    pub kernel: Option<String>,
    pub cpu_model: Option<String>,
    pub logical_cpus: usize,
    /// RFC 3339 wall-clock time at sweep start.
    pub started_at: String,
}

impl HostMetadata {
    pub fn capture() -> Self {
        Self {
            os: std::env::consts::OS.to_owned(),
            kernel: fs::read_to_string("/proc/sys/kernel/osrelease")
                .ok()
                .map(|s| s.trim().to_owned()),
            cpu_model: cpu_model(),
            logical_cpus: logical_cpus(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

pub fn logical_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cpu_model() -> Option<String> {
    let info = fs::read_to_string("/proc/cpuinfo").ok()?;
    info.lines()
        .find(|l| l.starts_with("model name") || l.starts_with("Model") || l.starts_with("CPU part"))
        .and_then(|l| l.split_once(':'))
        .map(|(_, v)| v.trim().to_owned())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CpuTopo {
    pub cpu: usize,
    pub package: usize,
    pub core: usize,
}

/// Online CPUs with their package and core ids, sorted by cpu number.
/// Falls back to one core per logical cpu when sysfs is unavailable.
pub fn cpu_topology() -> Vec<CpuTopo> {
    let read_id = |cpu: usize, what: &str| -> Option<usize> {
        fs::read_to_string(format!("/sys/devices/system/cpu/cpu{cpu}/topology/{what}"))
            .ok()?
            .trim()
            .parse()
            .ok()
    };
    let mut cpus: Vec<CpuTopo> = fs::read_dir("/sys/devices/system/cpu")
        .into_iter()
        .flatten()
        .filter_map(|e| {
            let name = e.ok()?.file_name().into_string().ok()?;
            let cpu: usize = name.strip_prefix("cpu")?.parse().ok()?;
            Some(CpuTopo {
                cpu,
                package: read_id(cpu, "physical_package_id")?,
                core: read_id(cpu, "core_id")?,
            })
        })
        .collect();
    if cpus.is_empty() {
        cpus = (0..logical_cpus())
            .map(|cpu| CpuTopo {
                cpu,
                package: 0,
                core: cpu,
            })
            .collect();
    }
    cpus.sort_by_key(|c| c.cpu);
    cpus
}

/// Sibling rank of each cpu within its physical core (0 for the first
/// hardware thread, 1 for its hyper-thread, ...).
fn sibling_ranks(topo: &[CpuTopo]) -> Vec<usize> {
    topo.iter()
        .map(|c| {
            topo.iter()
                .filter(|o| o.package == c.package && o.core == c.core && o.cpu < c.cpu)
                .count()
        })
        .collect()
}

/// Compact placement: fill every hardware thread of a core, then the next
/// core, then the next package.
pub fn compact_order(topo: &[CpuTopo]) -> Vec<usize> {
    let ranks = sibling_ranks(topo);
    let mut idx: Vec<usize> = (0..topo.len()).collect();
    idx.sort_by_key(|&i| (topo[i].package, topo[i].core, ranks[i]));
    idx.into_iter().map(|i| topo[i].cpu).collect()
}

/// Scatter placement: one hardware thread per core across packages first,
/// siblings only once every core is in use.
pub fn scatter_order(topo: &[CpuTopo]) -> Vec<usize> {
    let ranks = sibling_ranks(topo);
    let mut idx: Vec<usize> = (0..topo.len()).collect();
    // Round-robin packages within each sibling rank.
    let per_pkg_core_rank = |i: usize| {
        topo.iter()
            .enumerate()
            .filter(|(j, o)| o.package == topo[i].package && ranks[*j] == ranks[i] && o.core < topo[i].core)
            .count()
    };
    idx.sort_by_key(|&i| (ranks[i], per_pkg_core_rank(i), topo[i].package));
    idx.into_iter().map(|i| topo[i].cpu).collect()
}

/// Number of distinct physical cores.
pub fn physical_cores() -> usize {
    let topo = cpu_topology();
    let mut cores: Vec<(usize, usize)> = topo.iter().map(|c| (c.package, c.core)).collect();
    cores.sort_unstable();
    cores.dedup();
    cores.len().max(1)
}

#[cfg(target_os = "linux")]
pub fn pin_current_thread(cpu: usize) -> io::Result<()> {
    // SAFETY: cpu_set_t is plain data; CPU_SET bounds are checked below.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        if cpu >= libc::CPU_SETSIZE as usize {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "cpu index out of range"));
        }
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Err(io::Error::last_os_error());
        }
    }
    Ok(())
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread(_cpu: usize) -> io::Result<()> {
    Err(io::Error::new(io::ErrorKind::Unsupported, "thread pinning is Linux-only"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(spec: &[(usize, usize, usize)]) -> Vec<CpuTopo> {
        spec.iter()
            .map(|&(cpu, package, core)| CpuTopo { cpu, package, core })
            .collect()
    }

    // Two packages, two cores each, HT siblings numbered like Linux does
    // (cpu n and n + 4 share a core).
    fn dual_socket_ht() -> Vec<CpuTopo> {
        topo(&[
            (0, 0, 0),
            (1, 0, 1),
            (2, 1, 0),
            (3, 1, 1),
            (4, 0, 0),
            (5, 0, 1),
            (6, 1, 0),
            (7, 1, 1),
        ])
    }

    #[test]
    fn compact_fills_siblings_first() {
        assert_eq!(compact_order(&dual_socket_ht()), vec![0, 4, 1, 5, 2, 6, 3, 7]);
    }

    #[test]
    fn scatter_spreads_across_packages_and_cores() {
        assert_eq!(scatter_order(&dual_socket_ht()), vec![0, 2, 1, 3, 4, 6, 5, 7]);
    }

    #[test]
    fn metadata_has_basics() {
        let m = HostMetadata::capture();
        assert!(m.logical_cpus >= 1);
        assert!(!m.started_at.is_empty());
    }
}
