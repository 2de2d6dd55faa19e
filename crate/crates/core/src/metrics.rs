//! Energy integration, uncore derivation and efficiency figures.
//!
//! Everything here is a pure function of its inputs. Mean power over a window
//! is always the window energy divided by the window length, never the
//! arithmetic mean of the samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::ns_to_s;
use crate::sampler::TelemetrySeries;
use crate::telemetry::{PowerDomain, SampleKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("need at least two points, got {0}")]
    TooFewPoints(usize),
    #[error("window [{start_ns}, {end_ns}] does not overlap the series")]
    EmptyWindowOverlap { start_ns: u64, end_ns: u64 },
    #[error("energy counter decreases at point {0}")]
    NonMonotoneCounter(usize),
    #[error("series kinds differ: {0:?} vs {1:?}")]
    KindMismatch(SampleKind, SampleKind),
    #[error("no points pair within {tolerance_ns} ns")]
    UnalignableSeries { tolerance_ns: u64 },
    #[error("mean power must be positive")]
    ZeroPower,
}

/// Closed time window in monotonic nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_ns: u64,
    pub end_ns: u64,
}

impl Window {
    pub fn new(start_ns: u64, end_ns: u64) -> Self {
        Self { start_ns, end_ns }
    }

    pub fn seconds(&self) -> f64 {
        ns_to_s(self.end_ns.saturating_sub(self.start_ns))
    }

    /// Covers every point of the series.
    pub fn full(series: &TelemetrySeries) -> Option<Self> {
        Some(Self::new(series.points.first()?.0, series.points.last()?.0))
    }
}

fn interpolate(a: (u64, f64), b: (u64, f64), t: u64) -> f64 {
    if t == a.0 {
        return a.1;
    }
    if t == b.0 {
        return b.1;
    }
    let frac = (t - a.0) as f64 / (b.0 - a.0) as f64;
    a.1 + (b.1 - a.1) * frac
}

/// The series restricted to the overlap with `window`, with interpolated
/// points at the clipped edges.
fn clip(series: &TelemetrySeries, window: Window) -> Result<(Window, Vec<(u64, f64)>), MetricsError> {
    let pts = &series.points;
    if pts.len() < 2 {
        return Err(MetricsError::TooFewPoints(pts.len()));
    }
    let start = window.start_ns.max(pts[0].0);
    let end = window.end_ns.min(pts[pts.len() - 1].0);
    if start >= end {
        return Err(MetricsError::EmptyWindowOverlap {
            start_ns: window.start_ns,
            end_ns: window.end_ns,
        });
    }
    // First index with t > start, and first index with t >= end.
    let lo = pts.partition_point(|p| p.0 <= start);
    let hi = pts.partition_point(|p| p.0 < end);
    let mut out = Vec::with_capacity(hi.saturating_sub(lo) + 2);
    out.push((start, interpolate(pts[lo - 1], pts[lo], start)));
    out.extend_from_slice(&pts[lo..hi]);
    out.push((end, interpolate(pts[hi - 1], pts[hi], end)));
    Ok((Window::new(start, end), out))
}

fn trapezoid(points: &[(u64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[0].1 + w[1].1) * ns_to_s(w[1].0 - w[0].0))
        .sum()
}

/// Joules under an instantaneous-power series over `window`: trapezoidal
/// rule on the clipped series, edges linearly interpolated.
pub fn integrate_power(series: &TelemetrySeries, window: Window) -> Result<f64, MetricsError> {
    if series.kind != SampleKind::InstantPowerWatts {
        return Err(MetricsError::KindMismatch(SampleKind::InstantPowerWatts, series.kind));
    }
    clip(series, window).map(|(_, pts)| trapezoid(&pts))
}

fn check_monotone(series: &TelemetrySeries) -> Result<(), MetricsError> {
    match series.points.windows(2).position(|w| w[1].1 < w[0].1) {
        Some(i) => Err(MetricsError::NonMonotoneCounter(i + 1)),
        None => Ok(()),
    }
}

/// Joules accumulated by a cumulative counter series over `window`.
pub fn energy_from_counter(series: &TelemetrySeries, window: Window) -> Result<f64, MetricsError> {
    if series.kind != SampleKind::EnergyCounterJoules {
        return Err(MetricsError::KindMismatch(SampleKind::EnergyCounterJoules, series.kind));
    }
    if series.len() < 2 {
        return Err(MetricsError::TooFewPoints(series.len()));
    }
    check_monotone(series)?;
    let (_, pts) = clip(series, window)?;
    Ok(pts[pts.len() - 1].1 - pts[0].1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerStats {
    pub domain: PowerDomain,
    /// The window actually covered, after clipping to the series.
    pub window: Window,
    pub energy_joules: f64,
    pub mean_watts: f64,
    /// Points that fall inside the window.
    pub sample_count: usize,
}

/// Energy and mean power of any series over `window`.
pub fn power_stats(series: &TelemetrySeries, window: Window) -> Result<PowerStats, MetricsError> {
    let energy_joules = match series.kind {
        SampleKind::InstantPowerWatts => integrate_power(series, window)?,
        SampleKind::EnergyCounterJoules => energy_from_counter(series, window)?,
    };
    let (clipped, _) = clip(series, window)?;
    let sample_count = series
        .timestamps()
        .filter(|t| (clipped.start_ns..=clipped.end_ns).contains(t))
        .count();
    Ok(PowerStats {
        domain: series.domain.clone(),
        window: clipped,
        energy_joules,
        mean_watts: energy_joules / clipped.seconds(),
        sample_count,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncoreSeries {
    pub series: TelemetrySeries,
    /// Points where the core reading exceeded the package and were set to 0.
    pub clamped: usize,
    /// Package points with no core point within tolerance.
    pub dropped: usize,
}

/// Package minus core subsystem, pairing each package point with the
/// nearest core point within `tolerance_ns`.
pub fn derive_uncore(
    pkg: &TelemetrySeries,
    pp0: &TelemetrySeries,
    tolerance_ns: u64,
) -> Result<UncoreSeries, MetricsError> {
    if pkg.kind != pp0.kind {
        return Err(MetricsError::KindMismatch(pkg.kind, pp0.kind));
    }
    let core = &pp0.points;
    let mut out = TelemetrySeries::empty(PowerDomain::UncoreDerived, pkg.kind);
    let (mut clamped, mut dropped) = (0, 0);
    for &(t, p) in &pkg.points {
        let i = core.partition_point(|c| c.0 < t);
        let nearest = [i.checked_sub(1), (i < core.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by_key(|&j| core[j].0.abs_diff(t));
        match nearest {
            Some(j) if core[j].0.abs_diff(t) <= tolerance_ns => {
                let diff = p - core[j].1;
                if diff < 0.0 {
                    clamped += 1;
                }
                out.push(t, diff.max(0.0));
            }
            _ => dropped += 1,
        }
    }
    if out.is_empty() {
        return Err(MetricsError::UnalignableSeries { tolerance_ns });
    }
    Ok(UncoreSeries {
        series: out,
        clamped,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdleSubtraction {
    pub watts: f64,
    /// The idle baseline exceeded the measured mean.
    pub underflow: bool,
}

/// `max(mean - idle, 0)`.
pub fn subtract_idle(mean_watts: f64, idle_watts: f64) -> IdleSubtraction {
    debug_assert!(idle_watts >= 0.0, "idle baseline must be non-negative");
    let net = mean_watts - idle_watts.max(0.0);
    IdleSubtraction {
        watts: net.max(0.0),
        underflow: net < 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub eps_per_watt: f64,
    /// Absent when no events were processed.
    pub joules_per_event: Option<f64>,
}

pub fn efficiency(events_per_sec: f64, mean_watts: f64) -> Result<Efficiency, MetricsError> {
    if !(mean_watts > 0.0 && mean_watts.is_finite()) {
        return Err(MetricsError::ZeroPower);
    }
    Ok(Efficiency {
        eps_per_watt: events_per_sec / mean_watts,
        joules_per_event: (events_per_sec > 0.0).then(|| mean_watts / events_per_sec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: u64 = 1_000_000_000;

    fn power(points: &[(f64, f64)]) -> TelemetrySeries {
        TelemetrySeries::new(
            PowerDomain::Package,
            SampleKind::InstantPowerWatts,
            points.iter().map(|&(t, v)| ((t * S as f64) as u64, v)).collect(),
        )
        .unwrap()
    }

    fn counter(points: &[(f64, f64)]) -> TelemetrySeries {
        TelemetrySeries {
            kind: SampleKind::EnergyCounterJoules,
            ..power(points)
        }
    }

    #[test]
    fn trapezoid_examples() {
        let s = power(&[(0.0, 100.0), (1.0, 100.0)]);
        assert_eq!(integrate_power(&s, Window::new(0, S)).unwrap(), 100.0);
        let s = power(&[(0.0, 100.0), (1.0, 120.0), (2.0, 80.0)]);
        assert_eq!(integrate_power(&s, Window::new(0, 2 * S)).unwrap(), 210.0);
        let s = power(&[(0.0, 100.0)]);
        assert_eq!(
            integrate_power(&s, Window::new(0, S)),
            Err(MetricsError::TooFewPoints(1))
        );
    }

    #[test]
    fn clipped_window_interpolates_edges() {
        let s = power(&[(0.0, 100.0), (1.0, 120.0), (2.0, 80.0)]);
        // [0.5, 1.5]: 0.5*(110+120)/2 + 0.5*(120+100)/2 = 57.5 + 55
        let e = integrate_power(&s, Window::new(S / 2, 3 * S / 2)).unwrap();
        assert!((e - 112.5).abs() < 1e-12);
        assert!(matches!(
            integrate_power(&s, Window::new(3 * S, 4 * S)),
            Err(MetricsError::EmptyWindowOverlap { .. })
        ));
    }

    #[test]
    fn counter_examples() {
        let s = counter(&[(0.0, 0.0), (1.0, 10.0), (2.0, 25.0)]);
        assert_eq!(energy_from_counter(&s, Window::new(0, 2 * S)).unwrap(), 25.0);
        assert_eq!(energy_from_counter(&s, Window::new(S / 2, 3 * S / 2)).unwrap(), 12.5);
        let bad = counter(&[(0.0, 5.0), (1.0, 4.0)]);
        assert_eq!(
            energy_from_counter(&bad, Window::new(0, S)),
            Err(MetricsError::NonMonotoneCounter(1))
        );
    }

    #[test]
    fn stats_mean_is_energy_over_window() {
        let s = power(&[(0.0, 100.0), (1.0, 120.0), (2.0, 80.0)]);
        let st = power_stats(&s, Window::new(0, 2 * S)).unwrap();
        assert_eq!(st.energy_joules, 210.0);
        assert_eq!(st.mean_watts, 105.0);
        assert_eq!(st.sample_count, 3);
        assert_eq!(st.mean_watts * st.window.seconds(), st.energy_joules);
    }

    #[test]
    fn uncore_examples() {
        let pkg = power(&[(0.0, 95.0), (1.0, 95.0), (2.0, 95.0)]);
        let same = derive_uncore(&pkg, &pkg, S / 2).unwrap();
        assert!(same.series.points.iter().all(|p| p.1 == 0.0));

        let pp0 = power(&[(0.0, 80.0), (1.0, 80.0), (2.0, 80.0)]);
        let u = derive_uncore(&pkg, &pp0, S / 2).unwrap();
        assert_eq!(u.series.domain, PowerDomain::UncoreDerived);
        assert!(u.series.points.iter().all(|p| p.1 == 15.0));

        let pp0 = power(&[(0.0, 80.0), (1.0, 95.3), (2.0, 80.0)]);
        let u = derive_uncore(&pkg, &pp0, S / 2).unwrap();
        assert_eq!(u.series.points[1].1, 0.0);
        assert_eq!(u.clamped, 1);
    }

    #[test]
    fn uncore_pairs_nearest_and_drops_strays() {
        let pkg = power(&[(0.0, 95.0), (1.0, 95.0), (5.0, 95.0)]);
        let pp0 = power(&[(0.1, 80.0), (0.95, 70.0)]);
        let u = derive_uncore(&pkg, &pp0, S / 2).unwrap();
        assert_eq!(u.series.points, vec![(0, 15.0), (S, 25.0)]);
        assert_eq!(u.dropped, 1);
        let far = power(&[(100.0, 1.0)]);
        assert!(matches!(
            derive_uncore(&pkg, &far, S / 2),
            Err(MetricsError::UnalignableSeries { .. })
        ));
        assert!(matches!(
            derive_uncore(&pkg, &counter(&[(0.0, 1.0)]), S),
            Err(MetricsError::KindMismatch(..))
        ));
    }

    #[test]
    fn idle_and_efficiency_examples() {
        assert_eq!(subtract_idle(37.0, 17.0), IdleSubtraction { watts: 20.0, underflow: false });
        assert_eq!(subtract_idle(37.0, 0.0).watts, 37.0);
        assert_eq!(subtract_idle(10.0, 17.0), IdleSubtraction { watts: 0.0, underflow: true });

        let e = efficiency(100.0, 50.0).unwrap();
        assert_eq!(e.eps_per_watt, 2.0);
        assert_eq!(e.joules_per_event, Some(0.5));
        let e = efficiency(0.0, 50.0).unwrap();
        assert_eq!(e.eps_per_watt, 0.0);
        assert_eq!(e.joules_per_event, None);
        assert_eq!(efficiency(100.0, 0.0), Err(MetricsError::ZeroPower));
    }
}
