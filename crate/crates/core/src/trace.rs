//! Windowed statistics of regulation request traces.

use serde::{Deserialize, Serialize};
use statrs::statistics::Statistics;

use crate::error::{DlrError, Result};
use crate::fleet::StaircaseSignal;
use crate::pwl::EpCurve;

/// Sampled power request; up-regulation positive, down-regulation negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    dt: f64,
    samples: Vec<f64>,
    origin: String,
}

impl RequestTrace {
    pub fn new(dt: f64, samples: Vec<f64>, origin: impl Into<String>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(DlrError::InvalidSignal(format!(
                "sample period must be positive, got {dt}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DlrError::InvalidSignal(format!("sample {i} is not finite")));
        }
        Ok(RequestTrace {
            dt,
            samples,
            origin: origin.into(),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn origin(&self) -> &str {
        &self.origin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    /// Magnitude of the part of `s` pointing in this direction.
    pub fn part(self, s: f64) -> f64 {
        match self {
            Direction::Up => s.max(0.0),
            Direction::Down => (-s).max(0.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    /// Index of the window's first sample in the trace.
    pub start_index: usize,
    pub window_h: f64,
    pub direction: Direction,
    pub max_power: f64,
    pub energy: f64,
    /// Energy over max power: how long a block at max power would last.
    pub effective_time: f64,
}

impl WindowStats {
    /// Max power carrying the direction's sign (down-regulation negative).
    pub fn signed_max_power(&self) -> f64 {
        match self.direction {
            Direction::Up => self.max_power,
            Direction::Down => -self.max_power,
        }
    }
}

fn samples_per_window(trace: &RequestTrace, window_h: f64) -> Result<usize> {
    let ratio = window_h / trace.dt;
    let k = ratio.round();
    if window_h.is_nan() || window_h <= 0.0 || k < 1.0 || (ratio - k).abs() > 1e-9 * ratio.max(1.0) {
        return Err(DlrError::AlignmentError {
            window: window_h,
            dt: trace.dt,
        });
    }
    Ok(k as usize)
}

/// Window-by-window samples of one direction, aligned to the trace start. Partial trailing
/// windows are dropped.
pub fn one_sided_windows(
    trace: &RequestTrace,
    window_h: f64,
    direction: Direction,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let k = samples_per_window(trace, window_h)?;
    Ok(trace
        .samples
        .chunks_exact(k)
        .enumerate()
        .map(|(w, chunk)| (w * k, chunk.iter().map(|&s| direction.part(s)).collect()))
        .collect())
}

/// Statistics of every non-zero window of the given direction.
pub fn split_windows(trace: &RequestTrace, window_h: f64, direction: Direction) -> Result<Vec<WindowStats>> {
    Ok(one_sided_windows(trace, window_h, direction)?
        .into_iter()
        .filter_map(|(start_index, w)| {
            let max_power = w.iter().copied().fold(0.0, f64::max);
            if max_power <= 0.0 {
                return None;
            }
            let energy: f64 = w.iter().sum::<f64>() * trace.dt;
            Some(WindowStats {
                start_index,
                window_h,
                direction,
                max_power,
                energy,
                effective_time: (energy / max_power).min(window_h),
            })
        })
        .collect())
}

/// E-p curve of a one-sided window with power normalised by its maximum.
///
/// The result starts at the effective time and reaches zero at `p = 1`.
pub fn ep_of_window(samples: &[f64], dt: f64) -> Result<EpCurve> {
    let max = samples.iter().copied().fold(0.0, f64::max);
    if samples.iter().any(|&s| s < 0.0) {
        return Err(DlrError::InvalidSignal(
            "window samples must be one-sided (non-negative)".into(),
        ));
    }
    if max <= 0.0 {
        return Err(DlrError::EmptyWindow);
    }
    let raw = StaircaseSignal::new(dt, samples.to_vec())?.ep_transform()?;
    Ok(raw.scaled(1.0 / max, 1.0 / max))
}

/// Pearson correlation between signed max power and effective time.
pub fn correlation(stats: &[WindowStats]) -> Result<f64> {
    if stats.len() < 2 {
        return Err(DlrError::Undefined(format!(
            "need at least 2 windows, got {}",
            stats.len()
        )));
    }
    let p: Vec<f64> = stats.iter().map(WindowStats::signed_max_power).collect();
    let t: Vec<f64> = stats.iter().map(|s| s.effective_time).collect();
    let (sp, st) = ((&p).population_std_dev(), (&t).population_std_dev());
    if !(sp > 0.0 && st > 0.0) {
        return Err(DlrError::Undefined("zero variance".into()));
    }
    Ok(((&p).population_covariance(&t) / (sp * st)).clamp(-1.0, 1.0))
}

/// Histogram of effective times: `(bin_start_h, count)` for every bin from zero to the
/// largest effective time.
pub fn effective_time_histogram(stats: &[WindowStats], bin_h: f64) -> Result<Vec<(f64, usize)>> {
    if !(bin_h.is_finite() && bin_h > 0.0) {
        return Err(DlrError::InvalidSignal(format!(
            "bin width must be positive, got {bin_h}"
        )));
    }
    let idx = |t: f64| ((t / bin_h) * (1.0 + 1e-12)).floor() as usize;
    let n = stats.iter().map(|s| idx(s.effective_time) + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; n];
    for s in stats {
        counts[idx(s.effective_time)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (i as f64 * bin_h, c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const MIN: f64 = 1.0 / 60.0;

    fn stats(p: f64, t: f64) -> WindowStats {
        WindowStats {
            start_index: 0,
            window_h: 4.0,
            direction: if p >= 0.0 { Direction::Up } else { Direction::Down },
            max_power: p.abs(),
            energy: p.abs() * t,
            effective_time: t,
        }
    }

    #[test]
    fn window_examples() {
        let constant = RequestTrace::new(MIN, vec![5.0; 15], "t0").unwrap();
        let s = split_windows(&constant, 0.25, Direction::Up).unwrap();
        assert_eq!(s.len(), 1);
        assert_abs_diff_eq!(s[0].effective_time, 0.25, epsilon = 1e-12);
        assert!(split_windows(&constant, 0.25, Direction::Down).unwrap().is_empty());

        let mut half = vec![10.0; 8];
        half.extend(vec![0.0; 8]);
        let t = RequestTrace::new(1.0, half, "t0").unwrap();
        let s = split_windows(&t, 16.0, Direction::Up).unwrap();
        assert_eq!(s[0].effective_time, 8.0);

        assert!(matches!(
            split_windows(&t, 1.5, Direction::Up),
            Err(DlrError::AlignmentError { .. })
        ));
        assert!(split_windows(&t, 0.0, Direction::Up).is_err());
        assert!(RequestTrace::new(0.0, vec![], "").is_err());
        assert!(RequestTrace::new(1.0, vec![f64::NAN], "").is_err());
    }

    #[test]
    fn rectangles() {
        // Two-sample windows: [4, 2], [0, 0], [-3, 1], [-6, -6], trailing [7] dropped.
        let t = RequestTrace::new(0.5, vec![4.0, 2.0, 0.0, 0.0, -3.0, 1.0, -6.0, -6.0, 7.0], "r").unwrap();
        let up = split_windows(&t, 1.0, Direction::Up).unwrap();
        assert_eq!(up.len(), 2);
        assert_eq!((up[0].start_index, up[0].max_power, up[0].energy, up[0].effective_time), (0, 4.0, 3.0, 0.75));
        assert_eq!((up[1].start_index, up[1].max_power, up[1].energy, up[1].effective_time), (4, 1.0, 0.5, 0.5));
        let down = split_windows(&t, 1.0, Direction::Down).unwrap();
        assert_eq!(down.len(), 2);
        assert_eq!((down[0].start_index, down[0].max_power, down[0].energy), (4, 3.0, 1.5));
        assert_eq!((down[1].max_power, down[1].energy, down[1].effective_time), (6.0, 6.0, 1.0));
        assert_eq!(down[1].signed_max_power(), -6.0);
    }

    #[test]
    fn normalised_curves() {
        let c = ep_of_window(&[2.0, 1.0], 1.0).unwrap();
        assert_eq!(c.vertices(), &[(0.0, 1.5), (0.5, 0.5), (1.0, 0.0)]);
        let block = ep_of_window(&[3.0; 4], 0.25).unwrap();
        assert_eq!(block.vertices(), &[(0.0, 1.0), (1.0, 0.0)]);
        let single = ep_of_window(&[0.0, 5.0, 0.0], 1.0).unwrap();
        assert_eq!(single.vertices(), &[(0.0, 1.0), (1.0, 0.0)]);
        assert!(matches!(ep_of_window(&[0.0, 0.0], 1.0), Err(DlrError::EmptyWindow)));
        assert!(ep_of_window(&[1.0, -1.0], 1.0).is_err());
    }

    #[test]
    fn correlation_examples() {
        let prop: Vec<_> = (1..10).map(|i| stats(i as f64, 0.1 * i as f64)).collect();
        assert_abs_diff_eq!(correlation(&prop).unwrap(), 1.0, epsilon = 1e-12);
        let anti: Vec<_> = (1..10).map(|i| stats(-(i as f64), 0.1 * i as f64)).collect();
        assert_abs_diff_eq!(correlation(&anti).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(correlation(&prop[..1]), Err(DlrError::Undefined(_))));
        let flat: Vec<_> = (1..5).map(|i| stats(i as f64, 1.0)).collect();
        assert!(matches!(correlation(&flat), Err(DlrError::Undefined(_))));
    }

    #[test]
    fn histogram_bins() {
        let s = [stats(1.0, 0.0), stats(1.0, MIN * 2.5), stats(1.0, MIN * 3.0)];
        let h = effective_time_histogram(&s, MIN).unwrap();
        assert_eq!(h.iter().map(|b| b.1).collect::<Vec<_>>(), vec![1, 0, 1, 1]);
        assert!(effective_time_histogram(&[], MIN).unwrap().is_empty());
        assert!(effective_time_histogram(&s, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn window_invariants(samples in prop::collection::vec(-10.0f64..10.0, 0..200), k in 1usize..20) {
            let dt = 0.25;
            let t = RequestTrace::new(dt, samples.clone(), "p").unwrap();
            let window = k as f64 * dt;
            let up = split_windows(&t, window, Direction::Up).unwrap();
            let down = split_windows(&t, window, Direction::Down).unwrap();
            let mut total = 0.0;
            for s in up.iter().chain(&down) {
                prop_assert!(s.effective_time <= s.window_h);
                prop_assert!(s.effective_time > 0.0);
                total += s.energy;
            }
            let covered = (samples.len() / k) * k;
            let direct: f64 = samples[..covered].iter().map(|s| s.abs()).sum::<f64>() * dt;
            prop_assert!((total - direct).abs() <= 1e-9 * direct.max(1.0));
        }

        #[test]
        fn normalised_curve_endpoints(samples in prop::collection::vec(0.0f64..10.0, 1..40)) {
            prop_assume!(samples.iter().any(|&s| s > 0.0));
            let dt = 0.25;
            let c = ep_of_window(&samples, dt).unwrap();
            let max = samples.iter().copied().fold(0.0, f64::max);
            let eff = samples.iter().sum::<f64>() * dt / max;
            prop_assert!((c.evaluate(0.0).unwrap() - eff).abs() <= 1e-9);
            prop_assert!(c.evaluate(1.0).unwrap().abs() <= 1e-9);
            let window = samples.len() as f64 * dt;
            let block = EpCurve::new(vec![(0.0, window), (1.0, 0.0)]).unwrap();
            prop_assert!(block.dominates(&c));
        }
    }
}
