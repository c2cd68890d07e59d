//! Breathing signals, respiratory phase sorting, and projection-based signal
//! recovery (Amsterdam Shroud).
//!
//! Conventions shared with the phantom and the evaluation code:
//! amplitude 0 is end-exhale, 1 is end-inhale, and phase 0 starts at an
//! end-inhale peak.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::scanner::ProjectionSet;

#[derive(Debug, Clone, PartialEq)]
pub struct BreathingSignal {
    /// Seconds, strictly increasing.
    pub times: Vec<f64>,
    /// Normalized amplitude in [0, 1].
    pub amplitudes: Vec<f64>,
    /// Sample indices of end-inhale peaks, strictly increasing.
    pub cycle_starts: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub duration: f64,
    pub mean_period: f64,
    /// Relative standard deviation of the per-cycle period.
    pub period_jitter: f64,
    /// Relative standard deviation of the per-cycle peak amplitude.
    pub amplitude_jitter: f64,
    pub sample_rate: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            duration: 60.0,
            mean_period: 4.0,
            period_jitter: 0.0,
            amplitude_jitter: 0.0,
            sample_rate: 25.0,
            seed: 0,
        }
    }
}

/// Raised-cosine breathing shape over one cycle, `tau` in [0, 1): 1 at the
/// end-inhale peak (`tau = 0`), 0 at end-exhale (`tau = 0.5`).
#[inline]
pub fn raised_cosine(tau: f64) -> f64 {
    0.5 + 0.5 * (2.0 * std::f64::consts::PI * tau).cos()
}

/// Representative amplitude of each of `n` phases: the waveform at the start of the phase bin.
pub fn phase_amplitudes(n: usize) -> Vec<f64> {
    (0..n).map(|i| raised_cosine(i as f64 / n as f64)).collect()
}

/// Quasi-periodic raised-cosine breathing with seeded per-cycle period and depth jitter.
pub fn synth_breathing(p: &SynthParams) -> Result<BreathingSignal> {
    if !(p.duration > 0.0) || !(p.mean_period > 0.0) || !(p.sample_rate > 0.0) {
        return domain("duration, mean period and sample rate must be positive");
    }
    if p.period_jitter < 0.0 || p.amplitude_jitter < 0.0 {
        return domain("jitter must be non-negative");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // cycle k spans [starts[k], starts[k+1]); depth[k] is the peak at starts[k]
    let mut starts = vec![0.0];
    let mut depths = Vec::new();
    let horizon = p.duration + 2.0 * p.mean_period;
    while *starts.last().unwrap() <= horizon {
        let jitter: f64 = normal.sample(&mut rng);
        let period = p.mean_period * (1.0 + p.period_jitter * jitter).clamp(0.5, 1.5);
        let depth_jitter: f64 = normal.sample(&mut rng);
        depths.push((1.0 + p.amplitude_jitter * depth_jitter).clamp(0.2, 1.0));
        starts.push(starts.last().unwrap() + period);
    }
    depths.push(1.0);
    if p.amplitude_jitter == 0.0 {
        depths.iter_mut().for_each(|d| *d = 1.0);
    }

    let n = (p.duration * p.sample_rate).round() as usize + 1;
    let times: Vec<f64> = (0..n).map(|i| i as f64 / p.sample_rate).collect();
    let mut amplitudes = Vec::with_capacity(n);
    let mut k = 0;
    for &t in &times {
        while starts[k + 1] <= t {
            k += 1;
        }
        let tau = (t - starts[k]) / (starts[k + 1] - starts[k]);
        // exhale half scales with this peak, inhale half with the next
        let depth = if tau < 0.5 { depths[k] } else { depths[k + 1] };
        amplitudes.push((depth * raised_cosine(tau)).clamp(0.0, 1.0));
    }
    let last_time = *times.last().unwrap();
    let mut cycle_starts: Vec<usize> = starts
        .iter()
        .filter(|&&s| s <= last_time + 0.5 / p.sample_rate)
        .map(|&s| ((s * p.sample_rate).round() as usize).min(n - 1))
        .collect();
    cycle_starts.dedup();
    Ok(BreathingSignal { times, amplitudes, cycle_starts })
}

impl BreathingSignal {
    pub fn new(times: Vec<f64>, amplitudes: Vec<f64>, cycle_starts: Vec<usize>) -> Result<Self> {
        if times.len() != amplitudes.len() || times.len() < 2 {
            return domain("a breathing signal needs at least two (time, amplitude) samples");
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return domain("signal times must be strictly increasing");
        }
        if cycle_starts.windows(2).any(|w| w[1] <= w[0]) || cycle_starts.iter().any(|&c| c >= times.len()) {
            return domain("cycle starts must be strictly increasing sample indices");
        }
        Ok(BreathingSignal { times, amplitudes, cycle_starts })
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn duration(&self) -> f64 {
        self.end() - self.start()
    }

    /// Number of complete peak-to-peak cycles.
    pub fn n_cycles(&self) -> usize {
        self.cycle_starts.len().saturating_sub(1)
    }

    pub fn peak_times(&self) -> Vec<f64> {
        self.cycle_starts.iter().map(|&i| self.times[i]).collect()
    }

    /// Linear interpolation, clamped at the ends.
    pub fn amplitude_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.amplitudes[0];
        }
        if t >= self.times[n - 1] {
            return self.amplitudes[n - 1];
        }
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let f = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        self.amplitudes[lo] * (1.0 - f) + self.amplitudes[hi] * f
    }

    fn check_span(&self, view_times: &[f64]) -> Result<()> {
        let (a, b) = (self.start(), self.end());
        if let Some(t) = view_times.iter().find(|&&t| !(t >= a && t <= b)) {
            return domain(format!("view time {t} s outside the signal span [{a}, {b}]"));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["time_s", "amplitude"]).map_err(csv_err)?;
        for (t, a) in self.times.iter().zip(&self.amplitudes) {
            w.write_record([format!("{t}"), format!("{a}")]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `time_s,amplitude` CSV; cycle starts are re-detected from the amplitudes.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let (mut times, mut amplitudes) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Domain(format!("bad signal CSV row: {rec:?}")))
            };
            times.push(parse(0)?);
            amplitudes.push(parse(1)?);
        }
        let cycle_starts = detect_peaks(&times, &amplitudes);
        BreathingSignal::new(times, amplitudes, cycle_starts)
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Domain(format!("csv: {other:?}")),
    }
}

/// End-inhale peaks: the maximum of every excursion above the midline that
/// lasts at least 0.75 s. Excursions touching the ends of the record are kept.
pub fn detect_peaks(times: &[f64], amplitudes: &[f64]) -> Vec<usize> {
    if amplitudes.is_empty() {
        return Vec::new();
    }
    let lo = amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = amplitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return Vec::new();
    }
    let mid = 0.5 * (lo + hi);
    let mut peaks: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < amplitudes.len() {
        if amplitudes[i] > mid {
            let begin = i;
            while i < amplitudes.len() && amplitudes[i] > mid {
                i += 1;
            }
            let seg = begin..i;
            let best = seg.clone().fold(begin, |b, j| if amplitudes[j] > amplitudes[b] { j } else { b });
            let long_enough = times[i - 1] - times[begin] >= 0.1;
            if long_enough {
                if let Some(&prev) = peaks.last() {
                    if times[best] - times[prev] < 0.75 {
                        if amplitudes[best] > amplitudes[prev] {
                            peaks.pop();
                            peaks.push(best);
                        }
                        continue;
                    }
                }
                peaks.push(best);
            }
        } else {
            i += 1;
        }
    }
    peaks
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseMap {
    pub phase_of_view: Vec<usize>,
    pub n_phases: usize,
}

impl PhaseMap {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_phases];
        for &p in &self.phase_of_view {
            c[p] += 1;
        }
        c
    }

    pub fn views_of(&self, phase: usize) -> Vec<usize> {
        self.phase_of_view.iter().enumerate().filter(|(_, &p)| p == phase).map(|(i, _)| i).collect()
    }

    /// Every view in one phase.
    pub fn single(n_views: usize) -> Self {
        PhaseMap { phase_of_view: vec![0; n_views], n_phases: 1 }
    }
}

/// Time-based sorting: within each peak-to-peak cycle the phase is
/// `floor(N * (t - peak_k) / (peak_{k+1} - peak_k))`. Views before the first or
/// after the last peak use the neighbouring cycle's length.
pub fn phase_sort(signal: &BreathingSignal, view_times: &[f64], n_phases: usize) -> Result<PhaseMap> {
    if n_phases < 1 {
        return domain("phase count must be at least 1");
    }
    signal.check_span(view_times)?;
    let peaks = signal.peak_times();
    if peaks.len() < 2 {
        return domain("phase sorting needs at least one complete breathing cycle");
    }
    let n = n_phases as f64;
    let phase_of_view = view_times
        .iter()
        .map(|&t| {
            let hi = peaks.partition_point(|&p| p <= t);
            let (start, len) = if hi == 0 {
                (peaks[0], peaks[1] - peaks[0])
            } else if hi == peaks.len() {
                (peaks[hi - 1], peaks[hi - 1] - peaks[hi - 2])
            } else {
                (peaks[hi - 1], peaks[hi] - peaks[hi - 1])
            };
            let mut frac = (t - start) / len;
            if hi == 0 || hi == peaks.len() {
                // extrapolated cycles repeat the neighbouring cycle length
                frac -= frac.floor();
            }
            ((n * frac).floor().max(0.0) as usize).min(n_phases - 1)
        })
        .collect();
    Ok(PhaseMap { phase_of_view, n_phases })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AmplitudeSort {
    pub map: PhaseMap,
    /// Set when the signal has no amplitude range; every view then lands in phase 0.
    pub degenerate: bool,
}

/// Amplitude-based sorting. The signal's amplitude range is split into N/2
/// equal bins; exhaling views (non-positive slope) take phases 0..N/2-1 from the
/// top bin down, inhaling views take N/2..N-1 from the bottom bin up, so that
/// phase 0 is end-inhale and phases advance in time as with [`phase_sort`].
pub fn amplitude_sort(signal: &BreathingSignal, view_times: &[f64], n_phases: usize) -> Result<AmplitudeSort> {
    if n_phases < 2 || n_phases % 2 != 0 {
        return domain(format!("amplitude sorting needs an even phase count, got {n_phases}"));
    }
    signal.check_span(view_times)?;
    let lo = signal.amplitudes.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = signal.amplitudes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let half = n_phases / 2;
    if !(hi - lo > 1e-12 * hi.abs().max(1.0)) {
        return Ok(AmplitudeSort { map: PhaseMap { phase_of_view: vec![0; view_times.len()], n_phases }, degenerate: true });
    }
    let h = signal.duration() / (signal.times.len() - 1) as f64;
    let (a, b) = (signal.start(), signal.end());
    let phase_of_view = view_times
        .iter()
        .map(|&t| {
            let amp = signal.amplitude_at(t);
            let slope = signal.amplitude_at((t + h).min(b)) - signal.amplitude_at((t - h).max(a));
            let bin = (((amp - lo) / (hi - lo) * half as f64).floor() as usize).min(half - 1);
            if slope > 0.0 {
                half + bin
            } else {
                half - 1 - bin
            }
        })
        .collect();
    Ok(AmplitudeSort { map: PhaseMap { phase_of_view, n_phases }, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShroudParams {
    /// Largest row shift searched between consecutive views.
    pub max_shift: usize,
    /// Fraction of detector rows, centred vertically, used to build the shroud.
    pub row_fraction: f64,
}

impl Default for ShroudParams {
    fn default() -> Self {
        ShroudParams { max_shift: 16, row_fraction: 0.6 }
    }
}

#[derive(Debug, Clone)]
pub struct ShroudResult {
    pub signal: BreathingSignal,
    /// Shroud image, one column (row profile derivative) per view.
    pub shroud: Vec<Vec<f64>>,
    /// Estimated row shift of each view relative to the previous one (0 for view 0).
    pub shifts: Vec<f64>,
}

/// Best shift `s` in `[-max_shift, max_shift]` such that `cur[v] ~ prev[v - s]`,
/// refined to sub-row precision by a parabola through the correlation peak.
/// Both columns are centred and scaled over their full length, so shifts that
/// leave only a short overlap are penalized rather than favoured.
pub fn best_shift(prev: &[f64], cur: &[f64], max_shift: usize) -> f64 {
    let n = prev.len() as isize;
    let m = max_shift as isize;
    let centred = |x: &[f64]| -> (Vec<f64>, f64) {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        (c, norm)
    };
    let (a, na) = centred(cur);
    let (b, nb) = centred(prev);
    let ncc_at = |s: isize| -> f64 {
        let (lo, hi) = (s.max(0), (n + s).min(n));
        if hi - lo < 3 {
            return f64::NEG_INFINITY;
        }
        if na <= 0.0 || nb <= 0.0 {
            return if na <= 0.0 && nb <= 0.0 && s == 0 { 1.0 } else { f64::NEG_INFINITY };
        }
        (lo..hi).map(|v| a[v as usize] * b[(v - s) as usize]).sum::<f64>() / (na * nb)
    };
    let scores: Vec<f64> = (-m..=m).map(ncc_at).collect();
    let mut best = m as usize;
    for (i, &c) in scores.iter().enumerate() {
        // ties resolved toward the smallest |shift|
        let better = c > scores[best] || (c == scores[best] && (i as isize - m).abs() < (best as isize - m).abs());
        if better {
            best = i;
        }
    }
    let mut shift = best as f64 - m as f64;
    if best > 0 && best + 1 < scores.len() {
        let (l, c, r) = (scores[best - 1], scores[best], scores[best + 1]);
        let denom = l - 2.0 * c + r;
        if l.is_finite() && r.is_finite() && denom < 0.0 {
            shift += (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
        }
    }
    shift
}

/// Breathing surrogate from the projections themselves: each view is collapsed
/// across detector columns into a craniocaudal profile, its row derivative is
/// tracked from view to view by normalized cross-correlation, and the
/// accumulated shift (detrended, min-max normalized) becomes the amplitude.
/// Diaphragm descent (negative z shift) maps to larger amplitude.
pub fn amsterdam_shroud(projections: &ProjectionSet, params: &ShroudParams) -> Result<ShroudResult> {
    let views = &projections.views;
    let [nu, nv] = projections.geometry.detector_channels;
    if views.len() < 2 {
        return domain("the Amsterdam Shroud needs at least two views");
    }
    if nv < 8 {
        return domain(format!("the Amsterdam Shroud needs at least 8 detector rows, got {nv}"));
    }
    let keep = ((nv as f64 * params.row_fraction.clamp(0.0, 1.0)).round() as usize).clamp(5, nv);
    let first_row = (nv - keep) / 2;
    let shroud: Vec<Vec<f64>> = views
        .iter()
        .map(|view| {
            let profile: Vec<f64> = (first_row..first_row + keep)
                .map(|v| view.data[v * nu..(v + 1) * nu].iter().map(|&x| x as f64).sum())
                .collect();
            (0..keep)
                .map(|v| {
                    let a = profile[v.saturating_sub(1)];
                    let b = profile[(v + 1).min(keep - 1)];
                    0.5 * (b - a)
                })
                .collect()
        })
        .collect();

    let mut shifts = vec![0.0];
    for k in 1..shroud.len() {
        shifts.push(best_shift(&shroud[k - 1], &shroud[k], params.max_shift));
    }
    let mut cumulative = Vec::with_capacity(shifts.len());
    let mut acc = 0.0;
    for s in &shifts {
        acc += s;
        cumulative.push(acc);
    }
    let spread = cumulative.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - cumulative.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(spread >= 0.5) {
        return Err(Error::Degenerate(format!(
            "no craniocaudal motion found in the projections (total shift spread {spread:.3} rows)"
        )));
    }

    // remove the linear trend, flip so that descent is inhale, normalize
    let n = cumulative.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = cumulative.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in cumulative.iter().enumerate() {
        sxy += (i as f64 - xm) * (y - ym);
        sxx += (i as f64 - xm).powi(2);
    }
    let slope = sxy / sxx;
    let detrended: Vec<f64> =
        cumulative.iter().enumerate().map(|(i, y)| -(y - ym - slope * (i as f64 - xm))).collect();
    let lo = detrended.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = detrended.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amplitudes: Vec<f64> = detrended.iter().map(|v| (v - lo) / (hi - lo)).collect();
    let times: Vec<f64> = views.iter().map(|v| v.time).collect();
    let cycle_starts = detect_peaks(&times, &amplitudes);
    let signal = BreathingSignal::new(times, amplitudes, cycle_starts)?;
    Ok(ShroudResult { signal, shroud, shifts })
}
