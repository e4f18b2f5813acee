//! R-peak detection (Pan–Tompkins) and detector scoring.
//!
//! Stages: zero-phase 5–15 Hz bandpass, five-point derivative, squaring,
//! 150 ms moving-window integration, then a single pass over the
//! integrated signal's local maxima with adaptive signal/noise levels,
//! a T-wave slope test and search-back for missed beats. Every threshold
//! is relative to running peak estimates, so the detector is insensitive
//! to signal amplitude.

use serde::{Deserialize, Serialize};

use crate::dsp::{apply_filter, FilterSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PanTompkinsConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub filter_order: usize,
    pub integration_ms: f64,
    pub refractory_ms: f64,
    pub t_wave_ms: f64,
    pub searchback_factor: f64,
    /// Weight of a new peak in the running signal/noise estimates.
    pub update_weight: f64,
    pub refine_ms: f64,
    pub init_seconds: f64,
}

impl Default for PanTompkinsConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 5.0,
            band_high_hz: 15.0,
            filter_order: 2,
            integration_ms: 150.0,
            refractory_ms: 200.0,
            t_wave_ms: 360.0,
            searchback_factor: 1.66,
            update_weight: 0.125,
            refine_ms: 40.0,
            init_seconds: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RPeakList {
    /// Strictly ascending sample indices.
    pub indices: Vec<usize>,
    /// Integrated-signal height of each peak relative to the record maximum.
    pub scores: Vec<f64>,
}

impl RPeakList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Seam for alternative detectors.
pub trait QrsDetector {
    fn detect(&self, signal: &[f64], fs: f64) -> Result<RPeakList>;
}

#[derive(Debug, Clone, Default)]
pub struct PanTompkins {
    pub config: PanTompkinsConfig,
}

impl QrsDetector for PanTompkins {
    fn detect(&self, signal: &[f64], fs: f64) -> Result<RPeakList> {
        detect(signal, fs, &self.config)
    }
}

pub fn pan_tompkins(signal: &[f64], fs: f64) -> Result<RPeakList> {
    detect(signal, fs, &PanTompkinsConfig::default())
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

struct Levels {
    signal: f64,
    noise: f64,
    weight: f64,
}

impl Levels {
    fn thresholds(&self) -> (f64, f64) {
        let t1 = self.noise + 0.25 * (self.signal - self.noise);
        (t1, 0.5 * t1)
    }

    fn signal_peak(&mut self, v: f64, weight: f64) {
        self.signal = weight * v + (1.0 - weight) * self.signal;
    }

    fn noise_peak(&mut self, v: f64) {
        self.noise = self.weight * v + (1.0 - self.weight) * self.noise;
    }
}

pub fn detect(signal: &[f64], fs: f64, config: &PanTompkinsConfig) -> Result<RPeakList> {
    if fs < 100.0 {
        return Err(Error::InvalidArgument(format!(
            "sampling rate {fs} Hz below the 100 Hz minimum"
        )));
    }
    let min_len = (2.0 * fs).ceil() as usize;
    if signal.len() < min_len {
        return Err(Error::SignalTooShort {
            needed: min_len,
            actual: signal.len(),
        });
    }
    let (lo, hi) = signal
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        return Ok(RPeakList::default());
    }

    let filtered = apply_filter(
        signal,
        fs,
        &FilterSpec::bandpass(config.band_low_hz, config.band_high_hz, config.filter_order),
    )?;
    let n = filtered.len();
    let at = |i: isize| filtered[i.clamp(0, n as isize - 1) as usize];
    let deriv: Vec<f64> = (0..n as isize)
        .map(|i| (2.0 * (at(i + 1) - at(i - 1)) + at(i + 2) - at(i - 2)) * fs / 8.0)
        .collect();

    let win = ms_to_samples(config.integration_ms, fs).max(1);
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for d in &deriv {
        prefix.push(prefix.last().unwrap() + d * d);
    }
    let half = win / 2;
    let mut mwi: Vec<f64> = (0..n)
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + win - half).min(n);
            (prefix[b] - prefix[a]) / win as f64
        })
        .collect();
    let peak = mwi.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak.is_nan() || peak <= 0.0 {
        return Ok(RPeakList::default());
    }
    for v in &mut mwi {
        *v /= peak;
    }

    let refractory = ms_to_samples(config.refractory_ms, fs).max(1);
    let t_window = ms_to_samples(config.t_wave_ms, fs);
    let candidates = local_maxima(&mwi, refractory);
    let slope = |c: usize| {
        let a = c.saturating_sub(half);
        let b = (c + half + 1).min(n);
        deriv[a..b].iter().fold(0.0f64, |m, d| m.max(d.abs()))
    };

    let init = ((config.init_seconds * fs) as usize).min(n);
    let init_max = mwi[..init].iter().fold(0.0f64, |m, &v| m.max(v));
    let init_mean = mwi[..init].iter().sum::<f64>() / init as f64;
    let mut levels = Levels {
        signal: 0.25 * init_max,
        noise: 0.5 * init_mean,
        weight: config.update_weight,
    };

    let mut qrs: Vec<usize> = Vec::new();
    let mut qrs_slope: Vec<f64> = Vec::new();
    let mut rr: Vec<usize> = Vec::new();

    let accept = |c: usize, qrs: &mut Vec<usize>, qrs_slope: &mut Vec<f64>, rr: &mut Vec<usize>| {
        if let Some(&last) = qrs.last() {
            rr.push(c - last);
            if rr.len() > 8 {
                rr.remove(0);
            }
        }
        qrs.push(c);
        qrs_slope.push(slope(c));
    };
    let is_t_wave = |c: usize, qrs: &[usize], qrs_slope: &[f64]| match qrs.last() {
        Some(&last) => c - last < t_window && slope(c) < 0.5 * qrs_slope[qrs_slope.len() - 1],
        None => false,
    };
    // strongest overlooked candidate strictly between the last beat and `until`
    let search_back = |until: usize, qrs: &[usize], qrs_slope: &[f64], thr2: f64| {
        let last = *qrs.last()?;
        candidates
            .iter()
            .copied()
            .filter(|&p| p >= last + refractory && p + refractory <= until)
            .filter(|&p| mwi[p] >= thr2 && !is_t_wave(p, qrs, qrs_slope))
            .max_by(|&a, &b| mwi[a].total_cmp(&mwi[b]).then(b.cmp(&a)))
    };
    let rr_mean = |rr: &[usize]| (!rr.is_empty()).then(|| rr.iter().sum::<usize>() as f64 / rr.len() as f64);

    for &c in &candidates {
        let v = mwi[c];
        let (thr1, thr2) = levels.thresholds();
        let gap_exceeded = |qrs: &[usize], rr: &[usize]| match (qrs.last(), rr_mean(rr)) {
            (Some(&last), Some(avg)) => (c - last) as f64 > config.searchback_factor * avg,
            _ => false,
        };
        if v >= thr1 && !is_t_wave(c, &qrs, &qrs_slope) {
            if gap_exceeded(&qrs, &rr) {
                if let Some(p) = search_back(c, &qrs, &qrs_slope, thr2) {
                    levels.signal_peak(mwi[p], 0.25);
                    accept(p, &mut qrs, &mut qrs_slope, &mut rr);
                }
            }
            levels.signal_peak(v, config.update_weight);
            accept(c, &mut qrs, &mut qrs_slope, &mut rr);
        } else {
            levels.noise_peak(v);
            if gap_exceeded(&qrs, &rr) {
                if let Some(p) = search_back(c + refractory, &qrs, &qrs_slope, thr2) {
                    levels.signal_peak(mwi[p], 0.25);
                    accept(p, &mut qrs, &mut qrs_slope, &mut rr);
                }
            }
        }
    }

    // refine onto the raw signal, oriented by the dominant filtered deflection
    let reach = ms_to_samples(config.refine_ms, fs);
    let mut refined: Vec<(usize, f64)> = qrs
        .iter()
        .map(|&c| {
            let a = c.saturating_sub(reach);
            let b = (c + reach + 1).min(n);
            let dominant = (a..b)
                .max_by(|&i, &j| filtered[i].abs().total_cmp(&filtered[j].abs()))
                .unwrap_or(c);
            let sign = if filtered[dominant] < 0.0 { -1.0 } else { 1.0 };
            let r = (a..b)
                .max_by(|&i, &j| (sign * signal[i]).total_cmp(&(sign * signal[j])).then(j.cmp(&i)))
                .unwrap_or(c);
            (r, mwi[c])
        })
        .collect();

    refined.sort_by_key(|p| p.0);
    let mut out = RPeakList::default();
    for (idx, score) in refined {
        if let Some(&last) = out.indices.last() {
            if idx < last + refractory {
                let prev = out.scores.last_mut().unwrap();
                if score > *prev {
                    *out.indices.last_mut().unwrap() = idx;
                    *prev = score;
                }
                continue;
            }
        }
        out.indices.push(idx);
        out.scores.push(score);
    }
    Ok(out)
}

/// Local maxima of `x`, thinned so kept peaks are at least `distance`
/// apart (taller peaks win, earlier wins ties).
fn local_maxima(x: &[f64], distance: usize) -> Vec<usize> {
    let n = x.len();
    let mut peaks: Vec<usize> = (1..n.saturating_sub(1))
        .filter(|&i| x[i] > x[i - 1] && x[i] >= x[i + 1] && x[i] > 0.0)
        .collect();
    let mut order: Vec<usize> = (0..peaks.len()).collect();
    order.sort_by(|&a, &b| x[peaks[b]].total_cmp(&x[peaks[a]]).then(a.cmp(&b)));
    let mut keep = vec![true; peaks.len()];
    for &o in &order {
        if !keep[o] {
            continue;
        }
        let p = peaks[o];
        for (j, &q) in peaks.iter().enumerate() {
            if j != o && keep[j] && q.abs_diff(p) < distance {
                keep[j] = false;
            }
        }
    }
    let mut k = 0;
    peaks.retain(|_| {
        k += 1;
        keep[k - 1]
    });
    peaks
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeakMatch {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PeakMatch {
    pub fn sensitivity(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_).max(1) as f64
    }

    pub fn ppv(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fp).max(1) as f64
    }
}

/// One-to-one greedy matching: closest pairs first, each within tolerance.
pub fn match_peaks(detected: &[usize], reference: &[usize], tolerance_ms: f64, fs: f64) -> PeakMatch {
    let tol = (tolerance_ms * fs / 1000.0).floor() as usize;
    let mut pairs = Vec::new();
    for (i, &d) in detected.iter().enumerate() {
        let lo = reference.partition_point(|&r| r + tol < d);
        for (j, &r) in reference.iter().enumerate().skip(lo) {
            if r > d + tol {
                break;
            }
            pairs.push((d.abs_diff(r), i, j));
        }
    }
    pairs.sort_unstable();
    let mut used_d = vec![false; detected.len()];
    let mut used_r = vec![false; reference.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_d[i] && !used_r[j] {
            used_d[i] = true;
            used_r[j] = true;
            tp += 1;
        }
    }
    PeakMatch {
        tp,
        fp: detected.len() - tp,
        fn_: reference.len() - tp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_signal_has_no_peaks() {
        let out = pan_tompkins(&vec![0.0; 2500], 250.0).unwrap();
        assert!(out.is_empty());
        assert!(pan_tompkins(&vec![1.3; 2500], 250.0).unwrap().is_empty());
    }

    #[test]
    fn too_short_or_slow() {
        assert!(matches!(
            pan_tompkins(&vec![0.0; 100], 250.0),
            Err(Error::SignalTooShort { .. })
        ));
        assert!(pan_tompkins(&vec![0.0; 1000], 50.0).is_err());
    }

    #[test]
    fn spike_train() {
        let fs = 250.0;
        let mut x = vec![0.0; 2500];
        let truth: Vec<usize> = (0..12).map(|k| 100 + k * 200).collect();
        for &t in &truth {
            for d in -4i32..=4 {
                x[(t as i32 + d) as usize] += (-(d * d) as f64 / 4.0).exp();
            }
        }
        let out = pan_tompkins(&x, fs).unwrap();
        let m = match_peaks(&out.indices, &truth, 50.0, fs);
        assert_eq!(m.tp, truth.len(), "{out:?}");
        assert_eq!(m.fp, 0);
        assert!(out.indices.windows(2).all(|w| w[1] - w[0] >= 50));
    }

    #[test]
    fn matching_identity_and_shift() {
        let r = vec![100, 400, 700];
        assert_eq!(match_peaks(&r, &r, 50.0, 250.0), PeakMatch { tp: 3, fp: 0, fn_: 0 });
        let shifted: Vec<usize> = r.iter().map(|v| v + 20).collect();
        // 50 ms at 250 Hz = 12 samples
        assert_eq!(
            match_peaks(&shifted, &r, 50.0, 250.0),
            PeakMatch { tp: 0, fp: 3, fn_: 3 }
        );
        assert_eq!(match_peaks(&[], &r, 50.0, 250.0), PeakMatch { tp: 0, fp: 0, fn_: 3 });
    }

    /// Maximum-cardinality matching by exhaustive search.
    fn brute_force_matches(det: &[usize], reference: &[usize], tol: usize) -> usize {
        fn go(det: &[usize], reference: &[usize], used: &mut Vec<bool>, tol: usize) -> usize {
            let Some((&d, rest)) = det.split_first() else { return 0 };
            let mut best = go(rest, reference, used, tol);
            for j in 0..reference.len() {
                if !used[j] && d.abs_diff(reference[j]) <= tol {
                    used[j] = true;
                    best = best.max(1 + go(rest, reference, used, tol));
                    used[j] = false;
                }
            }
            best
        }
        go(det, reference, &mut vec![false; reference.len()], tol)
    }

    #[test]
    fn jitter_within_half_tolerance_matches_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fs = 360.0;
        let tol_ms = 50.0;
        let tol = (tol_ms * fs / 1000.0) as usize;
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let reference: Vec<usize> = (0..n).map(|k| 1000 + k * 150 + rng.random_range(0..40)).collect();
            let mut det: Vec<usize> = reference
                .iter()
                .map(|&r| (r as i64 + rng.random_range(-(tol as i64) / 2..=(tol as i64) / 2)) as usize)
                .collect();
            det.sort_unstable();
            let m = match_peaks(&det, &reference, tol_ms, fs);
            assert_eq!(m.tp, n);
            assert_eq!(m.tp, brute_force_matches(&det, &reference, tol));
        }
    }

    #[test]
    fn greedy_agrees_with_brute_force_on_sparse_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let mut det: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..3000)).collect();
            let mut reference: Vec<usize> = (0..rng.random_range(0..6)).map(|_| rng.random_range(0..3000)).collect();
            det.sort_unstable();
            reference.sort_unstable();
            det.dedup();
            reference.dedup();
            // well separated lists: no two references within 2*tol
            if reference.windows(2).any(|w| w[1] - w[0] <= 40) || det.windows(2).any(|w| w[1] - w[0] <= 40) {
                continue;
            }
            let m = match_peaks(&det, &reference, 50.0, 360.0);
            assert_eq!(m.tp, brute_force_matches(&det, &reference, 18));
        }
    }
}
