//! Heartbeat and wave segmentation.
//!
//! Beats are fixed windows around each R-peak. Waves use RR-scaled search
//! windows: with `rr = min(rr_prev, rr_next, 1.2 s)`,
//!
//! * QRS = `[R - 60 ms, R + 60 ms)`
//! * P   = `[R - min(200 ms, 0.35 rr), R - 60 ms)`
//! * T   = `[R + 60 ms, R + min(450 ms, 0.6 rr))`
//!
//! Millisecond spans are converted to samples with round-half-even.
//! Every usable wave is canonicalized to a fixed-length z-normalized vector.

use serde::{Deserialize, Serialize};

use crate::dsp::{mean_std, resample_to_len, ZNORM_EPS};
use crate::ingest::Annotation;
use crate::{Error, Result};

pub const DEFAULT_CANONICAL_LEN: usize = 64;

fn span(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round_ties_even().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WaveKind {
    P,
    Qrs,
    T,
    /// A whole beat treated as one token.
    Beat,
}

impl WaveKind {
    pub const WAVES: [WaveKind; 3] = [Self::P, Self::Qrs, Self::T];

    pub fn name(self) -> &'static str {
        match self {
            Self::P => "P",
            Self::Qrs => "QRS",
            Self::T => "T",
            Self::Beat => "BEAT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Beat {
    pub r_index: usize,
    /// Inclusive window bounds.
    pub start: usize,
    pub end: usize,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeatWindowConfig {
    pub pre_ms: f64,
    pub post_ms: f64,
}

impl Default for BeatWindowConfig {
    fn default() -> Self {
        Self {
            pre_ms: 250.0,
            post_ms: 400.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeatSegmentation {
    pub beats: Vec<Beat>,
    /// Beats dropped because more than half of the pre- or post-R part of
    /// the window fell outside the record.
    pub dropped: usize,
}

pub fn segment_beats(signal_len: usize, fs: f64, peaks: &[usize], config: &BeatWindowConfig) -> BeatSegmentation {
    let pre = span(config.pre_ms, fs);
    let post = span(config.post_ms, fs);
    let mut out = BeatSegmentation::default();
    for &r in peaks {
        if r >= signal_len {
            out.dropped += 1;
            continue;
        }
        let lost_pre = pre.saturating_sub(r);
        let lost_post = (r + post).saturating_sub(signal_len - 1);
        if 2 * lost_pre > pre || 2 * lost_post > post {
            out.dropped += 1;
            continue;
        }
        out.beats.push(Beat {
            r_index: r,
            start: r.saturating_sub(pre),
            end: (r + post).min(signal_len - 1),
            label: None,
        });
    }
    out
}

/// Labels each beat from the nearest mapped annotation within
/// `tolerance_ms`; beats without one are removed. Returns how many were
/// removed.
pub fn label_beats(
    beats: &mut Vec<Beat>,
    annotations: &[Annotation],
    fs: f64,
    tolerance_ms: f64,
    class_of: impl Fn(&str) -> Option<usize>,
) -> usize {
    let tol = (tolerance_ms * fs / 1000.0).round() as usize;
    let labeled: Vec<(usize, usize)> = annotations
        .iter()
        .filter_map(|a| class_of(&a.symbol).map(|c| (a.sample, c)))
        .collect();
    let before = beats.len();
    beats.retain_mut(|beat| {
        let i = labeled.partition_point(|&(s, _)| s < beat.r_index);
        let nearest = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| labeled.get(j))
            .min_by_key(|(s, _)| s.abs_diff(beat.r_index));
        match nearest {
            Some(&(s, c)) if s.abs_diff(beat.r_index) <= tol => {
                beat.label = Some(c);
                true
            }
            _ => false,
        }
    });
    before - beats.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveWindowConfig {
    pub qrs_half_ms: f64,
    pub p_max_ms: f64,
    pub p_rr_fraction: f64,
    pub t_max_ms: f64,
    pub t_rr_fraction: f64,
    pub rr_cap_s: f64,
    pub min_wave_ms: f64,
    pub canonical_len: usize,
    pub eps: f64,
}

impl Default for WaveWindowConfig {
    fn default() -> Self {
        Self {
            qrs_half_ms: 60.0,
            p_max_ms: 200.0,
            p_rr_fraction: 0.35,
            t_max_ms: 450.0,
            t_rr_fraction: 0.6,
            rr_cap_s: 1.2,
            min_wave_ms: 20.0,
            canonical_len: DEFAULT_CANONICAL_LEN,
            eps: ZNORM_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveSegment {
    pub kind: WaveKind,
    /// Ordinal of the beat within its record.
    pub beat: usize,
    /// Half-open sample range.
    pub start: usize,
    pub end: usize,
    pub raw: Vec<f64>,
    /// `None` marks a MISSING wave (too short or flat).
    pub canonical: Option<Vec<f64>>,
}

impl WaveSegment {
    pub fn is_missing(&self) -> bool {
        self.canonical.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatWaves {
    pub beat: usize,
    pub r_index: usize,
    pub waves: Vec<WaveSegment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Canonical {
    pub values: Vec<f64>,
    /// The input was flat; `values` is all zeros.
    pub degenerate: bool,
}

/// Resamples a wave to `len` points and z-normalizes it.
pub fn canonicalize(raw: &[f64], len: usize, eps: f64) -> Result<Canonical> {
    if raw.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "canonicalization needs at least 2 samples, got {}",
            raw.len()
        )));
    }
    let resampled = resample_to_len(raw, len);
    let (mean, std) = mean_std(&resampled);
    if std < eps {
        return Ok(Canonical {
            values: vec![0.0; len],
            degenerate: true,
        });
    }
    Ok(Canonical {
        values: resampled.iter().map(|v| (v - mean) / std).collect(),
        degenerate: false,
    })
}

fn make_wave(
    signal: &[f64],
    kind: WaveKind,
    beat: usize,
    start: isize,
    end: isize,
    min_len: usize,
    config: &WaveWindowConfig,
) -> WaveSegment {
    let n = signal.len() as isize;
    // a window squeezed shut by a short RR collapses onto its end boundary
    let start = start.min(end);
    let s = start.clamp(0, n) as usize;
    let e = end.clamp(0, n) as usize;
    let raw = signal[s..e].to_vec();
    let canonical = if raw.len() >= min_len.max(2) {
        canonicalize(&raw, config.canonical_len, config.eps)
            .ok()
            .filter(|c| !c.degenerate)
            .map(|c| c.values)
    } else {
        None
    };
    WaveSegment {
        kind,
        beat,
        start: s,
        end: e,
        raw,
        canonical,
    }
}

/// Extracts P, QRS and T waves for every peak, in temporal order.
pub fn extract_waves(signal: &[f64], fs: f64, peaks: &[usize], config: &WaveWindowConfig) -> Result<Vec<BeatWaves>> {
    if peaks.len() < 2 {
        return Err(Error::TooFewPeaks {
            needed: 2,
            actual: peaks.len(),
        });
    }
    if peaks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("peaks must be strictly ascending".into()));
    }
    let qrs_half = span(config.qrs_half_ms, fs) as isize;
    let min_len = span(config.min_wave_ms, fs);
    let rr_cap = config.rr_cap_s * fs;
    let p_max = config.p_max_ms * fs / 1000.0;
    let t_max = config.t_max_ms * fs / 1000.0;

    Ok(peaks
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let prev = i.checked_sub(1).map(|j| (r - peaks[j]) as f64);
            let next = peaks.get(i + 1).map(|&q| (q - r) as f64);
            let rr = [prev, next].into_iter().flatten().fold(rr_cap, f64::min);
            let p_len = p_max.min(config.p_rr_fraction * rr).round_ties_even() as isize;
            let t_len = t_max.min(config.t_rr_fraction * rr).round_ties_even() as isize;
            let r = r as isize;
            let waves = vec![
                make_wave(signal, WaveKind::P, i, r - p_len, r - qrs_half, min_len, config),
                make_wave(signal, WaveKind::Qrs, i, r - qrs_half, r + qrs_half, min_len, config),
                make_wave(signal, WaveKind::T, i, r + qrs_half, r + t_len, min_len, config),
            ];
            BeatWaves {
                beat: i,
                r_index: r as usize,
                waves,
            }
        })
        .collect())
}

/// Beat-as-token mode: one canonical wave per beat window.
pub fn extract_beat_tokens(
    signal: &[f64],
    fs: f64,
    peaks: &[usize],
    beat_config: &BeatWindowConfig,
    config: &WaveWindowConfig,
) -> Vec<BeatWaves> {
    let seg = segment_beats(signal.len(), fs, peaks, beat_config);
    let min_len = span(config.min_wave_ms, fs);
    seg.beats
        .iter()
        .enumerate()
        .map(|(i, b)| BeatWaves {
            beat: i,
            r_index: b.r_index,
            waves: vec![make_wave(
                signal,
                WaveKind::Beat,
                i,
                b.start as isize,
                b.end as isize + 1,
                min_len,
                config,
            )],
        })
        .collect()
}
