//! Signal primitives: Butterworth filtering, linear resampling, z-normalization.
//!
//! Filters are cascades of second-order sections designed with the bilinear
//! transform (frequency prewarped), run forward and then backward so the
//! result has zero phase and the squared magnitude response.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor below which [`znorm`] treats a signal as flat.
pub const ZNORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FilterKind {
    Lowpass { cutoff: f64 },
    Highpass { cutoff: f64 },
    Bandpass { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    #[serde(flatten)]
    pub kind: FilterKind,
    /// Butterworth order per band edge.
    pub order: usize,
}

impl FilterSpec {
    pub fn bandpass(low: f64, high: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Bandpass { low, high },
            order,
        }
    }

    pub fn lowpass(cutoff: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Lowpass { cutoff },
            order,
        }
    }

    pub fn highpass(cutoff: f64, order: usize) -> Self {
        Self {
            kind: FilterKind::Highpass { cutoff },
            order,
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if fs.is_nan() || fs <= 0.0 {
            return Err(Error::Filter(format!("sampling rate must be positive, got {fs}")));
        }
        if self.order == 0 {
            return Err(Error::Filter("order must be at least 1".into()));
        }
        let nyquist = fs / 2.0;
        let check = |f: f64| {
            if !(f > 0.0 && f < nyquist) {
                Err(Error::Filter(format!("corner {f} Hz must lie in (0, {nyquist}) Hz")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            FilterKind::Lowpass { cutoff } | FilterKind::Highpass { cutoff } => check(cutoff),
            FilterKind::Bandpass { low, high } => {
                check(low)?;
                check(high)?;
                if low >= high {
                    return Err(Error::Filter(format!("band edges out of order: {low} >= {high}")));
                }
                Ok(())
            }
        }
    }

    /// Designs the section cascade for sampling rate `fs`.
    pub fn design(&self, fs: f64) -> Result<Vec<Biquad>> {
        self.validate(fs)?;
        Ok(match self.kind {
            FilterKind::Lowpass { cutoff } => butterworth(cutoff, fs, self.order, false),
            FilterKind::Highpass { cutoff } => butterworth(cutoff, fs, self.order, true),
            FilterKind::Bandpass { low, high } => {
                let mut s = butterworth(low, fs, self.order, true);
                s.extend(butterworth(high, fs, self.order, false));
                s
            }
        })
    }
}

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II over `x` with state initialized to the
    /// steady state for a constant input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else { return };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let g = self.dc_gain();
        let y0 = g * x0;
        let mut z2 = b2 * x0 - a2 * y0;
        let mut z1 = y0 - b0 * x0;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z1;
            z1 = b1 * xi - a1 * y + z2;
            z2 = b2 * xi - a2 * y;
            *v = y;
        }
    }

    /// Complex response at normalized angular frequency `w`, as (re, im).
    pub fn response(&self, w: f64) -> (f64, f64) {
        let (c1, s1) = (w.cos(), -w.sin());
        let (c2, s2) = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * c1 + self.b[2] * c2,
            self.b[1] * s1 + self.b[2] * s2,
        );
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        let d = den.0 * den.0 + den.1 * den.1;
        ((num.0 * den.0 + num.1 * den.1) / d, (num.1 * den.0 - num.0 * den.1) / d)
    }
}

fn butterworth(cutoff: f64, fs: f64, order: usize, highpass: bool) -> Vec<Biquad> {
    let k = (PI * cutoff / fs).tan();
    let mut sections = Vec::with_capacity(order.div_ceil(2));
    for i in 0..order / 2 {
        // conjugate pole pair at angle phi from the negative real axis
        let phi = if order.is_multiple_of(2) {
            (2 * i + 1) as f64 * PI / (2 * order) as f64
        } else {
            (i + 1) as f64 * PI / order as f64
        };
        let q = 1.0 / (2.0 * phi.cos());
        let norm = 1.0 / (1.0 + k / q + k * k);
        let a = [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm];
        let b = if highpass {
            [norm, -2.0 * norm, norm]
        } else {
            let b0 = k * k * norm;
            [b0, 2.0 * b0, b0]
        };
        sections.push(Biquad { b, a });
    }
    if order % 2 == 1 {
        let a1 = (k - 1.0) / (k + 1.0);
        let b = if highpass {
            let b0 = 1.0 / (1.0 + k);
            [b0, -b0, 0.0]
        } else {
            let b0 = k / (1.0 + k);
            [b0, b0, 0.0]
        };
        sections.push(Biquad { b, a: [a1, 0.0] });
    }
    sections
}

/// Runs `sections` forward then backward (odd-reflection padded edges).
pub fn filtfilt(sections: &[Biquad], signal: &[f64]) -> Vec<f64> {
    let n = signal.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = (6 * sections.len() + 3).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (signal[0], signal[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Applies `spec` with zero phase. Output has the input's length.
pub fn apply_filter(signal: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    let sections = spec.design(fs)?;
    Ok(filtfilt(&sections, signal))
}

pub fn bandpass(signal: &[f64], fs: f64, spec: &FilterSpec) -> Result<Vec<f64>> {
    if !matches!(spec.kind, FilterKind::Bandpass { .. }) {
        return Err(Error::Filter("bandpass() needs a bandpass spec".into()));
    }
    apply_filter(signal, fs, spec)
}

/// Resamples to exactly `len` points by linear interpolation with both
/// endpoints pinned to the input's endpoints.
pub fn resample_to_len(signal: &[f64], len: usize) -> Vec<f64> {
    match (signal.len(), len) {
        (_, 0) | (0, _) => Vec::new(),
        (1, m) => vec![signal[0]; m],
        (n, 1) => vec![signal[0] * 0.5 + signal[n - 1] * 0.5],
        (n, m) => {
            let step = (n - 1) as f64 / (m - 1) as f64;
            (0..m)
                .map(|i| {
                    if i == m - 1 {
                        return signal[n - 1];
                    }
                    let pos = i as f64 * step;
                    let j = (pos.floor() as usize).min(n - 2);
                    let frac = pos - j as f64;
                    signal[j] + (signal[j + 1] - signal[j]) * frac
                })
                .collect()
        }
    }
}

/// Linear resampling from `fs_in` to `fs_out`; output length is
/// `round(len * fs_out / fs_in)`.
pub fn resample_linear(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>> {
    if !(fs_in > 0.0 && fs_out > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sampling rates must be positive ({fs_in} -> {fs_out})"
        )));
    }
    if fs_in == fs_out {
        return Ok(signal.to_vec());
    }
    let len = (signal.len() as f64 * fs_out / fs_in).round() as usize;
    Ok(resample_to_len(signal, len))
}

pub fn mean_std(signal: &[f64]) -> (f64, f64) {
    if signal.is_empty() {
        return (0.0, 0.0);
    }
    let n = signal.len() as f64;
    let mean = signal.iter().sum::<f64>() / n;
    let var = signal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Zero mean, unit (population) standard deviation; all zeros when the
/// input's standard deviation is below `eps`.
pub fn znorm(signal: &[f64], eps: f64) -> Vec<f64> {
    let (mean, std) = mean_std(signal);
    if std < eps {
        return vec![0.0; signal.len()];
    }
    signal.iter().map(|v| (v - mean) / std).collect()
}
