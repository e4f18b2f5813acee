//! Deterministic synthetic ECG.
//!
//! Each beat is a sum of Gaussian bumps (P, QRS, T) at fixed offsets from
//! an R instant that sits exactly on a sample, so ground-truth peak indices
//! are known. Beats follow jittered RR intervals; white noise is added at a
//! requested SNR.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ingest::{Annotation, ChannelInfo, EcgRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// mV; negative for an inverted wave.
    pub amplitude: f64,
    /// Gaussian standard deviation in seconds.
    pub width_s: f64,
    /// Center relative to the R instant, seconds.
    pub offset_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatTemplate {
    pub p: Bump,
    pub qrs: Bump,
    /// Adds Q and S deflections around the main QRS bump.
    pub biphasic_qrs: bool,
    pub t: Bump,
}

impl Default for BeatTemplate {
    fn default() -> Self {
        Self {
            p: Bump {
                amplitude: 0.15,
                width_s: 0.025,
                offset_s: -0.16,
            },
            qrs: Bump {
                amplitude: 1.0,
                width_s: 0.012,
                offset_s: 0.0,
            },
            biphasic_qrs: false,
            t: Bump {
                amplitude: 0.3,
                width_s: 0.045,
                offset_s: 0.28,
            },
        }
    }
}

impl BeatTemplate {
    fn value(&self, dt: f64) -> f64 {
        let g = |b: &Bump| {
            let z = (dt - b.offset_s) / b.width_s;
            b.amplitude * (-0.5 * z * z).exp()
        };
        let mut v = g(&self.p) + g(&self.qrs) + g(&self.t);
        if self.biphasic_qrs {
            let side = |offset: f64| Bump {
                amplitude: -0.25 * self.qrs.amplitude,
                width_s: self.qrs.width_s * 0.8,
                offset_s: self.qrs.offset_s + offset,
            };
            v += g(&side(-2.5 * self.qrs.width_s)) + g(&side(2.5 * self.qrs.width_s));
        }
        v
    }

    /// Support of the template in seconds around R.
    fn extent(&self) -> (f64, f64) {
        let lo = [self.p, self.qrs, self.t]
            .iter()
            .map(|b| b.offset_s - 5.0 * b.width_s)
            .fold(f64::INFINITY, f64::min);
        let hi = [self.p, self.qrs, self.t]
            .iter()
            .map(|b| b.offset_s + 5.0 * b.width_s)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub fs: f64,
    pub duration_s: f64,
    pub bpm: f64,
    /// RR intervals are drawn uniformly within `±jitter` of the mean.
    pub rr_jitter: f64,
    /// Beat classes; each beat picks one according to `class_weights`.
    pub templates: Vec<BeatTemplate>,
    pub class_weights: Vec<f64>,
    /// `None` for a noiseless signal.
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            fs: 250.0,
            duration_s: 60.0,
            bpm: 75.0,
            rr_jitter: 0.05,
            templates: vec![BeatTemplate::default()],
            class_weights: vec![1.0],
            snr_db: Some(20.0),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fs.is_nan() || self.fs <= 0.0 {
            return Err(Error::InvalidArgument(format!("fs must be positive, got {}", self.fs)));
        }
        if !(30.0..=240.0).contains(&self.bpm) {
            return Err(Error::InvalidArgument(format!("bpm {} outside [30, 240]", self.bpm)));
        }
        if self.duration_s < 2.0 {
            return Err(Error::InvalidArgument(format!(
                "duration {} s shorter than 2 s",
                self.duration_s
            )));
        }
        if !(0.0..1.0).contains(&self.rr_jitter) {
            return Err(Error::InvalidArgument(format!(
                "rr_jitter {} outside [0, 1)",
                self.rr_jitter
            )));
        }
        if self.templates.is_empty() || self.templates.len() != self.class_weights.len() {
            return Err(Error::InvalidArgument("need one class weight per beat template".into()));
        }
        if self.class_weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidArgument(
                "class weights must be nonnegative, not all zero".into(),
            ));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidArgument(
                    "snr must be finite (use None for noiseless)".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub record: EcgRecord,
    pub peaks: Vec<usize>,
    pub beat_classes: Vec<usize>,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthRecord> {
    generate_named(spec, &format!("synth{}", spec.seed))
}

pub fn generate_named(spec: &SynthSpec, record_id: &str) -> Result<SynthRecord> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (spec.duration_s * spec.fs).round() as usize;
    let rr_mean = 60.0 / spec.bpm;
    let total_weight: f64 = spec.class_weights.iter().sum();

    let mut peaks = Vec::new();
    let mut classes = Vec::new();
    let mut t = 0.5 * rr_mean;
    while t < spec.duration_s {
        let idx = (t * spec.fs).round() as usize;
        if idx >= n {
            break;
        }
        let mut pick = rng.random::<f64>() * total_weight;
        let mut class = spec.templates.len() - 1;
        for (c, w) in spec.class_weights.iter().enumerate() {
            if pick < *w {
                class = c;
                break;
            }
            pick -= w;
        }
        peaks.push(idx);
        classes.push(class);
        let jitter = if spec.rr_jitter > 0.0 {
            rng.random_range(-spec.rr_jitter..=spec.rr_jitter)
        } else {
            0.0
        };
        t += rr_mean * (1.0 + jitter);
    }

    let mut clean = vec![0.0; n];
    for (&peak, &class) in peaks.iter().zip(&classes) {
        let template = &spec.templates[class];
        let (lo, hi) = template.extent();
        let a = (peak as f64 + lo * spec.fs).floor().max(0.0) as usize;
        let b = ((peak as f64 + hi * spec.fs).ceil() as usize).min(n - 1);
        for (i, v) in clean.iter_mut().enumerate().take(b + 1).skip(a) {
            *v += template.value((i as f64 - peak as f64) / spec.fs);
        }
    }

    let signal = match spec.snr_db {
        None => clean,
        Some(snr) => {
            let power = clean.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
            let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            clean.iter().map(|v| v + noise.sample(&mut rng)).collect()
        }
    };

    let annotations = peaks
        .iter()
        .zip(&classes)
        .map(|(&p, &c)| Annotation::new(p, if c == 0 { "N" } else { "V" }))
        .collect();
    let record = EcgRecord::new(
        record_id,
        vec![ChannelInfo::new("ECG")],
        vec![signal],
        spec.fs,
        annotations,
    )?;
    Ok(SynthRecord {
        record,
        peaks,
        beat_classes: classes,
    })
}
