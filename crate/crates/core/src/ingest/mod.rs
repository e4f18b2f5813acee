//! Recording ingest.
//!
//! Parses WFDB headers, format 212/16 signal files and MIT annotation
//! streams, plus single-lead CSV exports. Also holds the dataset rules
//! that turn recordings into labeled examples: the AAMI beat grouping,
//! AFIB segment labeling, and class balancing.

mod annotation;
mod csv_record;
mod format;
mod header;
mod labels;
mod wfdb;

pub use annotation::{annotation_code, annotation_symbol, parse_wfdb_annotations, write_wfdb_annotations};
pub use csv_record::{parse_csv_record, write_record_csv};
pub use format::{
    decode_format16, decode_format16_adu, decode_format212, decode_format212_adu, encode_format16, encode_format212,
    Packed212,
};
pub use header::{parse_wfdb_header, SignalFormat, SignalSpec, WfdbHeader};
pub use labels::{
    balance_undersample, cut_afib_segments, rhythm_at, AamiClass, IngestManifest, LabeledExample, SegmentCut,
    SegmentLabelConfig,
};
pub use wfdb::{read_wfdb_record, write_wfdb_record};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Gain applied when a header leaves it unspecified or zero.
pub const DEFAULT_GAIN: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    /// adu per mV
    pub gain: f64,
    pub baseline: i32,
    pub resolution_bits: u32,
}

impl ChannelInfo {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            gain: DEFAULT_GAIN,
            baseline: 0,
            resolution_bits: 12,
        }
    }

    pub fn to_mv(&self, adu: i32) -> f64 {
        (adu - self.baseline) as f64 / self.gain
    }

    pub fn to_adu(&self, mv: f64) -> i32 {
        (mv * self.gain).round() as i32 + self.baseline
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample: usize,
    /// MIT mnemonic, e.g. `N`, `V`, `+`.
    pub symbol: String,
    #[serde(default)]
    pub subtype: i8,
    #[serde(default)]
    pub channel: u8,
    #[serde(default)]
    pub num: i8,
    #[serde(default)]
    pub aux: Option<String>,
}

impl Annotation {
    pub fn new(sample: usize, symbol: impl Into<String>) -> Self {
        Self {
            sample,
            symbol: symbol.into(),
            subtype: 0,
            channel: 0,
            num: 0,
            aux: None,
        }
    }

    pub fn with_aux(mut self, aux: impl Into<String>) -> Self {
        self.aux = Some(aux.into());
        self
    }
}

/// A multi-channel recording in mV with its annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcgRecord {
    pub record_id: String,
    pub channels: Vec<ChannelInfo>,
    pub signal: Vec<Vec<f64>>,
    pub fs: f64,
    pub annotations: Vec<Annotation>,
}

impl EcgRecord {
    pub fn new(
        record_id: impl Into<String>,
        channels: Vec<ChannelInfo>,
        signal: Vec<Vec<f64>>,
        fs: f64,
        annotations: Vec<Annotation>,
    ) -> Result<Self> {
        let record = Self {
            record_id: record_id.into(),
            channels,
            signal,
            fs,
            annotations,
        };
        record.validate()?;
        Ok(record)
    }

    /// Single-channel convenience constructor.
    pub fn single(record_id: impl Into<String>, samples: Vec<f64>, fs: f64) -> Result<Self> {
        Self::new(record_id, vec![ChannelInfo::new("ECG")], vec![samples], fs, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fs > 0.0 && self.fs.is_finite()) {
            return Err(Error::Record(format!(
                "sampling rate must be positive, got {}",
                self.fs
            )));
        }
        if self.signal.is_empty() {
            return Err(Error::Record("record has no channels".into()));
        }
        if self.channels.len() != self.signal.len() {
            return Err(Error::Record(format!(
                "{} channel descriptors for {} signal channels",
                self.channels.len(),
                self.signal.len()
            )));
        }
        let len = self.signal[0].len();
        if let Some((i, ch)) = self.signal.iter().enumerate().find(|(_, c)| c.len() != len) {
            return Err(Error::Record(format!(
                "channel {i} has {} samples, channel 0 has {len}",
                ch.len()
            )));
        }
        let mut prev = None;
        for a in &self.annotations {
            if a.sample >= len {
                return Err(Error::Record(format!(
                    "annotation at sample {} beyond signal length {len}",
                    a.sample
                )));
            }
            if let Some(p) = prev {
                if a.sample < p {
                    return Err(Error::Record(format!(
                        "annotation samples not ordered ({p} then {})",
                        a.sample
                    )));
                }
            }
            prev = Some(a.sample);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.fs
    }

    pub fn channel(&self, index: usize) -> Option<&[f64]> {
        self.signal.get(index).map(Vec::as_slice)
    }

    /// Index of the channel named `name` (case-insensitive), if any.
    pub fn channel_by_name(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name.eq_ignore_ascii_case(name))
    }

    /// Beat annotations (those whose symbol is one of the AAMI beat codes).
    pub fn beat_annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(|a| AamiClass::from_symbol(&a.symbol).is_some())
    }
}
