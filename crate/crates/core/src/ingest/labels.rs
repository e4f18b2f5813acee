use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Annotation, EcgRecord};
use crate::{Error, Result};

/// AAMI heartbeat super-groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AamiClass {
    N,
    S,
    V,
    F,
    Q,
}

impl AamiClass {
    pub const ALL: [AamiClass; 5] = [Self::N, Self::S, Self::V, Self::F, Self::Q];

    /// The 15 MIT-BIH beat symbols grouped per AAMI.
    pub const SYMBOLS: [(&'static str, AamiClass); 15] = [
        ("N", Self::N),
        ("L", Self::N),
        ("R", Self::N),
        ("e", Self::N),
        ("j", Self::N),
        ("A", Self::S),
        ("a", Self::S),
        ("J", Self::S),
        ("S", Self::S),
        ("V", Self::V),
        ("E", Self::V),
        ("F", Self::F),
        ("/", Self::Q),
        ("f", Self::Q),
        ("U", Self::Q),
    ];

    pub fn from_symbol(symbol: &str) -> Option<Self> {
        Self::SYMBOLS.iter().find(|(s, _)| *s == symbol).map(|&(_, c)| c)
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::N => "N",
            Self::S => "S",
            Self::V => "V",
            Self::F => "F",
            Self::Q => "Q",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentLabelConfig {
    pub segment_seconds: f64,
    /// Minimum fraction of positive-rhythm beats for a positive label.
    pub p_threshold: f64,
    pub positive_rhythm_label: String,
}

impl Default for SegmentLabelConfig {
    fn default() -> Self {
        Self {
            segment_seconds: 5.0,
            p_threshold: 0.5,
            positive_rhythm_label: "AFIB".into(),
        }
    }
}

impl SegmentLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_threshold) {
            return Err(Error::InvalidArgument(format!(
                "p_threshold {} outside [0, 1]",
                self.p_threshold
            )));
        }
        if self.segment_seconds.is_nan() || self.segment_seconds <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "segment_seconds must be positive, got {}",
                self.segment_seconds
            )));
        }
        Ok(())
    }

    /// The labeling rule: positive iff `positive / total >= p`.
    pub fn is_positive(&self, positive: usize, total: usize) -> bool {
        total > 0 && positive as f64 / total as f64 >= self.p_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub record_id: String,
    pub channel_index: usize,
    /// Half-open `[start, end)` sample range.
    pub start: usize,
    pub end: usize,
    pub label: usize,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentCut {
    pub examples: Vec<LabeledExample>,
    /// Full-length segments dropped because no beat fell inside them.
    pub discarded_no_beats: usize,
}

/// Rhythm label (aux text without the leading `(`) in force at `sample`.
pub fn rhythm_at(annotations: &[Annotation], sample: usize) -> Option<&str> {
    annotations
        .iter()
        .take_while(|a| a.sample <= sample)
        .filter(|a| a.symbol == "+")
        .filter_map(|a| a.aux.as_deref())
        .last()
        .map(|aux| aux.trim_start_matches('(').trim())
}

/// Cuts a record into non-overlapping segments from sample 0 and labels
/// each one by the fraction of its beats (R-peak inside the segment) that
/// fall in a positive rhythm interval. Label 1 = positive rhythm.
pub fn cut_afib_segments(
    record: &EcgRecord,
    channel: usize,
    beats: &[usize],
    config: &SegmentLabelConfig,
) -> Result<SegmentCut> {
    config.validate()?;
    let signal = record
        .channel(channel)
        .ok_or_else(|| Error::InvalidArgument(format!("record {} has no channel {channel}", record.record_id)))?;
    let seg_len = (config.segment_seconds * record.fs).round() as usize;
    if seg_len == 0 {
        return Ok(SegmentCut::default());
    }

    // rhythm changes in sample order
    let changes: Vec<(usize, bool)> = record
        .annotations
        .iter()
        .filter(|a| a.symbol == "+")
        .filter_map(|a| {
            a.aux.as_deref().map(|aux| {
                (
                    a.sample,
                    aux.trim_start_matches('(').trim() == config.positive_rhythm_label,
                )
            })
        })
        .collect();
    let positive_at = |s: usize| -> bool {
        let idx = changes.partition_point(|&(at, _)| at <= s);
        idx > 0 && changes[idx - 1].1
    };

    let mut sorted = beats.to_vec();
    sorted.sort_unstable();

    let mut cut = SegmentCut::default();
    let n_segments = signal.len() / seg_len;
    for seg in 0..n_segments {
        let (start, end) = (seg * seg_len, (seg + 1) * seg_len);
        let lo = sorted.partition_point(|&b| b < start);
        let hi = sorted.partition_point(|&b| b < end);
        let in_seg = &sorted[lo..hi];
        if in_seg.is_empty() {
            cut.discarded_no_beats += 1;
            continue;
        }
        let positive = in_seg.iter().filter(|&&b| positive_at(b)).count();
        cut.examples.push(LabeledExample {
            record_id: record.record_id.clone(),
            channel_index: channel,
            start,
            end,
            label: usize::from(config.is_positive(positive, in_seg.len())),
            payload: signal[start..end].to_vec(),
        });
    }
    Ok(cut)
}

/// Undersamples every class to the minority-class count, uniformly without
/// replacement. Output keeps input order and is a subset of the input.
pub fn balance_undersample<T: Clone>(items: &[T], label: impl Fn(&T) -> usize, seed: u64) -> Result<Vec<T>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        by_class.entry(label(item)).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "balancing needs at least 2 classes, found {}",
            by_class.len()
        )));
    }
    let min = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(min * by_class.len());
    for members in by_class.values() {
        let picked = rand::seq::index::sample(&mut rng, members.len(), min);
        keep.extend(picked.iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| items[i].clone()).collect())
}

/// Summary written next to ingested datasets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestManifest {
    pub task: String,
    pub records: Vec<String>,
    pub class_names: Vec<String>,
    pub class_counts: BTreeMap<String, usize>,
    pub discarded: BTreeMap<String, usize>,
}
