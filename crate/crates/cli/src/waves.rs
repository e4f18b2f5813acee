//! Detection and segmentation stages: R-peaks per record, then canonical
//! waves per beat and the labelled examples that reference them.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use elp_core::dsp::apply_filter;
use elp_core::ingest::{balance_undersample, cut_afib_segments, AamiClass, EcgRecord};
use elp_core::matrix_io::MatrixBlob;
use elp_core::qrs::detect;
use elp_core::segment::{extract_beat_tokens, extract_waves, label_beats, Beat, BeatWaves, WaveKind, WaveSegment};

use crate::config::{derive_seed, PipelineConfig, Task};
use crate::dataset::DatasetIndex;

pub const WAVES_FORMAT: &str = "elp-waves/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPeaks {
    pub id: String,
    pub channel: usize,
    pub fs: f64,
    pub peaks: Vec<usize>,
    /// Integrated-signal height of each peak relative to the record maximum.
    pub scores: Vec<f64>,
}

fn pick_channel(record: &EcgRecord, cfg: &PipelineConfig) -> usize {
    let wanted = cfg.data.channel.as_deref().or(match cfg.task {
        Task::Mitbih => Some("MLII"),
        _ => None,
    });
    wanted.and_then(|n| record.channel_by_name(n)).unwrap_or(0)
}

/// Pan-Tompkins over every record of the index.
pub fn detect_all(index: &DatasetIndex, cfg: &PipelineConfig) -> Result<Vec<RecordPeaks>> {
    index
        .records
        .par_iter()
        .map(|entry| {
            let record = index.load_record(entry, cfg)?;
            let channel = pick_channel(&record, cfg);
            let signal = record.channel(channel).expect("picked channel exists");
            let peaks =
                detect(signal, record.fs, &cfg.detect).with_context(|| format!("detecting beats in {}", entry.id))?;
            Ok(RecordPeaks {
                id: entry.id.clone(),
                channel,
                fs: record.fs,
                peaks: peaks.indices,
                scores: peaks.scores,
            })
        })
        .collect()
}

/// `record,sample_index,time_s,score` rows for every detected peak.
pub fn write_peaks_csv(peaks: &[RecordPeaks], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["record", "sample_index", "time_s", "score"])?;
    for r in peaks {
        for (&i, &score) in r.peaks.iter().zip(&r.scores) {
            w.write_record([
                r.id.clone(),
                i.to_string(),
                format!("{}", i as f64 / r.fs),
                format!("{score}"),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Describes a headerless little-endian f64 matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub file: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordWaves {
    pub id: String,
    /// Beats in temporal order; raw samples are not kept.
    pub beats: Vec<BeatWaves>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub id: String,
    pub record: usize,
    /// Half-open beat range within the record.
    pub beats: (usize, usize),
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveDataset {
    pub task: Task,
    pub class_names: Vec<String>,
    pub canonical_len: usize,
    pub records: Vec<RecordWaves>,
    pub examples: Vec<ExampleRef>,
    /// Reason → count of examples or records that were dropped.
    pub discarded: BTreeMap<String, usize>,
}

impl WaveDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn groups(&self) -> Vec<String> {
        self.examples
            .iter()
            .map(|e| self.records[e.record].id.clone())
            .collect()
    }

    pub fn example_beats(&self, i: usize) -> &[BeatWaves] {
        let e = &self.examples[i];
        &self.records[e.record].beats[e.beats.0..e.beats.1]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_names.len()];
        for e in &self.examples {
            c[e.label] += 1;
        }
        c
    }

    /// Flat exports into `dir`: `waves.csv` (record, beat, kind, start,
    /// end, row) and the canonical forms as `canonical.f64` plus its
    /// `canonical.json` sidecar. `row` is empty for MISSING waves.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("waves.csv"))?;
        w.write_record(["record", "beat", "kind", "start", "end", "row"])?;
        let mut bytes = Vec::new();
        let mut rows = 0usize;
        for r in &self.records {
            for b in &r.beats {
                for wave in &b.waves {
                    let row = match &wave.canonical {
                        Some(c) => {
                            bytes.extend(c.iter().flat_map(|v| v.to_le_bytes()));
                            rows += 1;
                            (rows - 1).to_string()
                        }
                        None => String::new(),
                    };
                    w.write_record([
                        r.id.clone(),
                        b.beat.to_string(),
                        wave.kind.name().to_string(),
                        wave.start.to_string(),
                        wave.end.to_string(),
                        row,
                    ])?;
                }
            }
        }
        w.flush()?;
        std::fs::write(dir.join("canonical.f64"), bytes)?;
        let sidecar = MatrixSidecar {
            file: "canonical.f64".into(),
            rows,
            cols: self.canonical_len,
            dtype: elp_core::matrix_io::DTYPE.into(),
            order: "row-major".into(),
        };
        std::fs::write(dir.join("canonical.json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = WaveDatasetFile {
            format: WAVES_FORMAT.into(),
            task: self.task,
            class_names: self.class_names.clone(),
            canonical_len: self.canonical_len,
            records: self
                .records
                .iter()
                .map(|r| RecordWavesFile::encode(r, self.canonical_len))
                .collect::<Result<_>>()?,
            examples: self.examples.clone(),
            discarded: self.discarded.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: WaveDatasetFile =
            serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("parsing {}", path.display()))?;
        if file.format != WAVES_FORMAT {
            bail!("{}: unsupported format {:?}", path.display(), file.format);
        }
        let records = file
            .records
            .iter()
            .map(|r| r.decode(file.canonical_len))
            .collect::<Result<Vec<_>>>()?;
        for e in &file.examples {
            let ok = records
                .get(e.record)
                .is_some_and(|r| e.beats.0 < e.beats.1 && e.beats.1 <= r.beats.len());
            if !ok || e.label >= file.class_names.len() {
                bail!("{}: example {} references missing beats or class", path.display(), e.id);
            }
        }
        Ok(Self {
            task: file.task,
            class_names: file.class_names,
            canonical_len: file.canonical_len,
            records,
            examples: file.examples,
            discarded: file.discarded,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WaveDatasetFile {
    format: String,
    task: Task,
    class_names: Vec<String>,
    canonical_len: usize,
    records: Vec<RecordWavesFile>,
    examples: Vec<ExampleRef>,
    discarded: BTreeMap<String, usize>,
}

/// Waves stored row-wise (beat-major), MISSING rows as zeros.
#[derive(Debug, Serialize, Deserialize)]
struct RecordWavesFile {
    id: String,
    r_index: Vec<usize>,
    /// Wave kinds of every beat, in order.
    layout: Vec<WaveKind>,
    bounds: Vec<(usize, usize)>,
    missing: Vec<usize>,
    canonical: MatrixBlob,
}

impl RecordWavesFile {
    fn encode(r: &RecordWaves, len: usize) -> Result<Self> {
        let layout: Vec<WaveKind> = r
            .beats
            .first()
            .map(|b| b.waves.iter().map(|w| w.kind).collect())
            .unwrap_or_default();
        let mut values = Vec::new();
        let mut bounds = Vec::new();
        let mut missing = Vec::new();
        for b in &r.beats {
            if b.waves.iter().map(|w| w.kind).ne(layout.iter().copied()) {
                bail!("record {}: beats with differing wave layouts", r.id);
            }
            for w in &b.waves {
                bounds.push((w.start, w.end));
                match &w.canonical {
                    Some(c) => values.extend_from_slice(c),
                    None => {
                        missing.push(bounds.len() - 1);
                        values.extend(std::iter::repeat_n(0.0, len));
                    }
                }
            }
        }
        Ok(Self {
            id: r.id.clone(),
            r_index: r.beats.iter().map(|b| b.r_index).collect(),
            layout,
            canonical: MatrixBlob::encode(bounds.len(), len, &values)?,
            bounds,
            missing,
        })
    }

    fn decode(&self, len: usize) -> Result<RecordWaves> {
        let values = self.canonical.decode()?;
        let per_beat = self.layout.len();
        if self.canonical.cols != len
            || self.bounds.len() != self.r_index.len() * per_beat
            || values.len() != self.bounds.len() * len
        {
            bail!("record {}: wave matrix does not match its layout", self.id);
        }
        let mut missing = vec![false; self.bounds.len()];
        for &m in &self.missing {
            *missing.get_mut(m).context("missing-wave index out of range")? = true;
        }
        let beats = self
            .r_index
            .iter()
            .enumerate()
            .map(|(b, &r)| BeatWaves {
                beat: b,
                r_index: r,
                waves: self
                    .layout
                    .iter()
                    .enumerate()
                    .map(|(j, &kind)| {
                        let row = b * per_beat + j;
                        WaveSegment {
                            kind,
                            beat: b,
                            start: self.bounds[row].0,
                            end: self.bounds[row].1,
                            raw: Vec::new(),
                            canonical: (!missing[row]).then(|| values[row * len..(row + 1) * len].to_vec()),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(RecordWaves {
            id: self.id.clone(),
            beats,
        })
    }
}

struct RecordOutcome {
    waves: RecordWaves,
    /// `(id, beat range, label)` local to the record.
    examples: Vec<(String, (usize, usize), usize)>,
    discarded: BTreeMap<String, usize>,
}

fn segment_record(
    index: &DatasetIndex,
    entry_idx: usize,
    peaks: &RecordPeaks,
    cfg: &PipelineConfig,
) -> Result<RecordOutcome> {
    let entry = &index.records[entry_idx];
    let record = index.load_record(entry, cfg)?;
    let raw = record
        .channel(peaks.channel)
        .context("channel vanished between stages")?;
    let signal = match &cfg.segment.filter {
        Some(f) => apply_filter(raw, record.fs, f)?,
        None => raw.to_vec(),
    };
    let mut discarded = BTreeMap::new();
    let mut beats = if cfg.segment.beat_tokens {
        extract_beat_tokens(
            &signal,
            record.fs,
            &peaks.peaks,
            &cfg.segment.beat_window,
            &cfg.segment.windows,
        )
    } else {
        match extract_waves(&signal, record.fs, &peaks.peaks, &cfg.segment.windows) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("{}: {e}; record skipped", entry.id);
                discarded.insert("records with too few beats".into(), 1);
                return Ok(RecordOutcome {
                    waves: RecordWaves {
                        id: entry.id.clone(),
                        beats: Vec::new(),
                    },
                    examples: Vec::new(),
                    discarded,
                });
            }
        }
    };
    for b in &mut beats {
        for w in &mut b.waves {
            w.raw = Vec::new();
        }
    }
    let r_of: Vec<usize> = beats.iter().map(|b| b.r_index).collect();
    let beats_in =
        |start: usize, end: usize| (r_of.partition_point(|&r| r < start), r_of.partition_point(|&r| r < end));

    let mut examples = Vec::new();
    match cfg.task {
        Task::Synth | Task::Challenge2017 => {
            let label = entry.label.context("record-level label missing")?;
            if beats.is_empty() {
                discarded.insert("records with no beats".into(), 1);
            } else {
                examples.push((entry.id.clone(), (0, beats.len()), label));
            }
        }
        Task::Mitbih => {
            let mut labelled: Vec<Beat> = r_of
                .iter()
                .map(|&r| Beat {
                    r_index: r,
                    start: r,
                    end: r,
                    label: None,
                })
                .collect();
            let dropped = label_beats(
                &mut labelled,
                &record.annotations,
                record.fs,
                cfg.data.beat_tolerance_ms,
                |s| AamiClass::from_symbol(s).map(AamiClass::index),
            );
            if dropped > 0 {
                discarded.insert("detected beats without a class annotation".into(), dropped);
            }
            let ctx = cfg.segment.context_beats;
            for b in labelled {
                let i = r_of.binary_search(&b.r_index).expect("beat came from this list");
                let range = (i.saturating_sub(ctx), (i + ctx + 1).min(beats.len()));
                examples.push((format!("{}:{}", entry.id, b.r_index), range, b.label.expect("labelled")));
            }
        }
        Task::Afib5s => {
            let cut = cut_afib_segments(&record, peaks.channel, &r_of, &cfg.data.rhythm)?;
            if cut.discarded_no_beats > 0 {
                discarded.insert("segments with no beats".into(), cut.discarded_no_beats);
            }
            for ex in cut.examples {
                let range = beats_in(ex.start, ex.end);
                examples.push((format!("{}:{}", entry.id, ex.start), range, ex.label));
            }
        }
    }
    Ok(RecordOutcome {
        waves: RecordWaves {
            id: entry.id.clone(),
            beats,
        },
        examples,
        discarded,
    })
}

/// Builds the wave dataset from the ingest index and detected peaks.
pub fn build_waves(index: &DatasetIndex, peaks: &[RecordPeaks], cfg: &PipelineConfig) -> Result<WaveDataset> {
    if peaks.len() != index.records.len() || peaks.iter().zip(&index.records).any(|(p, r)| p.id != r.id) {
        bail!("detected peaks do not match the ingested records");
    }
    let outcomes = (0..index.records.len())
        .into_par_iter()
        .map(|i| segment_record(index, i, &peaks[i], cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::with_capacity(outcomes.len());
    let mut examples = Vec::new();
    let mut discarded: BTreeMap<String, usize> = BTreeMap::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        for (k, v) in o.discarded {
            *discarded.entry(k).or_default() += v;
        }
        examples.extend(o.examples.into_iter().map(|(id, beats, label)| ExampleRef {
            id,
            record: r,
            beats,
            label,
        }));
        records.push(o.waves);
    }
    if cfg.task == Task::Afib5s && cfg.data.balance {
        let before = examples.len();
        match balance_undersample(&examples, |e| e.label, derive_seed(cfg.seed, "balance", 0)) {
            Ok(kept) => examples = kept,
            Err(e) => log::warn!("not balancing: {e}"),
        }
        if before > examples.len() {
            discarded.insert("segments removed by class balancing".into(), before - examples.len());
        }
    }
    if examples.is_empty() {
        bail!("segmentation produced no labelled examples");
    }
    Ok(WaveDataset {
        task: cfg.task,
        class_names: index.class_names.clone(),
        canonical_len: cfg.segment.windows.canonical_len,
        records,
        examples,
        discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SynthConfig;
    use crate::dataset::{ingest, write_synth_dataset};

    #[test]
    fn synth_records_segment_into_one_example_each_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sc = SynthConfig {
            records: 4,
            duration_s: 6.0,
            ..Default::default()
        };
        write_synth_dataset(&sc, 1, dir.path()).unwrap();
        let cfg = PipelineConfig::default();
        let idx = ingest(&cfg, dir.path()).unwrap();
        let peaks = detect_all(&idx, &cfg).unwrap();
        assert!(peaks.iter().all(|p| (5..=10).contains(&p.peaks.len())), "{peaks:?}");
        let ds = build_waves(&idx, &peaks, &cfg).unwrap();
        assert_eq!(ds.labels(), vec![0, 1, 0, 1]);
        assert!(ds
            .examples
            .iter()
            .all(|e| e.beats.1 == ds.records[e.record].beats.len()));
        let path = dir.path().join("w.json");
        ds.save(&path).unwrap();
        assert_eq!(WaveDataset::load(&path).unwrap(), ds);
    }
}
