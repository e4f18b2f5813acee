//! Dataset indexing per task and the synthetic two-class corpus.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use elp_core::ingest::{
    parse_csv_record, parse_wfdb_annotations, read_wfdb_record, write_record_csv, write_wfdb_record, AamiClass,
    EcgRecord, IngestManifest, SignalFormat,
};
use elp_core::synth::{generate_named, BeatTemplate, Bump, SynthSpec};

use crate::config::{derive_seed, PipelineConfig, SynthConfig, Task};

pub const LABELS_FILE: &str = "REFERENCE.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum RecordSource {
    Wfdb { dir: PathBuf, name: String },
    Csv { path: PathBuf, fs: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub id: String,
    pub source: RecordSource,
    /// Record-level class for record-labelled tasks.
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub task: Task,
    pub class_names: Vec<String>,
    pub records: Vec<RecordEntry>,
    pub summary: IngestManifest,
}

impl DatasetIndex {
    pub fn load_record(&self, entry: &RecordEntry, cfg: &PipelineConfig) -> Result<EcgRecord> {
        match &entry.source {
            RecordSource::Wfdb { dir, name } => read_wfdb_record(dir, name, Some(&cfg.data.annotation_ext))
                .with_context(|| format!("reading WFDB record {name} in {}", dir.display())),
            RecordSource::Csv { path, fs } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_csv_record(&text, *fs, &entry.id).with_context(|| format!("parsing {}", path.display()))
            }
        }
    }
}

/// The two synthetic classes: upright QRS with a small T wave, and an
/// inverted QRS with a taller T wave.
pub fn synth_templates() -> [BeatTemplate; 2] {
    let normal = BeatTemplate::default();
    let inverted = BeatTemplate {
        qrs: Bump {
            amplitude: -normal.qrs.amplitude,
            ..normal.qrs
        },
        t: Bump {
            amplitude: 2.0 * normal.t.amplitude,
            ..normal.t
        },
        ..normal.clone()
    };
    [normal, inverted]
}

/// Writes `n` synthetic WFDB records (alternating classes), a labels
/// file, and CSV dumps of every record under `dir/csv`. Returns
/// `(record id, class)` pairs.
pub fn write_synth_dataset(cfg: &SynthConfig, seed: u64, dir: &Path) -> Result<Vec<(String, usize)>> {
    std::fs::create_dir_all(dir.join("csv"))?;
    let templates = synth_templates();
    let names = Task::Synth.class_names();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth", 0));
    let mut out = Vec::with_capacity(cfg.records);
    let mut labels = csv::Writer::from_path(dir.join(LABELS_FILE))?;
    for i in 0..cfg.records {
        let class = i % 2;
        let bpm = if cfg.bpm.1 > cfg.bpm.0 {
            rng.random_range(cfg.bpm.0..cfg.bpm.1)
        } else {
            cfg.bpm.0
        };
        let spec = SynthSpec {
            fs: cfg.fs,
            duration_s: cfg.duration_s,
            bpm,
            rr_jitter: cfg.rr_jitter,
            templates: vec![templates[class].clone()],
            class_weights: vec![1.0],
            snr_db: cfg.snr_db,
            seed: derive_seed(seed, "synth-record", i as u64),
        };
        let id = format!("s{i:04}");
        let rec = generate_named(&spec, &id)?;
        write_wfdb_record(dir, &rec.record, SignalFormat::Format16)?;
        let dump = std::fs::File::create(dir.join("csv").join(format!("{id}.csv")))?;
        write_record_csv(&rec.record, std::io::BufWriter::new(dump))?;
        labels.write_record([id.as_str(), names[class].as_str()])?;
        out.push((id, class));
    }
    labels.flush()?;
    Ok(out)
}

/// `id,label` rows; a first row whose label is not a class name is a header.
pub fn read_labels(path: &Path, class_names: &[String]) -> Result<Vec<(String, usize)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening labels {}", path.display()))?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.with_context(|| format!("{} row {}", path.display(), i + 1))?;
        if row.len() < 2 {
            bail!("{} row {}: expected `id,label`", path.display(), i + 1);
        }
        match class_names.iter().position(|c| c == &row[1]) {
            Some(c) => out.push((row[0].to_string(), c)),
            None if i == 0 => continue,
            None => bail!(
                "{} row {}: unknown label {:?} (expected one of {:?})",
                path.display(),
                i + 1,
                &row[1],
                class_names
            ),
        }
    }
    Ok(out)
}

/// Record names from a `RECORDS` file, else from the `.hea` files present.
fn wfdb_records(dir: &Path) -> Result<Vec<String>> {
    let listing = dir.join("RECORDS");
    let mut names: Vec<String> = if listing.is_file() {
        std::fs::read_to_string(&listing)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        let mut v = Vec::new();
        for e in std::fs::read_dir(dir)? {
            let p = e?.path();
            if p.extension().is_some_and(|x| x == "hea") {
                if let Some(stem) = p.file_stem() {
                    v.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        v
    };
    names.sort();
    names.dedup();
    if names.is_empty() {
        bail!("no WFDB records in {}", dir.display());
    }
    Ok(names)
}

/// Indexes the dataset at `dir` for the configured task.
pub fn ingest(cfg: &PipelineConfig, dir: &Path) -> Result<DatasetIndex> {
    let task = cfg.task;
    let class_names = task.class_names();
    let keep = |id: &str| cfg.data.records.as_ref().is_none_or(|r| r.iter().any(|x| x == id));
    let mut summary = IngestManifest {
        task: task.name().into(),
        class_names: class_names.clone(),
        ..Default::default()
    };
    let mut records = Vec::new();
    match task {
        Task::Synth | Task::Challenge2017 => {
            let labels_path = cfg.data.labels.clone().unwrap_or_else(|| dir.join(LABELS_FILE));
            for (id, label) in read_labels(&labels_path, &class_names)? {
                if !keep(&id) {
                    continue;
                }
                let source = if task == Task::Synth {
                    RecordSource::Wfdb {
                        dir: dir.to_path_buf(),
                        name: id.clone(),
                    }
                } else {
                    RecordSource::Csv {
                        path: dir.join(format!("{id}.csv")),
                        fs: cfg.data.csv_fs,
                    }
                };
                let exists = match &source {
                    RecordSource::Wfdb { dir, name } => dir.join(format!("{name}.hea")).is_file(),
                    RecordSource::Csv { path, .. } => path.is_file(),
                };
                if !exists {
                    bail!("record {id} listed in {} is missing", labels_path.display());
                }
                *summary.class_counts.entry(class_names[label].clone()).or_default() += 1;
                records.push(RecordEntry {
                    id,
                    source,
                    label: Some(label),
                });
            }
        }
        Task::Mitbih | Task::Afib5s => {
            for name in wfdb_records(dir)? {
                if !keep(&name) {
                    continue;
                }
                let ann = dir.join(format!("{name}.{}", cfg.data.annotation_ext));
                if !ann.is_file() {
                    bail!("record {name} has no annotation file {}", ann.display());
                }
                let annotations = parse_wfdb_annotations(&std::fs::read(&ann)?)
                    .with_context(|| format!("parsing {}", ann.display()))?;
                if task == Task::Mitbih {
                    for a in &annotations {
                        if let Some(c) = AamiClass::from_symbol(&a.symbol) {
                            *summary.class_counts.entry(c.name().to_string()).or_default() += 1;
                        }
                    }
                } else {
                    let changes = annotations.iter().filter(|a| a.symbol == "+").count();
                    *summary.class_counts.entry("rhythm changes".into()).or_default() += changes;
                }
                records.push(RecordEntry {
                    id: name.clone(),
                    source: RecordSource::Wfdb {
                        dir: dir.to_path_buf(),
                        name,
                    },
                    label: None,
                });
            }
        }
    }
    if records.is_empty() {
        bail!("no records selected in {}", dir.display());
    }
    summary.records = records.iter().map(|r| r.id.clone()).collect();
    log::info!("ingested {} {} records", records.len(), task.name());
    Ok(DatasetIndex {
        task,
        class_names,
        records,
        summary,
    })
}

/// Names and sizes of the files in `dir`, for stage hashing.
pub fn dir_listing(dir: &Path) -> Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let e = e?;
        let meta = e.metadata()?;
        if meta.is_file() {
            out.insert(e.file_name().to_string_lossy().into_owned(), meta.len());
        }
    }
    Ok(out)
}
