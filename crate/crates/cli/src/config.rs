//! Pipeline configuration. Values come from defaults, then an optional
//! TOML or JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use elp_core::dsp::FilterSpec;
use elp_core::embed::SkipGramConfig;
use elp_core::ingest::SegmentLabelConfig;
use elp_core::qrs::PanTompkinsConfig;
use elp_core::segment::{BeatWindowConfig, WaveWindowConfig};
use elp_core::vocab::KMeansConfig;
use elp_neural::params::AdamConfig;
use elp_neural::{Head, ModelSpec, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// MIT-BIH arrhythmia beats, five AAMI classes.
    Mitbih,
    /// MIT-BIH AFIB 5-s segments, AFIB vs non-AFIB.
    Afib5s,
    /// 2017 challenge recordings (CSV), four classes.
    Challenge2017,
    /// Generated two-class records.
    Synth,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mitbih => "mitbih",
            Self::Afib5s => "afib5s",
            Self::Challenge2017 => "challenge2017",
            Self::Synth => "synth",
        }
    }

    pub fn class_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            Self::Mitbih => &["N", "S", "V", "F", "Q"],
            Self::Afib5s => &["non-AFIB", "AFIB"],
            Self::Challenge2017 => &["N", "A", "O", "~"],
            Self::Synth => &["normal", "inverted"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    pub fn default_max_len(self) -> usize {
        match self {
            Self::Mitbih => 9,
            Self::Afib5s | Self::Synth => 45,
            Self::Challenge2017 => 330,
        }
    }

    pub fn default_folds(self) -> usize {
        match self {
            Self::Mitbih | Self::Afib5s => 10,
            Self::Challenge2017 | Self::Synth => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory. For `synth` it defaults to the `synth` stage output.
    pub dir: Option<PathBuf>,
    /// `id,label` file for record-labelled tasks; defaults to `<dir>/REFERENCE.csv`.
    pub labels: Option<PathBuf>,
    /// Restrict to these record ids.
    pub records: Option<Vec<String>>,
    /// Channel name to use; the first channel when absent or not found.
    pub channel: Option<String>,
    /// Sampling rate of CSV records.
    pub csv_fs: f64,
    pub annotation_ext: String,
    /// Beat annotations further than this from a detected peak are ignored.
    pub beat_tolerance_ms: f64,
    pub rhythm: SegmentLabelConfig,
    /// Undersample segment classes to the minority count (afib5s).
    pub balance: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            labels: None,
            records: None,
            channel: None,
            csv_fs: 300.0,
            annotation_ext: "atr".into(),
            beat_tolerance_ms: 150.0,
            rhythm: SegmentLabelConfig::default(),
            balance: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub records: usize,
    pub duration_s: f64,
    pub fs: f64,
    /// `None` for noiseless records.
    pub snr_db: Option<f64>,
    /// Per-record heart rate drawn uniformly from this range.
    pub bpm: (f64, f64),
    pub rr_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            records: 400,
            duration_s: 10.0,
            fs: 250.0,
            snr_db: Some(20.0),
            bpm: (60.0, 90.0),
            rr_jitter: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Applied before wave extraction; detection filters on its own.
    pub filter: Option<FilterSpec>,
    pub windows: WaveWindowConfig,
    /// One token per beat window instead of P/QRS/T.
    pub beat_tokens: bool,
    pub beat_window: BeatWindowConfig,
    /// Neighbor beats on each side of a labelled beat (mitbih).
    pub context_beats: usize,
    pub max_len: Option<usize>,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            filter: Some(FilterSpec::bandpass(0.5, 40.0, 2)),
            windows: WaveWindowConfig::default(),
            beat_tokens: false,
            beat_window: BeatWindowConfig::default(),
            context_beats: 1,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Cluster a seeded subsample when the training fold has more waves.
    pub max_waves: Option<usize>,
    /// Separate P, QRS and T clusterings of `k` each.
    pub per_kind: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            k: 20,
            restarts: 5,
            max_iter: 100,
            tol: 1e-6,
            max_waves: Some(20_000),
            per_kind: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Initialize the classifier embedding from skip-gram vectors.
    pub pretrain: bool,
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub threads: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        let sg = SkipGramConfig::default();
        Self {
            pretrain: true,
            dim: sg.dim,
            window: sg.window,
            negatives: sg.negatives,
            epochs: sg.epochs,
            lr: sg.lr,
            threads: sg.threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: Head,
    pub conv_filters: usize,
    pub kernel: usize,
    /// `(size, stride)` per conv block; task preset when absent.
    pub pools: Option<Vec<(usize, usize)>>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attention_dim: usize,
    pub dense: usize,
    pub keep_prob: f64,
    pub freeze_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ModelSpec::cnn_two_block(2, 9, 2);
        Self {
            head: Head::Cnn,
            conv_filters: s.conv_filters,
            kernel: s.kernel,
            pools: None,
            lstm_hidden: s.lstm_hidden,
            lstm_layers: s.lstm_layers,
            attention_dim: s.attention_dim,
            dense: s.dense,
            keep_prob: s.keep_prob,
            freeze_embedding: s.freeze_embedding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub clip_norm: f64,
    pub patience: Option<usize>,
    /// Seeded share of each training fold held out for model selection.
    pub val_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            l2: t.l2,
            clip_norm: t.clip_norm,
            patience: t.patience,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Task default when absent.
    pub folds: Option<usize>,
    pub stratified: bool,
    /// Keep every record's examples in one fold (inter-patient split).
    pub by_record: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            folds: None,
            stratified: true,
            by_record: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: Task,
    /// Master seed; every stage derives its own from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub detect: PanTompkinsConfig,
    pub segment: SegmentConfig,
    pub vocab: VocabConfig,
    pub embed: EmbedConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: Task::Synth,
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            detect: PanTompkinsConfig::default(),
            segment: SegmentConfig::default(),
            vocab: VocabConfig::default(),
            embed: EmbedConfig::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub task: Option<Task>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub folds: Option<usize>,
    pub head: Option<Head>,
    pub k: Option<usize>,
    pub embed_dim: Option<usize>,
    pub max_len: Option<usize>,
    pub data_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Parses a config file; `.json` as JSON, anything else as TOML.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(t) = o.task {
            self.task = t;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(f) = o.folds {
            self.eval.folds = Some(f);
        }
        if let Some(h) = o.head {
            self.model.head = h;
        }
        if let Some(k) = o.k {
            self.vocab.k = k;
        }
        if let Some(d) = o.embed_dim {
            self.embed.dim = d;
        }
        if let Some(m) = o.max_len {
            self.segment.max_len = Some(m);
        }
        if let Some(d) = &o.data_dir {
            self.data.dir = Some(d.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dir) = &self.data.dir {
            if !dir.is_dir() {
                bail!("data directory {} does not exist", dir.display());
            }
        } else if self.task != Task::Synth {
            bail!(
                "task {} needs a data directory (--data-dir or data.dir)",
                self.task.name()
            );
        }
        if let Some(labels) = &self.data.labels {
            if !labels.is_file() {
                bail!("labels file {} does not exist", labels.display());
            }
        }
        if self.vocab.k < 2 {
            bail!("vocabulary size k must be at least 2, got {}", self.vocab.k);
        }
        if self.folds() < 2 {
            bail!("need at least 2 folds, got {}", self.folds());
        }
        if self.max_len() == 0 || self.embed.dim == 0 {
            bail!("max_len and embed dim must be positive");
        }
        if !(0.0..1.0).contains(&self.train.val_fraction) {
            bail!("val_fraction {} outside [0, 1)", self.train.val_fraction);
        }
        self.data.rhythm.validate()?;
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.segment.max_len.unwrap_or_else(|| self.task.default_max_len())
    }

    pub fn folds(&self) -> usize {
        self.eval.folds.unwrap_or_else(|| self.task.default_folds())
    }

    /// Hash of the full configuration, recorded in reports and manifests.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn model_spec(&self, vocab_size: usize, n_classes: usize) -> ModelSpec {
        let m = &self.model;
        let max_len = self.max_len();
        let base = match (m.head, self.task) {
            (Head::Cnn, Task::Challenge2017) => ModelSpec::cnn_three_block(vocab_size, max_len, n_classes),
            (Head::Cnn, _) => ModelSpec::cnn_two_block(vocab_size, max_len, n_classes),
            (h, _) => ModelSpec::rnn(vocab_size, max_len, n_classes, h == Head::RnnAttention),
        };
        ModelSpec {
            embed_dim: self.embed.dim,
            conv_filters: m.conv_filters,
            kernel: m.kernel,
            pools: m.pools.clone().unwrap_or(base.pools.clone()),
            lstm_hidden: m.lstm_hidden,
            lstm_layers: m.lstm_layers,
            attention_dim: m.attention_dim,
            dense: m.dense,
            keep_prob: m.keep_prob,
            freeze_embedding: m.freeze_embedding,
            ..base
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            max_epochs: t.max_epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            l2: t.l2,
            clip_norm: t.clip_norm,
            seed,
            patience: t.patience,
        }
    }

    pub fn kmeans_config(&self, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k: self.vocab.k,
            seed,
            max_iter: self.vocab.max_iter,
            tol: self.vocab.tol,
            restarts: self.vocab.restarts,
        }
    }

    pub fn skipgram_config(&self, seed: u64) -> SkipGramConfig {
        let e = &self.embed;
        SkipGramConfig {
            dim: e.dim,
            window: e.window,
            negatives: e.negatives,
            epochs: e.epochs,
            lr: e.lr,
            seed,
            threads: e.threads,
        }
    }
}

/// First 16 bytes of the SHA-256 of the value's JSON form, as hex.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex16(&Sha256::digest(bytes))
}

pub(crate) fn hex16(digest: &[u8]) -> String {
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent per-purpose seed derived from the master seed.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
