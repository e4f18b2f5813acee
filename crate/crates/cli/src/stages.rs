//! One function per `elp` command. Each resolves its upstream artifacts
//! through the manifest, skips work whose hash is already recorded, and
//! records what it wrote.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use elp_core::embed::skipgram_train;
use elp_core::metrics::EvalReport;
use elp_core::vocab::{export_cluster_gallery, gallery_samples, TokenSequence, WaveVocabulary};
use elp_neural::checkpoint::save_checkpoint;
use elp_neural::train::write_history;
use elp_neural::{train, Example, Model};

use crate::config::{derive_seed, PipelineConfig, Task};
use crate::dataset::{dir_listing, ingest, write_synth_dataset, DatasetIndex, LABELS_FILE};
use crate::experiment::{fit_vocabulary, holdout, run_experiment, tokenize_examples};
use crate::manifest::{now_unix, stage_hash, ManifestEntry, StageRef, Store};
use crate::waves::{build_waves, detect_all, write_peaks_csv, RecordPeaks, WaveDataset};

pub const SYNTH: &str = "synth";
pub const INGEST: &str = "ingest";
pub const DETECT: &str = "detect";
pub const SEGMENT: &str = "segment";
pub const BUILD_VOCAB: &str = "build-vocab";
pub const TOKENIZE: &str = "tokenize";
pub const TRAIN: &str = "train";
pub const EVALUATE: &str = "evaluate";
pub const GALLERY: &str = "gallery";

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: &'static str,
    pub hash: String,
    pub artifact: PathBuf,
    /// The recorded artifact was reused without recomputation.
    pub reused: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenCorpus {
    pub class_names: Vec<String>,
    pub vocab_hash: String,
    pub vocab_size: usize,
    pub max_len: usize,
    pub sequences: Vec<TokenSequence>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub store: Store,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_slice(&std::fs::read(path)?).with_context(|| format!("parsing {}", path.display()))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let store = Store::new(cfg.out_dir.clone());
        Self { cfg, store }
    }

    fn synth_hash(&self) -> String {
        stage_hash(SYNTH, &(&self.cfg.synth, self.cfg.seed), &[])
    }

    /// Dataset directory and, for generated data, the synth stage it came from.
    fn data_source(&self) -> Result<(PathBuf, Option<StageRef>)> {
        match &self.cfg.data.dir {
            Some(d) => Ok((d.clone(), None)),
            None => {
                let hash = self.synth_hash();
                let e = self.store.require(SYNTH, &hash)?;
                let dir = self
                    .store
                    .artifact_path(&e)
                    .parent()
                    .expect("artifact in a stage dir")
                    .to_path_buf();
                Ok((
                    dir,
                    Some(StageRef {
                        stage: SYNTH.into(),
                        hash,
                    }),
                ))
            }
        }
    }

    fn ingest_hash(&self) -> Result<(String, PathBuf, Vec<StageRef>)> {
        let (dir, upstream) = self.data_source()?;
        let listing = dir_listing(&dir)?;
        let mut parts = vec![];
        if let Some(u) = &upstream {
            parts.push(u.hash.as_str());
        }
        let hash = stage_hash(INGEST, &(self.cfg.task, &self.cfg.data, &listing), &parts);
        Ok((hash, dir, upstream.into_iter().collect()))
    }

    fn detect_hash(&self) -> Result<(String, String)> {
        let (up, _, _) = self.ingest_hash()?;
        Ok((stage_hash(DETECT, &self.cfg.detect, &[&up]), up))
    }

    fn segment_hash(&self) -> Result<(String, String)> {
        let (up, _) = self.detect_hash()?;
        let slice = (&self.cfg.segment, self.cfg.max_len(), &self.cfg.data, self.cfg.seed);
        Ok((stage_hash(SEGMENT, &slice, &[&up]), up))
    }

    fn vocab_hash(&self) -> Result<(String, String)> {
        let (up, _) = self.segment_hash()?;
        Ok((stage_hash(BUILD_VOCAB, &(&self.cfg.vocab, self.cfg.seed), &[&up]), up))
    }

    fn tokenize_hash(&self) -> Result<(String, [String; 2])> {
        let (vocab, segment) = self.vocab_hash()?;
        let h = stage_hash(TOKENIZE, &self.cfg.max_len(), &[&vocab, &segment]);
        Ok((h, [vocab, segment]))
    }

    fn train_hash(&self) -> Result<(String, String)> {
        let (up, _) = self.tokenize_hash()?;
        let c = &self.cfg;
        let slice = (&c.embed, &c.model, &c.train, c.seed);
        Ok((stage_hash(TRAIN, &slice, &[&up]), up))
    }

    fn evaluate_hash(&self) -> Result<(String, String)> {
        let (up, _) = self.segment_hash()?;
        let c = &self.cfg;
        let slice = (
            &c.vocab,
            &c.embed,
            &c.model,
            &c.train,
            &c.eval,
            c.folds(),
            c.max_len(),
            c.seed,
        );
        Ok((stage_hash(EVALUATE, &slice, &[&up]), up))
    }

    fn entry(&self, stage: &str, hash: &str, inputs: Vec<StageRef>, started: u64) -> ManifestEntry {
        ManifestEntry {
            stage: stage.into(),
            hash: hash.into(),
            config_fingerprint: self.cfg.fingerprint(),
            inputs,
            artifact: PathBuf::new(),
            artifact_sha256: String::new(),
            started_unix: started,
            finished_unix: now_unix(),
        }
    }

    /// Runs `work` into a fresh stage directory unless `(stage, hash)` is
    /// already recorded. `work` returns the main artifact path.
    fn run_stage(
        &self,
        stage: &'static str,
        hash: &str,
        inputs: Vec<StageRef>,
        work: impl FnOnce(&Path) -> Result<PathBuf>,
    ) -> Result<StageOutcome> {
        if let Some(e) = self.store.lookup(stage, hash)? {
            log::info!("{stage}: up to date ({hash})");
            return Ok(StageOutcome {
                stage,
                hash: hash.into(),
                artifact: self.store.artifact_path(&e),
                reused: true,
            });
        }
        let started = now_unix();
        let dir = self.store.stage_dir(stage, hash);
        std::fs::create_dir_all(&dir)?;
        let artifact = work(&dir).with_context(|| format!("stage `{stage}` failed"))?;
        let e = self.store.record(self.entry(stage, hash, inputs, started), &artifact)?;
        log::info!("{stage}: wrote {}", e.artifact.display());
        Ok(StageOutcome {
            stage,
            hash: hash.into(),
            artifact,
            reused: false,
        })
    }

    fn input(stage: &str, hash: &str) -> StageRef {
        StageRef {
            stage: stage.into(),
            hash: hash.into(),
        }
    }

    fn artifact(&self, stage: &str, hash: &str) -> Result<PathBuf> {
        Ok(self.store.artifact_path(&self.store.require(stage, hash)?))
    }

    pub fn synth(&self) -> Result<StageOutcome> {
        let hash = self.synth_hash();
        self.run_stage(SYNTH, &hash, Vec::new(), |dir| {
            write_synth_dataset(&self.cfg.synth, self.cfg.seed, dir)?;
            Ok(dir.join(LABELS_FILE))
        })
    }

    pub fn ingest(&self) -> Result<StageOutcome> {
        let (hash, dir, inputs) = self.ingest_hash()?;
        self.run_stage(INGEST, &hash, inputs, |out| {
            let index = ingest(&self.cfg, &dir)?;
            let path = out.join("dataset.json");
            write_json(&path, &index)?;
            Ok(path)
        })
    }

    pub fn detect(&self) -> Result<StageOutcome> {
        let (hash, up) = self.detect_hash()?;
        let index_path = self.artifact(INGEST, &up)?;
        self.run_stage(DETECT, &hash, vec![Self::input(INGEST, &up)], |out| {
            let index: DatasetIndex = read_json(&index_path)?;
            let peaks = detect_all(&index, &self.cfg)?;
            let path = out.join("peaks.json");
            write_json(&path, &peaks)?;
            write_peaks_csv(&peaks, &out.join("peaks.csv"))?;
            Ok(path)
        })
    }

    pub fn segment(&self) -> Result<StageOutcome> {
        let (hash, up) = self.segment_hash()?;
        let peaks_path = self.artifact(DETECT, &up)?;
        let (ingest_hash, _, _) = self.ingest_hash()?;
        let index_path = self.artifact(INGEST, &ingest_hash)?;
        self.run_stage(SEGMENT, &hash, vec![Self::input(DETECT, &up)], |out| {
            let index: DatasetIndex = read_json(&index_path)?;
            let peaks: Vec<RecordPeaks> = read_json(&peaks_path)?;
            let ds = build_waves(&index, &peaks, &self.cfg)?;
            log::info!(
                "{} examples, class counts {:?}, discarded {:?}",
                ds.examples.len(),
                ds.class_counts(),
                ds.discarded
            );
            let path = out.join("waves.json");
            ds.save(&path)?;
            ds.export(out)?;
            Ok(path)
        })
    }

    fn load_waves(&self) -> Result<WaveDataset> {
        let (hash, _) = self.segment_hash()?;
        WaveDataset::load(&self.artifact(SEGMENT, &hash)?)
    }

    /// Vocabulary over every example (the standalone, non-CV path).
    pub fn build_vocab(&self) -> Result<StageOutcome> {
        let (hash, up) = self.vocab_hash()?;
        let ds = self.load_waves()?;
        self.run_stage(BUILD_VOCAB, &hash, vec![Self::input(SEGMENT, &up)], |out| {
            let all: Vec<usize> = (0..ds.examples.len()).collect();
            let vocab = fit_vocabulary(&ds, &all, &self.cfg, derive_seed(self.cfg.seed, "vocab", 0))?;
            let path = out.join("vocabulary.json");
            vocab.save(&path)?;
            Ok(path)
        })
    }

    pub fn tokenize(&self) -> Result<StageOutcome> {
        let (hash, [vocab_hash, segment_hash]) = self.tokenize_hash()?;
        let vocab_path = self.artifact(BUILD_VOCAB, &vocab_hash)?;
        let inputs = vec![
            Self::input(BUILD_VOCAB, &vocab_hash),
            Self::input(SEGMENT, &segment_hash),
        ];
        self.run_stage(TOKENIZE, &hash, inputs, |out| {
            let ds = self.load_waves()?;
            let vocab = WaveVocabulary::load(&vocab_path)?;
            let all: Vec<usize> = (0..ds.examples.len()).collect();
            let corpus = TokenCorpus {
                class_names: ds.class_names.clone(),
                vocab_hash: vocab.training_hash.clone(),
                vocab_size: vocab.size(),
                max_len: self.cfg.max_len(),
                sequences: tokenize_examples(&ds, &vocab, &all, self.cfg.max_len())?,
            };
            let path = out.join("tokens.json");
            write_json(&path, &corpus)?;
            Ok(path)
        })
    }

    /// One classifier over the whole token corpus, with the seeded
    /// validation holdout used for model selection.
    pub fn train(&self) -> Result<StageOutcome> {
        let (hash, up) = self.train_hash()?;
        let tokens_path = self.artifact(TOKENIZE, &up)?;
        self.run_stage(TRAIN, &hash, vec![Self::input(TOKENIZE, &up)], |out| {
            let corpus: TokenCorpus = read_json(&tokens_path)?;
            let labels: Vec<usize> = corpus.sequences.iter().map(|s| s.label.unwrap_or(0)).collect();
            let all: Vec<usize> = (0..labels.len()).collect();
            let seed = derive_seed(self.cfg.seed, "train-stage", 0);
            let (fit, val) = holdout(
                &labels,
                &all,
                self.cfg.train.val_fraction,
                derive_seed(seed, "holdout", 0),
            );
            let pick = |idx: &[usize]| -> Vec<Example> {
                idx.iter()
                    .map(|&i| Example {
                        tokens: corpus.sequences[i].tokens.clone(),
                        label: labels[i],
                    })
                    .collect()
            };
            let embedding = if self.cfg.embed.pretrain {
                let fit_seqs: Vec<TokenSequence> = fit.iter().map(|&i| corpus.sequences[i].clone()).collect();
                let sg = self.cfg.skipgram_config(derive_seed(seed, "skipgram", 0));
                let e = skipgram_train(&fit_seqs, corpus.vocab_size, &corpus.vocab_hash, &sg)?.embedding;
                e.save(&out.join("embedding.json"))?;
                Some(e)
            } else {
                None
            };
            let spec = self.cfg.model_spec(corpus.vocab_size, corpus.class_names.len());
            let model = Model::new(
                spec,
                corpus.vocab_hash.clone(),
                derive_seed(seed, "model-init", 0),
                embedding.as_ref(),
            )?;
            let tc = self.cfg.train_config(derive_seed(seed, "train", 0));
            let outcome = train(model, &tc, &pick(&fit), &pick(&val))?;
            write_history(&out.join("history.jsonl"), &outcome.history)?;
            Ok(save_checkpoint(&outcome.model, out, "model")?)
        })
    }

    /// The full cross-validated experiment. Returns the report alongside
    /// the stage outcome.
    pub fn evaluate(&self) -> Result<(StageOutcome, EvalReport)> {
        let (hash, up) = self.evaluate_hash()?;
        let outcome = self.run_stage(EVALUATE, &hash, vec![Self::input(SEGMENT, &up)], |out| {
            let ds = self.load_waves()?;
            let report = run_experiment(&ds, &self.cfg)?;
            std::fs::write(out.join("report.txt"), report.render_table())?;
            let path = out.join("report.json");
            std::fs::write(&path, report.to_json()?)?;
            Ok(path)
        })?;
        let report = EvalReport::from_json(&std::fs::read_to_string(&outcome.artifact)?)?;
        Ok((outcome, report))
    }

    pub fn gallery(&self, per_cluster: usize) -> Result<StageOutcome> {
        let (vocab_hash, segment_hash) = self.vocab_hash()?;
        let vocab_path = self.artifact(BUILD_VOCAB, &vocab_hash)?;
        let hash = stage_hash(GALLERY, &(per_cluster, self.cfg.seed), &[&vocab_hash]);
        let inputs = vec![
            Self::input(BUILD_VOCAB, &vocab_hash),
            Self::input(SEGMENT, &segment_hash),
        ];
        self.run_stage(GALLERY, &hash, inputs, |out| {
            let ds = self.load_waves()?;
            let vocab = WaveVocabulary::load(&vocab_path)?;
            let all: Vec<usize> = (0..ds.examples.len()).collect();
            let waves =
                crate::experiment::training_waves(&ds, &all, &self.cfg, derive_seed(self.cfg.seed, "gallery", 0));
            let samples = gallery_samples(&vocab, &waves, per_cluster, derive_seed(self.cfg.seed, "gallery", 1))?;
            let path = out.join("gallery.svg");
            export_cluster_gallery(&vocab, &samples, &path)?;
            Ok(path)
        })
    }

    /// Every stage in order for the configured task.
    pub fn run_all(&self) -> Result<EvalReport> {
        if self.cfg.task == Task::Synth && self.cfg.data.dir.is_none() {
            self.synth()?;
        }
        self.ingest()?;
        self.detect()?;
        self.segment()?;
        Ok(self.evaluate()?.1)
    }
}
