//! Cross-validated experiment: per fold, the vocabulary, the skip-gram
//! embedding and the classifier are fit on the training part only.

use std::collections::BTreeSet;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use elp_core::embed::{skipgram_train, EmbeddingMatrix};
use elp_core::metrics::{group_kfold_split, kfold_split, ConfusionMatrix, EvalReport, FoldReport, FoldStatus};
use elp_core::segment::WaveKind;
use elp_core::vocab::{PadPolicy, TokenSequence, WaveVocabulary};
use elp_neural::model::argmax;
use elp_neural::train::{predict_all, EpochRecord};
use elp_neural::{train, Example, Model};

use crate::config::{derive_seed, PipelineConfig};
use crate::waves::WaveDataset;

/// Everything fit on one training set.
#[derive(Debug, Clone)]
pub struct FittedPipeline {
    pub vocabulary: WaveVocabulary,
    pub embedding: Option<EmbeddingMatrix>,
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Canonical waves of every distinct beat referenced by `examples`,
/// subsampled (seeded) to `vocab.max_waves`.
pub fn training_waves(
    ds: &WaveDataset,
    examples: &[usize],
    cfg: &PipelineConfig,
    seed: u64,
) -> Vec<(WaveKind, Vec<f64>)> {
    let beats: BTreeSet<(usize, usize)> = examples
        .iter()
        .flat_map(|&i| {
            let e = &ds.examples[i];
            (e.beats.0..e.beats.1).map(move |b| (e.record, b))
        })
        .collect();
    let mut waves: Vec<(WaveKind, Vec<f64>)> = beats
        .into_iter()
        .flat_map(|(r, b)| ds.records[r].beats[b].waves.iter())
        .filter_map(|w| w.canonical.clone().map(|c| (w.kind, c)))
        .collect();
    if let Some(cap) = cfg.vocab.max_waves {
        if waves.len() > cap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut keep = rand::seq::index::sample(&mut rng, waves.len(), cap).into_vec();
            keep.sort_unstable();
            waves = keep
                .into_iter()
                .map(|i| (waves[i].0, std::mem::take(&mut waves[i].1)))
                .collect();
        }
    }
    waves
}

pub fn fit_vocabulary(ds: &WaveDataset, examples: &[usize], cfg: &PipelineConfig, seed: u64) -> Result<WaveVocabulary> {
    let waves = training_waves(ds, examples, cfg, derive_seed(seed, "vocab-sample", 0));
    let km = cfg.kmeans_config(derive_seed(seed, "kmeans", 0));
    let eps = cfg.segment.windows.eps;
    let vocab = if cfg.vocab.per_kind {
        let kinds: BTreeSet<WaveKind> = waves.iter().map(|w| w.0).collect();
        let ks: Vec<(WaveKind, usize)> = kinds.into_iter().map(|k| (k, cfg.vocab.k)).collect();
        WaveVocabulary::fit_per_kind(&waves, &ks, &km, eps)?
    } else {
        let flat: Vec<Vec<f64>> = waves.into_iter().map(|w| w.1).collect();
        if flat.len() < cfg.vocab.k {
            bail!("only {} training waves for k = {}", flat.len(), cfg.vocab.k);
        }
        WaveVocabulary::fit(&flat, &km, eps)?
    };
    Ok(vocab)
}

pub fn tokenize_examples(
    ds: &WaveDataset,
    vocab: &WaveVocabulary,
    examples: &[usize],
    max_len: usize,
) -> Result<Vec<TokenSequence>> {
    examples
        .iter()
        .map(|&i| {
            let e = &ds.examples[i];
            Ok(vocab.tokenize(
                e.id.clone(),
                ds.example_beats(i),
                Some(e.label),
                max_len,
                PadPolicy::PadToMax,
            )?)
        })
        .collect()
}

fn to_examples(seqs: &[TokenSequence]) -> Vec<Example> {
    seqs.iter()
        .map(|s| Example {
            tokens: s.tokens.clone(),
            label: s.label.expect("tokenized with a label"),
        })
        .collect()
}

/// Seeded per-class split of `indices` into (fit, validation).
pub fn holdout(labels: &[usize], indices: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes: BTreeSet<usize> = indices.iter().map(|&i| labels[i]).collect();
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for c in classes {
        let mut members: Vec<usize> = indices.iter().copied().filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        let n_val = (fraction * members.len() as f64).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        fit.extend_from_slice(&members[n_val..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (fit, val)
}

/// Fits vocabulary, embedding and classifier on `train_idx`.
pub fn fit_pipeline(ds: &WaveDataset, train_idx: &[usize], cfg: &PipelineConfig, seed: u64) -> Result<FittedPipeline> {
    let vocabulary = fit_vocabulary(ds, train_idx, cfg, seed).context("fitting the wave vocabulary")?;
    let max_len = cfg.max_len();
    let labels = ds.labels();
    let (fit_idx, val_idx) = holdout(
        &labels,
        train_idx,
        cfg.train.val_fraction,
        derive_seed(seed, "holdout", 0),
    );
    let fit_seqs = tokenize_examples(ds, &vocabulary, &fit_idx, max_len)?;
    let val_seqs = tokenize_examples(ds, &vocabulary, &val_idx, max_len)?;

    let embedding = if cfg.embed.pretrain {
        let sg = cfg.skipgram_config(derive_seed(seed, "skipgram", 0));
        let fitted = skipgram_train(&fit_seqs, vocabulary.size(), &vocabulary.training_hash, &sg)
            .context("training skip-gram embeddings")?;
        Some(fitted.embedding)
    } else {
        None
    };
    let spec = cfg.model_spec(vocabulary.size(), ds.class_names.len());
    let model = Model::new(
        spec,
        vocabulary.training_hash.clone(),
        derive_seed(seed, "model-init", 0),
        embedding.as_ref(),
    )?;
    let tc = cfg.train_config(derive_seed(seed, "train", 0));
    let outcome =
        train(model, &tc, &to_examples(&fit_seqs), &to_examples(&val_seqs)).context("training the classifier")?;
    Ok(FittedPipeline {
        vocabulary,
        embedding,
        model: outcome.model,
        best_epoch: outcome.best_epoch,
        history: outcome.history,
    })
}

pub fn predict_examples(
    ds: &WaveDataset,
    fitted: &FittedPipeline,
    examples: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let seqs = tokenize_examples(ds, &fitted.vocabulary, examples, max_len)?;
    let probs = predict_all(&fitted.model, seqs.iter().map(|s| s.tokens.as_slice()).collect())?;
    Ok(probs.iter().map(|p| argmax(p)).collect())
}

fn run_fold(
    ds: &WaveDataset,
    cfg: &PipelineConfig,
    fold: usize,
    train_idx: &[usize],
    test_idx: &[usize],
) -> Result<ConfusionMatrix> {
    let seed = derive_seed(cfg.seed, "fold", fold as u64);
    let fitted = fit_pipeline(ds, train_idx, cfg, seed)?;
    let predicted = predict_examples(ds, &fitted, test_idx, cfg.max_len())?;
    let actual: Vec<usize> = test_idx.iter().map(|&i| ds.examples[i].label).collect();
    let m = ConfusionMatrix::from_predictions(ds.class_names.clone(), &actual, &predicted)?;
    log::info!(
        "fold {fold}: best epoch {}, test accuracy {:.2}%",
        fitted.best_epoch,
        m.accuracy().unwrap_or(0.0)
    );
    Ok(m)
}

/// k-fold cross-validation with pooled (summed) confusion matrices. A
/// failing fold is reported and marks the report partial.
pub fn run_experiment(ds: &WaveDataset, cfg: &PipelineConfig) -> Result<EvalReport> {
    let k = cfg.folds();
    let split_seed = derive_seed(cfg.seed, "folds", 0);
    let folds = if cfg.eval.by_record {
        group_kfold_split(&ds.groups(), k, split_seed)?
    } else {
        kfold_split(&ds.labels(), k, split_seed, cfg.eval.stratified)?
    };
    let reports: Vec<FoldReport> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            let (status, confusion) = match run_fold(ds, cfg, i, &f.train, &f.test) {
                Ok(m) => (FoldStatus::Ok, Some(m)),
                Err(e) => {
                    log::error!("fold {i} failed: {e:#}");
                    (
                        FoldStatus::Failed {
                            error: format!("{e:#}"),
                        },
                        None,
                    )
                }
            };
            FoldReport {
                fold: i,
                status,
                n_train: f.train.len(),
                n_test: f.test.len(),
                confusion,
            }
        })
        .collect();
    Ok(EvalReport::assemble(
        cfg.task.name(),
        cfg.fingerprint(),
        ds.class_names.clone(),
        reports,
    )?)
}
