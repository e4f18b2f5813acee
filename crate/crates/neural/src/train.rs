//! Mini-batch training with Adam, L2 decay, dropout and gradient clipping.
//!
//! Each example gets its own graph. Examples are grouped into fixed-size
//! chunks that run in parallel; chunk gradients are summed in chunk order,
//! so results do not depend on the number of threads.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{argmax, Model};
use crate::params::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::Tensor;

const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation accuracy.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 25,
            batch_size: 64,
            adam: AdamConfig::default(),
            l2: 1e-5,
            clip_norm: 5.0,
            seed: 0,
            patience: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub clipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy, ties
    /// going to the lower validation loss (the last epoch when there is no
    /// validation set).
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

struct Partial {
    grads: Vec<Tensor>,
    loss: f64,
    correct: usize,
}

fn example_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
}

fn chunk_gradient(model: &Model, data: &[Example], idx: &[usize], epoch: usize, seed: u64) -> Result<Partial> {
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    let mut correct = 0;
    for &i in idx {
        let ex = &data[i];
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(seed, epoch, i));
        let mut g = Graph::new(&model.params);
        let probs = model.forward(&mut g, &ex.tokens, Some(&mut rng))?;
        if argmax(&g.value(probs).data) == ex.label {
            correct += 1;
        }
        let l = g.cross_entropy(probs, ex.label)?;
        loss += g.value(l).data[0];
        g.backward(l, &mut grads);
    }
    Ok(Partial { grads, loss, correct })
}

/// Mean cross-entropy and accuracy (percent) without dropout.
pub fn evaluate(model: &Model, data: &[Example]) -> Result<(f64, f64)> {
    let probs = predict_all(model, data.iter().map(|e| e.tokens.as_slice()).collect())?;
    let mut loss = 0.0;
    let mut correct = 0;
    for (p, e) in probs.iter().zip(data) {
        loss -= p[e.label].max(crate::graph::LOG_CLAMP).ln();
        correct += usize::from(argmax(p) == e.label);
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

pub fn predict_all(model: &Model, inputs: Vec<&[u32]>) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|t| model.predict_tokens(t)).collect()
}

pub fn train(
    mut model: Model,
    config: &TrainConfig,
    train_set: &[Example],
    val_set: &[Example],
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if config.batch_size == 0 || config.adam.lr.is_nan() || config.adam.lr < 0.0 {
        return Err(Error::InvalidArgument(
            "batch_size must be positive and lr nonnegative".into(),
        ));
    }
    let n_classes = model.spec.n_classes;
    if let Some(e) = train_set.iter().chain(val_set).find(|e| e.label >= n_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {n_classes} classes",
            e.label
        )));
    }

    let mut opt = Adam::new(config.adam, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<((f64, f64), usize, crate::params::ParamStore)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0;
        let mut clipped = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let partials: Vec<Partial> = batch
                .par_chunks(CHUNK)
                .map(|idx| chunk_gradient(&model, train_set, idx, epoch, config.seed))
                .collect::<Result<_>>()?;
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for p in &partials {
                for (g, pg) in grads.iter_mut().zip(&p.grads) {
                    g.add_assign(pg);
                }
                loss += p.loss;
                epoch_correct += p.correct;
            }
            let n = batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale(1.0 / n));
            let batch_loss = loss / n + config.l2 * model.params.l2_sum();
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            model.params.add_l2_grad(&mut grads, config.l2);
            let norm = clip_global_norm(&mut grads, config.clip_norm);
            if norm > config.clip_norm {
                clipped += 1;
                log::debug!(
                    "epoch {epoch} batch {b}: gradient norm {norm:.3} clipped to {}",
                    config.clip_norm
                );
            }
            opt.step(&mut model.params, &grads);
            epoch_loss += batch_loss * n;
        }
        let n = train_set.len() as f64;
        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (None, None)
        } else {
            let (l, a) = evaluate(&model, val_set)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / n,
            train_accuracy: 100.0 * epoch_correct as f64 / n,
            val_loss,
            val_accuracy,
            clipped_batches: clipped,
        };
        if clipped > 0 {
            log::info!("epoch {epoch}: {clipped} batches clipped at norm {}", config.clip_norm);
        }
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.2} val acc {}",
            record.train_loss,
            record.train_accuracy,
            val_accuracy.map_or("-".into(), |a| format!("{a:.2}"))
        );
        history.push(record);

        // accuracy ties go to the lower validation loss
        let score = (val_accuracy.unwrap_or(f64::NEG_INFINITY), -val_loss.unwrap_or(0.0));
        if best
            .as_ref()
            .is_none_or(|(s, _, _)| score > *s || val_accuracy.is_none())
        {
            best = Some((score, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        history,
    })
}

/// One JSON object per line.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    /// Class 0 sequences use tokens 1-2, class 1 uses tokens 3-4.
    fn separable(n: usize, seed: u64) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let base = 1 + 2 * label as u32;
                let len = rand::Rng::random_range(&mut rng, 4..=9);
                let tokens = (0..len)
                    .map(|_| base + rand::Rng::random_range(&mut rng, 0..2))
                    .collect();
                Example { tokens, label }
            })
            .collect()
    }

    fn small_cnn() -> ModelSpec {
        ModelSpec {
            embed_dim: 8,
            conv_filters: 8,
            dense: 8,
            ..ModelSpec::cnn_two_block(6, 9, 2)
        }
    }

    #[test]
    fn learns_separable_toy() {
        let data = separable(200, 1);
        let model = Model::new(small_cnn(), "h", 1, None).unwrap();
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(model, &cfg, &data, &[]).unwrap();
        let (_, acc) = evaluate(&out.model, &data).unwrap();
        assert_eq!(acc, 100.0);
        assert!(out.history.len() <= 25);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let data = separable(20, 2);
        let model = Model::new(small_cnn(), "h", 2, None).unwrap();
        let before = model.params.clone();
        let cfg = TrainConfig {
            max_epochs: 2,
            adam: AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = train(model, &cfg, &data, &[]).unwrap();
        assert_eq!(out.model.params, before);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let data = separable(40, 3);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let a = train(Model::new(small_cnn(), "h", 4, None).unwrap(), &cfg, &data, &data[..10]).unwrap();
        let b = train(Model::new(small_cnn(), "h", 4, None).unwrap(), &cfg, &data, &data[..10]).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn nan_input_aborts() {
        let data = separable(8, 4);
        let mut model = Model::new(small_cnn(), "h", 4, None).unwrap();
        model.params.tensors[1].data[0] = f64::NAN;
        let err = train(model, &TrainConfig::default(), &data, &[]).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, batch: 0, .. }));
    }

    #[test]
    fn label_out_of_range() {
        let data = vec![Example {
            tokens: vec![1],
            label: 5,
        }];
        assert!(train(
            Model::new(small_cnn(), "h", 0, None).unwrap(),
            &TrainConfig::default(),
            &data,
            &[]
        )
        .is_err());
    }

    #[test]
    fn history_json_lines() {
        let data = separable(16, 6);
        let cfg = TrainConfig {
            max_epochs: 2,
            ..Default::default()
        };
        let out = train(Model::new(small_cnn(), "h", 0, None).unwrap(), &cfg, &data, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.jsonl");
        write_history(&p, &out.history).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 2);
        assert_eq!(read_history(&p).unwrap(), out.history);
    }
}
