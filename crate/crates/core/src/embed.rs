//! Token vectorization: bag-of-tokens counts and skip-gram embeddings.
//!
//! Skip-gram uses negative sampling with a unigram^0.75 noise distribution.
//! Training runs lock-free over shared atomic weights; with one thread the
//! result is bit-for-bit reproducible.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::matrix_io::MatrixBlob;
use crate::vocab::{TokenSequence, PAD};
use crate::{Error, Result};

/// Bag-of-tokens counts, PAD excluded. With `l1` each row sums to 1
/// (rows with no tokens stay zero).
pub fn count_vectorize(seqs: &[TokenSequence], vocab_size: usize, l1: bool) -> Result<Vec<Vec<f64>>> {
    seqs.iter()
        .map(|s| {
            let mut row = vec![0.0; vocab_size];
            for t in s.content() {
                let slot = row
                    .get_mut(t as usize)
                    .ok_or_else(|| Error::InvalidArgument(format!("token {t} outside vocabulary of {vocab_size}")))?;
                *slot += 1.0;
            }
            if l1 {
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    row.iter_mut().for_each(|v| *v /= total);
                }
            }
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// `1` gives a deterministic run.
    pub threads: usize,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            window: 2,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub vocab_size: usize,
    pub dim: usize,
    /// Row-major `vocab_size x dim`; row 0 (PAD) is zero.
    pub weights: Vec<f64>,
    pub vocab_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramFit {
    pub embedding: EmbeddingMatrix,
    /// Mean pair loss per epoch.
    pub loss_history: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sigmoid(x: f64) -> f64 {
    // stable for large |x|
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of one skip-gram pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub center: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

/// Loss `-log σ(u_o·v_c) - Σ log σ(-u_k·v_c)` and its gradients with
/// respect to the center vector, the context vector and each negative.
pub fn pair_loss_and_grad(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> PairGrad {
    let s = dot(context, center);
    let mut loss = -log_sigmoid(s);
    let g = sigmoid(s) - 1.0;
    let mut d_center: Vec<f64> = context.iter().map(|u| g * u).collect();
    let d_context: Vec<f64> = center.iter().map(|v| g * v).collect();
    let mut d_negs = Vec::with_capacity(negatives.len());
    for u in negatives {
        let s = dot(u, center);
        loss -= log_sigmoid(-s);
        let g = sigmoid(s);
        for (d, x) in d_center.iter_mut().zip(u.iter()) {
            *d += g * x;
        }
        d_negs.push(center.iter().map(|v| g * v).collect());
    }
    PairGrad {
        loss,
        center: d_center,
        context: d_context,
        negatives: d_negs,
    }
}

struct SharedMatrix {
    dim: usize,
    cells: Vec<AtomicU64>,
}

impl SharedMatrix {
    fn new(values: Vec<f64>, dim: usize) -> Self {
        Self {
            dim,
            cells: values.into_iter().map(|v| AtomicU64::new(v.to_bits())).collect(),
        }
    }

    fn row(&self, r: usize) -> Vec<f64> {
        self.cells[r * self.dim..(r + 1) * self.dim]
            .iter()
            .map(|c| f64::from_bits(c.load(Ordering::Relaxed)))
            .collect()
    }

    fn add_row(&self, r: usize, delta: &[f64], scale: f64) {
        for (c, d) in self.cells[r * self.dim..(r + 1) * self.dim].iter().zip(delta) {
            let v = f64::from_bits(c.load(Ordering::Relaxed));
            c.store((v + scale * d).to_bits(), Ordering::Relaxed);
        }
    }

    fn into_vec(self) -> Vec<f64> {
        self.cells.into_iter().map(|c| f64::from_bits(c.into_inner())).collect()
    }
}

/// Seeded initial input weights: uniform in `±0.5/dim`, PAD row zero.
pub fn skipgram_init(vocab_size: usize, config: &SkipGramConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let half = 0.5 / config.dim as f64;
    let mut w: Vec<f64> = (0..vocab_size * config.dim)
        .map(|_| rng.random_range(-half..=half))
        .collect();
    w[PAD as usize * config.dim..(PAD as usize + 1) * config.dim].fill(0.0);
    w
}

pub fn skipgram_train(
    seqs: &[TokenSequence],
    vocab_size: usize,
    vocab_hash: &str,
    config: &SkipGramConfig,
) -> Result<SkipGramFit> {
    if config.dim == 0 || config.window == 0 || config.threads == 0 {
        return Err(Error::InvalidArgument(
            "dim, window and threads must be positive".into(),
        ));
    }
    let corpus: Vec<Vec<usize>> = seqs.iter().map(|s| s.content().map(|t| t as usize).collect()).collect();
    let mut counts = vec![0u64; vocab_size];
    for &t in corpus.iter().flatten() {
        *counts
            .get_mut(t)
            .ok_or_else(|| Error::InvalidArgument(format!("token {t} outside vocabulary of {vocab_size}")))? += 1;
    }
    let distinct = counts.iter().filter(|&&c| c > 0).count();
    if distinct < 2 {
        return Err(Error::InvalidArgument(format!(
            "skip-gram needs at least 2 distinct tokens, corpus has {distinct}"
        )));
    }
    let noise_weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
    let noise = WeightedIndex::new(&noise_weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let dim = config.dim;
    let w_in = SharedMatrix::new(skipgram_init(vocab_size, config), dim);
    let w_out = SharedMatrix::new(vec![0.0; vocab_size * dim], dim);

    let pairs_per_epoch: usize = corpus
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| i.min(config.window) + (s.len() - 1 - i).min(config.window))
                .sum::<usize>()
        })
        .sum();
    let total_steps = (pairs_per_epoch * config.epochs).max(1) as f64;
    let min_lr = config.lr * 1e-4;

    let chunk = corpus.len().div_ceil(config.threads).max(1);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let epoch_offset = epoch * pairs_per_epoch;
        let results: Vec<(f64, usize)> = std::thread::scope(|scope| {
            let handles: Vec<_> = corpus
                .chunks(chunk)
                .enumerate()
                .map(|(t, part)| {
                    let (w_in, w_out, noise) = (&w_in, &w_out, &noise);
                    let offset: usize = corpus[..t * chunk]
                        .iter()
                        .map(|s| {
                            (0..s.len())
                                .map(|i| i.min(config.window) + (s.len() - 1 - i).min(config.window))
                                .sum::<usize>()
                        })
                        .sum();
                    scope.spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            config.seed ^ ((epoch as u64) << 32) ^ (t as u64).wrapping_mul(0x9E37_79B9),
                        );
                        let mut step = epoch_offset + offset;
                        let mut loss = 0.0;
                        let mut n = 0usize;
                        for sentence in part {
                            for (i, &center) in sentence.iter().enumerate() {
                                let lo = i.saturating_sub(config.window);
                                let hi = (i + config.window).min(sentence.len() - 1);
                                for (j, &context) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                                    if j == i {
                                        continue;
                                    }
                                    let lr = (config.lr * (1.0 - step as f64 / total_steps)).max(min_lr);
                                    step += 1;
                                    let negs: Vec<usize> = (0..config.negatives)
                                        .map(|_| noise.sample(&mut rng))
                                        .filter(|&k| k != context)
                                        .collect();
                                    let v = w_in.row(center);
                                    let u = w_out.row(context);
                                    let neg_rows: Vec<Vec<f64>> = negs.iter().map(|&k| w_out.row(k)).collect();
                                    let refs: Vec<&[f64]> = neg_rows.iter().map(Vec::as_slice).collect();
                                    let g = pair_loss_and_grad(&v, &u, &refs);
                                    loss += g.loss;
                                    n += 1;
                                    w_out.add_row(context, &g.context, -lr);
                                    for (&k, d) in negs.iter().zip(&g.negatives) {
                                        w_out.add_row(k, d, -lr);
                                    }
                                    if center != PAD as usize {
                                        w_in.add_row(center, &g.center, -lr);
                                    }
                                }
                            }
                        }
                        (loss, n)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("skip-gram worker panicked"))
                .collect()
        });
        let (loss, n) = results.iter().fold((0.0, 0), |acc, r| (acc.0 + r.0, acc.1 + r.1));
        let mean = if n > 0 { loss / n as f64 } else { 0.0 };
        log::debug!("skip-gram epoch {} loss {:.5}", epoch + 1, mean);
        history.push(mean);
    }

    Ok(SkipGramFit {
        embedding: EmbeddingMatrix {
            vocab_size,
            dim,
            weights: w_in.into_vec(),
            vocab_hash: vocab_hash.to_string(),
        },
        loss_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub format: String,
    pub vocab_hash: String,
    pub weights: MatrixBlob,
}

impl EmbeddingMatrix {
    pub fn row(&self, token: u32) -> &[f64] {
        let t = token as usize;
        &self.weights[t * self.dim..(t + 1) * self.dim]
    }

    /// One row per token, PAD included (as zeros).
    pub fn lookup(&self, seq: &TokenSequence) -> Result<Vec<Vec<f64>>> {
        seq.tokens
            .iter()
            .map(|&t| {
                if t as usize >= self.vocab_size {
                    return Err(Error::InvalidArgument(format!(
                        "token {t} outside embedding of {} rows",
                        self.vocab_size
                    )));
                }
                Ok(self.row(t).to_vec())
            })
            .collect()
    }

    pub fn cosine(&self, a: u32, b: u32) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        dot(x, y) / (dot(x, x).sqrt() * dot(y, y).sqrt()).max(1e-300)
    }

    pub fn to_file(&self) -> Result<EmbeddingFile> {
        Ok(EmbeddingFile {
            format: "elp-embedding/1".into(),
            vocab_hash: self.vocab_hash.clone(),
            weights: MatrixBlob::encode(self.vocab_size, self.dim, &self.weights)?,
        })
    }

    pub fn from_file(file: &EmbeddingFile) -> Result<Self> {
        Ok(Self {
            vocab_size: file.weights.rows,
            dim: file.weights.cols,
            weights: file.weights.decode()?,
            vocab_hash: file.vocab_hash.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_file()?)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(&file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(tokens: Vec<u32>) -> TokenSequence {
        TokenSequence {
            id: String::new(),
            original_len: tokens.len(),
            tokens,
            label: None,
        }
    }

    /// Two token families that never share a sentence.
    fn two_topic_corpus(seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..400)
            .map(|i| {
                let base = if i % 2 == 0 { 1 } else { 5 };
                let mut t: Vec<u32> = (0..12).map(|_| base + rng.random_range(0..4)).collect();
                t.extend([0, 0, 0]);
                seq(t)
            })
            .collect()
    }

    #[test]
    fn counts_exclude_pad() {
        let rows = count_vectorize(&[seq(vec![1, 2, 2, 0, 0])], 4, false).unwrap();
        assert_eq!(rows[0], vec![0.0, 1.0, 2.0, 0.0]);
        let rows = count_vectorize(&[seq(vec![1, 2, 2, 0]), seq(vec![0, 0])], 4, true).unwrap();
        assert!((rows[0].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(rows[1], vec![0.0; 4]);
        assert!(count_vectorize(&[seq(vec![9])], 4, false).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (v, u, n1, n2) = (r(6), r(6), r(6), r(6));
        let loss = |v: &[f64], u: &[f64], a: &[f64], b: &[f64]| pair_loss_and_grad(v, u, &[a, b]).loss;
        let g = pair_loss_and_grad(&v, &u, &[&n1, &n2]);
        let h = 1e-6;
        let check = |analytic: &[f64], which: usize| {
            for i in 0..6 {
                let mut args = [v.clone(), u.clone(), n1.clone(), n2.clone()];
                args[which][i] += h;
                let plus = loss(&args[0], &args[1], &args[2], &args[3]);
                args[which][i] -= 2.0 * h;
                let minus = loss(&args[0], &args[1], &args[2], &args[3]);
                let numeric = (plus - minus) / (2.0 * h);
                assert!(
                    (numeric - analytic[i]).abs() < 1e-7,
                    "arg {which} dim {i}: {numeric} vs {}",
                    analytic[i]
                );
            }
        };
        check(&g.center, 0);
        check(&g.context, 1);
        check(&g.negatives[0], 2);
        check(&g.negatives[1], 3);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let cfg = SkipGramConfig {
            epochs: 0,
            dim: 8,
            ..Default::default()
        };
        let fit = skipgram_train(&two_topic_corpus(0), 10, "h", &cfg).unwrap();
        assert_eq!(fit.embedding.weights, skipgram_init(10, &cfg));
        assert!(fit.embedding.row(PAD).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn co_occurring_tokens_cluster() {
        for seed in [1, 2, 3] {
            let cfg = SkipGramConfig {
                dim: 16,
                epochs: 5,
                seed,
                ..Default::default()
            };
            let fit = skipgram_train(&two_topic_corpus(seed), 10, "h", &cfg).unwrap();
            let e = &fit.embedding;
            let mut within = Vec::new();
            let mut across = Vec::new();
            for a in 1..=8u32 {
                for b in (a + 1)..=8 {
                    if (a <= 4) == (b <= 4) {
                        within.push(e.cosine(a, b));
                    } else {
                        across.push(e.cosine(a, b));
                    }
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(
                mean(&within) > mean(&across) + 0.3,
                "seed {seed}: {} vs {}",
                mean(&within),
                mean(&across)
            );
            assert!(e.row(PAD).iter().all(|&v| v == 0.0));
            assert!(fit.loss_history.last() < fit.loss_history.first());
        }
    }

    #[test]
    fn single_thread_is_reproducible() {
        let cfg = SkipGramConfig {
            dim: 8,
            epochs: 2,
            seed: 4,
            ..Default::default()
        };
        let a = skipgram_train(&two_topic_corpus(4), 10, "h", &cfg).unwrap();
        let b = skipgram_train(&two_topic_corpus(4), 10, "h", &cfg).unwrap();
        assert_eq!(a, b);
        let par = skipgram_train(&two_topic_corpus(4), 10, "h", &SkipGramConfig { threads: 4, ..cfg }).unwrap();
        assert!(par.embedding.weights.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_degenerate_corpus() {
        let cfg = SkipGramConfig::default();
        assert!(skipgram_train(&[seq(vec![3, 3, 3, 0])], 5, "h", &cfg).is_err());
        assert!(skipgram_train(&[seq(vec![1, 7])], 5, "h", &cfg).is_err());
    }

    #[test]
    fn file_round_trip() {
        let cfg = SkipGramConfig {
            dim: 4,
            epochs: 1,
            ..Default::default()
        };
        let fit = skipgram_train(&two_topic_corpus(0), 10, "abc", &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.json");
        fit.embedding.save(&p).unwrap();
        assert_eq!(EmbeddingMatrix::load(&p).unwrap(), fit.embedding);
        let rows = fit.embedding.lookup(&seq(vec![1, 0])).unwrap();
        assert_eq!(rows[1], vec![0.0; 4]);
    }
}
