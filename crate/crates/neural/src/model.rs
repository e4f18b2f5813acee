//! Classifier heads over token sequences: CNN, bidirectional LSTM, and
//! bidirectional LSTM with attention pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use elp_core::embed::EmbeddingMatrix;
use elp_core::vocab::{TokenSequence, PAD};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{attention_pool, bilstm, conv_block, dense, AttentionWeights, LstmWeights};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    Cnn,
    Rnn,
    #[serde(alias = "rnn-attn")]
    RnnAttention,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "cnn" => Ok(Self::Cnn),
            "rnn" => Ok(Self::Rnn),
            "rnn-attention" | "rnn-attn" | "attention" => Ok(Self::RnnAttention),
            other => Err(Error::InvalidArgument(format!(
                "unknown model head {other:?} (expected cnn, rnn or rnn-attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub head: Head,
    /// Token ids `0..vocab_size` (PAD and UNK included).
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    /// `(size, stride)` per conv block.
    pub pools: Vec<(usize, usize)>,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub attention_dim: usize,
    pub dense: usize,
    pub keep_prob: f64,
    pub freeze_embedding: bool,
}

impl ModelSpec {
    /// Two conv blocks pooled 3/3 then 2/2.
    pub fn cnn_two_block(vocab_size: usize, max_len: usize, n_classes: usize) -> Self {
        Self {
            head: Head::Cnn,
            vocab_size,
            embed_dim: 64,
            max_len,
            n_classes,
            conv_filters: 128,
            kernel: 5,
            pools: vec![(3, 3), (2, 2)],
            lstm_hidden: 128,
            lstm_layers: 2,
            attention_dim: 128,
            dense: 64,
            keep_prob: 0.8,
            freeze_embedding: false,
        }
    }

    /// Three conv blocks pooled 5/5.
    pub fn cnn_three_block(vocab_size: usize, max_len: usize, n_classes: usize) -> Self {
        Self {
            pools: vec![(5, 5); 3],
            ..Self::cnn_two_block(vocab_size, max_len, n_classes)
        }
    }

    pub fn rnn(vocab_size: usize, max_len: usize, n_classes: usize, attention: bool) -> Self {
        Self {
            head: if attention { Head::RnnAttention } else { Head::Rnn },
            ..Self::cnn_two_block(vocab_size, max_len, n_classes)
        }
    }

    /// Time length after the conv blocks.
    pub fn pooled_len(&self) -> Result<usize> {
        let mut t = self.max_len;
        for &(size, stride) in &self.pools {
            if size == 0 || stride == 0 || t < size {
                return Err(Error::InvalidArgument(format!(
                    "max_len {} too short for pools {:?}",
                    self.max_len, self.pools
                )));
            }
            t = (t - size) / stride + 1;
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.max_len == 0 || self.n_classes < 2 || self.dense == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model spec {self:?}")));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "keep_prob {} outside (0, 1]",
                self.keep_prob
            )));
        }
        match self.head {
            Head::Cnn => {
                if self.conv_filters == 0 || self.kernel == 0 || self.pools.is_empty() {
                    return Err(Error::InvalidArgument("CNN needs filters, kernel and pools".into()));
                }
                self.pooled_len()?;
            }
            Head::Rnn | Head::RnnAttention => {
                if self.lstm_hidden == 0 || self.lstm_layers == 0 {
                    return Err(Error::InvalidArgument("LSTM needs hidden size and layers".into()));
                }
                if self.head == Head::RnnAttention && self.attention_dim == 0 {
                    return Err(Error::InvalidArgument("attention_dim must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub vocab_hash: String,
}

impl Model {
    /// Seeded initialization. The embedding table starts from `embedding`
    /// when given, otherwise from a uniform draw; its PAD row is zero.
    pub fn new(
        spec: ModelSpec,
        vocab_hash: impl Into<String>,
        seed: u64,
        embedding: Option<&EmbeddingMatrix>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let (v, d) = (spec.vocab_size, spec.embed_dim);
        let mut table = match embedding {
            Some(e) => {
                if e.vocab_size != v || e.dim != d {
                    return Err(Error::InvalidArgument(format!(
                        "embedding is {}x{}, model expects {v}x{d}",
                        e.vocab_size, e.dim
                    )));
                }
                Tensor::from_vec(v, d, e.weights.clone())?
            }
            None => glorot(v, d, v, d, &mut rng),
        };
        table.data[PAD as usize * d..(PAD as usize + 1) * d].fill(0.0);
        p.add("embedding", table, true, !spec.freeze_embedding);

        let features = match spec.head {
            Head::Cnn => {
                let mut channels = d;
                for (i, _) in spec.pools.iter().enumerate() {
                    let (k, f) = (spec.kernel, spec.conv_filters);
                    p.add(
                        format!("conv{i}.w"),
                        glorot(k * channels, f, k * channels, f, &mut rng),
                        true,
                        true,
                    );
                    p.add(format!("conv{i}.b"), Tensor::zeros(1, f), false, true);
                    channels = f;
                }
                spec.pooled_len()? * spec.conv_filters
            }
            Head::Rnn | Head::RnnAttention => {
                let h = spec.lstm_hidden;
                let mut input = d;
                for l in 0..spec.lstm_layers {
                    for dir in ["fwd", "bwd"] {
                        p.add(
                            format!("lstm{l}.{dir}.w"),
                            glorot(input, 4 * h, input, 4 * h, &mut rng),
                            true,
                            true,
                        );
                        p.add(
                            format!("lstm{l}.{dir}.u"),
                            glorot(h, 4 * h, h, 4 * h, &mut rng),
                            true,
                            true,
                        );
                        let mut b = Tensor::zeros(1, 4 * h);
                        b.data[h..2 * h].fill(1.0);
                        p.add(format!("lstm{l}.{dir}.b"), b, false, true);
                    }
                    input = 2 * h;
                }
                if spec.head == Head::RnnAttention {
                    let a = spec.attention_dim;
                    p.add("attn.w", glorot(2 * h, a, 2 * h, a, &mut rng), true, true);
                    p.add("attn.b", Tensor::zeros(1, a), false, true);
                    p.add("attn.v", glorot(a, 1, a, 1, &mut rng), true, true);
                }
                2 * h
            }
        };
        p.add(
            "dense.w",
            glorot(features, spec.dense, features, spec.dense, &mut rng),
            true,
            true,
        );
        p.add("dense.b", Tensor::zeros(1, spec.dense), false, true);
        p.add(
            "out.w",
            glorot(spec.dense, spec.n_classes, spec.dense, spec.n_classes, &mut rng),
            true,
            true,
        );
        p.add("out.b", Tensor::zeros(1, spec.n_classes), false, true);
        Ok(Self {
            spec,
            params: p,
            vocab_hash: vocab_hash.into(),
        })
    }

    /// Tokens fitted to `max_len` (truncated or right-padded).
    fn fit_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        let mut ids: Vec<usize> = tokens.iter().take(self.spec.max_len).map(|&t| t as usize).collect();
        ids.resize(self.spec.max_len, PAD as usize);
        Ok(ids)
    }

    fn maybe_dropout(&self, g: &mut Graph, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let keep = self.spec.keep_prob;
        match rng {
            Some(rng) if keep < 1.0 => {
                let n = g.value(x).len();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                g.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Builds the forward pass and returns the `1 x n_classes` probability
    /// row. Passing an RNG enables dropout (training mode).
    pub fn forward(&self, g: &mut Graph, tokens: &[u32], rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let ids = self.fit_tokens(tokens)?;
        let table = g.param_named("embedding")?;
        let features = match self.spec.head {
            Head::Cnn => {
                let mut x = g.gather(table, &ids, Some(PAD as usize))?;
                for (i, &pool) in self.spec.pools.iter().enumerate() {
                    let w = g.param_named(&format!("conv{i}.w"))?;
                    let b = g.param_named(&format!("conv{i}.b"))?;
                    x = conv_block(g, x, w, b, self.spec.kernel, pool)?;
                }
                let n = g.value(x).len();
                g.reshape(x, 1, n)?
            }
            Head::Rnn | Head::RnnAttention => {
                // right padding: the recurrent layers only see the content
                let len = ids.iter().rposition(|&t| t != PAD as usize).map_or(0, |p| p + 1);
                if len == 0 {
                    return Err(Error::InvalidArgument("sequence is all PAD".into()));
                }
                let h = self.spec.lstm_hidden;
                let mut x = g.gather(table, &ids[..len], Some(PAD as usize))?;
                for l in 0..self.spec.lstm_layers {
                    let mut dir = |name: &str| -> Result<LstmWeights> {
                        Ok(LstmWeights {
                            w: g.param_named(&format!("lstm{l}.{name}.w"))?,
                            u: g.param_named(&format!("lstm{l}.{name}.u"))?,
                            b: g.param_named(&format!("lstm{l}.{name}.b"))?,
                        })
                    };
                    let (fwd, bwd) = (dir("fwd")?, dir("bwd")?);
                    x = bilstm(g, x, fwd, bwd, h)?;
                }
                if self.spec.head == Head::RnnAttention {
                    let p = AttentionWeights {
                        w: g.param_named("attn.w")?,
                        b: g.param_named("attn.b")?,
                        v: g.param_named("attn.v")?,
                    };
                    attention_pool(g, x, p, None)?.0
                } else {
                    let last = g.slice_rows(x, len - 1, 1)?;
                    let fwd = g.slice_cols(last, 0, h)?;
                    let first = g.slice_rows(x, 0, 1)?;
                    let bwd = g.slice_cols(first, h, h)?;
                    g.concat_cols(&[fwd, bwd])?
                }
            }
        };
        let features = self.maybe_dropout(g, features, rng)?;
        let (w, b) = (g.param_named("dense.w")?, g.param_named("dense.b")?);
        let hidden = dense(g, features, w, b)?;
        let hidden = g.relu(hidden);
        let (w, b) = (g.param_named("out.w")?, g.param_named("out.b")?);
        let logits = dense(g, hidden, w, b)?;
        g.softmax(logits, None)
    }

    /// Class probabilities for tokens produced by the vocabulary whose
    /// training hash is `vocab_hash`.
    pub fn predict(&self, seq: &TokenSequence, vocab_hash: &str) -> Result<Vec<f64>> {
        if vocab_hash != self.vocab_hash {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                actual: vocab_hash.to_string(),
            });
        }
        self.predict_tokens(&seq.tokens)
    }

    pub fn predict_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.params);
        let probs = self.forward(&mut g, tokens, None)?;
        Ok(g.value(probs).data.clone())
    }
}

pub fn argmax(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &p)| if p > best.1 { (i, p) } else { best },
        )
        .0
}
