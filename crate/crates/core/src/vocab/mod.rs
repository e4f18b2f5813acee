//! The wave vocabulary and tokenizer.
//!
//! Token ids: `0` is PAD, `1..=k` are wave clusters (centroid `i` has id
//! `i + 1`), `k + 1` is UNK for missing or flat waves.

mod gallery;
mod kmeans;

pub use gallery::{export_cluster_gallery, gallery_samples, render_cluster_gallery};
pub use kmeans::{
    kmeans_fit, kmeans_plus_plus, lloyd, nearest, silhouette, silhouette_sweep, squared_distance, KMeansConfig,
    KMeansFit,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::matrix_io::{f64s_to_bytes, MatrixBlob};
use crate::segment::{BeatWaves, WaveKind};
use crate::{Error, Result};

pub const PAD: u32 = 0;

/// Contiguous id block owned by one wave kind (per-kind mode).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindRange {
    pub kind: WaveKind,
    /// Index of the first centroid of this kind.
    pub offset: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveVocabulary {
    pub k: usize,
    pub dim: usize,
    pub eps: f64,
    pub seed: u64,
    pub training_hash: String,
    pub centroids: Vec<Vec<f64>>,
    /// Empty for one shared vocabulary over all wave kinds.
    pub kind_ranges: Vec<KindRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Right-pad with PAD to `max_len`.
    #[default]
    PadToMax,
    /// Truncate only.
    NoPad,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<u32>,
    pub label: Option<usize>,
    /// Token count before padding or truncation.
    pub original_len: usize,
}

impl TokenSequence {
    /// Tokens that are not PAD.
    pub fn content(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().copied().filter(|&t| t != PAD)
    }
}

fn hash_training(data: &[Vec<f64>], k: usize, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(k.to_le_bytes());
    h.update(seed.to_le_bytes());
    for row in data {
        h.update(f64s_to_bytes(row));
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

impl WaveVocabulary {
    /// Fits one shared vocabulary of `config.k` clusters.
    pub fn fit(waves: &[Vec<f64>], config: &KMeansConfig, eps: f64) -> Result<Self> {
        let fit = kmeans_fit(waves, config)?;
        Ok(Self {
            k: config.k,
            dim: waves[0].len(),
            eps,
            seed: config.seed,
            training_hash: hash_training(waves, config.k, config.seed),
            centroids: fit.centroids,
            kind_ranges: Vec::new(),
        })
    }

    /// Fits a separate clustering per wave kind with disjoint id blocks.
    pub fn fit_per_kind(
        waves: &[(WaveKind, Vec<f64>)],
        ks: &[(WaveKind, usize)],
        config: &KMeansConfig,
        eps: f64,
    ) -> Result<Self> {
        let mut centroids = Vec::new();
        let mut ranges = Vec::new();
        let mut all = Vec::new();
        for &(kind, k) in ks {
            let subset: Vec<Vec<f64>> = waves
                .iter()
                .filter(|(w, _)| *w == kind)
                .map(|(_, v)| v.clone())
                .collect();
            let fit = kmeans_fit(&subset, &KMeansConfig { k, ..config.clone() })?;
            ranges.push(KindRange {
                kind,
                offset: centroids.len(),
                count: k,
            });
            centroids.extend(fit.centroids);
            all.extend(subset);
        }
        let k = centroids.len();
        Ok(Self {
            k,
            dim: centroids.first().map_or(0, Vec::len),
            eps,
            seed: config.seed,
            training_hash: hash_training(&all, k, config.seed),
            centroids,
            kind_ranges: ranges,
        })
    }

    pub fn unk(&self) -> u32 {
        self.k as u32 + 1
    }

    /// Number of token ids including PAD and UNK.
    pub fn size(&self) -> usize {
        self.k + 2
    }

    /// Token id for one canonical wave; `None` (missing) and all-zero
    /// (flat) waves map to UNK.
    pub fn assign_wave(&self, canonical: Option<&[f64]>, kind: WaveKind) -> Result<u32> {
        let Some(values) = canonical else {
            return Ok(self.unk());
        };
        if values.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if values.iter().all(|&v| v == 0.0) {
            return Ok(self.unk());
        }
        let (offset, pool) = if self.kind_ranges.is_empty() {
            (0, &self.centroids[..])
        } else {
            let range = self
                .kind_ranges
                .iter()
                .find(|r| r.kind == kind)
                .ok_or_else(|| Error::InvalidArgument(format!("vocabulary has no clusters for {}", kind.name())))?;
            (range.offset, &self.centroids[range.offset..range.offset + range.count])
        };
        let (c, _) = nearest(values, pool);
        Ok((offset + c) as u32 + 1)
    }

    /// Encodes beats (waves already in P, QRS, T order) into a fixed-length
    /// token sequence.
    pub fn tokenize(
        &self,
        id: impl Into<String>,
        beats: &[BeatWaves],
        label: Option<usize>,
        max_len: usize,
        pad: PadPolicy,
    ) -> Result<TokenSequence> {
        let mut tokens = Vec::with_capacity(beats.len() * 3);
        for beat in beats {
            for wave in &beat.waves {
                tokens.push(self.assign_wave(wave.canonical.as_deref(), wave.kind)?);
            }
        }
        let original_len = tokens.len();
        tokens.truncate(max_len);
        if pad == PadPolicy::PadToMax {
            tokens.resize(max_len, PAD);
        }
        Ok(TokenSequence {
            id: id.into(),
            tokens,
            label,
            original_len,
        })
    }

    pub fn to_file(&self) -> Result<VocabularyFile> {
        let flat: Vec<f64> = self.centroids.iter().flatten().copied().collect();
        Ok(VocabularyFile {
            format: "elp-vocabulary/1".into(),
            k: self.k,
            dim: self.dim,
            eps: self.eps,
            seed: self.seed,
            training_hash: self.training_hash.clone(),
            kind_ranges: self.kind_ranges.clone(),
            centroids: MatrixBlob::encode(self.k, self.dim, &flat)?,
        })
    }

    pub fn from_file(file: &VocabularyFile) -> Result<Self> {
        let flat = file.centroids.decode()?;
        if file.centroids.rows != file.k || file.centroids.cols != file.dim {
            return Err(Error::Serialization(
                "centroid matrix shape disagrees with header".into(),
            ));
        }
        if file.k < 2 {
            return Err(Error::Serialization(format!("vocabulary k={} below 2", file.k)));
        }
        Ok(Self {
            k: file.k,
            dim: file.dim,
            eps: file.eps,
            seed: file.seed,
            training_hash: file.training_hash.clone(),
            centroids: flat.chunks(file.dim.max(1)).map(<[f64]>::to_vec).collect(),
            kind_ranges: file.kind_ranges.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_file()?)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(&file)
    }
}

/// On-disk vocabulary: JSON header plus base64 centroid matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub format: String,
    pub k: usize,
    pub dim: usize,
    pub eps: f64,
    pub seed: u64,
    pub training_hash: String,
    #[serde(default)]
    pub kind_ranges: Vec<KindRange>,
    pub centroids: MatrixBlob,
}
