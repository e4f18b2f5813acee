//! Model checkpoints: a JSON manifest naming each tensor plus a binary
//! blob of little-endian f64 values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "elp-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in values (not bytes) into the blob.
    pub offset: usize,
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub spec: ModelSpec,
    pub vocab_hash: String,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
pub fn save_checkpoint(model: &Model, dir: &Path, stem: &str) -> Result<PathBuf> {
    let mut bytes = Vec::with_capacity(model.params.n_values() * 8);
    let mut tensors = Vec::new();
    let mut offset = 0;
    for i in 0..model.params.len() {
        let t = &model.params.tensors[i];
        tensors.push(TensorEntry {
            name: model.params.names[i].clone(),
            rows: t.rows,
            cols: t.cols,
            offset,
            decay: model.params.decay[i],
            trainable: model.params.trainable[i],
        });
        offset += t.len();
        bytes.extend(t.data.iter().flat_map(|v| v.to_le_bytes()));
    }
    let blob = format!("{stem}.bin");
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        spec: model.spec.clone(),
        vocab_hash: model.vocab_hash.clone(),
        blob_sha256: sha256_hex(&bytes),
        blob: blob.clone(),
        tensors,
    };
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(&blob), &bytes)?;
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<Model> {
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let bytes = std::fs::read(dir.join(&manifest.blob))?;
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match its recorded hash",
            manifest.blob
        )));
    }
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("blob length not a multiple of 8".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut params = ParamStore::default();
    for e in &manifest.tensors {
        let end = e.offset + e.rows * e.cols;
        let data = values
            .get(e.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the blob", e.name)))?
            .to_vec();
        params.add(
            e.name.clone(),
            Tensor::from_vec(e.rows, e.cols, data)?,
            e.decay,
            e.trainable,
        );
    }
    // the manifest must describe the architecture it claims
    let fresh = Model::new(manifest.spec.clone(), manifest.vocab_hash.clone(), 0, None)?;
    if fresh.params.names != params.names
        || fresh
            .params
            .tensors
            .iter()
            .zip(&params.tensors)
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(Error::Checkpoint("tensor layout does not match the model spec".into()));
    }
    Ok(Model {
        spec: manifest.spec,
        params,
        vocab_hash: manifest.vocab_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        for spec in [
            ModelSpec {
                embed_dim: 4,
                conv_filters: 3,
                dense: 5,
                ..ModelSpec::cnn_two_block(7, 9, 3)
            },
            ModelSpec {
                embed_dim: 4,
                lstm_hidden: 3,
                attention_dim: 2,
                dense: 5,
                ..ModelSpec::rnn(7, 9, 3, true)
            },
        ] {
            let mut m = Model::new(spec, "vh", 11, None).unwrap();
            m.params.tensors[1].data[0] = f64::from_bits(0x3FF0_0000_0000_0001);
            let dir = tempfile::tempdir().unwrap();
            let path = save_checkpoint(&m, dir.path(), "model").unwrap();
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back, m);
            for (a, b) in back.params.tensors.iter().zip(&m.params.tensors) {
                assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn corrupted_blob_rejected() {
        let m = Model::new(
            ModelSpec {
                embed_dim: 2,
                conv_filters: 2,
                dense: 2,
                ..ModelSpec::cnn_two_block(4, 6, 2)
            },
            "v",
            0,
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = save_checkpoint(&m, dir.path(), "m").unwrap();
        let blob = dir.path().join("m.bin");
        let mut bytes = std::fs::read(&blob).unwrap();
        bytes[3] ^= 1;
        std::fs::write(&blob, bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
