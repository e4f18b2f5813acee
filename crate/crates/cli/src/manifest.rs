//! Stage artifacts under `out/<stage>/<hash>/` with one `manifest.json`
//! index. A stage hash covers its configuration slice and the hashes of
//! the stages it reads, so an identical re-run finds its own entry.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::hex16;

pub const MANIFEST_FORMAT: &str = "elp-manifest/1";

#[derive(Debug, Error)]
pub enum StageError {
    #[error("missing upstream stage `{stage}` for this configuration (expected hash {hash}); run `elp {stage}` first")]
    MissingStage { stage: String, hash: String },

    #[error(
        "artifact {path} of stage `{stage}` does not match its manifest hash (recorded {recorded}, found {found})"
    )]
    HashMismatch {
        stage: String,
        path: PathBuf,
        recorded: String,
        found: String,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRef {
    pub stage: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub hash: String,
    pub config_fingerprint: String,
    pub inputs: Vec<StageRef>,
    /// Main artifact, relative to the output directory.
    pub artifact: PathBuf,
    pub artifact_sha256: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub entries: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            entries: Vec::new(),
        }
    }
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Stage hash from a name, a serializable config slice and upstream hashes.
pub fn stage_hash<T: Serialize>(stage: &str, config: &T, inputs: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for i in inputs {
        h.update([0]);
        h.update(i.as_bytes());
    }
    hex16(&h.finalize())
}

#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn stage_dir(&self, stage: &str, hash: &str) -> PathBuf {
        self.root.join(stage).join(hash)
    }

    pub fn read(&self) -> Result<Manifest, StageError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let bad = |message: String| StageError::Manifest {
            path: path.clone(),
            message,
        };
        let m: Manifest = serde_json::from_slice(&std::fs::read(&path)?).map_err(|e| bad(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(bad(format!("unsupported format {:?}", m.format)));
        }
        Ok(m)
    }

    /// Verified entry for `(stage, hash)`, if recorded. A recorded entry
    /// whose artifact changed on disk is an error, not a miss.
    pub fn lookup(&self, stage: &str, hash: &str) -> Result<Option<ManifestEntry>, StageError> {
        let m = self.read()?;
        let Some(e) = m.entries.into_iter().find(|e| e.stage == stage && e.hash == hash) else {
            return Ok(None);
        };
        let path = self.root.join(&e.artifact);
        if !path.exists() {
            return Ok(None);
        }
        let found = sha256_file(&path)?;
        if found != e.artifact_sha256 {
            return Err(StageError::HashMismatch {
                stage: stage.into(),
                path,
                recorded: e.artifact_sha256,
                found,
            });
        }
        Ok(Some(e))
    }

    /// Like [`Store::lookup`], but absence is an ordering error.
    pub fn require(&self, stage: &str, hash: &str) -> Result<ManifestEntry, StageError> {
        self.lookup(stage, hash)?.ok_or_else(|| StageError::MissingStage {
            stage: stage.into(),
            hash: hash.into(),
        })
    }

    pub fn artifact_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.artifact)
    }

    /// Records a finished stage, replacing any entry with the same key.
    /// Every input must already be in the manifest.
    pub fn record(&self, mut entry: ManifestEntry, artifact: &Path) -> Result<ManifestEntry, StageError> {
        let mut m = self.read()?;
        for input in &entry.inputs {
            if !m.entries.iter().any(|e| e.stage == input.stage && e.hash == input.hash) {
                return Err(StageError::MissingStage {
                    stage: input.stage.clone(),
                    hash: input.hash.clone(),
                });
            }
        }
        entry.artifact = artifact
            .strip_prefix(&self.root)
            .map_err(|_| StageError::Manifest {
                path: self.manifest_path(),
                message: format!("artifact {} outside the output directory", artifact.display()),
            })?
            .to_path_buf();
        entry.artifact_sha256 = sha256_file(artifact)?;
        m.entries.retain(|e| !(e.stage == entry.stage && e.hash == entry.hash));
        m.entries.push(entry.clone());
        std::fs::create_dir_all(&self.root)?;
        let tmp = self.root.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(&m).expect("manifest serializes"))?;
        std::fs::rename(&tmp, self.manifest_path())?;
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(stage: &str, hash: &str, inputs: Vec<StageRef>) -> ManifestEntry {
        ManifestEntry {
            stage: stage.into(),
            hash: hash.into(),
            config_fingerprint: "f".into(),
            inputs,
            artifact: PathBuf::new(),
            artifact_sha256: String::new(),
            started_unix: 0,
            finished_unix: 0,
        }
    }

    #[test]
    fn record_lookup_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let art = store.stage_dir("a", "h1").join("x.json");
        std::fs::create_dir_all(art.parent().unwrap()).unwrap();
        std::fs::write(&art, "1").unwrap();
        store.record(entry("a", "h1", vec![]), &art).unwrap();
        assert!(store.lookup("a", "h1").unwrap().is_some());
        assert!(store.lookup("a", "h2").unwrap().is_none());
        std::fs::write(&art, "2").unwrap();
        assert!(matches!(store.lookup("a", "h1"), Err(StageError::HashMismatch { .. })));
    }

    #[test]
    fn dangling_inputs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::new(dir.path());
        let art = dir.path().join("y");
        std::fs::write(&art, "1").unwrap();
        let e = entry(
            "b",
            "h",
            vec![StageRef {
                stage: "a".into(),
                hash: "zz".into(),
            }],
        );
        let err = store.record(e, &art).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }

    #[test]
    fn stage_hash_depends_on_every_part() {
        let base = stage_hash("s", &1, &["u"]);
        assert_eq!(base, stage_hash("s", &1, &["u"]));
        assert_ne!(base, stage_hash("t", &1, &["u"]));
        assert_ne!(base, stage_hash("s", &2, &["u"]));
        assert_ne!(base, stage_hash("s", &1, &["v"]));
    }
}
