use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mosaic_protocol::blob_digest;

/// Opaque worker state captured at an episode boundary or step cadence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRef {
    pub worker_id: String,
    pub episode_index: u64,
    pub step_index: u64,
    pub seed: u64,
    pub state_blob: Vec<u8>,
    pub digest: String,
    /// Unix milliseconds. Never written to telemetry.
    pub created_at: u64,
}

impl CheckpointRef {
    pub fn new(worker_id: &str, episode_index: u64, step_index: u64, seed: u64, state_blob: Vec<u8>) -> Self {
        let digest = blob_digest(&state_blob);
        let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        CheckpointRef { worker_id: worker_id.into(), episode_index, step_index, seed, state_blob, digest, created_at }
    }

    pub fn verify(&self) -> bool {
        blob_digest(&self.state_blob) == self.digest
    }

    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.episode_index, self.step_index)
    }
}

/// `<root>/<worker_id>/<episode>_<step>.ckpt` plus a `.ckpt.sha256` sidecar.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    root: PathBuf,
}

impl CheckpointStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        CheckpointStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blob_path(&self, c: &CheckpointRef) -> PathBuf {
        self.root.join(&c.worker_id).join(format!("{}.ckpt", c.file_stem()))
    }

    pub fn save(&self, c: &CheckpointRef) -> std::io::Result<PathBuf> {
        let path = self.blob_path(c);
        fs::create_dir_all(path.parent().expect("blob path has a parent"))?;
        fs::write(&path, &c.state_blob)?;
        fs::write(path.with_extension("ckpt.sha256"), format!("{}\n", c.digest))?;
        Ok(path)
    }

    /// Reads the blob back from disk and checks it against the sidecar.
    pub fn load(&self, c: &CheckpointRef) -> Result<Vec<u8>, String> {
        let path = self.blob_path(c);
        let blob = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let sidecar = fs::read_to_string(path.with_extension("ckpt.sha256")).map_err(|e| e.to_string())?;
        if blob_digest(&blob) != sidecar.trim() || sidecar.trim() != c.digest {
            return Err(format!("digest mismatch for {}", path.display()));
        }
        Ok(blob)
    }
}
