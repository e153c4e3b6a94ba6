//! Run manifest: per-stage input and output digests.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use timewarp_core::digest::sha256_hex;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub params_digest: String,
    pub seed: u64,
    /// Path to digest. Paths under the output directory are relative to it.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub summary: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn file_digest(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Writes through a temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

impl Manifest {
    pub fn load(out_dir: &Path) -> io::Result<Self> {
        match std::fs::read(out_dir.join(MANIFEST_FILE)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, out_dir: &Path) -> io::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        bytes.push(b'\n');
        write_atomic(&out_dir.join(MANIFEST_FILE), &bytes)
    }

    /// True when every recorded output still exists with its recorded digest.
    pub fn outputs_intact(&self, stage: &str, out_dir: &Path) -> bool {
        self.stages.get(stage).is_some_and(|rec| {
            rec.outputs
                .iter()
                .all(|(p, d)| file_digest(&out_dir.join(p)).is_ok_and(|cur| &cur == d))
        })
    }
}
