use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use super::GenResponse;

/// Content-addressed response store: `<dir>/<key[..2]>/<key>.json`.
///
/// Writes go through a temp file and a rename, so concurrent readers never
/// observe a partial entry.
#[derive(Debug)]
pub struct DiskCache {
    dir: PathBuf,
    lock: RwLock<()>,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            lock: RwLock::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<GenResponse>> {
        let _guard = self.lock.read().expect("cache lock");
        match fs::read(self.path(key)) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(resp) => Ok(Some(resp)),
                Err(e) => {
                    log::warn!("ignoring corrupt cache entry {key}: {e}");
                    Ok(None)
                }
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, key: &str, response: &GenResponse) -> io::Result<()> {
        let _guard = self.lock.write().expect("cache lock");
        let path = self.path(key);
        let parent = path.parent().expect("cache entries live in a shard dir");
        fs::create_dir_all(parent)?;
        let stored = GenResponse {
            cached: false,
            latency_ms: 0,
            ..response.clone()
        };
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        fs::write(&tmp, serde_json::to_vec(&stored)?)?;
        fs::rename(tmp, path)
    }
}
