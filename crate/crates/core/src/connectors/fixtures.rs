use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::ConnectorError;
use crate::timefmt::serde_utc;

const INDEX_FILE: &str = "index.json";

/// One recorded provider response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub key: String,
    #[serde(with = "serde_utc")]
    pub recorded_at: DateTime<Utc>,
    pub api: String,
    pub payload: Value,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Index {
    entries: BTreeMap<String, String>,
}

/// Fixtures on disk: one JSON file per request key (named by key hash)
/// plus `index.json` mapping keys to file names.
#[derive(Debug)]
pub struct FixtureStore {
    dir: PathBuf,
    index: Mutex<Index>,
}

impl FixtureStore {
    /// Opens `dir`, reading its index if one exists.
    pub fn open(dir: &Path) -> Result<Self, ConnectorError> {
        let path = dir.join(INDEX_FILE);
        let index = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
            serde_json::from_str(&text)
                .map_err(|e| ConnectorError::Fixture(format!("{}: {e}", path.display())))?
        } else {
            Index::default()
        };
        Ok(FixtureStore { dir: dir.to_path_buf(), index: Mutex::new(index) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file_name(key: &str) -> String {
        let digest = Sha256::digest(key.as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        format!("{hex}.json")
    }

    pub fn len(&self) -> usize {
        self.index.lock().expect("index lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> Vec<String> {
        self.index.lock().expect("index lock").entries.keys().cloned().collect()
    }

    pub fn get(&self, key: &str) -> Result<FixtureFile, ConnectorError> {
        let name = self
            .index
            .lock()
            .expect("index lock")
            .entries
            .get(key)
            .cloned()
            .ok_or_else(|| ConnectorError::FixtureMiss(key.to_string()))?;
        let path = self.dir.join(&name);
        let text = std::fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
        let file: FixtureFile = serde_json::from_str(&text)
            .map_err(|e| ConnectorError::Fixture(format!("{}: {e}", path.display())))?;
        if file.key != key {
            return Err(ConnectorError::Fixture(format!("{} holds key `{}`, expected `{key}`", path.display(), file.key)));
        }
        Ok(file)
    }

    /// Persists a fixture, then the index. Each file is replaced atomically,
    /// so an interrupted run never leaves the index pointing at a partial
    /// file.
    pub fn put(&self, file: FixtureFile) -> Result<(), ConnectorError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        let name = Self::file_name(&file.key);
        let body = serde_json::to_string_pretty(&file).expect("fixture serializes");
        write_atomic(&self.dir.join(&name), &body)?;

        let mut index = self.index.lock().expect("index lock");
        index.entries.insert(file.key, name);
        let text = serde_json::to_string_pretty(&*index).expect("index serializes");
        write_atomic(&self.dir.join(INDEX_FILE), &text)
    }
}

fn write_atomic(path: &Path, body: &str) -> Result<(), ConnectorError> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, body).map_err(|e| io_error(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> ConnectorError {
    ConnectorError::Fixture(format!("{}: {e}", path.display()))
}
