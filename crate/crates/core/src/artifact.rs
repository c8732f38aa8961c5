//! Artifact plumbing: atomic file writes and provenance hashes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Writes through a temporary sibling file and renames it into place, so a
/// crash never leaves a partial file under the final name.
pub fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        Ok(())
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn atomic_write_str(path: &Path, contents: &str) -> Result<()> {
    atomic_write(path, |w| w.write_all(contents.as_bytes()))
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Which run produced an artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the canonical JSON form of the run configuration.
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of<T: Serialize>(config: &T, seed: u64) -> Result<Self> {
        let canonical = serde_json::to_string(&serde_json::to_value(config)?)?;
        Ok(Provenance {
            config_hash: sha256_hex(canonical.as_bytes()),
            seed,
        })
    }
}

/// Writes `{schema_version, provenance, <key>: value}` atomically.
pub fn write_json_doc<T: Serialize>(
    path: &Path,
    key: &str,
    value: &T,
    provenance: Option<&Provenance>,
) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), crate::game::SCHEMA_VERSION.into());
    if let Some(p) = provenance {
        doc.insert("provenance".into(), serde_json::to_value(p)?);
    }
    doc.insert(key.into(), serde_json::to_value(value)?);
    atomic_write_str(path, &serde_json::to_string(&doc)?)
}

/// Reads the `key` member of a document written by [`write_json_doc`].
pub fn read_json_doc<T: serde::de::DeserializeOwned>(path: &Path, key: &str) -> Result<T> {
    let mut doc: serde_json::Value = serde_json::from_str(&read_to_string(path)?)?;
    let version = doc.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(u64::from(crate::game::SCHEMA_VERSION)) {
        return Err(Error::data(format!(
            "{}: unsupported schema version {version:?}",
            path.display()
        )));
    }
    let body = doc
        .get_mut(key)
        .map(serde_json::Value::take)
        .ok_or_else(|| Error::data(format!("{}: missing `{key}`", path.display())))?;
    Ok(serde_json::from_value(body)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.txt");
        let err = atomic_write(&target, |w| {
            w.write_all(b"partial")?;
            Err(std::io::Error::other("boom"))
        });
        assert!(err.is_err());
        assert!(!target.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested/out.txt");
        atomic_write_str(&target, "hello").unwrap();
        assert_eq!(read_to_string(&target).unwrap(), "hello");
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
