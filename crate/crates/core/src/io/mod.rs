//! Dataset container, checkpoints, split files and dataset manifests.

mod checkpoint;
mod dataset;
mod split_file;

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    checksum, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use dataset::{
    container_len, load_dataset, normalize, save_dataset, Dataset, DATASET_HEADER_LEN, DATASET_MAGIC,
    DATASET_VERSION,
};
pub use split_file::{load_split, save_split, split_from_text, split_to_text};

/// Writes through a temporary file in the destination directory, then renames
/// it into place so readers never observe a partial file.
pub(crate) fn atomic_write<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(&mut File) -> std::io::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// JSON sidecar describing how a dataset container was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u16,
    pub samples: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Generator settings, as produced by the simulator.
    pub generator: serde_json::Value,
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    atomic_write(path, |f| {
        use std::io::Write;
        f.write_all(text.as_bytes())?;
        f.write_all(b"\n")
    })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Path of the manifest that accompanies a dataset container.
pub fn manifest_path(dataset: &Path) -> std::path::PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".json");
    p.into()
}
