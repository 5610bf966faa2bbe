//! File formats: word2vec-style text embeddings, tab-separated blank
//! datasets, `VFB1` region-feature files, `VFBCKPT1` checkpoints and the
//! per-epoch metrics log.

mod checkpoint;
mod dataset;
mod embeddings;
mod features;
mod metrics;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use dataset::{format_dataset_line, load_dataset, parse_dataset, write_dataset};
pub use embeddings::{format_embeddings, load_embeddings, parse_embeddings};
pub use features::{
    decode_feature_frames, encode_feature_frames, feature_path, load_feature_map, load_features,
    read_feature_frames, write_feature_file, FEATURE_MAGIC,
};
pub use metrics::{format_metrics_line, write_metrics};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes to a sibling temp file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Lookup(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Lookup(path.to_path_buf()))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}
