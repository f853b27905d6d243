//! Checkpoint container: an 8-byte magic, a little-endian u64 header length,
//! a JSON header (config, optional routing metadata, parameter manifest), then
//! raw little-endian f32 parameter blocks in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SKRCKPT1";
pub const FORMAT: &str = "skiprouter-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the block, relative to the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    #[serde(default)]
    pub routing: Option<serde_json::Value>,
    pub params: Vec<ManifestEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn write_checkpoint<'a>(
    path: &Path,
    config: &ModelConfig,
    routing: Option<serde_json::Value>,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, t) in params {
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format: FORMAT.into(),
        config: config.clone(),
        routing,
        params: manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let write = |f: &mut fs::File, bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
    write(&mut f, MAGIC)?;
    write(&mut f, &(header_bytes.len() as u64).to_le_bytes())?;
    write(&mut f, &header_bytes)?;
    write(&mut f, &blob)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..data_start])?;
    if header.format != FORMAT {
        return Err(bad(&format!("unsupported format {}", header.format)));
    }
    let data = &bytes[data_start..];
    let mut tensors = BTreeMap::new();
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > data.len() {
            return Err(bad(&format!("block for {} out of bounds", entry.name)));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(entry.name.clone(), Tensor::new(values, &entry.shape)?);
    }
    Ok(Checkpoint { header, tensors })
}
