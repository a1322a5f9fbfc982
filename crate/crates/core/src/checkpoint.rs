//! Checkpoint files: magic line, config line, index line, raw f32 blob.
//!
//! ```text
//! RIBCAM-CKPT-v1
//! {"model":{...},"meta":{...}}
//! [{"name":"enc0.conv0.weight","shape":[16,1,27],"offset":0}, ...]
//! <little-endian f32 × count>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{CamUNetConfig, CamUNetParams, ParamEntry};

pub const MAGIC: &str = "RIBCAM-CKPT-v1";

/// Provenance recorded alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: CamUNetConfig,
    meta: CheckpointMeta,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), reason.into()))
}

pub fn save_checkpoint(path: &Path, params: &CamUNetParams, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let header = Header {
        model: params.config.clone(),
        meta: meta.clone(),
    };
    let mut out = Vec::with_capacity(params.count() * 4 + 4096);
    writeln!(out, "{MAGIC}")?;
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    serde_json::to_writer(&mut out, params.entries())?;
    out.push(b'\n');
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CamUNetParams, CheckpointMeta)> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(path, "not a checkpoint (bad magic)"));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line).map_err(|e| bad(path, format!("header: {e}")))?;
    line.clear();
    reader.read_line(&mut line)?;
    let index: Vec<ParamEntry> =
        serde_json::from_str(&line).map_err(|e| bad(path, format!("index: {e}")))?;

    let mut blob = Vec::new();
    reader.read_to_end(&mut blob)?;
    if blob.len() % 4 != 0 {
        return Err(bad(path, "blob length is not a multiple of 4"));
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let params = CamUNetParams::from_values(header.model, values)
        .map_err(|e| bad(path, format!("blob does not fit config: {e}")))?;
    if index != params.entries() {
        return Err(bad(path, "parameter index disagrees with config layout"));
    }
    Ok((params, header.meta))
}
