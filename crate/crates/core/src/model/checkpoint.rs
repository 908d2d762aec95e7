//! Single-file model checkpoints: a JSON header (config + parameter
//! manifest) followed by little-endian f32 parameter data.

use super::{ModelConfig, ModelError, MotionTransformer};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MTN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the data section, in f32 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    params: Vec<ManifestEntry>,
}

pub fn save_model(model: &MotionTransformer, path: &Path) -> Result<(), ModelError> {
    let mut manifest = Vec::with_capacity(model.store.params.len());
    let mut offset = 0usize;
    for p in &model.store.params {
        manifest.push(ManifestEntry {
            name: p.name.clone(),
            rows: p.rows,
            cols: p.cols,
            offset,
        });
        offset += p.value.len();
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: model.cfg.clone(),
        params: manifest,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;

    let mut out = Vec::with_capacity(8 + header_json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in &model.store.params {
        for &v in &p.value {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MotionTransformer, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(ModelError::Checkpoint("not a model checkpoint".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(ModelError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported format version {}",
            header.version
        )));
    }
    let mut model = MotionTransformer::new(header.config);
    if header.params.len() != model.store.params.len() {
        return Err(ModelError::Checkpoint(format!(
            "manifest has {} tensors, model expects {}",
            header.params.len(),
            model.store.params.len()
        )));
    }
    let data = &bytes[8 + header_len..];
    for (entry, p) in header.params.iter().zip(model.store.params.iter_mut()) {
        if entry.name != p.name || entry.rows != p.rows || entry.cols != p.cols {
            return Err(ModelError::Checkpoint(format!(
                "tensor mismatch: checkpoint {} ({}x{}), model {} ({}x{})",
                entry.name, entry.rows, entry.cols, p.name, p.rows, p.cols
            )));
        }
        let start = entry.offset * 4;
        let end = start + p.value.len() * 4;
        if end > data.len() {
            return Err(ModelError::Checkpoint("truncated parameter data".into()));
        }
        for (i, v) in p.value.iter_mut().enumerate() {
            let b = &data[start + i * 4..start + i * 4 + 4];
            *v = f32::from_le_bytes(b.try_into().unwrap()) as f64;
        }
    }
    Ok(model)
}
