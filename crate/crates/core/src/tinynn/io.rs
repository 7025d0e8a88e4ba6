//! Model file: `SPLYNN01`, u32 version, u32 header length, JSON header
//! (`{"net": NetSpec, "meta": ...}`), u64 parameter count, f32 parameters; all
//! little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetSpec, NnError};

const MAGIC: &[u8; 8] = b"SPLYNN01";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub net: NetSpec,
    /// Free-form data owned by the caller (target scaling, preprocessing, ...).
    pub meta: serde_json::Value,
}

pub fn write_model(mut w: impl Write, header: &ModelHeader, params: &[f32]) -> Result<(), NnError> {
    let expected = header.net.param_count();
    if params.len() != expected {
        return Err(NnError::Format(format!("{} parameters for a network with {expected}", params.len())));
    }
    let json = serde_json::to_vec(header).map_err(|e| NnError::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + json.len() + 4 * params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_model(mut r: impl Read) -> Result<(ModelHeader, Vec<f32>), NnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8], NnError> {
        if bytes.len() - pos < n {
            return Err(NnError::Format(format!("truncated at byte {pos} while reading {what}")));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(8, "magic")? != MAGIC {
        return Err(NnError::Format("bad magic, not a model file".into()));
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
    let header: ModelHeader =
        serde_json::from_slice(take(hlen, "header")?).map_err(|e| NnError::Format(format!("header at byte 16: {e}")))?;
    header.net.output_shape()?;
    let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
    if count != header.net.param_count() {
        return Err(NnError::Format(format!(
            "file declares {count} parameters, network needs {}",
            header.net.param_count()
        )));
    }
    let blob = take(4 * count, "parameters")?;
    let params = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if pos != bytes.len() {
        return Err(NnError::Format(format!("{} trailing bytes after parameters", bytes.len() - pos)));
    }
    Ok((header, params))
}

pub fn save_model(path: &Path, header: &ModelHeader, params: &[f32]) -> Result<(), NnError> {
    let mut buf = Vec::new();
    write_model(&mut buf, header, params)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, Vec<f32>), NnError> {
    read_model(fs::File::open(path)?)
}
