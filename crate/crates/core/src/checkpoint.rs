//! Binary checkpoints for parameter-shaped arrays.
//!
//! Layout:
//!
//! ```text
//! fedat-checkpoint 1\n
//! {"kind":"params","spec":{...},"layout":{...},"len":N}\n
//! N little-endian f64 values
//! ```
//!
//! The JSON header carries the model spec (including its seed) and the layout
//! manifest; readers reject files whose manifest disagrees with the spec.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layout, ModelSpec, ParamVector};

const MAGIC: &str = "fedat-checkpoint 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Params,
    Fisher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ArrayKind,
    pub spec: ModelSpec,
    pub values: ParamVector,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ArrayKind,
    spec: ModelSpec,
    layout: Layout,
    len: usize,
}

impl Checkpoint {
    pub fn params(spec: ModelSpec, values: ParamVector) -> Self {
        Self {
            kind: ArrayKind::Params,
            spec,
            values,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.values.len() != self.spec.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a spec with {} parameters",
                self.values.len(),
                self.spec.param_count()
            )));
        }
        let header = Header {
            kind: self.kind,
            spec: self.spec.clone(),
            layout: self.spec.layout(),
            len: self.values.len(),
        };
        let mut out = Vec::with_capacity(256 + 8 * self.values.len());
        out.extend_from_slice(MAGIC.as_bytes());
        out.push(b'\n');
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        for v in self.values.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let magic_end = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing magic line"))?;
        if &bytes[..magic_end] != MAGIC.as_bytes() {
            return Err(bad("not a fedat checkpoint"));
        }
        let rest = &bytes[magic_end + 1..];
        let header_end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header line"))?;
        let header: Header = serde_json::from_slice(&rest[..header_end])
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header
            .spec
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if header.layout != header.spec.layout() || header.len != header.spec.param_count() {
            return Err(bad("layout manifest does not match the model spec"));
        }
        let body = &rest[header_end + 1..];
        if body.len() != 8 * header.len {
            return Err(Error::Checkpoint(format!(
                "expected {} data bytes, found {}",
                8 * header.len,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self {
            kind: header.kind,
            spec: header.spec,
            values: ParamVector::from_vec(values),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
