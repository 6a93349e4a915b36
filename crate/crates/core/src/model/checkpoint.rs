//! `ULF1` checkpoint files.
//!
//! Layout: the magic bytes `ULF1`, a little-endian `u32` header length, a
//! JSON header `{model, lora, params: [{name, shape}]}`, then every parameter
//! as little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraConfig, ModelConfig, ModelState, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ULF1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    lora: Option<LoraConfig>,
    params: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

impl ModelState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.config.clone(),
            lora: self.lora_config().cloned(),
            params: self
                .params
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| Error::Format("checkpoint header exceeds 4 GiB".into()))?;
        let n: usize = self.params.iter().map(|p| p.tensor.len()).sum();
        let mut out = Vec::with_capacity(8 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing ULF1 magic".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..body])
            .map_err(|e| Error::Format(format!("bad header: {e}")))?;

        let mut data = bytes[body..].chunks_exact(8);
        if !data.remainder().is_empty() {
            return Err(Error::Format(
                "parameter data is not a whole number of f64".into(),
            ));
        }
        let mut params = Vec::with_capacity(header.params.len());
        for entry in header.params {
            let n: usize = entry.shape.iter().product();
            let values: Vec<f64> = data
                .by_ref()
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if values.len() != n {
                return Err(Error::Format(format!("truncated data for {}", entry.name)));
            }
            params.push(Param {
                name: entry.name,
                tensor: Tensor::new(entry.shape, values)?,
                trainable: true,
            });
        }
        if data.next().is_some() {
            return Err(Error::Format("trailing bytes after parameters".into()));
        }
        ModelState::from_parts(header.model, params, header.lora)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelState> {
        ModelState::from_bytes(&fs::read(path)?)
    }
}
