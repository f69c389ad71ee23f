//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      4 bytes   "UQL1" (deterministic) or "UQB1" (Bayesian)
//! header_len u32
//! header     header_len bytes of UTF-8 text (model spec, then extras)
//! count      u64       number of f64 values that follow
//! values     count x f64
//! ```
//!
//! Deterministic values are, for each parametric layer in declaration
//! order, the weight followed by the bias.

use std::fs;
use std::path::Path;

use super::model::{DeterministicModel, LayerParams};
use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DETERMINISTIC_MAGIC: &[u8; 4] = b"UQL1";

pub(crate) fn encode_container(magic: &[u8; 4], header: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + values.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn decode_container(magic: &[u8; 4], bytes: &[u8]) -> Result<(String, Vec<f64>)> {
    let what = "checkpoint";
    let bad = |reason: String| Error::Format { what, reason };
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(bad(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let hend = 8 + hlen;
    if bytes.len() < hend + 8 {
        return Err(bad("truncated header".into()));
    }
    let header = std::str::from_utf8(&bytes[8..hend])
        .map_err(|_| bad("header is not UTF-8".into()))?
        .to_string();
    let count = u64::from_le_bytes(bytes[hend..hend + 8].try_into().unwrap()) as usize;
    let body = &bytes[hend + 8..];
    if body.len() != count * 8 {
        return Err(bad(format!(
            "expected {} value bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pulls consecutive tensors of the given shapes out of a flat buffer.
pub(crate) struct ValueReader<'a> {
    values: &'a [f64],
    pos: usize,
}

impl<'a> ValueReader<'a> {
    pub fn new(values: &'a [f64]) -> Self {
        ValueReader { values, pos: 0 }
    }

    pub fn take(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = self.pos + n;
        if end > self.values.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("too few values for shape {:?}", shape),
            });
        }
        let t = Tensor::new(shape, self.values[self.pos..end].to_vec())?;
        self.pos = end;
        Ok(t)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.values.len() {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("{} unused values", self.values.len() - self.pos),
            });
        }
        Ok(())
    }
}

impl DeterministicModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let values: Vec<f64> = self
            .param_tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        encode_container(DETERMINISTIC_MAGIC, &self.spec.to_text(), &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, values) = decode_container(DETERMINISTIC_MAGIC, bytes)?;
        let spec = ModelSpec::from_text(&header)?;
        let mut reader = ValueReader::new(&values);
        let params = spec
            .param_shapes()?
            .into_iter()
            .map(|s| {
                s.map(|(ws, bs)| {
                    Ok(LayerParams {
                        weight: reader.take(&ws)?,
                        bias: reader.take(&bs)?,
                    })
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        reader.finish()?;
        Ok(DeterministicModel { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_model;
    use crate::tensor::RngState;

    #[test]
    fn round_trip_and_header() {
        let m = build_model(&ModelSpec::compact_cnn(6, 0.25), &mut RngState::new(3)).unwrap();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"UQL1");
        assert_eq!(DeterministicModel::from_bytes(&bytes).unwrap(), m);
        let n = m.num_params();
        assert_eq!(bytes.len(), 4 + 4 + m.spec.to_text().len() + 8 + 8 * n);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = build_model(&ModelSpec::compact_cnn(2, 0.2), &mut RngState::new(3)).unwrap();
        let bytes = m.to_bytes();
        assert!(DeterministicModel::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong = bytes.clone();
        wrong[3] = b'B';
        assert!(DeterministicModel::from_bytes(&wrong).is_err());
    }
}
