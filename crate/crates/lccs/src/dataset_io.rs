//! Dataset container: a `lccs-data/1` magic line, a JSON header line, then
//! little-endian `f64` samples followed by little-endian `u64` labels.

use std::fs;
use std::io::Write;
use std::path::Path;

use lccs_core::data::Dataset;
use lccs_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const DATA_FORMAT: &str = "lccs-data/1";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Malformed(String),
    #[error("unsupported dataset format {found:?} (expected {DATA_FORMAT:?})")]
    Version { found: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    classes: usize,
    #[serde(default)]
    description: String,
}

pub fn encode(data: &Dataset, description: &str) -> Vec<u8> {
    let header = Header { shape: data.inputs.shape().to_vec(), classes: data.classes, description: description.into() };
    let mut out = Vec::with_capacity(64 + 8 * (data.inputs.numel() + data.len()));
    out.extend_from_slice(DATA_FORMAT.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
    out.push(b'\n');
    for v in data.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &data.labels {
        out.extend_from_slice(&(y as u64).to_le_bytes());
    }
    out
}

fn split_line(bytes: &[u8]) -> Result<(&[u8], &[u8]), DatasetError> {
    let end =
        bytes.iter().position(|&b| b == b'\n').ok_or_else(|| DatasetError::Malformed("missing header line".into()))?;
    Ok((&bytes[..end], &bytes[end + 1..]))
}

pub fn decode(bytes: &[u8]) -> Result<Dataset, DatasetError> {
    let (magic, rest) = split_line(bytes)?;
    if magic != DATA_FORMAT.as_bytes() {
        return Err(DatasetError::Version { found: String::from_utf8_lossy(magic).into_owned() });
    }
    let (header, body) = split_line(rest)?;
    let header: Header = serde_json::from_slice(header).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    let n = *header.shape.first().ok_or_else(|| DatasetError::Malformed("empty shape".into()))?;
    let values: usize = header.shape.iter().product();
    if body.len() != 8 * (values + n) {
        return Err(DatasetError::Malformed(format!(
            "body has {} bytes, header implies {}",
            body.len(),
            8 * (values + n)
        )));
    }
    let word = |c: &[u8]| <[u8; 8]>::try_from(c).expect("8-byte chunk");
    let (xs, ys) = body.split_at(8 * values);
    let data = xs.chunks_exact(8).map(|c| f64::from_le_bytes(word(c))).collect();
    let labels = ys.chunks_exact(8).map(|c| u64::from_le_bytes(word(c)) as usize).collect();
    let inputs = Tensor::new(&header.shape, data).map_err(|e| DatasetError::Malformed(e.to_string()))?;
    Dataset::new(inputs, labels, header.classes).map_err(|e| DatasetError::Malformed(e.to_string()))
}

pub fn save(data: &Dataset, description: &str, path: &Path) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(data, description))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Dataset, DatasetError> {
    decode(&fs::read(path)?)
}
