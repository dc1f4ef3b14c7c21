//! Tensor container file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! [u64: header length H][H bytes: UTF-8 JSON header][data section]
//! ```
//!
//! The header is `{"dtype": "f64" | "f32", "tensors": [{"name", "shape",
//! "offset"}...]}` where `offset` is the byte offset of the tensor's first
//! element inside the data section. Elements are stored row-major in the
//! declared dtype. Tensors appear in the data section in header order with
//! no padding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<Entry>,
}

pub fn write_container<S: Scalar, W: Write>(mut out: W, tensors: &[(&str, &Tensor<S>)]) -> Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(Entry { name: name.to_string(), shape: t.shape().to_vec(), offset });
        offset += (t.numel() * S::BYTES) as u64;
    }
    let header = serde_json::to_vec(&Header { dtype: S::DTYPE.to_string(), tensors: entries })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        t.data().iter().for_each(|&x| x.write_le(&mut buf));
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

/// Read every tensor, converting from the stored dtype to `S`.
pub fn read_container<S: Scalar, R: Read>(mut input: R) -> Result<Vec<(String, Tensor<S>)>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len) as usize;
    if hlen > 1 << 30 {
        return Err(Error::Format(format!("header length {hlen}")));
    }
    let mut header = vec![0u8; hlen];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + n * width;
        let bytes = data
            .get(start..end)
            .ok_or_else(|| Error::Format(format!("tensor {} extends past end of file", e.name)))?;
        let values: Vec<S> = bytes
            .chunks_exact(width)
            .map(|c| if width == 4 { S::of(f32::read_le(c) as f64) } else { S::of(f64::read_le(c)) })
            .collect();
        out.push((e.name, Tensor::new(e.shape, values)?));
    }
    Ok(out)
}

pub fn save_params<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let entries: Vec<(&str, &Tensor<S>)> = store.iter().map(|(_, name, t)| (name, t)).collect();
    write_container(BufWriter::new(File::create(path)?), &entries)
}

/// Overwrite every parameter in `store` from the file; names and shapes
/// must match exactly.
pub fn load_params<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let tensors = read_container::<S, _>(BufReader::new(File::open(path)?))?;
    if tensors.len() != store.len() {
        return Err(Error::Format(format!("{} tensors in file, model has {}", tensors.len(), store.len())));
    }
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {:?} in file, {:?} in model",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.replace(id, t);
    }
    Ok(())
}
