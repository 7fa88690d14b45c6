//! Named-tensor container shared by network checkpoints and surrogate
//! models.
//!
//! Layout: one manifest line per tensor, `name dtype d0,d1,... offset`,
//! then the line `DATA`, then the tensors as little-endian IEEE floats in
//! manifest order. Offsets count bytes from the first data byte.

use thiserror::Error;

const DATA_MARKER: &[u8] = b"DATA\n";

#[derive(Debug, Error, Clone, PartialEq)]
#[error("container: {0}")]
pub struct ContainerError(pub String);

fn err(msg: impl Into<String>) -> ContainerError {
    ContainerError(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn width(&self) -> usize {
        match self {
            TensorData::F32(_) => 4,
            TensorData::F64(_) => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Entry {
    pub fn f64(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.to_string(), shape, data: TensorData::F64(data) }
    }

    pub fn as_f64(&self) -> Result<&[f64], ContainerError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            _ => Err(err(format!("{} is not f64", self.name))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], ContainerError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            _ => Err(err(format!("{} is not f32", self.name))),
        }
    }
}

pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut head = String::new();
    let mut offset = 0usize;
    for e in entries {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        head.push_str(&format!("{} {} {} {}\n", e.name, e.data.dtype(), shape.join(","), offset));
        offset += e.data.width() * e.data.len();
    }
    let mut out = head.into_bytes();
    out.extend_from_slice(DATA_MARKER);
    out.reserve(offset);
    for e in entries {
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>, ContainerError> {
    let pos = (0..bytes.len())
        .find(|&i| bytes[i..].starts_with(DATA_MARKER) && (i == 0 || bytes[i - 1] == b'\n'))
        .ok_or_else(|| err("missing DATA line"))?;
    let head = std::str::from_utf8(&bytes[..pos]).map_err(|e| err(e.to_string()))?;
    let data = &bytes[pos + DATA_MARKER.len()..];
    let mut entries = Vec::new();
    let mut expected = 0usize;
    for line in head.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(err(format!("bad manifest line {line:?}")));
        }
        let shape: Vec<usize> = if f[2].is_empty() {
            Vec::new()
        } else {
            f[2].split(',').map(|d| d.parse().map_err(|_| err(format!("bad shape in {line:?}")))).collect::<Result<_, _>>()?
        };
        let offset: usize = f[3].parse().map_err(|_| err(format!("bad offset in {line:?}")))?;
        if offset != expected {
            return Err(err(format!("{}: offset {offset}, expected {expected}", f[0])));
        }
        let n: usize = shape.iter().product();
        let width = match f[1] {
            "f32" => 4,
            "f64" => 8,
            other => return Err(err(format!("{}: unsupported dtype {other}", f[0]))),
        };
        let end = offset + width * n;
        if end > data.len() {
            return Err(err(format!("{}: data truncated", f[0])));
        }
        let raw = &data[offset..end];
        let values = if width == 4 {
            TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        entries.push(Entry { name: f[0].to_string(), shape, data: values });
        expected = end;
    }
    if expected != data.len() {
        return Err(err(format!("{} trailing bytes", data.len() - expected)));
    }
    Ok(entries)
}

/// Looks up a tensor by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry, ContainerError> {
    entries.iter().find(|e| e.name == name).ok_or_else(|| err(format!("missing tensor {name}")))
}
