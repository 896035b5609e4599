//! Named-tensor binary container shared by weights, embeddings, BOLD runs
//! and R-score maps.
//!
//! Layout: 8-byte magic, little-endian `u64` header length `H`, `H` bytes of
//! UTF-8 JSON, then raw little-endian `f32` payload. The JSON header maps
//! each tensor name to `{dtype, shape, offset, length}` (offset and length in
//! bytes, relative to the start of the payload); any other top-level key is
//! a free-form field such as `config` or `metadata`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"CTXPW001";
pub const EMBEDDINGS_MAGIC: &[u8; 8] = b"CTXPE001";
pub const BOLD_MAGIC: &[u8; 8] = b"CTXPB001";
pub const RSCORE_MAGIC: &[u8; 8] = b"CTXPR001";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub fields: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(magic: &[u8; 8]) -> Self {
        Container {
            magic: *magic,
            fields: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_field(&mut self, name: impl Into<String>, value: Value) {
        self.fields.insert(name.into(), value);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn take_tensor(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))
    }

    pub fn field(&self, name: &str) -> Result<&Value> {
        self.fields
            .get(name)
            .ok_or_else(|| Error::Format(format!("header field `{name}` missing")))
    }

    /// Serialize to bytes. Tensors are laid out in name order so the output
    /// is a pure function of the contents.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        for (key, value) in &self.fields {
            if self.tensors.contains_key(key) {
                return Err(Error::Argument(format!(
                    "`{key}` used both as field and tensor name"
                )));
            }
            header.insert(key.clone(), value.clone());
        }
        let mut offset = 0usize;
        for (name, tensor) in &self.tensors {
            let length = tensor.data.len() * 4;
            header.insert(
                name.clone(),
                json!({
                    "dtype": "f32",
                    "shape": tensor.shape,
                    "offset": offset,
                    "length": length,
                }),
            );
            offset += length;
        }
        let header = serde_json::to_vec(&Value::Object(header))
            .map_err(|e| Error::Format(format!("header serialization: {e}")))?;

        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for tensor in self.tensors.values() {
            for v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file shorter than the 16-byte preamble".into()));
        }
        if &bytes[..8] != expected_magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(expected_magic)
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file")))?;
        let header: Value = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
        let Value::Object(header) = header else {
            return Err(Error::Format("header is not a JSON object".into()));
        };
        let payload = &bytes[header_end..];

        let mut container = Container::new(expected_magic);
        for (key, value) in header {
            let is_tensor = value.as_object().is_some_and(|o| o.contains_key("dtype"));
            if !is_tensor {
                container.fields.insert(key, value);
                continue;
            }
            let tensor = parse_tensor(&key, &value, payload)?;
            container.tensors.insert(key, tensor);
        }
        Ok(container)
    }

    pub fn read(path: &Path, expected_magic: &[u8; 8]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected_magic).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn parse_tensor(name: &str, entry: &Value, payload: &[u8]) -> Result<Tensor> {
    let bad = |what: &str| Error::Format(format!("tensor `{name}`: {what}"));
    let dtype = entry["dtype"].as_str().ok_or_else(|| bad("dtype not a string"))?;
    if dtype != "f32" {
        return Err(bad(&format!("unsupported dtype {dtype}")));
    }
    let shape: Vec<usize> = entry["shape"]
        .as_array()
        .ok_or_else(|| bad("shape missing"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("non-integer dim")))
        .collect::<Result<_>>()?;
    let offset = entry["offset"].as_u64().ok_or_else(|| bad("offset missing"))? as usize;
    let length = entry["length"].as_u64().ok_or_else(|| bad("length missing"))? as usize;
    let numel: usize = shape.iter().product();
    if length != numel * 4 {
        return Err(bad(&format!("length {length} does not match shape {shape:?}")));
    }
    let end = offset
        .checked_add(length)
        .filter(|&end| end <= payload.len())
        .ok_or_else(|| bad("data range outside payload"))?;
    let data = payload[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor { shape, data })
}
