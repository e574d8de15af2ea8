//! Named-tensor checkpoint container.
//!
//! On-disk layout (safetensors-compatible):
//!
//! ```text
//! [u64 LE: N][N bytes UTF-8 JSON header][raw little-endian data section]
//! ```
//!
//! The header maps each tensor name to `{"dtype", "shape", "data_offsets"}`
//! with offsets relative to the start of the data section, plus an optional
//! `"__metadata__"` string map. Files written here are canonical: metadata
//! first, tensors in lexicographic name order, data packed in the same order,
//! header padded with spaces to a multiple of 8 bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Metadata = BTreeMap<String, String>;

pub const METADATA_KEY: &str = "__metadata__";
/// Metadata key recording the dtype a checkpoint was upcast from.
pub const SOURCE_DTYPE_KEY: &str = "source_dtype";
/// Metadata key holding a JSON array of provenance entries.
pub const PROVENANCE_KEY: &str = "provenance";

const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            _ => None,
        }
    }
}

/// Dense row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape("<tensor>", &shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name: "<tensor>".into(),
                reason: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Same shape, new buffer. Panics if the length differs.
    pub fn with_data(&self, data: Vec<f32>) -> Tensor {
        assert_eq!(data.len(), self.data.len(), "buffer length must match shape");
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

fn check_shape(name: &str, shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidTensor {
            name: name.into(),
            reason: format!("zero-sized dimension in shape {shape:?}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors<I, S>(tensors: I) -> Self
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        Self {
            tensors: tensors.into_iter().map(|(k, v)| (k.into(), v)).collect(),
            metadata: Metadata::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if name.is_empty() {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: "empty tensor name".into(),
                });
            }
            if name == METADATA_KEY {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: "reserved name".into(),
                });
            }
            check_shape(name, &t.shape)?;
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::InvalidTensor {
                    name: name.clone(),
                    reason: "data length differs from shape product".into(),
                });
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in &self.tensors {
            if let Some(offset) = t.first_non_finite() {
                return Err(Error::NonFinite {
                    name: name.clone(),
                    offset,
                });
            }
        }
        Ok(())
    }

    pub fn provenance(&self) -> Vec<String> {
        provenance_entries(&self.metadata)
    }

    pub fn push_provenance(&mut self, entry: impl Into<String>) {
        push_provenance(&mut self.metadata, entry.into());
    }
}

pub fn provenance_entries(meta: &Metadata) -> Vec<String> {
    meta.get(PROVENANCE_KEY)
        .and_then(|s| serde_json::from_str::<Vec<String>>(s).ok())
        .unwrap_or_default()
}

pub fn push_provenance(meta: &mut Metadata, entry: String) {
    let mut entries = provenance_entries(meta);
    entries.push(entry);
    meta.insert(
        PROVENANCE_KEY.into(),
        serde_json::to_string(&entries).expect("string list serializes"),
    );
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in file order, duplicates preserved so they can be rejected.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(HeaderEntries(out))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Decode a container held in memory.
pub fn decode(bytes: &[u8], permit_nonfinite: bool) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Truncated(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(Error::MalformedHeader(format!("header length {header_len} is implausibly large")));
    }
    let header_end = 8 + header_len as usize;
    if header_end > bytes.len() {
        return Err(Error::Truncated(format!(
            "header declares {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header_str = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
    let HeaderEntries(entries) =
        serde_json::from_str(header_str).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut metadata = Metadata::new();
    let mut seen_metadata = false;
    let mut infos: Vec<(String, DType, Vec<usize>, u64, u64)> = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if name == METADATA_KEY {
            if seen_metadata {
                return Err(Error::DuplicateTensor(name));
            }
            seen_metadata = true;
            metadata = serde_json::from_value(value)
                .map_err(|e| Error::MalformedHeader(format!("__metadata__ must map strings to strings: {e}")))?;
            continue;
        }
        if name.is_empty() {
            return Err(Error::MalformedHeader("empty tensor name".into()));
        }
        if infos.iter().any(|(n, ..)| *n == name) {
            return Err(Error::DuplicateTensor(name));
        }
        let info: TensorInfo = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("entry `{name}`: {e}")))?;
        let dtype = DType::parse(&info.dtype).ok_or_else(|| Error::UnsupportedDtype {
            name: name.clone(),
            dtype: info.dtype.clone(),
        })?;
        check_shape(&name, &info.shape)?;
        let [begin, end] = info.data_offsets;
        infos.push((name, dtype, info.shape, begin, end));
    }

    // Extents must tile the data section exactly.
    let mut order: Vec<usize> = (0..infos.len()).collect();
    order.sort_by_key(|&i| (infos[i].3, infos[i].4));
    let mut cursor = 0u64;
    for &i in &order {
        let (name, dtype, shape, begin, end) = &infos[i];
        let numel = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| Error::MalformedHeader(format!("shape of `{name}` overflows")))?;
        let expected = numel
            .checked_mul(dtype.size() as u64)
            .ok_or_else(|| Error::MalformedHeader(format!("extent of `{name}` overflows")))?;
        if end < begin || end - begin != expected {
            return Err(Error::MalformedHeader(format!(
                "`{name}` declares {} bytes for {numel} {} elements",
                end.saturating_sub(*begin),
                dtype.as_str()
            )));
        }
        if *begin != cursor {
            return Err(Error::MalformedHeader(format!(
                "`{name}` starts at {begin}, expected {cursor} (gap or overlap)"
            )));
        }
        cursor = *end;
    }
    let data_len = data.len() as u64;
    if cursor > data_len {
        return Err(Error::Truncated(format!(
            "tensors declare {cursor} data bytes but the data section holds {data_len}"
        )));
    }
    if cursor < data_len {
        return Err(Error::MalformedHeader(format!(
            "tensors declare {cursor} data bytes but the data section holds {data_len}"
        )));
    }

    let mut tensors = BTreeMap::new();
    let mut saw_f16 = false;
    for (name, dtype, shape, begin, end) in infos {
        let raw = &data[begin as usize..end as usize];
        let values: Vec<f32> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F16 => {
                saw_f16 = true;
                raw.chunks_exact(2)
                    .map(|c| half::f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect()
            }
        };
        if !permit_nonfinite {
            if let Some(offset) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { name, offset });
            }
        }
        tensors.insert(name, Tensor { shape, data: values });
    }
    if saw_f16 {
        metadata.insert(SOURCE_DTYPE_KEY.into(), DType::F16.as_str().into());
    }
    Ok(Checkpoint { tensors, metadata })
}

/// Encode to the canonical byte form.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.validate()?;
    let mut header = String::from("{");
    let mut first = true;
    if !ckpt.metadata.is_empty() {
        header.push_str(&serde_json::to_string(METADATA_KEY).unwrap());
        header.push(':');
        header.push_str(&serde_json::to_string(&ckpt.metadata).unwrap());
        first = false;
    }
    let mut offset = 0u64;
    for (name, t) in &ckpt.tensors {
        let len = (t.numel() * DType::F32.size()) as u64;
        let info = TensorInfo {
            dtype: DType::F32.as_str().into(),
            shape: t.shape.clone(),
            data_offsets: [offset, offset + len],
        };
        offset += len;
        if !first {
            header.push(',');
        }
        first = false;
        header.push_str(&serde_json::to_string(name).unwrap());
        header.push(':');
        header.push_str(&serde_json::to_string(&info).unwrap());
    }
    header.push('}');
    while (8 + header.len()) % 8 != 0 {
        header.push(' ');
    }

    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in ckpt.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_checkpoint(path: impl AsRef<Path>, permit_nonfinite: bool) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, permit_nonfinite)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeMismatch {
    pub name: String,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

/// Key and shape differences between two checkpoints. Empty means mergeable.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CompatReport {
    /// Keys present in the right operand only.
    pub missing_in_left: Vec<String>,
    /// Keys present in the left operand only.
    pub missing_in_right: Vec<String>,
    pub shape_mismatches: Vec<ShapeMismatch>,
}

impl CompatReport {
    pub fn is_compatible(&self) -> bool {
        self.missing_in_left.is_empty() && self.missing_in_right.is_empty() && self.shape_mismatches.is_empty()
    }
}

impl fmt::Display for CompatReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_compatible() {
            return f.write_str("compatible");
        }
        let mut parts = Vec::new();
        if !self.missing_in_left.is_empty() {
            parts.push(format!("missing in left: {}", self.missing_in_left.join(", ")));
        }
        if !self.missing_in_right.is_empty() {
            parts.push(format!("missing in right: {}", self.missing_in_right.join(", ")));
        }
        for m in &self.shape_mismatches {
            parts.push(format!("shape mismatch `{}`: {:?} vs {:?}", m.name, m.left, m.right));
        }
        f.write_str(&parts.join("; "))
    }
}

pub fn compat_of<'a, A, B>(left: A, right: B) -> CompatReport
where
    A: IntoIterator<Item = (&'a String, &'a Tensor)>,
    B: IntoIterator<Item = (&'a String, &'a Tensor)>,
{
    let left: BTreeMap<&String, &Tensor> = left.into_iter().collect();
    let right: BTreeMap<&String, &Tensor> = right.into_iter().collect();
    let mut report = CompatReport::default();
    for (name, lt) in &left {
        match right.get(name) {
            None => report.missing_in_right.push((*name).clone()),
            Some(rt) if rt.shape != lt.shape => report.shape_mismatches.push(ShapeMismatch {
                name: (*name).clone(),
                left: lt.shape.clone(),
                right: rt.shape.clone(),
            }),
            Some(_) => {}
        }
    }
    for name in right.keys() {
        if !left.contains_key(name) {
            report.missing_in_left.push((*name).clone());
        }
    }
    report
}

pub fn validate_compat(a: &Checkpoint, b: &Checkpoint) -> CompatReport {
    compat_of(&a.tensors, &b.tensors)
}
