//! "MQT1" binary tensor container.
//!
//! Layout:
//!
//! ```text
//! b"MQT1" | u64 LE header length | UTF-8 JSON header | payloads
//! ```
//!
//! The header maps tensor name to `{"dtype", "shape", "offset"}`, with
//! `offset` counted in bytes from the start of the payload section. Real
//! tensors are stored as little-endian `f64`; integer tensors of every
//! declared width (`i3`, `i4`, `i8`, `i32`) are stored as little-endian `i32`.
//! Tensors are laid out in name order so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"MQT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

fn dtype_name(d: DType) -> String {
    match d {
        DType::Real => "f64".into(),
        DType::Int(b) => format!("i{b}"),
    }
}

fn parse_dtype(s: &str) -> Result<DType> {
    match s {
        "f64" => Ok(DType::Real),
        "i3" => Ok(DType::Int(3)),
        "i4" => Ok(DType::Int(4)),
        "i8" => Ok(DType::Int(8)),
        "i32" => Ok(DType::Int(32)),
        other => Err(Error::Format(format!("unknown dtype {other:?}"))),
    }
}

/// Named collection of tensors backed by the MQT1 format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Insert a 1-D real vector.
    pub fn insert_vec(&mut self, name: impl Into<String>, v: &[f64]) -> Result<()> {
        self.insert(name, Tensor::real(vec![v.len()], v.to_vec())?);
        Ok(())
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Tensor::real(vec![1], vec![v]).expect("one element"));
    }

    pub fn insert_indices(&mut self, name: impl Into<String>, v: &[usize]) -> Result<()> {
        let ints = v
            .iter()
            .map(|&i| i32::try_from(i).map_err(|_| Error::invalid("index exceeds i32")))
            .collect::<Result<Vec<_>>>()?;
        self.insert(name, Tensor::int(vec![ints.len().max(1)], if ints.is_empty() { vec![-1] } else { ints }, 32)?);
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.reals()?.to_vec())
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?.reals()?;
        match v {
            [x] => Ok(*x),
            _ => Err(Error::Format(format!("{name:?} is not a scalar"))),
        }
    }

    pub fn get_indices(&self, name: &str) -> Result<Vec<usize>> {
        let ints = self.get(name)?.ints()?;
        if ints == [-1] {
            return Ok(Vec::new());
        }
        ints.iter()
            .map(|&i| usize::try_from(i).map_err(|_| Error::Format(format!("{name:?}: negative index"))))
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copy every tensor of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &Container) {
        for (k, v) in &other.tensors {
            self.tensors.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Sub-container of the tensors whose names start with `prefix`, with the
    /// prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> Container {
        Container {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = BTreeMap::new();
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            header.insert(
                name.clone(),
                Entry {
                    dtype: dtype_name(t.dtype()),
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                },
            );
            match t.dtype() {
                DType::Real => t.reals()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
                DType::Int(_) => t.ints()?.iter().for_each(|v| payload.extend_from_slice(&v.to_le_bytes())),
            }
        }
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let hlen = usize::try_from(hlen)
            .ok()
            .filter(|&h| h <= bytes.len() - 12)
            .ok_or_else(|| Error::Format(format!("header length {hlen} exceeds file")))?;
        let header: BTreeMap<String, Entry> = serde_json::from_slice(&bytes[12..12 + hlen])
            .map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[12 + hlen..];
        let mut tensors = BTreeMap::new();
        for (name, e) in header {
            let dtype = parse_dtype(&e.dtype)?;
            let count: usize = e.shape.iter().product();
            let width = if dtype == DType::Real { 8 } else { 4 };
            let start = usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            let end = count
                .checked_mul(width)
                .and_then(|n| n.checked_add(start))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::Format(format!("{name:?}: payload out of bounds")))?;
            let raw = &payload[start..end];
            let t = match dtype {
                DType::Real => Tensor::real(
                    e.shape,
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                DType::Int(b) => Tensor::int(
                    e.shape,
                    raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
                    b,
                ),
            }
            .map_err(|err| Error::Format(format!("{name:?}: {err}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("w", Tensor::real(vec![2, 2], vec![1.5, -2.0, 0.0, f64::MIN_POSITIVE]).unwrap());
        c.insert("q", Tensor::int(vec![3], vec![-8, 0, 7], 4).unwrap());
        c
    }

    #[test]
    fn roundtrip_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_is_json_with_offsets() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["q"]["dtype"], "i4");
        assert_eq!(header["q"]["offset"], 0);
        assert_eq!(header["w"]["offset"], 12);
        assert_eq!(header["w"]["shape"], serde_json::json!([2, 2]));
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Container::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_names_path() {
        let err = Container::read("/nonexistent/dir/x.mqt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/dir/x.mqt"));
    }

    #[test]
    fn empty_index_list_roundtrips() {
        let mut c = Container::new();
        c.insert_indices("p", &[]).unwrap();
        c.insert_indices("g", &[3, 1]).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(back.get_indices("p").unwrap().is_empty());
        assert_eq!(back.get_indices("g").unwrap(), vec![3, 1]);
    }
}
