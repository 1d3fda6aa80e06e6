//! Named dense array container used for dataset samples, checkpoints and
//! exported instance maps.
//!
//! Layout: 8-byte magic (`BEVARR\0` followed by the format version byte),
//! a little-endian `u32` header length, a JSON header, then the payload.
//! The header lists every array with dtype, shape, payload offset and byte
//! length, plus free-form string attributes and the SHA-256 of the payload.
//! All numbers in the payload are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC_PREFIX: &[u8; 7] = b"BEVARR\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
    U32,
    U64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 | DType::U32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    attrs: BTreeMap<String, String>,
    arrays: Vec<ArrayMeta>,
    checksum_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
struct Array {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// In-memory container. Arrays keep insertion order on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    kind: String,
    attrs: BTreeMap<String, String>,
    order: Vec<String>,
    arrays: BTreeMap<String, Array>,
}

macro_rules! typed {
    ($put:ident, $get:ident, $t:ty, $dt:expr) => {
        pub fn $put(&mut self, name: &str, shape: &[usize], data: &[$t]) -> Result<()> {
            let mut bytes = Vec::with_capacity(data.len() * $dt.size());
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            self.put_raw(name, $dt, shape, bytes)
        }

        pub fn $get(&self, name: &str) -> Result<(Vec<usize>, Vec<$t>)> {
            let a = self.array(name, $dt)?;
            let data = a
                .bytes
                .chunks_exact($dt.size())
                .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok((a.shape.clone(), data))
        }
    };
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            attrs: BTreeMap::new(),
            order: Vec::new(),
            arrays: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn set_attr(&mut self, key: &str, value: impl Into<String>) {
        self.attrs.insert(key.to_string(), value.into());
    }

    pub fn attr(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).map(String::as_str)
    }

    pub fn require_attr(&self, key: &str) -> Result<&str> {
        self.attr(key)
            .ok_or_else(|| Error::Data(format!("container missing attribute {key:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.arrays.get(name).map(|a| a.shape.as_slice())
    }

    fn put_raw(&mut self, name: &str, dtype: DType, shape: &[usize], bytes: Vec<u8>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n * dtype.size() != bytes.len() {
            return Err(Error::Shape(format!(
                "array {name:?}: shape {shape:?} needs {n} elements, got {}",
                bytes.len() / dtype.size()
            )));
        }
        if self.arrays.contains_key(name) {
            return Err(Error::Data(format!("duplicate array {name:?}")));
        }
        self.order.push(name.to_string());
        self.arrays.insert(
            name.to_string(),
            Array {
                dtype,
                shape: shape.to_vec(),
                bytes,
            },
        );
        Ok(())
    }

    fn array(&self, name: &str, dtype: DType) -> Result<&Array> {
        let a = self
            .arrays
            .get(name)
            .ok_or_else(|| Error::Data(format!("container missing array {name:?}")))?;
        if a.dtype != dtype {
            return Err(Error::Data(format!(
                "array {name:?} has dtype {:?}, expected {dtype:?}",
                a.dtype
            )));
        }
        Ok(a)
    }

    typed!(put_f32, get_f32, f32, DType::F32);
    typed!(put_f64, get_f64, f64, DType::F64);
    typed!(put_u32, get_u32, u32, DType::U32);
    typed!(put_u64, get_u64, u64, DType::U64);

    pub fn put_bool(&mut self, name: &str, shape: &[usize], data: &[bool]) -> Result<()> {
        self.put_raw(name, DType::U8, shape, data.iter().map(|&b| b as u8).collect())
    }

    pub fn get_bool(&self, name: &str) -> Result<(Vec<usize>, Vec<bool>)> {
        let a = self.array(name, DType::U8)?;
        Ok((a.shape.clone(), a.bytes.iter().map(|&b| b != 0).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut metas = Vec::with_capacity(self.order.len());
        for name in &self.order {
            let a = &self.arrays[name];
            metas.push(ArrayMeta {
                name: name.clone(),
                dtype: a.dtype,
                shape: a.shape.clone(),
                offset: payload.len(),
                nbytes: a.bytes.len(),
            });
            payload.extend_from_slice(&a.bytes);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            attrs: self.attrs.clone(),
            arrays: metas,
            checksum_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let hjson = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + hjson.len() + payload.len());
        out.extend_from_slice(MAGIC_PREFIX);
        out.push(FORMAT_VERSION as u8);
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("{}: {what}", origin.display()));
        if bytes.len() < 12 || &bytes[..7] != MAGIC_PREFIX {
            return Err(bad("not a BEVARR container"));
        }
        if bytes[7] as u32 != FORMAT_VERSION {
            return Err(Error::Version {
                found: bytes[7] as u32,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| bad(&format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.checksum_sha256 {
            return Err(Error::Checksum {
                path: origin.to_path_buf(),
            });
        }
        let mut c = Container::new(&header.kind);
        c.attrs = header.attrs;
        for m in header.arrays {
            let end = m.offset.checked_add(m.nbytes).filter(|&e| e <= payload.len());
            let Some(end) = end else {
                return Err(bad(&format!("array {:?} overruns payload", m.name)));
            };
            c.put_raw(&m.name, m.dtype, &m.shape, payload[m.offset..end].to_vec())?;
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
