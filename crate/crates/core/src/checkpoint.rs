//! Self-describing binary container for named f64 tensors.
//!
//! Layout: the 8-byte magic `LVSRTNSR`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header, then
//! the concatenated little-endian f64 payload. The header lists every tensor
//! with its dtype tag, shape and byte offset into the payload, plus the
//! content kind, an optional training-stage tag, a config echo and free-form
//! metadata.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LVSRTNSR";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageTag {
    #[serde(rename = "stage1")]
    Stage1,
    #[serde(rename = "stage2")]
    Stage2,
}

impl StageTag {
    pub fn number(self) -> u8 {
        match self {
            StageTag::Stage1 => 1,
            StageTag::Stage2 => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(StageTag::Stage1),
            2 => Ok(StageTag::Stage2),
            _ => Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {n}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    stage: Option<StageTag>,
    config: serde_json::Value,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub stage: Option<StageTag>,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            stage: None,
            config: serde_json::Value::Null,
            meta: serde_json::Value::Null,
            tensors: ParamStore::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in self.tensors.iter() {
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: DTYPE.into(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 8;
        }
        let header = serde_json::to_vec(&Header {
            kind: self.kind.clone(),
            stage: self.stage,
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.tensors.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing container magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("header: {e}")))?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = ParamStore::new();
        let mut expected = 0;
        for e in header.tensors {
            if e.dtype != DTYPE {
                return Err(Error::Format(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Format(format!("tensor `{}` at unexpected offset", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + n * 8)
                .ok_or_else(|| Error::Format(format!("tensor `{}` is truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name, Tensor::from_vec(&e.shape, data)?);
            expected += n * 8;
        }
        if expected != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            stage: header.stage,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Writes a single tensor (e.g. a latent sequence) as a container.
pub fn save_tensor(path: &Path, name: &str, t: &Tensor) -> Result<()> {
    let mut c = Container::new("tensor");
    c.tensors.insert(name, t.clone());
    c.save(path)
}

pub fn load_tensor(path: &Path, name: &str) -> Result<Tensor> {
    let c = Container::load(path)?;
    c.tensors
        .get(name)
        .cloned()
        .ok_or_else(|| Error::Format(format!("container lacks tensor `{name}`")))
}
