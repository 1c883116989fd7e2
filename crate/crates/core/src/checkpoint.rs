//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "BRCACKPT"
//! version      u32
//! file length  u64      total bytes including the trailing checksum
//! metadata     u32 length + UTF-8 text, one `key=value` per line
//! array count  u32
//! per array    u32 name length + name, u32 rank, u64 dims[rank],
//!              u64 byte length, f32 values
//! checksum     u32      CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: &[u8; 8] = b"BRCACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| {
            CheckpointError::Malformed(format!("missing metadata key {key:?}")).into()
        })
    }

    pub fn meta_parse<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| {
            CheckpointError::Malformed(format!("bad value {raw:?} for {key:?}")).into()
        })
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Stores a serializable config as flattened `prefix.field=json` entries.
    pub fn put_config<C: Serialize>(&mut self, prefix: &str, config: &C) -> Result<()> {
        let value =
            serde_json::to_value(config).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        flatten(prefix, &value, &mut self.metadata);
        Ok(())
    }

    /// Reads back a config written by [`Checkpoint::put_config`].
    pub fn get_config<C: DeserializeOwned>(&self, prefix: &str) -> Result<C> {
        let mut root = serde_json::Map::new();
        let lead = format!("{prefix}.");
        for (k, v) in &self.metadata {
            let Some(rest) = k.strip_prefix(&lead) else {
                continue;
            };
            let parsed: Value = serde_json::from_str(v)
                .map_err(|e| CheckpointError::Malformed(format!("{k}: {e}")))?;
            insert_path(&mut root, rest, parsed);
        }
        serde_json::from_value(Value::Object(root))
            .map_err(|e| CheckpointError::Malformed(format!("{prefix}: {e}")).into())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u64.to_le_bytes()); // patched below
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Malformed(format!(
                    "metadata entry {k:?} not representable"
                ))
                .into());
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(meta.as_bytes());
        put_u32(&mut out, self.arrays.len())?;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(CheckpointError::Malformed(format!(
                    "array {} shape/values mismatch",
                    a.name
                ))
                .into());
            }
            put_u32(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            put_u32(&mut out, a.shape.len())?;
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&((a.values.len() * 4) as u64).to_le_bytes());
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let total = (out.len() + 4) as u64;
        out[12..20].copy_from_slice(&total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(CheckpointError::Truncated.into());
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            }
            .into());
        }
        let declared = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if (bytes.len() as u64) < declared {
            return Err(CheckpointError::Truncated.into());
        }
        if bytes.len() as u64 != declared || bytes.len() < 24 {
            return Err(CheckpointError::Malformed(format!(
                "length {} vs declared {declared}",
                bytes.len()
            ))
            .into());
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }

        let mut r = Reader { buf: body, pos: 20 };
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("metadata line {line:?}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let byte_len = r.u64()? as usize;
            let numel: usize = shape.iter().product();
            if byte_len != numel * 4 {
                return Err(CheckpointError::Malformed(format!(
                    "array {name}: {byte_len} bytes for shape {shape:?}"
                ))
                .into());
            }
            let values = r
                .take(byte_len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray {
                name,
                shape,
                values,
            });
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()).into());
        }
        Ok(Checkpoint { metadata, arrays })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::from(CheckpointError::Malformed(format!("{v} exceeds u32"))))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    match value {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn insert_path(root: &mut serde_json::Map<String, Value>, path: &str, value: Value) {
    match path.split_once('.') {
        None => {
            root.insert(path.to_string(), value);
        }
        Some((head, rest)) => {
            let child = root
                .entry(head.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
            if let Value::Object(m) = child {
                insert_path(m, rest, value);
            }
        }
    }
}
