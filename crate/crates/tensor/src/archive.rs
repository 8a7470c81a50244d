//! Self-describing binary container of named tensors plus a UTF-8 metadata
//! block.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  "SFAR"            4 bytes
//! version u32              currently 1
//! dtype   u8               0 = f32, 1 = f64
//! meta_len u64, meta       UTF-8 text (config echo etc.)
//! count  u32
//! per entry: name_len u32, name, rank u32, dims u64 × rank, data
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::{numel, Tensor};

const MAGIC: &[u8; 4] = b"SFAR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Archive<T> {
    pub meta: String,
    pub entries: Vec<(String, Tensor<T>)>,
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Archive(e.to_string())
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

impl<T: Scalar> Archive<T> {
    pub fn new(meta: impl Into<String>) -> Self {
        Self {
            meta: meta.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.push((name.into(), t));
    }

    /// Adds entries with a `prefix/` namespace.
    pub fn extend_prefixed(&mut self, prefix: &str, items: Vec<(String, Tensor<T>)>) {
        for (n, t) in items {
            self.entries.push((format!("{prefix}/{n}"), t));
        }
    }

    /// Entries under `prefix/`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> HashMap<String, Tensor<T>> {
        let p = format!("{prefix}/");
        self.entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn has_section(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.entries.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        buf.push(dtype_code(T::DTYPE));
        buf.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        buf.extend_from_slice(self.meta.as_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut buf);
            }
        }
        w.write_all(&buf).map_err(io_err)
    }

    /// Reads an archive of either precision, converting to `T`.
    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io_err)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(TensorError::Archive("not a tensor archive (bad magic)".into()));
        }
        let version = cur.u32()?;
        if version != ARCHIVE_VERSION {
            return Err(TensorError::Archive(format!("unsupported archive version {version}")));
        }
        let dtype = match cur.take(1)?[0] {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(TensorError::Archive(format!("unknown dtype code {c}"))),
        };
        let meta_len = cur.u64()? as usize;
        let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
            .map_err(|_| TensorError::Archive("metadata is not UTF-8".into()))?;
        let count = cur.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let nl = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nl)?.to_vec())
                .map_err(|_| TensorError::Archive("entry name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = numel(&shape);
            let raw = cur.take(n * dtype.size())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw.chunks(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
                DType::F64 => raw.chunks(8).map(|c| T::lit(f64::read_le(c))).collect(),
            };
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| TensorError::Archive(format!("{}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Archive("truncated archive".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
