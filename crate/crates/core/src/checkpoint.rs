//! Checkpoint container.
//!
//! ```text
//! magic        4 bytes  "FPTK"
//! version      u32      1
//! config_len   u64      byte length of the config text
//! config       utf-8    "key = value" lines, sorted by key
//! count        u32      number of tensors
//! count × entry:
//!   name_len   u16, name (utf-8)
//!   dtype      u8       0 = f32, 1 = f64
//!   ndim       u8, then ndim × u32 extents
//!   offset     u64      from the start of the data section
//!   nbytes     u64
//! data         raw little-endian values, in entry order
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"FPTK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float = f32> {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<T>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(meta: BTreeMap<String, String>, params: ParamStore<T>) -> Self {
        Checkpoint { meta, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = render_config(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in self.params.iter() {
            let nb = name.as_bytes();
            let name_len = u16::try_from(nb.len())
                .map_err(|_| Error::Contract(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(T::DTYPE.code());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let nbytes = (t.numel() * T::DTYPE.size()) as u64;
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&nbytes.to_le_bytes());
            offset += nbytes;
        }
        for (_, t) in self.params.iter() {
            T::to_le_bytes_vec(t.data(), &mut out);
        }
        Ok(out)
    }

    /// Parse a container. Tensors stored in another precision are converted.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            origin,
        };
        if r.take(4)? != MAGIC {
            return Err(Error::format(origin, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(origin, format!("unsupported version {version}")));
        }
        let config_len = r.u64()? as usize;
        let config = std::str::from_utf8(r.take(config_len)?)
            .map_err(|_| Error::format(origin, "config section is not utf-8"))?;
        let meta = parse_config(config).map_err(|e| Error::format(origin, e))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "tensor name is not utf-8"))?
                .to_string();
            let dtype = DType::from_code(r.u8()?)
                .ok_or_else(|| Error::format(origin, format!("unknown dtype for {name}")))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let nbytes = r.u64()? as usize;
            entries.push((name, dtype, shape, offset, nbytes));
        }
        let data = &bytes[r.pos..];
        let mut params = ParamStore::new();
        for (name, dtype, shape, offset, nbytes) in entries {
            let numel: usize = shape.iter().product();
            if nbytes != numel * dtype.size() {
                return Err(Error::format(origin, format!("size mismatch for {name}")));
            }
            let raw = data
                .get(offset..offset + nbytes)
                .ok_or_else(|| Error::format(origin, format!("data for {name} is truncated")))?;
            let values: Vec<T> = match dtype {
                DType::F32 => convert(f32::from_le_bytes_slice(raw)),
                DType::F64 => convert(f64::from_le_bytes_slice(raw)),
            };
            let t = Tensor::new(&shape, values).map_err(|e| Error::format(origin, e.to_string()))?;
            params
                .insert(name, t)
                .map_err(|e| Error::format(origin, e.to_string()))?;
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn convert<S: Float, T: Float>(values: Vec<S>) -> Vec<T> {
    values
        .into_iter()
        .map(|v| T::from_f64_lossy(v.to_f64_lossy()))
        .collect()
}

/// Render `key = value` lines, the format shared with CLI config files.
pub fn render_config(meta: &BTreeMap<String, String>) -> Result<String> {
    let mut s = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n', '#']) || k.trim() != k || k.is_empty() {
            return Err(Error::Contract(format!("invalid config key {k:?}")));
        }
        if v.contains('\n') || v.trim() != v {
            return Err(Error::Contract(format!("invalid value for {k}: {v:?}")));
        }
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    Ok(s)
}

/// Parse `key = value` lines; `#` starts a comment line, blank lines are
/// ignored. Later duplicates win.
pub fn parse_config(text: &str) -> std::result::Result<BTreeMap<String, String>, String> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", no + 1))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(format!("line {}: empty key", no + 1));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.origin, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
