//! Little-endian binary containers.
//!
//! [`ByteWriter`]/[`ByteReader`] are the primitives shared by the dataset
//! format and by [`Checkpoint`], a named-array container used for every model
//! file. A checkpoint is
//!
//! ```text
//! magic "PABCKPT\0" | version u32 | n_entries u32 |
//!   repeated: name_len u32, name utf8, dtype u8, ndim u32, dims u64*ndim, payload
//! ```
//!
//! Entries are written in name order so identical models give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"PABCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec())
            .map_err(|e| Error::InvalidArgument(format!("invalid utf8 string: {e}")))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(too_large)?)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(too_large)?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn too_large() -> Error {
    Error::InvalidArgument("payload size overflows".into())
}

pub fn check_magic(r: &mut ByteReader<'_>, expected: [u8; 8], path: &Path) -> Result<()> {
    let n = r.remaining().min(8);
    let found = r.take(n)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found: found.to_vec(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::F64(_) => 1,
            ArrayData::U32(_) => 2,
            ArrayData::U64(_) => 3,
            ArrayData::U8(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// Named arrays plus a JSON metadata string.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, name: impl Into<String>, shape: Vec<usize>, data: ArrayData) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.insert(name.into(), Array { shape, data });
    }

    pub fn put_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        self.put(name, shape, ArrayData::F64(data));
    }

    pub fn put_u32(&mut self, name: impl Into<String>, data: Vec<u32>) {
        let n = data.len();
        self.put(name, vec![n], ArrayData::U32(data));
    }

    pub fn put_u64(&mut self, name: impl Into<String>, data: Vec<u64>) {
        let n = data.len();
        self.put(name, vec![n], ArrayData::U64(data));
    }

    pub fn put_meta(&mut self, json: &serde_json::Value) {
        let bytes = serde_json::to_vec(json).expect("json value serializes");
        let n = bytes.len();
        self.put("meta.json", vec![n], ArrayData::U8(bytes));
    }

    pub fn has(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn get(&self, name: &str) -> Result<&Array> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint entry {name:?} missing")))
    }

    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(&self.get(name)?.shape)
    }

    pub fn f64(&self, name: &str) -> Result<&[f64]> {
        match &self.get(name)?.data {
            ArrayData::F64(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry {name:?} is not f64"))),
        }
    }

    pub fn u32(&self, name: &str) -> Result<&[u32]> {
        match &self.get(name)?.data {
            ArrayData::U32(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry {name:?} is not u32"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&[u64]> {
        match &self.get(name)?.data {
            ArrayData::U64(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry {name:?} is not u64"))),
        }
    }

    pub fn u8(&self, name: &str) -> Result<&[u8]> {
        match &self.get(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::InvalidArgument(format!("entry {name:?} is not u8"))),
        }
    }

    pub fn meta(&self) -> Result<serde_json::Value> {
        match &self.get("meta.json")?.data {
            ArrayData::U8(v) => Ok(serde_json::from_slice(v)?),
            _ => Err(Error::InvalidArgument("meta.json is not bytes".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.entries.len() as u32);
        for (name, arr) in &self.entries {
            w.str(name);
            w.u8(arr.data.dtype());
            w.u32(arr.shape.len() as u32);
            for &d in &arr.shape {
                w.u64(d as u64);
            }
            match &arr.data {
                ArrayData::F32(v) => w.f32s(v),
                ArrayData::F64(v) => w.f64s(v),
                ArrayData::U32(v) => v.iter().for_each(|&x| w.u32(x)),
                ArrayData::U64(v) => v.iter().for_each(|&x| w.u64(x)),
                ArrayData::U8(v) => w.bytes(v),
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        check_magic(&mut r, CHECKPOINT_MAGIC, path)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let n = r.u32()?;
        let mut ck = Checkpoint::new();
        for _ in 0..n {
            let name = r.str()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(too_large)?;
            let data = match dtype {
                0 => ArrayData::F32(r.f32s(count)?),
                1 => ArrayData::F64(r.f64s(count)?),
                2 => ArrayData::U32((0..count).map(|_| r.u32()).collect::<Result<_>>()?),
                3 => ArrayData::U64((0..count).map(|_| r.u64()).collect::<Result<_>>()?),
                4 => ArrayData::U8(r.take(count)?.to_vec()),
                d => return Err(Error::InvalidArgument(format!("unknown dtype tag {d}"))),
            };
            ck.entries.insert(name, Array { shape, data });
        }
        Ok(ck)
    }

    /// Writes the container and a pretty-printed `<path>.json` sidecar of
    /// its metadata.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())?;
        if let Ok(meta) = self.meta() {
            let sidecar = sidecar_path(path);
            write_file(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_f64("w", vec![2, 2], vec![1.0, f64::INFINITY, -0.0, 3.5]);
        ck.put_u32("idx", vec![3, 1, 4]);
        ck.put_u64("ids", vec![u64::MAX]);
        ck.put("raw", vec![2], ArrayData::F32(vec![0.25, -1.0]));
        ck.put_meta(&serde_json::json!({"kind": "test"}));
        ck
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.f64("w").unwrap()[1], f64::INFINITY);
        assert_eq!(back.meta().unwrap()["kind"], "test");
    }

    #[test]
    fn truncated_checkpoint_is_detected() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }));
    }

    #[test]
    fn bad_magic_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn wrong_version_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 99;
        let err = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 99, .. }));
    }
}
