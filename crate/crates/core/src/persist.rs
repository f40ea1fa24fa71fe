//! Little-endian binary framing shared by index files and model checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEMFCKPT";
pub const CHECKPOINT_VERSION: u64 = 1;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Text header carried by every artifact: who wrote it, with which seed,
/// the component's own configuration, and the full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactHeader<T> {
    pub tool_version: String,
    pub kind: String,
    pub seed: u64,
    pub model: T,
    #[serde(default)]
    pub run: toml::Table,
}

impl<T: Serialize + DeserializeOwned> ArtifactHeader<T> {
    pub fn new(kind: &str, seed: u64, model: T, run: toml::Table) -> Self {
        ArtifactHeader { tool_version: TOOL_VERSION.to_string(), kind: kind.to_string(), seed, model, run }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("cannot serialize header: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("unreadable artifact header: {e}")))
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated file: wanted {n} bytes at offset {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A `u64` that will be used as a length or count; rejects absurd values early.
    pub fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.buf.len() as u64) * 8 + 1024 {
            return Err(Error::Format(format!("implausible length {v} at offset {}", self.pos - 8)));
        }
        Ok(v as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid utf-8: {e}")))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(std::fs::read(path)?)
}

/// A self-describing parameter file: kind tag, free-text header, and named
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: String,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, header: impl Into<String>) -> Self {
        Checkpoint { kind: kind.into(), header: header.into(), blocks: Vec::new() }
    }

    /// Appends every tensor of `store`, names prefixed with `prefix.`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.blocks.push((format!("{prefix}.{name}"), t.clone()));
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.blocks.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no block `{name}`")))
    }

    /// Overwrites every tensor of `store` from the `prefix.`-named blocks.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get(&format!("{prefix}.{name}"))?;
            store.set(&name, t.clone())?;
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Incompatible(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u64(CHECKPOINT_VERSION);
        w.str(&self.kind);
        w.str(&self.header);
        w.u64(self.blocks.len() as u64);
        for (name, t) in &self.blocks {
            w.str(name);
            w.u64(t.shape().len() as u64);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u64()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let kind = r.str()?;
        let header = r.str()?;
        let n = r.len()?;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.len()?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.len()?);
            }
            let count: usize = shape.iter().product();
            let data = r.f64s(count)?;
            blocks.push((name, Tensor::new(&shape, data)?));
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { kind, header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        store.add("b", Tensor::vector(vec![0.25]));
        let mut ck = Checkpoint::new("test", "a = 1\n");
        ck.push_store("m", &store);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        let mut fresh = ParamStore::new();
        fresh.add("w", Tensor::zeros(&[2, 2]));
        fresh.add("b", Tensor::zeros(&[1]));
        back.restore_store("m", &mut fresh).unwrap();
        assert_eq!(fresh.checksum(), store.checksum());
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let ck = Checkpoint::new("k", "");
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/kpm.ckpt")).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(p) if p.ends_with("kpm.ckpt")));
    }
}
