//! Binary tensor files, used for checkpoints and corpus features.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! b"EHATCKPT"  u32 version
//! u32 header length, header bytes (UTF-8)
//! u32 tensor count
//! per tensor: u32 path length, path bytes, u32 rank, u64 dims.., f64 values..
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ehat_core::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 8] = b"EHATCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub header: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn from_store(header: String, store: &ParameterStore) -> Self {
        TensorFile {
            header,
            tensors: store.iter().map(|(p, t)| (p.to_string(), t.clone())).collect(),
        }
    }

    pub fn into_store(self) -> Result<ParameterStore> {
        let mut s = ParameterStore::new();
        for (p, t) in self.tensors {
            s.insert(p, t)?;
        }
        Ok(s)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (path, t) in &self.tensors {
            put_bytes(&mut out, path.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        ensure!(r.take(8)? == MAGIC, "not a tensor file (bad magic)");
        let version = r.u32()?;
        ensure!(version == VERSION, "unsupported tensor file version {version}");
        let header = String::from_utf8(r.chunk()?.to_vec()).context("header is not UTF-8")?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let path = String::from_utf8(r.chunk()?.to_vec()).context("tensor path is not UTF-8")?;
            let rank = r.u32()? as usize;
            ensure!(rank <= 8, "tensor `{path}` has rank {rank}");
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).context("dimension overflows usize")?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .with_context(|| format!("tensor `{path}` is too large"))?;
            ensure!(len.saturating_mul(8) <= r.remaining(), "tensor `{path}` is truncated");
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).with_context(|| format!("tensor `{path}`"))?;
            tensors.push((path, t));
        }
        ensure!(
            r.remaining() == 0,
            "{} trailing bytes after the last tensor",
            r.remaining()
        );
        Ok(TensorFile { header, tensors })
    }

    /// Write to a new file; an existing file is kept unless `overwrite`.
    pub fn write(&self, path: &Path, overwrite: bool) -> Result<()> {
        write_file(path, &self.encode(), overwrite)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("in {}", path.display()))
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            bail!("unexpected end of file at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn chunk(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

/// Create `path` with `bytes`. Existing files are an error unless `overwrite`.
pub fn write_file(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut f = if overwrite {
        fs::File::create(path)
    } else {
        fs::OpenOptions::new().write(true).create_new(true).open(path)
    }
    .with_context(|| {
        if path.exists() {
            format!("{} already exists (pass --force to replace it)", path.display())
        } else {
            format!("creating {}", path.display())
        }
    })?;
    f.write_all(bytes)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let t = TensorFile {
            header: "a = 1\n".into(),
            tensors: vec![
                (
                    "w".into(),
                    Tensor::matrix(2, 3, vec![1.5, -0.0, 3.0, f64::MIN_POSITIVE, 5.0, 6.0]).unwrap(),
                ),
                ("s".into(), Tensor::scalar(7.0)),
            ],
        };
        let bytes = t.encode();
        let back = TensorFile::decode(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.encode(), bytes);
        assert!(TensorFile::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorFile::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(TensorFile::decode(&extra).is_err());
    }
}
