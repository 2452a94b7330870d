//! Versioned binary container for parameter sets.
//!
//! Layout (little-endian): magic `SRNNPARM`, `u32` version, `u32` kind length, kind, `u32`
//! metadata length, metadata (JSON), `u32` tensor count, then per tensor `u32` name length,
//! name, `u64` element count, `f64` values.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;

const MAGIC: &[u8; 8] = b"SRNNPARM";
pub const VERSION: u32 = 1;

pub fn write(path: &Path, kind: &str, metadata: &str, params: &impl Parameters) -> Result<()> {
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    params.visit("", &mut |name, v| tensors.push((name.to_string(), v.to_vec())));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for s in [kind, metadata] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, values) in &tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub struct Contents {
    pub metadata: String,
    pub tensors: Vec<(String, Vec<f64>)>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

pub fn read(path: &Path, kind: &str) -> Result<Contents> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::container(path, why);
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8) != Some(MAGIC.as_slice()) {
        return Err(bad("missing SRNNPARM magic"));
    }
    let version = c.u32().ok_or_else(|| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let found = c.string().ok_or_else(|| bad("truncated header"))?;
    if found != kind {
        return Err(bad(&format!("holds a {found}, expected a {kind}")));
    }
    let metadata = c.string().ok_or_else(|| bad("truncated metadata"))?;
    let n = c.u32().ok_or_else(|| bad("truncated tensor table"))?;
    let mut tensors = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = c.string().ok_or_else(|| bad("truncated tensor name"))?;
        let len = c.u64().ok_or_else(|| bad("truncated tensor length"))? as usize;
        let raw = c
            .take(len * 8)
            .ok_or_else(|| bad(&format!("tensor {name} truncated")))?;
        let values = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push((name, values));
    }
    if c.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Contents { metadata, tensors })
}

/// Copies stored tensors into `params`, which must already have the matching layout.
pub fn load_into(path: &Path, contents: &Contents, params: &mut impl Parameters) -> Result<()> {
    let mut i = 0;
    let mut err = None;
    params.visit_mut("", &mut |name, dst| {
        if err.is_some() {
            return;
        }
        match contents.tensors.get(i) {
            Some((n, v)) if n == name && v.len() == dst.len() => dst.copy_from_slice(v),
            Some((n, v)) => {
                err = Some(format!(
                    "tensor {i}: stored {n} [{}], expected {name} [{}]",
                    v.len(),
                    dst.len()
                ))
            }
            None => err = Some(format!("missing tensor {name}")),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(Error::container(path, e));
    }
    if i != contents.tensors.len() {
        return Err(Error::container(path, "extra tensors"));
    }
    Ok(())
}
