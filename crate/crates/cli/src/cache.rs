//! On-disk feature caches.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use srnn_core::conditioning::ConditioningFrame;
use srnn_core::{Error, Result};

const FRAMES_MAGIC: &[u8; 4] = b"SRNF";
const FRAMES_VERSION: u32 = 1;

/// `magic "SRNF" | u32 version | u64 frames | u32 n_cat | u32 n_num | per frame: u32 ids, f64
/// values`, little-endian.
pub fn write_frames(path: &Path, frames: &[ConditioningFrame]) -> Result<()> {
    let n_cat = frames.first().map_or(0, |f| f.categorical.len());
    let n_num = frames.first().map_or(0, |f| f.numeric.len());
    let mut buf = Vec::with_capacity(20 + frames.len() * (4 * n_cat + 8 * n_num));
    buf.extend_from_slice(FRAMES_MAGIC);
    buf.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(n_cat as u32).to_le_bytes());
    buf.extend_from_slice(&(n_num as u32).to_le_bytes());
    for f in frames {
        if f.categorical.len() != n_cat || f.numeric.len() != n_num {
            return Err(Error::Dimension {
                what: "cached frame width",
                expected: n_cat + n_num,
                got: f.categorical.len() + f.numeric.len(),
            });
        }
        for c in &f.categorical {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        for v in &f.numeric {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_frames(path: &Path) -> Result<Vec<ConditioningFrame>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::container(path, why);
    if buf.len() < 24 || &buf[..4] != FRAMES_MAGIC {
        return Err(bad("missing SRNF header"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
    if u32_at(4) != FRAMES_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let n_cat = u32_at(16) as usize;
    let n_num = u32_at(20) as usize;
    let stride = 4 * n_cat + 8 * n_num;
    if buf.len() != 24 + n * stride {
        return Err(bad("length does not match header"));
    }
    Ok(buf[24..]
        .chunks_exact(stride.max(1))
        .take(n)
        .map(|rec| ConditioningFrame {
            categorical: rec[..4 * n_cat]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            numeric: rec[4 * n_cat..]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
        .collect())
}

/// Cache file for an utterance id (`speaker/stem`) with the given extension.
pub fn cache_path(dir: &Path, utterance_id: &str, ext: &str) -> PathBuf {
    dir.join(format!("{utterance_id}.{ext}"))
}

fn mtime(p: &Path) -> Option<SystemTime> {
    std::fs::metadata(p).and_then(|m| m.modified()).ok()
}

/// True when every output exists and is at least as new as every input.
pub fn is_fresh(outputs: &[&Path], inputs: &[&Path]) -> bool {
    let newest_input = inputs.iter().filter_map(|p| mtime(p)).max();
    outputs.iter().all(|o| match (mtime(o), newest_input) {
        (Some(out), Some(inp)) => out >= inp,
        (Some(_), None) => true,
        (None, _) => false,
    })
}

/// Writes `contents` unless the file already holds exactly those bytes. Returns whether it
/// wrote.
pub fn write_if_changed(path: &Path, contents: &[u8]) -> Result<bool> {
    if std::fs::read(path).is_ok_and(|old| old == contents) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(true)
}
