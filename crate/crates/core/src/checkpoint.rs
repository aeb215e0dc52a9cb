//! Binary checkpoint format.
//!
//! ```text
//! "MLORA1"                      6 bytes
//! version                       u32 LE (currently 1)
//! config length                 u32 LE
//! config                        UTF-8 JSON of TrainConfig
//! W₀, A, B, each:
//!     rows, cols                u32 LE, u32 LE
//!     rows·cols values          f64 LE, row-major
//! ```
//!
//! Floats are stored bit-for-bit, so `save → load → save` reproduces the
//! file exactly. The per-epoch training log is not part of the file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::adapters::{AdapterPair, BaseLayer};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::train::{Checkpoint, TrainConfig};

pub const MAGIC: &[u8; 6] = b"MLORA1";
pub const FORMAT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrix(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    put_u32(out, m.rows(), "row count")?;
    put_u32(out, m.cols(), "column count")?;
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serialize a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(&ckpt.config)?;
    let mut out = Vec::with_capacity(
        18 + json.len() + 8 * (ckpt.base.weight().as_slice().len() + ckpt.adapters.a().as_slice().len() * 2) + 24,
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len(), "config length")?;
    out.extend_from_slice(&json);
    put_matrix(&mut out, ckpt.base.weight())?;
    put_matrix(&mut out, ckpt.adapters.a())?;
    put_matrix(&mut out, ckpt.adapters.b())?;
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated {what}: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix> {
        let rows = self.u32(name)?;
        let cols = self.u32(name)?;
        if rows == 0 || cols == 0 {
            return Err(Error::Format(format!("{name} has empty shape {rows}x{cols}")));
        }
        let len = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("{name} shape {rows}x{cols} overflows")))?;
        let raw = self.take(len, name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parse and validate checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(6, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32("version")? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let json_len = r.u32("config length")?;
    let config: TrainConfig = serde_json::from_slice(r.take(json_len, "config")?)?;
    config.validate()?;
    let w0 = r.matrix("W0")?;
    let a = r.matrix("A")?;
    let b = r.matrix("B")?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after B", bytes.len() - r.pos)));
    }
    let (m, n, big_r) = (config.task.in_dim, config.task.out_dim, config.max_rank);
    for (name, got, want) in [
        ("W0", w0.shape(), (m, n)),
        ("A", a.shape(), (m, big_r)),
        ("B", b.shape(), (big_r, n)),
    ] {
        if got != want {
            return Err(Error::Format(format!(
                "{name} is {}x{} but the config implies {}x{}",
                got.0, got.1, want.0, want.1
            )));
        }
    }
    Ok(Checkpoint {
        config,
        base: BaseLayer::new(w0),
        adapters: AdapterPair::new(a, b)?,
        log: Vec::new(),
    })
}

/// Write `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("'{}' is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}
