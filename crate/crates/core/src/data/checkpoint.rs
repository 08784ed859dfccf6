//! Binary checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "PSEG"                      magic
//! u16                         format version
//! u32 + bytes                 model config block (UTF-8 `key = value` lines)
//! u64                         training step
//! u64                         seed
//! u32                         parameter count
//! per parameter:
//!   u16 + bytes               name
//!   u8, u32 * ndim            shape
//!   f64 * numel               values
//! u32                         CRC-32 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use crate::config::{parse_model_block, render_model_block};
use crate::error::{Error, Result};
use crate::nn::{Module, SegModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSEG";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A model plus the training counters stored alongside it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SegModel,
    pub step: u64,
    pub seed: u64,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(model: &SegModel, step: u64, seed: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let block = render_model_block(model.config(), model.variant());
    buf.extend_from_slice(&(block.len() as u32).to_le_bytes());
    buf.extend_from_slice(block.as_bytes());
    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    let params = model.parameters();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in &params {
        let name = p.name().as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| ckpt_err(format!("parameter name too long: {}", p.name())))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.shape().len() as u8);
        for &d in p.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ckpt_err(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        self.array(what).map(u16::from_le_bytes)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        self.array(what).map(u64::from_le_bytes)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ckpt_err("bad magic; not a checkpoint file"));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    if bytes.len() < 10 {
        return Err(ckpt_err("truncated file"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let crc_ok = crc32fast::hash(body) == stored;
    // Structure errors are more specific than a CRC mismatch, so parse the
    // body first and report the checksum last.
    r.buf = body;

    let block_len = r.u32("config length")? as usize;
    let block = std::str::from_utf8(r.take(block_len, "config block")?).map_err(|_| ckpt_err("config block is not UTF-8"))?;
    let (config, variant) = parse_model_block(block).map_err(|e| ckpt_err(format!("config block: {e}")))?;
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let model = SegModel::new(&config, variant, seed)?;
    let params = model.parameters();
    let count = r.u32("parameter count")? as usize;
    let mut loaded = Vec::with_capacity(count.min(params.len()));
    for i in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "parameter name")?.to_vec())
            .map_err(|_| ckpt_err(format!("parameter {i}: name is not UTF-8")))?;
        let ndim = r.u8(&format!("shape of {name}"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("shape of {name}"))? as usize);
        }
        let target = params
            .iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| ckpt_err(format!("unexpected parameter {name}")))?;
        if target.shape() != shape.as_slice() {
            return Err(ckpt_err(format!(
                "parameter {name}: stored shape {shape:?} does not match config shape {:?}",
                target.shape()
            )));
        }
        let raw = r.take(8 * target.numel(), &format!("values of {name}"))?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        loaded.push((target.clone(), values));
    }
    // Checked after the per-parameter pass so a shape change names the
    // parameter it affects.
    if count != params.len() {
        return Err(ckpt_err(format!(
            "file has {count} parameters but a {variant} model with this config has {}",
            params.len()
        )));
    }
    if r.pos != body.len() {
        return Err(ckpt_err(format!("{} unexpected trailing bytes", body.len() - r.pos)));
    }
    if !crc_ok {
        return Err(ckpt_err("CRC mismatch; file is corrupted"));
    }
    for p in &params {
        if !loaded.iter().any(|(q, _)| q.name() == p.name()) {
            return Err(ckpt_err(format!("parameter {} missing from file", p.name())));
        }
    }
    for (p, values) in loaded {
        p.set_data(&values)?;
    }
    Ok(Checkpoint { model, step, seed })
}

/// Writes to a temporary sibling file and renames it over `path`.
pub fn save_checkpoint(model: &SegModel, step: u64, seed: u64, path: &Path) -> Result<()> {
    let bytes = encode(model, step, seed)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::Argument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", file_name.to_string_lossy(), std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::Io(e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
