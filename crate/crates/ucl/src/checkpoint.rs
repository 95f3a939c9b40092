//! Flat binary checkpoint format, all little-endian:
//!
//! ```text
//! magic "UCLKPT01"
//! u32   tensor count
//! per tensor (in sorted name order):
//!   u16  name length, then name bytes (UTF-8)
//!   u8   rank, then rank x u32 dims
//!   f64  data, row-major
//! ```
//!
//! Sorted order plus fixed-width fields make saves byte-deterministic, so a
//! save -> load -> save cycle reproduces the file exactly. Loading is strict:
//! truncation, bad magic, non-UTF-8 names, duplicate names, or trailing bytes
//! all fail with the offending byte offset and return nothing partial.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Result, UclError};
use crate::optim::{OptimHyperparams, OptimState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"UCLKPT01";

/// Reserved name prefix for optimizer moment buffers inside a checkpoint.
const OPT_PREFIX: &str = "opt.";
const OPT_STEP: &str = "opt.step";

pub fn encode_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    if tensors.len() > u32::MAX as usize {
        return Err(UclError::contract("too many tensors for checkpoint format"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(UclError::contract(format!("tensor name too long: '{name}'")));
        }
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(UclError::contract(format!("tensor rank too high: '{name}'")));
        }
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(shape.len() as u8);
        for &dim in shape {
            if dim > u32::MAX as usize {
                return Err(UclError::contract(format!("dimension too large in '{name}'")));
            }
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &value in tensor.data() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(UclError::Format {
                offset: self.pos,
                msg: format!("unexpected end of data while reading {what}"),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn decode_tensors(buf: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(UclError::Format {
            offset: 0,
            msg: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_offset = r.pos;
        let name_len = r.u16("name length")? as usize;
        let name_bytes = r.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| UclError::Format {
                offset: name_offset + 2,
                msg: "tensor name is not valid UTF-8".to_string(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d).ok_or(UclError::Format {
                offset: name_offset,
                msg: format!("dimension overflow in '{name}'"),
            })
        })?;
        let data_offset = r.pos;
        let raw = r.take(numel * 8, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| UclError::Format {
            offset: data_offset,
            msg: format!("inconsistent tensor '{name}': {e}"),
        })?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(UclError::Format {
                offset: name_offset,
                msg: format!("duplicate tensor name '{name}'"),
            });
        }
    }
    if r.pos != buf.len() {
        return Err(UclError::Format {
            offset: r.pos,
            msg: format!("{} trailing bytes after last tensor", buf.len() - r.pos),
        });
    }
    Ok(tensors)
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    atomic_write(path, &encode_tensors(tensors)?)
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    decode_tensors(&std::fs::read(path)?)
}

/// Model parameters plus optional optimizer moments, as restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor>,
    pub opt_m: BTreeMap<String, Tensor>,
    pub opt_v: BTreeMap<String, Tensor>,
    pub step: usize,
}

impl Checkpoint {
    /// Rebuild an optimizer state from the stored moments. Errors if the
    /// checkpoint carried no optimizer state or shapes drifted.
    pub fn optim_state(&self, hyper: OptimHyperparams) -> Result<OptimState> {
        if self.opt_m.is_empty() && !self.params.is_empty() {
            return Err(UclError::contract(
                "checkpoint carries no optimizer state",
            ));
        }
        OptimState::from_parts(
            &self.params,
            hyper,
            self.step,
            self.opt_m.clone(),
            self.opt_v.clone(),
        )
    }
}

/// Save parameters and (optionally) optimizer state in one file. Moments are
/// stored under the reserved names `opt.m.<param>` / `opt.v.<param>` and the
/// step counter as the scalar `opt.step`.
pub fn save_checkpoint(
    path: &Path,
    params: &BTreeMap<String, Tensor>,
    state: Option<&OptimState>,
) -> Result<()> {
    let mut all = BTreeMap::new();
    for (name, tensor) in params {
        if name.starts_with(OPT_PREFIX) {
            return Err(UclError::contract(format!(
                "parameter name '{name}' collides with the reserved '{OPT_PREFIX}' prefix"
            )));
        }
        all.insert(name.clone(), tensor.clone());
    }
    if let Some(state) = state {
        let (m, v) = state.moments();
        for (name, tensor) in m {
            all.insert(format!("opt.m.{name}"), tensor.clone());
        }
        for (name, tensor) in v {
            all.insert(format!("opt.v.{name}"), tensor.clone());
        }
        all.insert(OPT_STEP.to_string(), Tensor::scalar(state.step as f64));
    }
    save_tensors(path, &all)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let all = load_tensors(path)?;
    let mut params = BTreeMap::new();
    let mut opt_m = BTreeMap::new();
    let mut opt_v = BTreeMap::new();
    let mut step = 0usize;
    for (name, tensor) in all {
        if name == OPT_STEP {
            let value = tensor.data()[0];
            if value < 0.0 || value.fract() != 0.0 {
                return Err(UclError::contract(format!(
                    "opt.step must be a non-negative integer, got {value}"
                )));
            }
            step = value as usize;
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            opt_m.insert(rest.to_string(), tensor);
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            opt_v.insert(rest.to_string(), tensor);
        } else if name.starts_with(OPT_PREFIX) {
            return Err(UclError::contract(format!(
                "unrecognized optimizer entry '{name}'"
            )));
        } else {
            params.insert(name, tensor);
        }
    }
    Ok(Checkpoint {
        params,
        opt_m,
        opt_v,
        step,
    })
}
